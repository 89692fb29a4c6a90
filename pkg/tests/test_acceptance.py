"""Acceptance criteria, one test each; outcomes are echoed in the terminal summary.

The desk-scale benchmark (6 subjects, 10 classes, 5 seeds, k = 1..5, three
methods) is trained once per session and shared by criteria 4 to 7.
"""

import inspect
import math
import time
import warnings

import numpy as np
import pytest

from sofa import autodiff as ad
from sofa import data as data_mod
from sofa import pipeline as pipeline_mod
from sofa.checkpoint import tensors_digest
from sofa.cli import main
from sofa.config import build_config
from sofa.data import load_dataset, save_dataset
from sofa.evaluation import METHOD_ORDER, mean_accuracy
from sofa.experiment import prepare_dataset, run_generator, run_grid, run_source
from sofa.losses import (PSEUDO_SUBJECT, BatchMeta, ConLossConfig, EmptyAnchorWarning, MmdConfig,
                         cross_entropy, generator_loss, iscon_anchor_losses, iscon_loss,
                         kernel_bandwidths, mmd_loss, total_loss)
from sofa.models import (GeneratorConfig, ModelConfig, classify, encode, generate,
                         init_classifier, init_generator, logits, one_hot, sample_latent)
from sofa.pipeline import SourceFreeGuard, frozen_copy, train_generator

from .conftest import GRAD_TOL, gradcheck, param_gradcheck
from .test_autodiff import OPS
from .test_data import random_dataset
from .test_losses import brute_iscon, brute_median_bandwidth, brute_mmd

TARGET = 0
K_VALUES = (1, 2, 3, 4, 5)
SEEDS = (0, 1, 2, 3, 4)
N_INSTANCES = 20


# ---------------------------------------------------------------------------
# shared desk-scale run
# ---------------------------------------------------------------------------

class DataAccessRecorder:
    """Records the subjects of every Dataset built and every guard check while active."""

    def __init__(self, monkeypatch):
        self.built: list[set] = []
        self.guarded: list[int] = []
        orig_init = data_mod.Dataset.__init__
        orig_check = SourceFreeGuard.check
        recorder = self

        def init(ds, *args, **kwargs):
            orig_init(ds, *args, **kwargs)
            recorder.built.append(set(ds.subjects.tolist()))

        def check(guard, ds):
            if ds is not None:
                recorder.guarded.extend(ds.subjects.tolist())
            return orig_check(guard, ds)

        monkeypatch.setattr(data_mod.Dataset, "__init__", init)
        monkeypatch.setattr(SourceFreeGuard, "check", check)

    def subjects_seen(self) -> set:
        seen = set(self.guarded)
        for subjects in self.built:
            seen |= subjects
        return seen


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    dataset = root / "desk.eeg"
    assert main(["synth-data", "--profile", "desk", "--seed", "0", "--out", str(dataset)]) == 0
    cfg = build_config(flag_values=dict(profile="desk", dataset=str(dataset),
                                        out_dir=str(root / "runs"), target_subject=TARGET,
                                        targets=[TARGET], seeds=list(SEEDS), k=list(K_VALUES),
                                        method=list(METHOD_ORDER), workers=1))
    ds = prepare_dataset(cfg)
    source_subjects = sorted(set(ds.subjects.tolist()) - {TARGET})

    t0 = time.perf_counter()
    src_path, source = run_source(cfg, ds, TARGET)
    t_source = time.perf_counter() - t0

    with pytest.MonkeyPatch.context() as mp:
        rec_b = DataAccessRecorder(mp)
        digest_before = tensors_digest(source.params.values())
        t0 = time.perf_counter()
        gen_path, generator = run_generator(cfg, src_path)
        t_generator = time.perf_counter() - t0
        digest_after = tensors_digest(source.params.values())

    with pytest.MonkeyPatch.context() as mp:
        rec_c = DataAccessRecorder(mp)
        t0 = time.perf_counter()
        report = run_grid(cfg, ds)
        t_grid = time.perf_counter() - t0

    return dict(cfg=cfg, ds=ds, source=source, generator=generator,
                source_subjects=source_subjects, report=report,
                digest_before=digest_before, digest_after=digest_after,
                rec_b=rec_b, rec_c=rec_c,
                t_source=t_source, t_generator=t_generator, t_grid=t_grid)


def _test_means(report, method):
    return [100 * mean_accuracy(report, TARGET, k, method) for k in K_VALUES]


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------

def _weighted_op(name, seed):
    make_inputs, op = OPS[name]
    inputs = make_inputs(np.random.default_rng(seed))
    weights_rng = np.random.default_rng(1000 + seed)
    state = weights_rng.bit_generator.state

    def build(*xs):
        weights_rng.bit_generator.state = state
        out = op(*xs)
        return ad.sum(out * ad.const(weights_rng.standard_normal(out.shape)))

    return gradcheck(build, *inputs)


def _loss_cases():
    def ce(seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 4, 5)
        return gradcheck(lambda x: cross_entropy(x, labels), 2 * rng.standard_normal((5, 4)))

    def gen_loss(seed):
        gen = init_generator(GeneratorConfig(d_z=4, hidden=5, d_out=2, n_classes=3), seed=seed)
        judge = frozen_copy(init_classifier(ModelConfig(d_in=2, t_len=2, d_enc=2, d_emb=2,
                                                        n_classes=3), seed=seed + 50))
        rng = np.random.default_rng(seed)
        z, codes = rng.standard_normal((4, 4)), one_hot(rng.integers(0, 3, 4), 3)
        err = param_gradcheck(gen.params, lambda: generator_loss(generate(z, codes, gen), codes,
                                                                  judge))
        judge.params.assert_no_grad()
        return err

    def mmd(seed):
        rng = np.random.default_rng(seed)
        src, trg = rng.standard_normal((3, 2)), rng.standard_normal((4, 2)) + 1.0
        cfg = MmdConfig(bandwidths=tuple(kernel_bandwidths(src, trg, MmdConfig())))
        return gradcheck(lambda a, b: mmd_loss(a, b, cfg), src, trg)

    def iscon(seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 8))
        meta = BatchMeta(np.concatenate([[0, 0], rng.integers(0, 3, n - 2)]),
                         rng.choice([PSEUDO_SUBJECT, 0, 1], n))
        cfg = ConLossConfig(0.5, bool(seed % 2))
        return gradcheck(lambda x: iscon_loss(x, meta, cfg), rng.standard_normal((n, 3)))

    def total(seed):
        rng = np.random.default_rng(seed)
        labels = np.array([0, 0, 1, 2])
        meta = BatchMeta(labels, [0, 1, 0, PSEUDO_SUBJECT])
        lam = float(rng.uniform(0, 3))
        return gradcheck(lambda x: total_loss(cross_entropy(x, labels), iscon_loss(x, meta), lam),
                         rng.standard_normal((4, 3)))

    def gru(seed):
        model = init_classifier(ModelConfig(d_in=3, t_len=4, d_enc=2, d_emb=2, n_classes=2),
                                seed=seed)
        x = np.random.default_rng(seed).standard_normal((2, 4, 3))
        return param_gradcheck(model.params, lambda: ad.sum(encode(x, model)),
                               [n for n in model.params if n.startswith("f.")])

    def full_classifier(seed):
        model = init_classifier(ModelConfig(d_in=2, t_len=3, d_enc=3, d_emb=2, n_classes=3),
                                seed=seed)
        rng = np.random.default_rng(seed)
        x, labels = rng.standard_normal((4, 3, 2)), rng.integers(0, 3, 4)
        return param_gradcheck(model.params, lambda: cross_entropy(logits(x, model), labels))

    return {"cross_entropy": ce, "generator_loss": gen_loss, "mmd_loss": mmd,
            "iscon_loss": iscon, "total_loss": total, "gru_encoder": gru,
            "classifier_cross_entropy": full_classifier}


def test_criterion_1_gradient_correctness(criterion):
    t0 = time.perf_counter()
    worst = {}
    for name in OPS:
        worst[name] = max(_weighted_op(name, seed) for seed in range(N_INSTANCES))
    for name, case in _loss_cases().items():
        worst[name] = max(case(seed) for seed in range(N_INSTANCES))
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    passed = err < GRAD_TOL and elapsed < 60
    criterion(1, "gradient correctness", passed,
              f"({len(worst)} ops/losses x {N_INSTANCES} instances, worst {name} "
              f"rel err {err:.2e} < 1e-4, {elapsed:.1f}s < 60s)")
    assert err < GRAD_TOL, worst
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 2. loss oracles
# ---------------------------------------------------------------------------

def test_criterion_2_loss_oracles(criterion):
    t0 = time.perf_counter()
    iscon_err = 0.0
    for seed in range(500):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        w = rng.standard_normal((n, 3))
        labels, subjects = rng.integers(0, 3, n), rng.choice([PSEUDO_SUBJECT, 0, 1, 2], n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyAnchorWarning)
            got = iscon_loss(ad.const(w), BatchMeta(labels, subjects)).item()
        iscon_err = max(iscon_err, abs(got - brute_iscon(w, labels, subjects)))

    mmd_err = 0.0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        src = rng.standard_normal((int(rng.integers(1, 8)), 3))
        trg = rng.standard_normal((int(rng.integers(1, 8)), 3)) + rng.uniform(0, 2)
        bands = [brute_median_bandwidth(np.concatenate([src, trg]).tolist()) * s
                 for s in (0.25, 0.5, 1, 2, 4)]
        got = mmd_loss(ad.const(src), ad.const(trg)).item()
        mmd_err = max(mmd_err, abs(got - brute_mmd(src.tolist(), trg.tolist(), bands)))

    sigma = 1.3
    closed = mmd_loss(ad.const([[0.0, 0.0]]), ad.const([[sigma, sigma]]),
                      MmdConfig(bandwidths=(sigma,))).item()
    closed_err = abs(closed - (2 - 2 * math.exp(-1)))
    elapsed = time.perf_counter() - t0
    passed = iscon_err < 1e-10 and mmd_err < 1e-10 and closed_err < 1e-9 and elapsed < 30
    criterion(2, "loss oracle equivalence", passed,
              f"(iscon 500 batches max err {iscon_err:.1e}, mmd max err {mmd_err:.1e}, "
              f"closed form {closed:.5f} err {closed_err:.1e}, {elapsed:.1f}s < 30s)")
    assert iscon_err < 1e-10 and mmd_err < 1e-10 and closed_err < 1e-9
    assert elapsed < 30


# ---------------------------------------------------------------------------
# 3. complementary-set exclusion
# ---------------------------------------------------------------------------

def test_criterion_3_complementary_set_exclusion(criterion):
    w = ad.const([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    labels = [1, 1, 2]
    excluded, _ = iscon_anchor_losses(w, BatchMeta(labels, [0, 1, 1]))
    included, _ = iscon_anchor_losses(w, BatchMeta(labels, [0, 1, 0]))
    a, b = float(excluded.value[0]), float(included.value[0])
    passed = a == 0.0 and b > 0.0
    criterion(3, "complementary-set exclusion", passed,
              f"(anchor term {a} with negative outside A(i), {b:.4f} once it shares the "
              f"anchor's subject)")
    assert a == 0.0
    assert b > 0.0


# ---------------------------------------------------------------------------
# 4. source-free guard
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_4_source_free_guard(desk, criterion):
    forbidden = set(desk["source_subjects"])
    takes_data = [p for p in inspect.signature(train_generator).parameters
                  if "ds" in p or "data" in p]
    seen_b = desk["rec_b"].subjects_seen()
    seen_c = desk["rec_c"].subjects_seen()
    leaks_b, leaks_c = seen_b & forbidden, seen_c & forbidden
    guarded = len(desk["rec_c"].guarded)
    passed = not takes_data and not leaks_b and not leaks_c and guarded > 0
    criterion(4, "source-free guard", passed,
              f"(stage b touched subjects {sorted(seen_b)}, stage c touched {sorted(seen_c)} "
              f"over {guarded} guarded sample reads; source subjects {sorted(forbidden)})")
    assert not takes_data
    assert not leaks_b and not leaks_c
    assert guarded > 0

    with pytest.raises(pipeline_mod.SourceFreeViolation):
        guard = SourceFreeGuard("adapt", forbidden)
        guard.check(desk["ds"].select("train", subjects=[1]))


# ---------------------------------------------------------------------------
# 5. frozen judge
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_frozen_judge(desk, criterion):
    source, generator = desk["source"], desk["generator"]
    n_cls = source.config.n_classes
    rng = np.random.default_rng(2024)
    labels = rng.integers(0, n_cls, 1000)
    out = generate(sample_latent(1000, generator.config.d_z, rng), one_hot(labels, n_cls),
                   generator)
    fidelity = float(np.mean(np.argmax(classify(out, source).value, axis=1) == labels))
    unchanged = desk["digest_before"] == desk["digest_after"] == generator.meta["source_digest"]
    epochs = desk["cfg"].epochs
    elapsed = desk["t_generator"]
    passed = unchanged and fidelity >= 0.8 and elapsed < 300 and epochs == 60
    criterion(5, "frozen judge", passed,
              f"(source hash unchanged={unchanged}, fidelity {100 * fidelity:.1f}% >= 80% "
              f"after {epochs} epochs, generator training {elapsed:.1f}s < 300s)")
    assert unchanged
    assert fidelity >= 0.8
    assert elapsed < 300


# ---------------------------------------------------------------------------
# 6. and 7. end-to-end grid
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_end_to_end_ordering(desk, criterion):
    report = desk["report"]
    assert not report.failures, report.failures
    means = {m: _test_means(report, m) for m in METHOD_ORDER}
    margin = means["iscon"][0] - means["baseline"][0]
    iscon_ge = all(i >= b for i, b in zip(means["iscon"], means["baseline"]))
    mmd_ge = means["mmd"][0] >= means["baseline"][0]
    total = desk["t_source"] + desk["t_generator"] + desk["t_grid"]
    passed = margin >= 3.0 and iscon_ge and mmd_ge and total < 20 * 60
    table = "; ".join(f"{m} " + "/".join(f"{v:.1f}" for v in means[m]) for m in METHOD_ORDER)
    criterion(6, "end-to-end ordering", passed,
              f"(mean test % for k=1..5: {table}; iscon-baseline at k=1 {margin:+.1f} pts >= 3, "
              f"iscon >= baseline at every k: {iscon_ge}, mmd >= baseline at k=1: {mmd_ge}; "
              f"{total / 60:.1f} min < 20)")
    assert margin >= 3.0
    assert iscon_ge
    assert mmd_ge
    assert total < 20 * 60


@pytest.mark.slow
def test_criterion_7_monotone_in_k(desk, criterion):
    report = desk["report"]
    verdicts = {}
    for method in METHOD_ORDER:
        means = _test_means(report, method)
        drops = [a - b for a, b in zip(means, means[1:]) if b < a]
        verdicts[method] = (len(drops) == 0 or (len(drops) == 1 and drops[0] <= 1.0), drops)
    passed = all(ok for ok, _ in verdicts.values())
    detail = ", ".join(f"{m}: {len(d)} inversion(s)" + (f" max {max(d):.1f} pts" if d else "")
                       for m, (_, d) in verdicts.items())
    criterion(7, "monotone in k", passed, f"({detail}; at most one inversion of <= 1 pt)")
    assert passed, verdicts


# ---------------------------------------------------------------------------
# 8. determinism and formats
# ---------------------------------------------------------------------------

def test_criterion_8_determinism_and_formats(tmp_path, criterion):
    roundtrips = 0
    for seed in range(50):
        ds = random_dataset(seed)
        path = tmp_path / f"rt{seed}.eeg"
        save_dataset(ds, path)
        back = load_dataset(path)
        roundtrips += int(back == ds and back.to_bytes() == ds.to_bytes())

    dataset = tmp_path / "small.eeg"
    assert main(["synth-data", "--out", str(dataset), "--subjects", "3", "--classes", "4",
                 "--per-class", "12", "--timesteps", "8", "--channels", "4"]) == 0
    reports = []
    for run in ("one", "two"):
        out = tmp_path / run
        code = main(["evaluate", "--dataset", str(dataset), "--out-dir", str(out),
                     "--train-missing", "--epochs", "4", "--batch-size", "32", "--d-enc", "8",
                     "--d-emb", "8", "--seeds", "0,1", "--k", "1,2",
                     "--method", "baseline,mmd,iscon", "--workers", "1"])
        assert code == 0
        reports.append((out / "report.json").read_bytes())
    identical = reports[0] == reports[1]
    passed = roundtrips == 50 and identical
    criterion(8, "determinism and formats", passed,
              f"({roundtrips}/50 dataset round trips bitwise, two fresh full-pipeline runs give "
              f"byte-identical reports: {identical})")
    assert roundtrips == 50
    assert identical
