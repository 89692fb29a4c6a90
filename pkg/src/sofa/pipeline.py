"""Three-stage source-free protocol.

(a) :func:`train_source` fits the classifier on source subjects.
(b) :func:`train_generator` fits the feature generator against the frozen
    classifier; it never sees a sample.
(c) :func:`adapt_target` fine-tunes a copy of the classifier on k-shot target
    data plus generated pseudo-source features.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import IO, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .checkpoint import tensors_digest
from .data import Dataset
from .losses import (
    PSEUDO_SUBJECT,
    BatchMeta,
    ConLossConfig,
    MmdConfig,
    cross_entropy,
    generator_loss,
    iscon_loss,
    mmd_loss,
    total_loss,
)
from .models import (
    ClassifierModel,
    GeneratorConfig,
    GeneratorModel,
    ModelConfig,
    check_compatible,
    classify,
    features,
    generate,
    init_classifier,
    init_generator,
    one_hot,
    predict,
    sample_latent,
    save_classifier,
    save_generator,
)

logger = logging.getLogger(__name__)

METHODS = ("baseline", "mmd", "iscon")
DTYPES = {"float64": np.float64, "float32": np.float32}


class SourceFreeViolation(RuntimeError):
    """A source-subject sample reached a stage that must not see source data."""


class CheckpointMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    epochs: int = 200
    batch_size: int = 1200
    lr: float = 1e-3
    lam: float = 1.0
    method: str = "iscon"
    k: int = 1
    target_subject: int = 0
    seed: int = 0
    fake_batch: int | None = None
    balanced_fake: bool = True
    temperature: float = 0.5
    normalize: bool = True
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {tuple(DTYPES)}")

    @property
    def fake_batch_size(self) -> int:
        return self.fake_batch if self.fake_batch is not None else min(self.batch_size, 256)

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]


class SourceFreeGuard:
    """Records every data access of a stage and rejects source-subject samples."""

    def __init__(self, stage: str, forbidden_subjects: Iterable[int]):
        self.stage = stage
        self.forbidden = frozenset(int(s) for s in forbidden_subjects)
        self.accessed_subjects: list[int] = []

    def check(self, ds: Dataset | None) -> Dataset | None:
        if ds is None:
            return None
        subjects = ds.subjects.tolist()
        self.accessed_subjects.extend(subjects)
        leaked = self.forbidden.intersection(subjects)
        if leaked:
            raise SourceFreeViolation(
                f"stage {self.stage!r} received samples of source subjects {sorted(leaked)}")
        return ds

    @property
    def source_accesses(self) -> int:
        return sum(1 for s in self.accessed_subjects if s in self.forbidden)


class TrainLog:
    """JSON-lines training log kept in memory and optionally streamed to a file."""

    FIELDS = ("stage", "epoch", "step", "loss_cls", "loss_align", "loss_total", "val_acc")

    def __init__(self, stream: IO[str] | None = None):
        self.records: list[dict] = []
        self.stream = stream

    def write(self, **record) -> None:
        row = {key: record.get(key) for key in self.FIELDS}
        self.records.append(row)
        if self.stream is not None:
            self.stream.write(json.dumps(row) + "\n")

    def set_last_val(self, val_acc: float) -> None:
        if self.records:
            self.records[-1]["val_acc"] = val_acc


def accuracy(model: ClassifierModel, ds: Dataset) -> float:
    if len(ds) == 0:
        raise ValueError("cannot compute accuracy on an empty split")
    return float(np.mean(predict(ds.signals, model) == ds.labels))


def _log_epoch(log: TrainLog, stage: str, epoch: int, val_acc: float | None) -> None:
    if val_acc is not None:
        log.set_last_val(val_acc)
    logger.info("%s epoch %d%s", stage, epoch,
                "" if val_acc is None else f" val_acc={val_acc:.4f}")


def train_source(ds_source: Dataset, cfg: StageConfig, model_config: ModelConfig | None = None,
                 ds_val: Dataset | None = None, ckpt_path=None,
                 log: TrainLog | None = None) -> ClassifierModel:
    """Fit the classifier on source-subject data with cross-entropy and Adam."""
    if len(ds_source) == 0:
        raise ValueError("train_source: empty source dataset")
    log = log if log is not None else TrainLog()
    if model_config is None:
        model_config = ModelConfig(d_in=ds_source.d_in, t_len=ds_source.t_len,
                                   n_classes=ds_source.n_classes)
    if (model_config.d_in, model_config.t_len, model_config.n_classes) != (
            ds_source.d_in, ds_source.t_len, ds_source.n_classes):
        raise ValueError("model config does not match the dataset shape")
    model = init_classifier(model_config, seed=cfg.seed, dtype=cfg.np_dtype)
    rng = np.random.default_rng([cfg.seed, 1])
    x_all = ds_source.signals.astype(cfg.np_dtype)
    y_all = ds_source.labels
    n = len(ds_source)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = cross_entropy(classify(features(x_all[idx], model), model), y_all[idx])
            ad.backward(loss)
            ad.adam_step(model.params, cfg.lr, cfg.betas, cfg.eps)
            log.write(stage="source", epoch=epoch, step=step, loss_cls=loss.item(),
                      loss_align=0.0, loss_total=loss.item())
            step += 1
        val_acc = accuracy(model, ds_val) if ds_val is not None and len(ds_val) else None
        _log_epoch(log, "source", epoch, val_acc)
    model.meta = {
        "stage": "source",
        "source_subjects": sorted(set(ds_source.subjects.tolist())),
        "n_train": n,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
    }
    if ckpt_path is not None:
        save_classifier(model, ckpt_path)
    return model


def frozen_copy(model: ClassifierModel) -> ClassifierModel:
    params = model.params.copy()
    params.freeze()
    return ClassifierModel(model.config, params, dict(model.meta))


def train_generator(source_model: ClassifierModel, cfg: StageConfig,
                    gen_config: GeneratorConfig | None = None, ckpt_path=None,
                    log: TrainLog | None = None,
                    steps_per_epoch: int | None = None) -> GeneratorModel:
    """Fit G so the frozen classifier assigns G(z, c) to class c.

    No dataset is taken: the classifier is the only source of information.
    One epoch is ``ceil(n_train / batch_size)`` steps, with ``n_train`` read from
    the source checkpoint metadata.
    """
    log = log if log is not None else TrainLog()
    judge = frozen_copy(source_model)
    before = tensors_digest(judge.params.values())
    mc = source_model.config
    if gen_config is None:
        gen_config = GeneratorConfig(d_out=mc.d_emb, n_classes=mc.n_classes)
    gen = init_generator(gen_config, seed=cfg.seed, dtype=cfg.np_dtype)
    check_compatible(judge, gen)
    if steps_per_epoch is None:
        n_train = int(source_model.meta.get("n_train", cfg.batch_size))
        steps_per_epoch = max(1, math.ceil(n_train / cfg.batch_size))
    rng = np.random.default_rng([cfg.seed, 2])
    n_cls = mc.n_classes
    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            z = sample_latent(cfg.batch_size, gen_config.d_z, rng)
            codes = one_hot(rng.integers(0, n_cls, size=cfg.batch_size), n_cls)
            loss = generator_loss(generate(z, codes, gen), codes, judge)
            ad.backward(loss)
            judge.params.assert_no_grad()
            ad.adam_step(gen.params, cfg.lr, cfg.betas, cfg.eps)
            log.write(stage="generator", epoch=epoch, step=step, loss_cls=loss.item(),
                      loss_align=0.0, loss_total=loss.item())
            step += 1
        _log_epoch(log, "generator", epoch, None)
    if tensors_digest(judge.params.values()) != before:
        raise ad.FrozenParameterError("source model changed during generator training")
    gen.meta = {
        "stage": "generator",
        "source_digest": before,
        "source_subjects": source_model.meta.get("source_subjects", []),
        "seed": cfg.seed,
    }
    if ckpt_path is not None:
        save_generator(gen, ckpt_path)
    return gen


def fake_classes(n: int, n_classes: int, balanced: bool, rng: np.random.Generator) -> np.ndarray:
    if not balanced:
        return rng.integers(0, n_classes, size=n)
    full, rest = divmod(n, n_classes)
    tail = rng.choice(n_classes, size=rest, replace=False)
    return np.concatenate([np.tile(np.arange(n_classes), full), tail]).astype(np.int64)


@dataclass
class AdaptResult:
    model: ClassifierModel
    best_model: ClassifierModel
    best_epoch: int
    log: TrainLog
    guard: SourceFreeGuard
    val_history: list[float] = field(default_factory=list)


def adapt_target(source_model: ClassifierModel, generator: GeneratorModel, target: Dataset,
                 cfg: StageConfig, ds_val: Dataset | None = None, ckpt_path=None,
                 log: TrainLog | None = None,
                 guard: SourceFreeGuard | None = None) -> AdaptResult:
    """Adapt a copy of the source classifier to the target subject.

    ``target`` must hold only the k-shot target samples.  Each step combines
    the target cross-entropy with ``cfg.lam`` times the alignment term
    selected by ``cfg.method``.
    """
    log = log if log is not None else TrainLog()
    if guard is None:
        guard = SourceFreeGuard("adapt", source_model.meta.get("source_subjects", []))
    guard.check(target)
    guard.check(ds_val)
    if len(target) == 0:
        raise ValueError("adapt_target: empty target set")
    check_compatible(source_model, generator)
    expected = generator.meta.get("source_digest")
    if expected is not None and expected != tensors_digest(source_model.params.values()):
        raise CheckpointMismatchError("generator was trained against a different source model")

    dtype = cfg.np_dtype
    params = source_model.params.astype(dtype)
    params.unfreeze()
    model = ClassifierModel(source_model.config, params,
                            {**source_model.meta, "stage": "adapt", "method": cfg.method,
                             "k": cfg.k, "target_subject": cfg.target_subject, "seed": cfg.seed})
    gen_params = generator.params.astype(dtype)
    gen_params.freeze()
    gen = GeneratorModel(generator.config, gen_params, generator.meta)
    gen_before = tensors_digest(gen.params.values())

    mmd_cfg = MmdConfig()
    con_cfg = ConLossConfig(cfg.temperature, cfg.normalize)
    n_cls = model.config.n_classes
    rng = np.random.default_rng([cfg.seed, 3])
    x_all = target.signals.astype(dtype)
    y_all = target.labels
    s_all = target.subjects
    n = len(target)
    batch = n if n <= cfg.fake_batch_size else cfg.fake_batch_size

    best_params = params.values()
    best_params = {k: v.copy() for k, v in best_params.items()}
    best_val, best_epoch = -1.0, -1
    val_history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if batch < n else np.arange(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            m = len(idx)
            classes = fake_classes(m, n_cls, cfg.balanced_fake, rng)
            z = sample_latent(m, gen.config.d_z, rng)
            w_fake = generate(z, one_hot(classes, n_cls, dtype), gen).value

            w_trg = features(x_all[idx], model)
            cls = cross_entropy(classify(w_trg, model), y_all[idx])
            if cfg.method == "mmd":
                align = mmd_loss(ad.const(w_fake), w_trg, mmd_cfg)
            elif cfg.method == "iscon":
                w_batch = ad.concat([w_trg, ad.const(w_fake)], axis=0)
                meta = BatchMeta(np.concatenate([y_all[idx], classes]),
                                 np.concatenate([s_all[idx], np.full(m, PSEUDO_SUBJECT)]))
                align = iscon_loss(w_batch, meta, con_cfg)
            else:
                align = ad.const(np.zeros((), dtype=dtype))
            loss = total_loss(cls, align, cfg.lam)
            ad.backward(loss)
            ad.adam_step(model.params, cfg.lr, cfg.betas, cfg.eps)
            log.write(stage="adapt", epoch=epoch, step=step, loss_cls=cls.item(),
                      loss_align=align.item(), loss_total=loss.item())
            step += 1
        val_acc = None
        if ds_val is not None and len(ds_val):
            val_acc = accuracy(model, ds_val)
            val_history.append(val_acc)
            if val_acc >= best_val:
                best_val, best_epoch = val_acc, epoch
                best_params = {k: v.copy() for k, v in model.params.values().items()}
        _log_epoch(log, "adapt", epoch, val_acc)

    if tensors_digest(gen.params.values()) != gen_before:
        raise ad.FrozenParameterError("generator changed during target adaptation")
    if best_epoch < 0:
        best_params = {k: v.copy() for k, v in model.params.values().items()}
        best_epoch = cfg.epochs - 1
    best_model = ClassifierModel(model.config, ParamStore(best_params),
                                 {**model.meta, "best_epoch": best_epoch})
    if ckpt_path is not None:
        save_classifier(model, ckpt_path)
    return AdaptResult(model, best_model, best_epoch, log, guard, val_history)


def stage_config_dict(cfg: StageConfig) -> dict:
    out = asdict(cfg)
    out["betas"] = list(cfg.betas)
    return out


def with_overrides(cfg: StageConfig, **changes) -> StageConfig:
    return replace(cfg, **changes)
