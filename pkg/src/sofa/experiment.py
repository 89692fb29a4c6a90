"""Glue between config, pipeline stages and reports, with content-addressed artifacts."""

from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig, adapt_key, generator_key, source_key
from .data import Dataset, crop_window, kshot_split, load_dataset
from .evaluation import RunReport, top1_accuracy
from .models import (
    ClassifierModel,
    GeneratorModel,
    load_classifier,
    load_generator,
    save_classifier,
)
from .pipeline import (
    SourceFreeGuard,
    TrainLog,
    adapt_target,
    train_generator,
    train_source,
)

logger = logging.getLogger(__name__)


class MissingPrerequisiteError(FileNotFoundError):
    """A stage needs an artifact that has not been produced yet."""

    def __init__(self, path, what: str):
        super().__init__(f"missing {what}: {path}")
        self.path = str(path)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def prepare_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset is None:
        raise MissingPrerequisiteError("<unset>", "dataset path")
    if not Path(cfg.dataset).exists():
        raise MissingPrerequisiteError(cfg.dataset, "dataset")
    ds = load_dataset(cfg.dataset)
    if cfg.crop_start_ms is not None and ds.t_len != cfg.crop_end_ms - cfg.crop_start_ms:
        ds = crop_window(ds, cfg.crop_start_ms, cfg.crop_end_ms)
    if len(ds) == 0:
        raise ValueError(f"{cfg.dataset}: dataset has no samples")
    return ds


def out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.out_dir or os.environ.get("SOFA_OUT_DIR") or "runs")
    path.mkdir(parents=True, exist_ok=True)
    return path


def source_path(cfg: RunConfig, ds: Dataset, target_subject: int) -> Path:
    return out_dir(cfg) / f"source-{source_key(cfg, ds.digest(), target_subject)}.ckpt"


def generator_path(cfg: RunConfig, source_ckpt) -> Path:
    return out_dir(cfg) / f"generator-{generator_key(cfg, file_digest(source_ckpt))}.ckpt"


def run_source(cfg: RunConfig, ds: Dataset, target_subject: int) -> tuple[Path, ClassifierModel]:
    path = source_path(cfg, ds, target_subject)
    if path.exists():
        return path, load_classifier(path)
    train = ds.select("train", exclude_subjects=[target_subject])
    val = ds.select("val", exclude_subjects=[target_subject])
    stage = cfg.stage_config(target_subject=target_subject)
    with open(path.with_suffix(".log.jsonl"), "w") as stream:
        model = train_source(train, stage, cfg.model_config(ds.d_in, ds.t_len, ds.n_classes),
                             ds_val=val, log=TrainLog(stream))
    model.meta["dataset_digest"] = ds.digest()
    model.meta["target_subject"] = target_subject
    save_classifier(model, path)
    return path, model


def run_generator(cfg: RunConfig, source_ckpt) -> tuple[Path, GeneratorModel]:
    if not Path(source_ckpt).exists():
        raise MissingPrerequisiteError(source_ckpt, "source checkpoint")
    path = generator_path(cfg, source_ckpt)
    if path.exists():
        return path, load_generator(path)
    source = load_classifier(source_ckpt)
    with open(path.with_suffix(".log.jsonl"), "w") as stream:
        gen = train_generator(source, cfg.stage_config(), cfg.generator_config(source.config),
                              ckpt_path=path, log=TrainLog(stream))
    return path, gen


def resolve_stage_inputs(cfg: RunConfig, ds: Dataset, target_subject: int,
                         train_missing: bool = False) -> tuple[Path, Path]:
    """Locate (or, if allowed, produce) the source and generator checkpoints."""
    src = Path(cfg.source_ckpt) if cfg.source_ckpt else source_path(cfg, ds, target_subject)
    if not src.exists():
        if not train_missing or cfg.source_ckpt:
            raise MissingPrerequisiteError(src, "source checkpoint")
        src, _ = run_source(cfg, ds, target_subject)
    gen = Path(cfg.generator_ckpt) if cfg.generator_ckpt else generator_path(cfg, src)
    if not gen.exists():
        if not train_missing or cfg.generator_ckpt:
            raise MissingPrerequisiteError(gen, "generator checkpoint")
        gen, _ = run_generator(cfg, src)
    return src, gen


@dataclass
class CellResult:
    subject: int
    k: int
    method: str
    seed: int
    metrics: dict | None = None
    error: str | None = None


def run_cell(cfg: RunConfig, ds: Dataset, source: ClassifierModel, generator: GeneratorModel,
             subject: int, k: int, method: str, seed: int, save_dir: Path | None = None,
             src_digest: str = "", gen_digest: str = "") -> CellResult:
    """Adapt to ``subject`` with a k-shot draw from ``seed`` and measure val/test accuracy."""
    split = kshot_split(ds, subject, k, seed)
    target = ds.subset(split.selected)
    val = ds.select("val", subjects=[subject])
    test = ds.select("test", subjects=[subject])
    stage = cfg.stage_config(method=method, k=k, target_subject=subject, seed=seed)
    guard = SourceFreeGuard("adapt", source.meta.get("source_subjects", []))
    log_stream = None
    ckpt = None
    if save_dir is not None:
        key = adapt_key(cfg, src_digest, gen_digest, subject, k, method, seed)
        ckpt = save_dir / f"adapt-{key}.ckpt"
        log_stream = open(save_dir / f"adapt-{key}.log.jsonl", "w")
    try:
        result = adapt_target(source, generator, target, stage, ds_val=val, ckpt_path=ckpt,
                              log=TrainLog(log_stream), guard=guard)
    finally:
        if log_stream is not None:
            log_stream.close()
    guard.check(test)
    metrics = {
        "val_acc": top1_accuracy(result.best_model, val),
        "test_acc": top1_accuracy(result.best_model, test),
        "final_val_acc": top1_accuracy(result.model, val),
        "final_test_acc": top1_accuracy(result.model, test),
    }
    return CellResult(subject, k, method, seed, metrics)


def _cell_worker(args) -> CellResult:
    cfg, dataset_path, src, gen, subject, k, method, seed, save_dir = args
    try:
        ds = prepare_dataset(cfg)
        return run_cell(cfg, ds, load_classifier(src), load_generator(gen), subject, k, method,
                        seed, save_dir, file_digest(src), file_digest(gen))
    except Exception as exc:  # recorded per cell
        return CellResult(subject, k, method, seed, error=f"{type(exc).__name__}: {exc}")


def run_grid(cfg: RunConfig, ds: Dataset, train_missing: bool = False,
             save_checkpoints: bool = False) -> RunReport:
    """Run the (target subject x k x method x seed) grid into one report."""
    report = RunReport(n_classes=ds.n_classes, dataset_digest=ds.digest())
    save_dir = out_dir(cfg) if save_checkpoints else None
    jobs = []
    for subject in cfg.targets:
        try:
            src, gen = resolve_stage_inputs(cfg, ds, subject, train_missing)
        except MissingPrerequisiteError as exc:
            for k in cfg.k:
                for method in cfg.method:
                    for seed in cfg.seeds:
                        report.add_failure(subject, k, method, seed, str(exc))
            continue
        for k in cfg.k:
            for method in cfg.method:
                for seed in cfg.seeds:
                    jobs.append((cfg, cfg.dataset, src, gen, subject, k, method, seed, save_dir))

    workers = cfg.workers or os.cpu_count() or 1
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_cell_worker, jobs))
    else:
        results = _run_serial(cfg, ds, jobs)
    for res in results:
        if res.error is not None:
            logger.error("cell %s failed: %s", (res.subject, res.k, res.method, res.seed),
                         res.error)
            report.add_failure(res.subject, res.k, res.method, res.seed, res.error)
        else:
            report.add(res.subject, res.k, res.method, res.seed, **res.metrics)
    return report


def _run_serial(cfg: RunConfig, ds: Dataset, jobs) -> list[CellResult]:
    cache: dict = {}
    results = []
    for (_, _, src, gen, subject, k, method, seed, save_dir) in jobs:
        if (src, gen) not in cache:
            cache = {(src, gen): (load_classifier(src), load_generator(gen),
                                  file_digest(src), file_digest(gen))}
        source, generator, src_digest, gen_digest = cache[(src, gen)]
        try:
            results.append(run_cell(cfg, ds, source, generator, subject, k, method, seed,
                                    save_dir, src_digest, gen_digest))
        except Exception as exc:  # recorded per cell
            results.append(CellResult(subject, k, method, seed,
                                      error=f"{type(exc).__name__}: {exc}"))
    return results
