"""Command-line entry point: ``sofa <subcommand> [flags]``.

Exit codes: 0 ok, 2 usage error, 3 missing prerequisite, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import PROFILES, ConfigError, RunConfig, build_config, load_config_file
from .data import SynthConfig, save_dataset, synth_benchmark
from .evaluation import RunReport, aggregate, render_table
from .experiment import (
    MissingPrerequisiteError,
    file_digest,
    out_dir,
    prepare_dataset,
    resolve_stage_inputs,
    run_cell,
    run_generator,
    run_grid,
    run_source,
    source_path,
)
from .models import load_classifier, load_generator

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("sofa")


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _run_config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration (flags override --config values)")
    g.add_argument("--config", help="TOML file of key = value run settings")
    g.add_argument("--profile", choices=sorted(PROFILES), help="size profile (default desk)")
    g.add_argument("--dataset", help="SOFA-EEG-1 dataset file")
    g.add_argument("--out-dir", dest="out_dir",
                   help="artifact directory (default $SOFA_OUT_DIR, else ./runs)")
    g.add_argument("--seed", type=int, help="seed for single-run stages")
    g.add_argument("--seeds", type=_int_list, help="seed list for evaluate, e.g. 0,1,2,3,4")
    g.add_argument("--target-subject", dest="target_subject", type=int,
                   help="held-out target subject id")
    g.add_argument("--targets", type=_int_list,
                   help="target subjects for evaluate (default: --target-subject)")
    g.add_argument("--k", type=_int_list, help="samples per class; a list for evaluate")
    g.add_argument("--method", type=_str_list,
                   help="baseline, mmd or iscon; a comma list for evaluate")
    g.add_argument("--epochs", type=int, help="training epochs per stage")
    g.add_argument("--batch-size", dest="batch_size", type=int, help="minibatch size")
    g.add_argument("--lr", type=float, help="Adam learning rate (default 0.001)")
    g.add_argument("--lambda", dest="lam", type=float, help="alignment loss weight (default 1)")
    g.add_argument("--fake-batch", dest="fake_batch", type=int,
                   help="pseudo-source batch size (default min(batch size, 256))")
    g.add_argument("--balanced-fake", dest="balanced_fake", action=argparse.BooleanOptionalAction,
                   default=None, help="class-balanced pseudo-source batches (default on)")
    g.add_argument("--temperature", type=float, help="contrastive temperature (default 0.5)")
    g.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=None,
                   help="L2-normalize features in the contrastive loss (default on)")
    g.add_argument("--dtype", choices=["float64", "float32"], help="numeric width")
    g.add_argument("--d-enc", dest="d_enc", type=int, help="GRU hidden size")
    g.add_argument("--d-emb", dest="d_emb", type=int, help="embedding size")
    g.add_argument("--d-z", dest="d_z", type=int, help="generator latent size")
    g.add_argument("--gen-hidden", dest="gen_hidden", type=int, help="generator hidden width")
    g.add_argument("--crop-start-ms", dest="crop_start_ms", type=int, help="crop window start")
    g.add_argument("--crop-end-ms", dest="crop_end_ms", type=int, help="crop window end")
    g.add_argument("--source-ckpt", dest="source_ckpt", help="explicit source checkpoint")
    g.add_argument("--generator-ckpt", dest="generator_ckpt",
                   help="explicit generator checkpoint")
    g.add_argument("--workers", type=int, help="grid worker processes (default: CPU count)")
    return p


RUN_CONFIG_FLAGS = ("profile", "dataset", "out_dir", "seed", "seeds", "target_subject",
                    "targets", "k", "method", "epochs", "batch_size", "lr", "lam", "fake_batch",
                    "balanced_fake", "temperature", "normalize", "dtype", "d_enc", "d_emb", "d_z",
                    "gen_hidden", "crop_start_ms", "crop_end_ms", "source_ckpt",
                    "generator_ckpt", "workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sofa", description="Source-free subject adaptation for EEG classification.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    parent = _run_config_parent()

    p = sub.add_parser("synth-data", help="write a synthetic multi-subject EEG benchmark")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, help="number of subjects")
    p.add_argument("--classes", type=int, help="number of classes")
    p.add_argument("--per-class", dest="per_class", type=int, help="samples per subject and class")
    p.add_argument("--timesteps", type=int, help="raw signal length")
    p.add_argument("--channels", type=int, help="channels per timestep")
    p.add_argument("--noise", type=float, help="additive noise standard deviation")

    sub.add_parser("train-source", parents=[parent],
                   help="stage (a): train the source classifier")
    sub.add_parser("train-generator", parents=[parent],
                   help="stage (b): train the feature generator against the frozen classifier")
    sub.add_parser("adapt", parents=[parent],
                   help="stage (c): adapt to the target subject and write a report row")
    p = sub.add_parser("evaluate", parents=[parent],
                       help="run the target x k x method x seed grid and write reports")
    p.add_argument("--train-missing", action="store_true",
                   help="train absent source/generator checkpoints instead of failing")
    p.add_argument("--name", default="report", help="report file stem (default report)")

    p = sub.add_parser("report", help="aggregate report JSON files and render a table")
    p.add_argument("reports", nargs="+", help="report JSON files")
    p.add_argument("--format", choices=["markdown", "tsv", "json"], default="markdown")
    p.add_argument("--checkpoint", choices=["best", "final"], default="best",
                   help="best-validation or last-epoch accuracies")
    p.add_argument("--out", help="write the table here instead of stdout")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    flags = {name: getattr(args, name) for name in RUN_CONFIG_FLAGS}
    cfg = build_config(file_values, flags)
    if cfg.out_dir is None:
        cfg = replace(cfg, out_dir=os.environ.get("SOFA_OUT_DIR") or "runs")
    return cfg


def _single(cfg: RunConfig, name: str):
    values = getattr(cfg, name)
    if len(values) != 1:
        raise UsageError(f"--{name} takes a single value for this command, got {values}")
    return values[0]


def echo_config(cfg: RunConfig, command: str) -> None:
    (out_dir(cfg) / f"{command}.config.json").write_text(cfg.to_json())


def cmd_synth_data(args) -> int:
    base = PROFILES[args.profile].synth
    overrides = {"seed": args.seed}
    for flag, name in (("subjects", "n_subjects"), ("classes", "n_classes"),
                       ("per_class", "per_class"), ("timesteps", "t_len"),
                       ("channels", "d_in"), ("noise", "noise")):
        if getattr(args, flag) is not None:
            overrides[name] = getattr(args, flag)
    try:
        synth_cfg = replace(base, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = synth_benchmark(synth_cfg)
    try:
        digest = save_dataset(ds, args.out)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{args.out}\t{len(ds)} samples\tsha256={digest}")
    return EXIT_OK


def cmd_train_source(args) -> int:
    cfg = resolve_config(args)
    ds = prepare_dataset(cfg)
    echo_config(cfg, "train-source")
    path, _ = run_source(cfg, ds, cfg.target_subject)
    print(path)
    return EXIT_OK


def cmd_train_generator(args) -> int:
    cfg = resolve_config(args)
    echo_config(cfg, "train-generator")
    if cfg.source_ckpt:
        src = Path(cfg.source_ckpt)
    else:
        src = source_path(cfg, prepare_dataset(cfg), cfg.target_subject)
    path, _ = run_generator(cfg, src)
    print(path)
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = resolve_config(args)
    k, method = _single(cfg, "k"), _single(cfg, "method")
    ds = prepare_dataset(cfg)
    echo_config(cfg, "adapt")
    src, gen = resolve_stage_inputs(cfg, ds, cfg.target_subject)
    src_digest, gen_digest = file_digest(src), file_digest(gen)
    res = run_cell(cfg, ds, load_classifier(src), load_generator(gen), cfg.target_subject, k,
                   method, cfg.seed, out_dir(cfg), src_digest, gen_digest)
    report = RunReport(n_classes=ds.n_classes, dataset_digest=ds.digest())
    report.add(res.subject, res.k, res.method, res.seed, **res.metrics)
    path = out_dir(cfg) / f"adapt-s{cfg.target_subject}-k{k}-{method}-seed{cfg.seed}.report.json"
    path.write_text(report.to_json())
    print(path)
    print(f"test_acc={res.metrics['test_acc']:.4f}\tval_acc={res.metrics['val_acc']:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    ds = prepare_dataset(cfg)
    echo_config(cfg, "evaluate")
    report = run_grid(cfg, ds, train_missing=args.train_missing)
    base = out_dir(cfg) / args.name
    base.with_suffix(".json").write_text(report.to_json())
    base.with_suffix(".md").write_text(render_table(report, "markdown"))
    base.with_suffix(".tsv").write_text(render_table(report, "tsv"))
    print(base.with_suffix(".json"))
    for key, message in sorted(report.failures.items()):
        print(f"failed {key}: {message}", file=sys.stderr)
    if not report.rows:
        missing = [m for m in report.failures.values() if m.startswith("missing")]
        return EXIT_MISSING if missing and len(missing) == len(report.failures) else EXIT_RUNTIME
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        if not Path(path).exists():
            raise MissingPrerequisiteError(path, "report")
        reports.append(RunReport.from_json(Path(path).read_text()))
    text = render_table(aggregate(reports), args.format, args.checkpoint)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-source": cmd_train_source,
    "train-generator": cmd_train_generator,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"sofa {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingPrerequisiteError as exc:
        print(f"sofa {args.command}: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"sofa {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
