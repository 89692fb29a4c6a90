"""Top-1 accuracy, multi-seed aggregation and table rendering."""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field

import numpy as np

from .models import ClassifierModel, predict

METHOD_ORDER = ("baseline", "mmd", "iscon")
METRICS = ("val_acc", "test_acc", "final_val_acc", "final_test_acc")


class ReportMismatchError(ValueError):
    pass


def argmax_predictions(logits) -> np.ndarray:
    """Row-wise argmax, lowest index on ties."""
    return np.argmax(np.asarray(logits), axis=-1)


def accuracy_from_predictions(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty split is undefined")
    return float(np.mean(predictions == labels))


def top1_accuracy(model: ClassifierModel, ds_split) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    if len(ds_split) == 0:
        raise ValueError("top1_accuracy: empty split")
    return accuracy_from_predictions(predict(ds_split.signals, model), ds_split.labels)


def _method_rank(method: str) -> tuple[int, str]:
    return (METHOD_ORDER.index(method) if method in METHOD_ORDER else len(METHOD_ORDER), method)


def summarize(values) -> dict:
    values = [float(v) for v in values]
    if not values:
        raise ValueError("nothing to summarize")
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return {"mean": statistics.fmean(values), "std": std, "n": len(values),
            "single_seed": len(values) == 1}


@dataclass
class RunReport:
    """Per-(subject, k, method, seed) accuracies plus per-cell failures."""

    rows: dict = field(default_factory=dict)
    n_classes: int | None = None
    dataset_digest: str | None = None
    failures: dict = field(default_factory=dict)

    def add(self, subject: int, k: int, method: str, seed: int, **metrics) -> None:
        for name, value in metrics.items():
            if name not in METRICS:
                raise KeyError(f"unknown metric {name!r}")
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} is not a fraction")
        self.rows[(int(subject), int(k), str(method), int(seed))] = {
            name: float(v) for name, v in metrics.items()}

    def add_failure(self, subject: int, k: int, method: str, seed: int, message: str) -> None:
        self.failures[(int(subject), int(k), str(method), int(seed))] = message

    def sorted_keys(self, keys=None):
        keys = self.rows if keys is None else keys
        return sorted(keys, key=lambda key: (key[0], key[1], _method_rank(key[2]), key[3]))

    @property
    def aggregates(self) -> dict:
        """(subject, k, method) -> metric -> {mean, std, n, single_seed}."""
        groups: dict = {}
        for key in self.sorted_keys():
            groups.setdefault(key[:3], []).append(self.rows[key])
        out = {}
        for cell, rows in groups.items():
            out[cell] = {m: summarize([r[m] for r in rows]) for m in METRICS
                         if all(m in r for r in rows)}
        return out

    def to_dict(self) -> dict:
        aggregates = self.aggregates
        return {
            "n_classes": self.n_classes,
            "dataset_digest": self.dataset_digest,
            "rows": [{"subject": s, "k": k, "method": m, "seed": seed, **self.rows[(s, k, m, seed)]}
                     for s, k, m, seed in self.sorted_keys()],
            "failures": [{"subject": s, "k": k, "method": m, "seed": seed,
                          "error": self.failures[(s, k, m, seed)]}
                         for s, k, m, seed in self.sorted_keys(self.failures)],
            "aggregates": [{"subject": s, "k": k, "method": m, **aggregates[(s, k, m)]}
                           for s, k, m in sorted(aggregates, key=lambda c: (c[0], c[1],
                                                                            _method_rank(c[2])))],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> RunReport:
        report = cls(n_classes=data.get("n_classes"), dataset_digest=data.get("dataset_digest"))
        for row in data.get("rows", []):
            metrics = {m: row[m] for m in METRICS if m in row}
            report.add(row["subject"], row["k"], row["method"], row["seed"], **metrics)
        for fail in data.get("failures", []):
            report.add_failure(fail["subject"], fail["k"], fail["method"], fail["seed"],
                               fail["error"])
        return report

    @classmethod
    def from_json(cls, text: str) -> RunReport:
        return cls.from_dict(json.loads(text))

    def __eq__(self, other) -> bool:
        if not isinstance(other, RunReport):
            return NotImplemented
        return (self.rows == other.rows and self.n_classes == other.n_classes
                and self.dataset_digest == other.dataset_digest
                and self.failures == other.failures)


def aggregate(reports: list[RunReport]) -> RunReport:
    """Merge reports from separate runs; aggregates are recomputed on the union."""
    merged = RunReport()
    for report in reports:
        for attr in ("n_classes", "dataset_digest"):
            ours, theirs = getattr(merged, attr), getattr(report, attr)
            if theirs is None:
                continue
            if ours is not None and ours != theirs:
                raise ReportMismatchError(f"cannot aggregate reports with different {attr}: "
                                          f"{ours} vs {theirs}")
            setattr(merged, attr, theirs)
        for key, metrics in report.rows.items():
            if key in merged.rows and merged.rows[key] != metrics:
                raise ReportMismatchError(f"conflicting results for {key}")
            merged.rows[key] = dict(metrics)
        merged.failures.update(report.failures)
    return merged


def format_cell(stats: dict) -> str:
    text = f"{100 * stats['mean']:.1f} ±{100 * stats['std']:.1f}"
    return text + "*" if stats.get("single_seed") else text


def render_table(report: RunReport, fmt: str = "markdown", checkpoint: str = "best") -> str:
    """Render ``report`` as tsv, markdown or canonical json.

    ``checkpoint`` picks best-validation (``"best"``) or last-epoch (``"final"``) numbers.
    """
    if fmt == "json":
        return report.to_json()
    if checkpoint not in ("best", "final"):
        raise ValueError("checkpoint must be 'best' or 'final'")
    prefix = "" if checkpoint == "best" else "final_"
    aggregates = report.aggregates
    cells = sorted({c[:2] for c in aggregates})
    methods = sorted({c[2] for c in aggregates}, key=_method_rank) or list(METHOD_ORDER)

    if fmt == "tsv":
        lines = ["subject\tk\tmethod\tn_seeds\tval_mean\tval_std\ttest_mean\ttest_std"]
        for (subject, k) in cells:
            for method in methods:
                stats = aggregates.get((subject, k, method))
                if stats is None:
                    continue
                val, test = stats[prefix + "val_acc"], stats[prefix + "test_acc"]
                lines.append(f"{subject}\t{k}\t{method}\t{val['n']}\t{100 * val['mean']:.1f}\t"
                             f"{100 * val['std']:.1f}\t{100 * test['mean']:.1f}\t"
                             f"{100 * test['std']:.1f}")
        return "\n".join(lines) + "\n"

    if fmt != "markdown":
        raise ValueError(f"unknown format {fmt!r}")
    out = []
    flagged = False
    for split in ("val", "test"):
        out.append(f"### {'Validation' if split == 'val' else 'Test'} set")
        out.append("")
        out.append("| subject | k | " + " | ".join(methods) + " |")
        out.append("|---|---|" + "---|" * len(methods))
        for (subject, k) in cells:
            row = []
            for method in methods:
                stats = aggregates.get((subject, k, method))
                if stats is None:
                    row.append("-")
                    continue
                s = stats[f"{prefix}{split}_acc"]
                flagged |= s["single_seed"]
                row.append(format_cell(s))
            out.append(f"| {subject} | {k} | " + " | ".join(row) + " |")
        out.append("")
    if flagged:
        out.append("\\* single seed, standard deviation not meaningful")
        out.append("")
    return "\n".join(out)


def mean_accuracy(report: RunReport, subject: int, k: int, method: str,
                  metric: str = "test_acc") -> float:
    stats = report.aggregates[(subject, k, method)][metric]
    return stats["mean"]

