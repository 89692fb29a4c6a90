import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sofa.data import Dataset
from sofa.evaluation import (ReportMismatchError, RunReport, accuracy_from_predictions, aggregate,
                             argmax_predictions, format_cell, mean_accuracy, render_table,
                             summarize, top1_accuracy)
from sofa.models import ModelConfig, init_classifier


def _balanced_split(n_classes=4, per_class=3, t_len=2, d_in=2):
    n = n_classes * per_class
    signals = np.random.default_rng(0).standard_normal((n, t_len, d_in))
    return Dataset(signals, np.repeat(np.arange(n_classes), per_class), np.zeros(n, int),
                   ["test"] * n, n_classes)


def test_constant_predictor_scores_one_over_c():
    split = _balanced_split()
    model = init_classifier(ModelConfig(d_in=2, t_len=2, d_enc=3, d_emb=3, n_classes=4))
    model.params["h.W"].value[...] = 0.0  # all logits tie, argmax picks class 0
    assert top1_accuracy(model, split) == pytest.approx(1 / 4)


def test_oracle_predictor_and_hand_case():
    labels = np.array([2, 0, 1, 1])
    assert accuracy_from_predictions(labels, labels) == 1.0
    logits = np.array([[0.1, 0.9, 0.0], [2.0, 1.0, 2.0], [0.0, 0.0, 3.0]])
    preds = argmax_predictions(logits)
    assert preds.tolist() == [1, 0, 2]  # tie in row 1 goes to the lowest index
    assert accuracy_from_predictions(preds, [1, 0, 1]) == pytest.approx(2 / 3)


def test_empty_split_rejected():
    model = init_classifier(ModelConfig(d_in=2, t_len=2, d_enc=2, d_emb=2, n_classes=2))
    with pytest.raises(ValueError):
        top1_accuracy(model, _balanced_split().subset([]))


def test_top1_invariant_to_order():
    split = _balanced_split(n_classes=3, per_class=5)
    model = init_classifier(ModelConfig(d_in=2, t_len=2, d_enc=4, d_emb=4, n_classes=3), seed=1)
    perm = np.random.default_rng(2).permutation(len(split))
    assert top1_accuracy(model, split) == top1_accuracy(model, split.subset(perm))


def test_summarize_examples():
    two = summarize([0.7, 0.8])
    assert two["mean"] == pytest.approx(0.75)
    assert two["std"] == pytest.approx(0.0707107, abs=1e-6)
    one = summarize([0.4])
    assert one["std"] == 0.0 and one["single_seed"]
    assert summarize([0.5, 0.5, 0.5])["std"] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8))
def test_mean_within_range(values):
    stats = summarize(values)
    assert min(values) - 1e-12 <= stats["mean"] <= max(values) + 1e-12


def _report(seeds=(0, 1), digest="abc"):
    report = RunReport(n_classes=10, dataset_digest=digest)
    for seed in seeds:
        for k in (2, 1):
            for method in ("iscon", "baseline", "mmd"):
                base = {"baseline": 0.5, "mmd": 0.55, "iscon": 0.6}[method] + 0.05 * k
                report.add(0, k, method, seed, val_acc=base, test_acc=base + 0.01 * seed,
                           final_val_acc=base, final_test_acc=base)
    return report


def test_aggregate_merges_and_checks_consistency():
    merged = aggregate([_report(seeds=(0,)), _report(seeds=(1,))])
    assert merged == _report()
    assert mean_accuracy(merged, 0, 1, "iscon") == pytest.approx(0.655)
    with pytest.raises(ReportMismatchError):
        aggregate([_report(digest="abc"), _report(digest="xyz")])
    other = RunReport(n_classes=40)
    with pytest.raises(ReportMismatchError):
        aggregate([_report(), other])


def test_json_roundtrip_and_ordering():
    report = _report()
    report.add_failure(1, 3, "mmd", 0, "boom")
    text = render_table(report, "json")
    back = RunReport.from_json(text)
    assert back == report
    assert back.to_json() == text
    order = [(r["k"], r["method"]) for r in back.to_dict()["rows"]][:3]
    assert order == [(1, "baseline"), (1, "baseline"), (1, "mmd")]


def test_markdown_and_tsv_rendering():
    assert format_cell({"mean": 0.746, "std": 0.021, "single_seed": False}) == "74.6 ±2.1"
    md = render_table(_report())
    assert "| subject | k | baseline | mmd | iscon |" in md
    assert md.index("| 0 | 1 |") < md.index("| 0 | 2 |")
    tsv = render_table(_report(), "tsv").splitlines()
    assert tsv[0].startswith("subject\tk\tmethod")
    assert [line.split("\t")[2] for line in tsv[1:4]] == ["baseline", "mmd", "iscon"]
    single = render_table(_report(seeds=(0,)))
    assert "*" in single and "single seed" in single


def test_final_checkpoint_table_uses_final_metrics():
    report = RunReport(n_classes=2)
    report.add(0, 1, "baseline", 0, val_acc=0.9, test_acc=0.8, final_val_acc=0.5,
               final_test_acc=0.4)
    assert "80.0" in render_table(report, checkpoint="best")
    assert "40.0" in render_table(report, checkpoint="final")


def test_empty_report_renders_headers_only():
    md = render_table(RunReport()).strip().splitlines()
    assert md[0] == "### Validation set"
    assert not any(line.startswith("| 0") for line in md)
    assert render_table(RunReport(), "tsv").strip().count("\n") == 0


def test_rows_must_be_fractions():
    with pytest.raises(ValueError):
        RunReport().add(0, 1, "baseline", 0, test_acc=1.5)
