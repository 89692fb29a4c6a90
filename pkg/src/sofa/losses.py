"""Training objectives: cross-entropy, multi-kernel MMD, inter-subject contrastive loss."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError
from .models import ClassifierModel, classify

#: subject id given to generated (pseudo-source) rows
PSEUDO_SUBJECT = -1

MEDIAN_SCALES = (0.25, 0.5, 1.0, 2.0, 4.0)


class EmptyAnchorWarning(RuntimeWarning):
    """Every anchor in an IS-Con batch lacked a positive; the loss is defined as 0."""


@dataclass
class BatchMeta:
    labels: np.ndarray
    subjects: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        if self.labels.shape != self.subjects.shape or self.labels.ndim != 1:
            raise ShapeError(f"labels {self.labels.shape} and subjects {self.subjects.shape} "
                             "must be 1-d and equal length")

    def validate(self, n_classes: int | None = None, subject_ids=None) -> None:
        if n_classes is not None and np.any((self.labels < 0) | (self.labels >= n_classes)):
            raise ValueError(f"labels must lie in [0, {n_classes})")
        if subject_ids is not None:
            unknown = set(self.subjects.tolist()) - set(subject_ids)
            if unknown:
                raise ValueError(f"unknown subject ids {sorted(unknown)}")


@dataclass
class MmdConfig:
    """Gaussian kernel bank.  Fixed ``bandwidths`` win over the median heuristic."""

    bandwidths: tuple[float, ...] | None = None
    scales: tuple[float, ...] = MEDIAN_SCALES

    def __post_init__(self):
        kernels = self.bandwidths if self.bandwidths is not None else self.scales
        if len(kernels) == 0:
            raise ValueError("MMD needs at least one kernel")
        if any(b <= 0 for b in kernels):
            raise ValueError("bandwidths and scales must be positive")


@dataclass
class ConLossConfig:
    temperature: float = 0.5
    normalize: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def cross_entropy(logits: Node, labels) -> Node:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, n_classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logit rows but labels have shape {labels.shape}")
    if np.any((labels < 0) | (labels >= n_classes)):
        bad = labels[(labels < 0) | (labels >= n_classes)]
        raise ValueError(f"cross_entropy: labels {bad.tolist()} outside [0, {n_classes})")
    picked = ad.take(ad.log_softmax(logits), (np.arange(n), labels))
    return -ad.mean(picked)


def generator_loss(gen_out: Node, class_codes, frozen_model: ClassifierModel) -> Node:
    """Cross-entropy of the frozen classifier's verdict on generated features."""
    if not frozen_model.params.frozen:
        raise RuntimeError("generator_loss needs a frozen classifier")
    targets = np.argmax(np.asarray(class_codes), axis=1)
    return cross_entropy(classify(gen_out, frozen_model), targets)


def median_bandwidth(pooled: np.ndarray) -> float:
    """Median pairwise euclidean distance over distinct pairs; 1.0 if degenerate."""
    n = len(pooled)
    if n < 2:
        return 1.0
    diff = pooled[:, None, :] - pooled[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    upper = dist[np.triu_indices(n, k=1)]
    med = float(np.median(upper))
    return med if med > 0 else 1.0


def kernel_bandwidths(w_src: np.ndarray, w_trg: np.ndarray, cfg: MmdConfig) -> list[float]:
    if cfg.bandwidths is not None:
        return [float(b) for b in cfg.bandwidths]
    base = median_bandwidth(np.concatenate([w_src, w_trg], axis=0))
    return [base * s for s in cfg.scales]


def _kernel_mean(sq_dists: Node, bandwidths) -> Node:
    total = None
    for sigma in bandwidths:
        k = ad.mean(ad.exp(ad.scale(sq_dists, -1.0 / (2.0 * sigma * sigma))))
        total = k if total is None else total + k
    return total


def mmd_loss(w_src: Node, w_trg: Node, cfg: MmdConfig | None = None) -> Node:
    """Biased squared MMD between two batches under a bank of Gaussian kernels.

    The bandwidths are computed from the current values and treated as constants.
    """
    cfg = cfg or MmdConfig()
    w_src, w_trg = ad.as_node(w_src), ad.as_node(w_trg)
    if w_src.shape[0] == 0 or w_trg.shape[0] == 0:
        raise ValueError("mmd_loss: empty batch")
    if w_src.value.ndim != 2 or w_src.shape[1:] != w_trg.shape[1:]:
        raise ShapeError(f"mmd_loss: incompatible shapes {w_src.shape} and {w_trg.shape}")
    bands = kernel_bandwidths(w_src.value, w_trg.value, cfg)
    k_ss = _kernel_mean(ad.pairwise_sq_dists(w_src, w_src), bands)
    k_tt = _kernel_mean(ad.pairwise_sq_dists(w_trg, w_trg), bands)
    k_st = _kernel_mean(ad.pairwise_sq_dists(w_src, w_trg), bands)
    return k_ss + k_tt - ad.scale(k_st, 2.0)


def anchor_masks(meta: BatchMeta) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (positive, anchor-set) matrices; row i holds P(i) and P(i) | S(i)."""
    labels, subjects = meta.labels, meta.subjects
    not_self = ~np.eye(len(labels), dtype=bool)
    positive = (labels[:, None] == labels[None, :]) & not_self
    same_subject = (subjects[:, None] == subjects[None, :]) & not_self
    return positive, positive | same_subject


def iscon_anchor_losses(w: Node, meta: BatchMeta,
                        cfg: ConLossConfig | None = None) -> tuple[Node, np.ndarray]:
    """Per-anchor inter-subject contrastive terms and the indices of the anchors they belong to.

    For anchor i the denominator runs over samples sharing its class or its
    subject; samples of another class *and* another subject are left out.
    Anchors without a positive get no term.
    """
    cfg = cfg or ConLossConfig()
    w = ad.as_node(w)
    n = w.shape[0]
    if n < 2:
        raise ValueError("iscon_loss needs a batch of at least 2")
    if meta.labels.shape != (n,):
        raise ShapeError(f"iscon_loss: batch has {n} rows, meta has {meta.labels.shape[0]}")
    positive, anchor_set = anchor_masks(meta)
    active = np.flatnonzero(positive.any(axis=1))
    if active.size == 0:
        return ad.const(np.zeros(0, dtype=w.value.dtype)), active
    if cfg.normalize:
        w = ad.l2_normalize(w)
    sim = ad.scale(ad.matmul(w, ad.transpose(w)), 1.0 / cfg.temperature)
    sim = ad.take(sim, active)
    log_num = ad.masked_logsumexp(sim, positive[active])
    log_den = ad.masked_logsumexp(sim, anchor_set[active])
    return log_den - log_num, active


def iscon_loss(w: Node, meta: BatchMeta, cfg: ConLossConfig | None = None) -> Node:
    """Mean of the per-anchor terms; 0 (with a warning) when no anchor has a positive."""
    w = ad.as_node(w)
    terms, active = iscon_anchor_losses(w, meta, cfg)
    if active.size == 0:
        warnings.warn("iscon_loss: no anchor has a positive; returning 0", EmptyAnchorWarning)
        return ad.sum(ad.scale(w, 0.0))
    return ad.mean(terms)


def total_loss(cls: Node, align: Node, lam: float) -> Node:
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return ad.add(cls, ad.scale(ad.as_node(align), lam))
