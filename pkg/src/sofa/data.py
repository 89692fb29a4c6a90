"""EEG dataset container, SOFA-EEG-1 file format, synthetic benchmark and k-shot splits."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SOFA-EEG-1\n"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    """Base class for unreadable SOFA-EEG-1 files."""


class BadMagicError(DatasetFormatError):
    pass


class UnsupportedVersionError(DatasetFormatError):
    pass


class TruncatedDataError(DatasetFormatError):
    pass


class InconsistentShapeError(DatasetFormatError):
    pass


class InsufficientSamplesError(ValueError):
    def __init__(self, label: int, available: int, k: int):
        super().__init__(f"class {label}: only {available} training samples for the target "
                         f"subject, need k={k}")
        self.label = label


@dataclass(frozen=True)
class EegSample:
    signal: np.ndarray  # (T, d_in)
    label: int
    subject: int
    split: str = "train"


class Dataset:
    """Immutable, array-backed collection of :class:`EegSample` records."""

    def __init__(self, signals, labels, subjects, splits, n_classes: int, subject_ids=None):
        signals = np.asarray(signals, dtype=np.float32)
        if signals.ndim != 3:
            raise InconsistentShapeError(f"signals must be (n, T, d_in), got {signals.shape}")
        n = signals.shape[0]
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        subjects = np.asarray(subjects, dtype=np.int64).reshape(-1)
        splits = np.asarray(splits, dtype="<U5").reshape(-1)
        if not (len(labels) == len(subjects) == len(splits) == n):
            raise InconsistentShapeError("signals, labels, subjects and splits differ in length")
        if not np.all(np.isfinite(signals)):
            raise ValueError("signals contain non-finite values")
        if n and np.any((labels < 0) | (labels >= n_classes)):
            raise ValueError(f"labels outside [0, {n_classes})")
        if n and not np.all(np.isin(splits, SPLITS)):
            raise ValueError(f"split tags must be one of {SPLITS}")
        if subject_ids is None:
            subject_ids = sorted(set(subjects.tolist()))
        subject_ids = tuple(int(s) for s in subject_ids)
        if not set(subjects.tolist()) <= set(subject_ids):
            raise ValueError("sample subject not in the declared subject id set")
        for arr in (signals, labels, subjects, splits):
            arr.setflags(write=False)
        self.signals = signals
        self.labels = labels
        self.subjects = subjects
        self.splits = splits
        self.n_classes = int(n_classes)
        self.subject_ids = subject_ids

    @property
    def t_len(self) -> int:
        return self.signals.shape[1]

    @property
    def d_in(self) -> int:
        return self.signals.shape[2]

    def __len__(self) -> int:
        return self.signals.shape[0]

    def __getitem__(self, i: int) -> EegSample:
        return EegSample(self.signals[i], int(self.labels[i]), int(self.subjects[i]),
                         str(self.splits[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.n_classes == other.n_classes and self.subject_ids == other.subject_ids
                and self.signals.shape == other.signals.shape
                and self.signals.tobytes() == other.signals.tobytes()
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.subjects, other.subjects)
                and np.array_equal(self.splits, other.splits))

    def subset(self, indices) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.signals[indices], self.labels[indices], self.subjects[indices],
                       self.splits[indices], self.n_classes, self.subject_ids)

    def indices(self, split: str | None = None, subjects=None, exclude_subjects=None) -> np.ndarray:
        mask = np.ones(len(self), dtype=bool)
        if split is not None:
            mask &= self.splits == split
        if subjects is not None:
            mask &= np.isin(self.subjects, list(subjects))
        if exclude_subjects is not None:
            mask &= ~np.isin(self.subjects, list(exclude_subjects))
        return np.flatnonzero(mask)

    def select(self, split: str | None = None, subjects=None, exclude_subjects=None) -> Dataset:
        return self.subset(self.indices(split, subjects, exclude_subjects))

    def to_bytes(self) -> bytes:
        header = {
            "version": FORMAT_VERSION,
            "n_samples": len(self),
            "T": self.t_len,
            "d_in": self.d_in,
            "n_classes": self.n_classes,
            "subjects": list(self.subject_ids),
            "records": [{"subject": int(s), "label": int(y), "split": str(sp)}
                        for s, y, sp in zip(self.subjects, self.labels, self.splits)],
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = np.ascontiguousarray(self.signals, dtype="<f4").tobytes()
        return MAGIC + head + b"\0" + body

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def dataset_from_bytes(data: bytes) -> Dataset:
    if not data.startswith(MAGIC):
        raise BadMagicError("not a SOFA-EEG-1 file (bad magic)")
    end = data.find(b"\0", len(MAGIC))
    if end < 0:
        raise TruncatedDataError("header is not NUL-terminated")
    try:
        header = json.loads(data[len(MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"unreadable header: {exc}") from None
    if header.get("version") != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported version {header.get('version')!r}")
    n, t_len, d_in = header["n_samples"], header["T"], header["d_in"]
    records = header["records"]
    if len(records) != n:
        raise InconsistentShapeError(f"header lists {len(records)} records but n_samples={n}")
    body = data[end + 1:]
    expected = n * t_len * d_in * 4
    if len(body) < expected:
        raise TruncatedDataError(f"signal blob has {len(body)} bytes, expected {expected}")
    if len(body) > expected:
        raise InconsistentShapeError(f"signal blob has {len(body) - expected} trailing bytes")
    signals = np.frombuffer(body, dtype="<f4").reshape(n, t_len, d_in).astype(np.float32)
    return Dataset(signals,
                   [r["label"] for r in records],
                   [r["subject"] for r in records],
                   [r["split"] for r in records],
                   header["n_classes"], header["subjects"])


def save_dataset(ds: Dataset, path) -> str:
    """Write ``ds`` to ``path``; returns the sha256 of the file."""
    data = ds.to_bytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def crop_window(ds: Dataset, start_ms: int = 320, end_ms: int = 480,
                step_ms: float = 1.0) -> Dataset:
    """Keep timesteps [start, end) of every signal, one timestep per ``step_ms``."""
    start, end = int(round(start_ms / step_ms)), int(round(end_ms / step_ms))
    if not 0 <= start < end:
        raise ValueError(f"empty or negative crop window [{start_ms}, {end_ms})")
    if end > ds.t_len:
        raise ValueError(f"crop window ends at step {end} but signals have {ds.t_len} steps")
    return Dataset(ds.signals[:, start:end, :], ds.labels, ds.subjects, ds.splits,
                   ds.n_classes, ds.subject_ids)


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 6
    n_classes: int = 10
    per_class: int = 48
    t_len: int = 32
    d_in: int = 16
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_subjects", "n_classes", "per_class", "t_len", "d_in"):
            if getattr(self, name) < 1:
                raise ValueError(f"SynthConfig.{name} must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


def split_counts(per_class: int) -> tuple[int, int, int]:
    """Train/val/test counts for one (subject, class) cell, ratio 4:1:1."""
    n_val = per_class // 6
    n_test = per_class // 6
    return per_class - n_val - n_test, n_val, n_test


def class_prototypes(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """(C, T, d_lat) trajectories, each latent channel a sum of three sinusoids."""
    d_lat = min(16, cfg.d_in)
    t = np.arange(cfg.t_len) / cfg.t_len
    shape = (cfg.n_classes, d_lat, 3)
    amp = rng.uniform(0.5, 1.5, size=shape)
    freq = rng.uniform(0.5, 6.0, size=shape)
    phase = rng.uniform(0.0, 2 * np.pi, size=shape)
    waves = amp[..., None] * np.sin(2 * np.pi * freq[..., None] * t + phase[..., None])
    return waves.sum(axis=2).transpose(0, 2, 1)


def latent_factors(cfg: SynthConfig, rng: np.random.Generator):
    """Class prototypes (C, T, d_lat), subject mixings (S, d_lat, d_in) and gains (S,)."""
    d_lat = min(16, cfg.d_in)
    protos = class_prototypes(cfg, rng)
    mixing = rng.normal(0.0, 1.0 / np.sqrt(d_lat), size=(cfg.n_subjects, d_lat, cfg.d_in))
    gains = rng.uniform(0.5, 1.5, size=cfg.n_subjects)
    return protos, mixing, gains


def synth_benchmark(cfg: SynthConfig = SynthConfig()) -> Dataset:
    """Shared class trajectories seen through a subject-specific mixing and gain, plus noise."""
    rng = np.random.default_rng(cfg.seed)
    protos, mixing, gains = latent_factors(cfg, rng)
    n_train, n_val, _ = split_counts(cfg.per_class)
    cell_splits = (["train"] * n_train + ["val"] * n_val
                   + ["test"] * (cfg.per_class - n_train - n_val))

    signals, labels, subjects, splits = [], [], [], []
    for s in range(cfg.n_subjects):
        for c in range(cfg.n_classes):
            clean = gains[s] * protos[c] @ mixing[s]
            noise = rng.normal(0.0, 1.0, size=(cfg.per_class, cfg.t_len, cfg.d_in)) * cfg.noise
            signals.append(clean[None] + noise)
            labels += [c] * cfg.per_class
            subjects += [s] * cfg.per_class
            splits += cell_splits
    if signals:
        signals = np.concatenate(signals, axis=0)
    else:
        signals = np.zeros((0, cfg.t_len, cfg.d_in))
    return Dataset(signals, labels, subjects, splits, cfg.n_classes, range(cfg.n_subjects))


@dataclass(frozen=True)
class KShotSplit:
    target_subject: int
    k: int
    selected: np.ndarray
    remainder: np.ndarray


def kshot_split(ds: Dataset, target_subject: int, k: int, seed: int = 0) -> KShotSplit:
    """Draw k training samples per class of ``target_subject``, without replacement."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    pool = ds.indices(split="train", subjects=[target_subject])
    selected = []
    for c in range(ds.n_classes):
        candidates = pool[ds.labels[pool] == c]
        if len(candidates) < k:
            raise InsufficientSamplesError(c, len(candidates), k)
        selected.append(np.sort(rng.choice(candidates, size=k, replace=False)))
    chosen = np.concatenate(selected) if selected else np.zeros(0, dtype=np.int64)
    remainder = np.setdiff1d(pool, chosen)
    return KShotSplit(int(target_subject), int(k), chosen, remainder)
