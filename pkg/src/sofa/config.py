"""Run configuration: named profiles, TOML config files and flag overrides."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace

from .data import SynthConfig
from .models import GeneratorConfig, ModelConfig
from .pipeline import METHODS, StageConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass(frozen=True)
class Profile:
    synth: SynthConfig
    d_enc: int
    d_emb: int
    d_z: int
    gen_hidden: int
    epochs: int
    batch_size: int
    crop_start_ms: int | None = None
    crop_end_ms: int | None = None


PROFILES = {
    # small enough for CI on one core
    "desk": Profile(SynthConfig(n_subjects=6, n_classes=10, per_class=48, t_len=32, d_in=16,
                                noise=1.0),
                    d_enc=32, d_emb=32, d_z=100, gen_hidden=128, epochs=60, batch_size=128),
    "paper": Profile(SynthConfig(n_subjects=6, n_classes=40, per_class=48, t_len=480, d_in=128,
                                 noise=1.0),
                     d_enc=128, d_emb=128, d_z=100, gen_hidden=128, epochs=200, batch_size=1200,
                     crop_start_ms=320, crop_end_ms=480),
}


@dataclass
class RunConfig:
    profile: str = "desk"
    dataset: str | None = None
    out_dir: str | None = None
    # single-run stages
    seed: int = 0
    target_subject: int = 0
    # evaluation grid
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    targets: list[int] | None = None
    k: list[int] = field(default_factory=lambda: [1])
    method: list[str] = field(default_factory=lambda: ["iscon"])
    # optimisation
    epochs: int | None = None
    batch_size: int | None = None
    lr: float = 1e-3
    lam: float = 1.0
    fake_batch: int | None = None
    balanced_fake: bool = True
    temperature: float = 0.5
    normalize: bool = True
    dtype: str = "float64"
    # architecture
    d_enc: int | None = None
    d_emb: int | None = None
    d_z: int | None = None
    gen_hidden: int | None = None
    crop_start_ms: int | None = None
    crop_end_ms: int | None = None
    # artifacts
    source_ckpt: str | None = None
    generator_ckpt: str | None = None
    workers: int | None = None

    def resolved(self) -> RunConfig:
        """Fill profile-dependent fields left unset."""
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        prof = PROFILES[self.profile]
        updates = {}
        for name in ("epochs", "batch_size", "d_enc", "d_emb", "d_z", "gen_hidden",
                     "crop_start_ms", "crop_end_ms"):
            if getattr(self, name) is None:
                updates[name] = getattr(prof, name)
        if self.targets is None:
            updates["targets"] = [self.target_subject]
        out = replace(self, **updates)
        out.validate()
        return out

    def validate(self) -> None:
        bad = [m for m in self.method if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
        if any(k < 1 for k in self.k):
            raise ConfigError("k must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if (self.crop_start_ms is None) != (self.crop_end_ms is None):
            raise ConfigError("crop_start_ms and crop_end_ms go together")

    def stage_config(self, **overrides) -> StageConfig:
        base = dict(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, lam=self.lam,
                    method=self.method[0], k=self.k[0], target_subject=self.target_subject,
                    seed=self.seed, fake_batch=self.fake_batch, balanced_fake=self.balanced_fake,
                    temperature=self.temperature, normalize=self.normalize, dtype=self.dtype)
        base.update(overrides)
        try:
            return StageConfig(**base)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_config(self, d_in: int, t_len: int, n_classes: int) -> ModelConfig:
        return ModelConfig(d_in=d_in, t_len=t_len, d_enc=self.d_enc, d_emb=self.d_emb,
                           n_classes=n_classes)

    def generator_config(self, model_config: ModelConfig) -> GeneratorConfig:
        return GeneratorConfig(d_z=self.d_z, hidden=self.gen_hidden, d_out=model_config.d_emb,
                               n_classes=model_config.n_classes)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


FIELD_NAMES = tuple(f.name for f in fields(RunConfig))


def load_config_file(path) -> dict:
    """Read a TOML key/value file; nested tables are not allowed."""
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    data = {key.replace("-", "_"): value for key, value in data.items()}
    if "lambda" in data:
        data["lam"] = data.pop("lambda")
    unknown = sorted(set(data) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"{path}: key {key!r} must be a plain value, not a table")
    return data


def build_config(file_values: dict | None = None, flag_values: dict | None = None) -> RunConfig:
    """Profile defaults, then config-file values, then command-line flags."""
    merged = {}
    merged.update(file_values or {})
    merged.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    unknown = sorted(set(merged) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    for key in ("seeds", "targets", "k"):
        if key in merged and isinstance(merged[key], int):
            merged[key] = [merged[key]]
    if "method" in merged and isinstance(merged["method"], str):
        merged["method"] = [merged["method"]]
    return RunConfig(**merged).resolved()


def config_hash(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def source_key(cfg: RunConfig, dataset_digest: str, target_subject: int) -> str:
    return config_hash({
        "stage": "source", "dataset": dataset_digest, "target": target_subject,
        "seed": cfg.seed, "epochs": cfg.epochs, "batch_size": cfg.batch_size, "lr": cfg.lr,
        "d_enc": cfg.d_enc, "d_emb": cfg.d_emb, "dtype": cfg.dtype,
        "crop": [cfg.crop_start_ms, cfg.crop_end_ms]})


def generator_key(cfg: RunConfig, source_digest: str) -> str:
    return config_hash({
        "stage": "generator", "source": source_digest, "seed": cfg.seed, "epochs": cfg.epochs,
        "batch_size": cfg.batch_size, "lr": cfg.lr, "d_z": cfg.d_z, "hidden": cfg.gen_hidden,
        "dtype": cfg.dtype})


def adapt_key(cfg: RunConfig, source_digest: str, generator_digest: str, subject: int, k: int,
              method: str, seed: int) -> str:
    return config_hash({
        "stage": "adapt", "source": source_digest, "generator": generator_digest,
        "subject": subject, "k": k, "method": method, "seed": seed, "epochs": cfg.epochs,
        "batch_size": cfg.batch_size, "lr": cfg.lr, "lam": cfg.lam,
        "fake_batch": cfg.fake_batch, "balanced_fake": cfg.balanced_fake,
        "temperature": cfg.temperature, "normalize": cfg.normalize, "dtype": cfg.dtype})
