"""GRU classifier (encoder f, embedding g, classifier h) and the feature generator G."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamStore, ShapeError
from .checkpoint import read_checkpoint, write_checkpoint

GRU_GATES = ("z", "r", "h")


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 128
    t_len: int = 160
    d_enc: int = 128
    d_emb: int = 128
    n_classes: int = 40

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {value}")


@dataclass(frozen=True)
class GeneratorConfig:
    d_z: int = 100
    hidden: int = 128
    d_out: int = 128
    n_classes: int = 40

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) < 1:
                raise ValueError(f"GeneratorConfig.{name} must be >= 1, got {value}")


@dataclass
class ClassifierModel:
    config: ModelConfig
    params: ParamStore
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.params["h.W"].value.dtype


@dataclass
class GeneratorModel:
    config: GeneratorConfig
    params: ParamStore
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.params["G.W3"].value.dtype


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_classifier(config: ModelConfig, seed: int = 0, dtype=np.float64) -> ClassifierModel:
    rng = np.random.default_rng(seed)
    d_in, d_enc, d_emb, n_cls = config.d_in, config.d_enc, config.d_emb, config.n_classes
    params = ParamStore()
    for gate in GRU_GATES:
        params.add(f"f.W_{gate}", _uniform(rng, d_in, (d_in, d_enc)).astype(dtype))
        params.add(f"f.U_{gate}", _uniform(rng, d_enc, (d_enc, d_enc)).astype(dtype))
        params.add(f"f.b_{gate}", np.zeros(d_enc, dtype=dtype))
    params.add("g.W", _uniform(rng, d_enc, (d_enc, d_emb)).astype(dtype))
    params.add("g.b", np.zeros(d_emb, dtype=dtype))
    params.add("h.W", _uniform(rng, d_emb, (d_emb, n_cls)).astype(dtype))
    params.add("h.b", np.zeros(n_cls, dtype=dtype))
    return ClassifierModel(config, params)


def init_generator(config: GeneratorConfig, seed: int = 0, dtype=np.float64) -> GeneratorModel:
    rng = np.random.default_rng(seed)
    d_cond = config.d_z + config.n_classes
    params = ParamStore()
    params.add("G.W1", _uniform(rng, d_cond, (d_cond, config.hidden)).astype(dtype))
    params.add("G.b1", np.zeros(config.hidden, dtype=dtype))
    params.add("G.W2", _uniform(rng, config.hidden, (config.hidden, config.hidden)).astype(dtype))
    params.add("G.b2", np.zeros(config.hidden, dtype=dtype))
    params.add("G.W3", _uniform(rng, config.hidden, (config.hidden, config.d_out)).astype(dtype))
    params.add("G.b3", np.zeros(config.d_out, dtype=dtype))
    return GeneratorModel(config, params)


def gru_cell(x_t, h_prev: Node, p: ParamStore) -> Node:
    """One step of the standard GRU; ``x_t`` is (batch, d_in), ``h_prev`` (batch, d_enc)."""
    z = ad.sigmoid(ad.matmul(x_t, p["f.W_z"]) + ad.matmul(h_prev, p["f.U_z"]) + p["f.b_z"])
    r = ad.sigmoid(ad.matmul(x_t, p["f.W_r"]) + ad.matmul(h_prev, p["f.U_r"]) + p["f.b_r"])
    cand = ad.tanh(ad.matmul(x_t, p["f.W_h"]) + ad.matmul(r * h_prev, p["f.U_h"]) + p["f.b_h"])
    return h_prev + z * (cand - h_prev)


def encode(x, model: ClassifierModel) -> Node:
    """Final GRU hidden state for a batch ``x`` of shape (batch, T, d_in)."""
    cfg = model.config
    x = np.asarray(x.value if isinstance(x, Node) else x, dtype=model.dtype)
    if x.ndim != 3 or x.shape[1:] != (cfg.t_len, cfg.d_in):
        raise ShapeError(f"encode: expected (batch, {cfg.t_len}, {cfg.d_in}), got {x.shape}")
    h = ad.const(np.zeros((x.shape[0], cfg.d_enc), dtype=model.dtype))
    for t in range(cfg.t_len):
        h = gru_cell(ad.const(x[:, t, :]), h, model.params)
    return h


def embed(v: Node, model: ClassifierModel) -> Node:
    if v.shape[-1] != model.config.d_enc:
        raise ShapeError(f"embed: expected last dim {model.config.d_enc}, got {v.shape}")
    return ad.matmul(v, model.params["g.W"]) + model.params["g.b"]


def classify(w: Node, model: ClassifierModel) -> Node:
    w = ad.as_node(w, dtype=model.dtype)
    if w.shape[-1] != model.config.d_emb:
        raise ShapeError(f"classify: expected last dim {model.config.d_emb}, got {w.shape}")
    return ad.matmul(w, model.params["h.W"]) + model.params["h.b"]


def features(x, model: ClassifierModel) -> Node:
    return embed(encode(x, model), model)


def logits(x, model: ClassifierModel) -> Node:
    return classify(features(x, model), model)


def predict(x, model: ClassifierModel, batch_size: int = 512) -> np.ndarray:
    """Argmax class per row; ties go to the lowest index."""
    x = np.asarray(x)
    out = [np.argmax(logits(x[i:i + batch_size], model).value, axis=-1)
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def one_hot(labels, n_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


def generate(z, c, gen: GeneratorModel) -> Node:
    """Pseudo-source embedding features from latent ``z`` and one-hot class codes ``c``."""
    cfg = gen.config
    z = np.asarray(z, dtype=gen.dtype)
    c = np.asarray(c, dtype=gen.dtype)
    if z.ndim != 2 or z.shape[1] != cfg.d_z:
        raise ShapeError(f"generate: latent must be (batch, {cfg.d_z}), got {z.shape}")
    if c.shape != (z.shape[0], cfg.n_classes):
        raise ShapeError(f"generate: class codes must be ({z.shape[0]}, {cfg.n_classes}), "
                         f"got {c.shape}")
    if not (np.all((c == 0) | (c == 1)) and np.all(c.sum(axis=1) == 1)):
        raise ValueError("generate: every class code row must be one-hot")
    p = gen.params
    inp = ad.const(np.concatenate([z, c], axis=1))
    hidden = ad.relu(ad.matmul(inp, p["G.W1"]) + p["G.b1"])
    hidden = ad.relu(ad.matmul(hidden, p["G.W2"]) + p["G.b2"])
    return ad.matmul(hidden, p["G.W3"]) + p["G.b3"]


def sample_latent(batch: int, d_z: int, rng) -> np.ndarray:
    """i.i.d. standard normal latent codes; ``rng`` is a seed or a numpy Generator."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return rng.standard_normal((batch, d_z))


def check_compatible(model: ClassifierModel, gen: GeneratorModel) -> None:
    if gen.config.d_out != model.config.d_emb:
        raise ShapeError(f"generator output dim {gen.config.d_out} does not match "
                         f"embedding dim {model.config.d_emb}")
    if gen.config.n_classes != model.config.n_classes:
        raise ShapeError(f"generator has {gen.config.n_classes} classes, "
                         f"classifier has {model.config.n_classes}")


def save_classifier(model: ClassifierModel, path) -> str:
    return write_checkpoint(path, model.params.values(), "classifier",
                            asdict(model.config), model.meta)


def load_classifier(path) -> ClassifierModel:
    manifest, tensors = read_checkpoint(path)
    if manifest.get("kind") != "classifier":
        raise ValueError(f"{path}: expected a classifier checkpoint, got {manifest.get('kind')!r}")
    return ClassifierModel(ModelConfig(**manifest["config"]), ParamStore(tensors),
                           manifest.get("meta", {}))


def save_generator(gen: GeneratorModel, path) -> str:
    return write_checkpoint(path, gen.params.values(), "generator", asdict(gen.config), gen.meta)


def load_generator(path) -> GeneratorModel:
    manifest, tensors = read_checkpoint(path)
    if manifest.get("kind") != "generator":
        raise ValueError(f"{path}: expected a generator checkpoint, got {manifest.get('kind')!r}")
    return GeneratorModel(GeneratorConfig(**manifest["config"]), ParamStore(tensors),
                          manifest.get("meta", {}))
