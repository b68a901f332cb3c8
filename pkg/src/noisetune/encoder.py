"""Frozen toy dual encoder.

The image side is a small single-head vision transformer that maps a batch of
``N x C x H x W`` images to unit-norm embeddings. The text side is replaced by
a fixed class-embedding matrix, either derived from clean class templates
through the same image encoder or loaded from a ``.tnsr`` file.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, DimensionError
from .rng import stream
from .tensor import Tensor

__all__ = [
    "EncoderConfig",
    "EncoderModel",
    "ClassEmbeddings",
    "init_model",
    "encode_image",
    "compute_logits",
    "derive_class_embeddings",
    "save_model",
    "load_model",
    "load_class_embeddings",
]


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 32
    n_blocks: int = 2
    # fixed input standardisation, applied before patchify
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        for f in fields(self):
            if f.name != "pixel_mean" and getattr(self, f.name) <= 0:
                raise ConfigError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )

    @classmethod
    def from_strings(cls, values: dict) -> "EncoderConfig":
        return cls(**{f.name: (float if f.type in (float, "float") else int)(values[f.name])
                      for f in fields(cls) if f.name in values})

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2


def _block_names(i: int) -> list[str]:
    p = f"block{i}."
    return [p + n for n in ("ln1.scale", "ln1.shift", "wq", "wk", "wv", "wo", "ln2.scale", "ln2.shift", "mlp.w1", "mlp.w2")]


class EncoderModel:
    """Parameters of the frozen mini-ViT. Treat as immutable after construction."""

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor], seed: int | None = None):
        self.config = config
        self.seed = seed
        self.params = params
        for name, p in params.items():
            if p.requires_grad:
                raise ConfigError(f"parameter {name} must be frozen")
            p.data.setflags(write=False)

    @staticmethod
    def parameter_names(config: EncoderConfig) -> list[str]:
        names = ["patch_proj", "pos_embed"]
        for i in range(config.n_blocks):
            names += _block_names(i)
        names.append("out_proj")
        return names

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def state_bytes(self) -> dict[str, bytes]:
        return {k: v.data.tobytes() for k, v in self.params.items()}


def init_model(config: EncoderConfig | None = None, seed: int = 0) -> EncoderModel:
    """Gaussian init with std 1/sqrt(fan_in); layer norms start at scale 1, shift 0."""
    config = config or EncoderConfig()
    rng = stream(seed, "model")
    d, hidden = config.embed_dim, 4 * config.embed_dim

    def gauss(fan_in, shape):
        return Tensor(rng.standard_normal(shape) / np.sqrt(fan_in))

    params = {
        "patch_proj": gauss(config.patch_dim, (config.patch_dim, d)),
        "pos_embed": gauss(d, (config.n_patches, d)),
    }
    for i in range(config.n_blocks):
        p = f"block{i}."
        params[p + "ln1.scale"] = Tensor(np.ones(d))
        params[p + "ln1.shift"] = Tensor(np.zeros(d))
        for w in ("wq", "wk", "wv", "wo"):
            params[p + w] = gauss(d, (d, d))
        params[p + "ln2.scale"] = Tensor(np.ones(d))
        params[p + "ln2.shift"] = Tensor(np.zeros(d))
        params[p + "mlp.w1"] = gauss(d, (d, hidden))
        params[p + "mlp.w2"] = gauss(hidden, (hidden, d))
    params["out_proj"] = gauss(d, (d, d))
    return EncoderModel(config, params, seed=seed)


def _linear(x: Tensor, w: Tensor) -> Tensor:
    """Apply a weight matrix to the last axis of a 3-D token tensor."""
    n, t, d = x.shape
    return T.reshape(T.matmul(T.reshape(x, (n * t, d)), w), (n, t, w.shape[1]))


def _patchify(batch: Tensor, p: int) -> Tensor:
    n, c, h, w = batch.shape
    x = T.reshape(batch, (n, c, h // p, p, w // p, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (n, (h // p) * (w // p), c * p * p))


def encode_image(model: EncoderModel, batch: Tensor | np.ndarray) -> Tensor:
    """Embed an ``N x C x H x W`` batch; rows of the result have unit norm."""
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    cfg = model.config
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise DimensionError(f"encode_image: expected N x {expected}, got {batch.shape}")
    n = batch.shape[0]
    d = cfg.embed_dim
    P = model.params

    centre = Tensor(np.full(batch.shape, cfg.pixel_mean))
    batch = T.scalar_mul(T.sub(batch, centre), 1.0 / cfg.pixel_std)
    x = _linear(_patchify(batch, cfg.patch_size), P["patch_proj"])
    x = T.add(x, T.expand(P["pos_embed"], n))
    attn_scale = 1.0 / np.sqrt(d)
    for i in range(cfg.n_blocks):
        p = f"block{i}."
        h = T.layer_norm(x, P[p + "ln1.scale"], P[p + "ln1.shift"])
        q = _linear(h, P[p + "wq"])
        k = _linear(h, P[p + "wk"])
        v = _linear(h, P[p + "wv"])
        scores = T.scalar_mul(T.matmul(q, T.transpose(k, (0, 2, 1))), attn_scale)
        attended = T.matmul(T.softmax(scores, axis=-1), v)
        x = T.add(x, _linear(attended, P[p + "wo"]))
        h = T.layer_norm(x, P[p + "ln2.scale"], P[p + "ln2.shift"])
        x = T.add(x, _linear(T.gelu(_linear(h, P[p + "mlp.w1"])), P[p + "mlp.w2"]))
    pooled = T.mean(x, axis=1)
    return T.l2_normalize(T.matmul(pooled, P["out_proj"]), axis=1)


class ClassEmbeddings:
    """Fixed ``c x d`` matrix of unit-norm class vectors plus their labels."""

    def __init__(self, matrix, labels: Sequence[str] | None = None):
        m = np.array(matrix.data if isinstance(matrix, Tensor) else matrix, dtype=np.float64)
        if m.ndim != 2:
            raise DimensionError(f"class embeddings must be 2-D, got shape {m.shape}")
        if m.shape[0] < 2:
            raise ConfigError(f"need at least 2 classes, got {m.shape[0]}")
        norms = np.linalg.norm(m, axis=1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise ConfigError("class embedding rows must have unit norm")
        labels = list(labels) if labels is not None else [f"class_{i}" for i in range(m.shape[0])]
        if len(labels) != m.shape[0]:
            raise ConfigError(f"{len(labels)} labels for {m.shape[0]} class rows")
        m.setflags(write=False)
        self.matrix = Tensor(m)
        self.labels = labels
        self._transposed = Tensor(np.ascontiguousarray(m.T))

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def save(self, path) -> None:
        T.save_tnsr(path, self.matrix.data)


def compute_logits(emb: Tensor, classes: ClassEmbeddings) -> Tensor:
    """Cosine similarities between unit-norm embeddings and class rows (``N x c``)."""
    if emb.ndim != 2 or emb.shape[1] != classes.dim:
        raise DimensionError(f"compute_logits: embedding shape {emb.shape} vs class dim {classes.dim}")
    return T.matmul(emb, classes._transposed)


def derive_class_embeddings(
    model: EncoderModel, templates, labels: Sequence[str] | None = None
) -> ClassEmbeddings:
    templates = np.asarray(templates.data if isinstance(templates, Tensor) else templates, dtype=np.float64)
    if templates.ndim != 4 or templates.shape[0] < 2:
        raise ConfigError(f"need one template image per class for at least 2 classes, got {templates.shape}")
    return ClassEmbeddings(encode_image(model, templates).data, labels)


def load_class_embeddings(path, labels: Sequence[str] | None = None, normalize: bool = True) -> ClassEmbeddings:
    """Load a ``c x d`` class matrix from a ``.tnsr`` file, unit-normalising rows by default.

    Rows that already have unit norm (to 1e-12) are kept bit-exact.
    """
    m = T.load_tnsr(path)
    if normalize and m.ndim == 2:
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        m = np.where(np.abs(norms - 1.0) > 1e-12, m / norms, m)
    return ClassEmbeddings(m, labels)


def save_model(model: EncoderModel, directory) -> None:
    """Write one ``.tnsr`` per parameter plus ``manifest.txt`` (key=value)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={v}" for k, v in asdict(model.config).items()]
    lines.append(f"seed={model.seed if model.seed is not None else ''}")
    lines.append("params=" + ",".join(model.params))
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    for name, p in model.params.items():
        T.save_tnsr(directory / f"{name}.tnsr", p.data)


def load_model(directory) -> EncoderModel:
    directory = Path(directory)
    manifest = {}
    for line in (directory / "manifest.txt").read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            manifest[key.strip()] = value.strip()
    config = EncoderConfig.from_strings(manifest)
    seed = int(manifest["seed"]) if manifest.get("seed") else None
    names = manifest["params"].split(",")
    if sorted(names) != sorted(EncoderModel.parameter_names(config)):
        raise ConfigError(f"{directory}: parameter list does not match config")
    params = {name: Tensor(T.load_tnsr(directory / f"{name}.tnsr")) for name in names}
    return EncoderModel(config, params, seed=seed)
