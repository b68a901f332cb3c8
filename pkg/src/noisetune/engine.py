"""Test-time noise tuning.

One adaptation episode handles a single test image:

1. draw a noise map from a standard Gaussian and clamp it to ``[-eps, eps]``;
2. add it to every view and clamp the pixels back into ``[0, 1]``;
3. embed all views, score them against the class embeddings, keep the ``K``
   views whose softmax has the lowest entropy;
4. minimise ``alpha * marginal_entropy + beta * pairwise_embedding_distance``
   over those views with signed-gradient steps on the noise, clamping to
   ``[-eps, eps]`` after each step;
5. predict from a temperature-scaled average over the most confident views.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .augment import ViewBatch, generate_views
from .encoder import ClassEmbeddings, EncoderModel, compute_logits, encode_image
from .exceptions import AdaptationError, ConfigError, DimensionError, NonFiniteError, ParameterError
from .metrics import PredictionRecord, self_entropy
from .rng import as_generator
from .tensor import Tensor

__all__ = [
    "AdaptationConfig",
    "StepRecord",
    "AdaptationTrace",
    "NoiseMap",
    "init_noise",
    "zero_noise",
    "perturb_views",
    "select_top_k",
    "row_entropies",
    "entropy_loss",
    "consistency_loss",
    "tnt_objective",
    "adapt",
    "infer",
    "zero_shot_infer",
    "marginal_entropy",
    "run_episode",
]


@dataclass(frozen=True)
class AdaptationConfig:
    epsilon: float = 1.0 / 255.0
    lr: float = 1e-3
    steps: int = 1
    n_views: int = 64
    top_k_fraction: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 7e-3
    use_consistency_loss: bool = True
    use_temperature: bool = True
    use_topk_inference: bool = True
    reuse_last_k: bool = False
    noise_init: str = "gaussian"
    crop_scale: tuple[float, float] = (0.5, 1.0)
    flip_prob: float = 0.5

    def __post_init__(self):
        checks = [
            (self.epsilon > 0, "epsilon must be > 0"),
            (self.lr > 0, "lr must be > 0"),
            (self.steps >= 0, "steps must be >= 0"),
            (self.n_views >= 2, "n_views must be >= 2"),
            (0 < self.top_k_fraction <= 1, "top_k_fraction must be in (0, 1]"),
            (self.tau > 0, "tau must be > 0"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.beta >= 0, "beta must be >= 0"),
            (self.noise_init in ("gaussian", "zero"), "noise_init must be 'gaussian' or 'zero'"),
            (0 <= self.flip_prob <= 1, "flip_prob must be in [0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        object.__setattr__(self, "crop_scale", (float(lo), float(hi)))

    @property
    def top_k(self) -> int:
        return max(1, int(np.floor(self.top_k_fraction * self.n_views)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_scale"] = list(self.crop_scale)
        return d


@dataclass
class StepRecord:
    step: int
    loss: float
    entropy: float
    consistency: float
    top_k: list[int]
    noise_linf: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdaptationTrace:
    steps: list[StepRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    @property
    def last_top_k(self) -> list[int] | None:
        return self.steps[-1].top_k if self.steps else None

    def to_list(self) -> list[dict]:
        return [s.to_dict() for s in self.steps]


@dataclass
class NoiseMap:
    xi: Tensor
    epsilon: float

    @property
    def linf(self) -> float:
        return float(np.abs(self.xi.data).max())


def init_noise(shape: Sequence[int], epsilon: float, seed) -> NoiseMap:
    """Standard Gaussian sample clamped to ``[-epsilon, epsilon]``."""
    if epsilon <= 0:
        raise ParameterError(f"epsilon must be > 0, got {epsilon}")
    raw = as_generator(seed).standard_normal(tuple(shape))
    return NoiseMap(Tensor(np.clip(raw, -epsilon, epsilon), requires_grad=True), epsilon)


def zero_noise(shape: Sequence[int], epsilon: float) -> NoiseMap:
    return NoiseMap(Tensor(np.zeros(tuple(shape)), requires_grad=True), epsilon)


def perturb_views(views: ViewBatch | np.ndarray, noise: NoiseMap | Tensor) -> Tensor:
    """Add the shared noise map to each view and clamp pixels to ``[0, 1]``."""
    x = views.views if isinstance(views, ViewBatch) else np.asarray(views, dtype=np.float64)
    xi = noise.xi if isinstance(noise, NoiseMap) else noise
    if x.ndim != 4 or x.shape[1:] != xi.shape:
        raise DimensionError(f"perturb_views: views {x.shape} vs noise {xi.shape}")
    return T.clamp_gated(T.add(Tensor(x), T.expand(xi, x.shape[0])), 0.0, 1.0)


def _probabilities(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def row_entropies(logits) -> np.ndarray:
    """Self-entropy of ``softmax(row)`` for every row of a logit matrix."""
    p = _probabilities(logits)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


def select_top_k(logits, k: int) -> np.ndarray:
    """Indices (ascending) of the ``k`` rows with lowest softmax entropy; ties go to lower rows."""
    n = np.asarray(logits.data if isinstance(logits, Tensor) else logits).shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"select_top_k: k={k} outside [1, {n}]")
    order = np.argsort(row_entropies(logits), kind="stable")
    return np.sort(order[:k])


def entropy_loss(logits: Tensor, indices) -> Tensor:
    """Entropy of the mean softmax over the selected rows (average first, entropy second)."""
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if idx.size == 0:
        raise ParameterError("entropy_loss: empty index set")
    p = T.mean(T.softmax(T.take(logits, idx, axis=0), axis=1), axis=0)
    return T.scalar_mul(T.sum(T.xlogx(p)), -1.0)


def consistency_loss(embeddings: Tensor, indices) -> Tensor:
    """Sum of L2 distances over ordered pairs ``i != j`` of selected embeddings."""
    idx = [int(i) for i in np.asarray(indices).reshape(-1)]
    if not idx:
        raise ParameterError("consistency_loss: empty index set")
    d = embeddings.shape[1]
    rows = [T.reshape(T.take(embeddings, [i], axis=0), (d,)) for i in idx]
    total = Tensor(np.asarray(0.0))
    for a, ra in enumerate(rows):
        for b, rb in enumerate(rows):
            if a != b:
                total = T.add(total, T.euclidean_distance(ra, rb))
    return total


def tnt_objective(model: EncoderModel, classes: ClassEmbeddings, views, noise, cfg: AdaptationConfig,
                  indices=None):
    """Forward pass and loss at the current noise.

    Returns ``(loss, entropy_term, consistency_term, indices, logits)``. When
    ``indices`` is given the selection is held fixed instead of recomputed.
    """
    emb = encode_image(model, perturb_views(views, noise))
    logits = compute_logits(emb, classes)
    if indices is None:
        indices = select_top_k(logits, cfg.top_k)
    ent = entropy_loss(logits, indices)
    loss = T.scalar_mul(ent, cfg.alpha)
    cons = None
    if cfg.use_consistency_loss:
        cons = consistency_loss(emb, indices)
        loss = T.add(loss, T.scalar_mul(cons, cfg.beta))
    return loss, ent, cons, indices, logits


def adapt(model: EncoderModel, classes: ClassEmbeddings, views: ViewBatch, cfg: AdaptationConfig,
          seed=0, noise: NoiseMap | None = None) -> tuple[NoiseMap, AdaptationTrace]:
    """Run ``cfg.steps`` signed-gradient updates of the noise map.

    ``noise`` overrides the initial noise; otherwise it is drawn from ``seed``
    according to ``cfg.noise_init``.
    """
    shape = views.views.shape[1:]
    if noise is None:
        if cfg.noise_init == "zero":
            noise = zero_noise(shape, cfg.epsilon)
        else:
            noise = init_noise(shape, cfg.epsilon, seed)
    trace = AdaptationTrace()
    xi = noise.xi
    for step in range(cfg.steps):
        xi = Tensor(xi.data.copy(), requires_grad=True)
        try:
            loss, ent, cons, idx, _ = tnt_objective(model, classes, views, xi, cfg)
        except NonFiniteError as exc:
            raise AdaptationError(f"non-finite value at step {step}: {exc}", step, trace) from exc
        if not np.isfinite(loss.data).all():
            raise AdaptationError(f"non-finite loss at step {step}", step, trace)
        T.backward(loss)
        grad = xi.grad if xi.grad is not None else np.zeros_like(xi.data)
        updated = np.clip(xi.data - cfg.lr * np.sign(grad), -cfg.epsilon, cfg.epsilon)
        xi = Tensor(updated, requires_grad=True)
        trace.steps.append(
            StepRecord(
                step=step,
                loss=loss.item(),
                entropy=ent.item(),
                consistency=cons.item() if cons is not None else 0.0,
                top_k=[int(i) for i in idx],
                noise_linf=float(np.abs(updated).max()),
            )
        )
    return NoiseMap(xi, cfg.epsilon), trace


def _view_logits(model, classes, views, noise) -> np.ndarray:
    xi = noise.xi if isinstance(noise, NoiseMap) else noise
    frozen = Tensor(xi.data)  # no graph at inference
    return compute_logits(encode_image(model, perturb_views(views, frozen)), classes).data


def marginal_entropy(model, classes, views, noise, k: int) -> float:
    """Untempered marginal entropy over the ``k`` most confident perturbed views."""
    logits = _view_logits(model, classes, views, noise)
    idx = select_top_k(logits, k)
    return self_entropy(_probabilities(logits[idx]).mean(axis=0))


def infer(model: EncoderModel, classes: ClassEmbeddings, views: ViewBatch, noise: NoiseMap,
          cfg: AdaptationConfig, trace: AdaptationTrace | None = None, true_label: int = -1,
          sample_id: int = 0) -> PredictionRecord:
    logits = _view_logits(model, classes, views, noise)
    if cfg.reuse_last_k and trace is not None and trace.last_top_k is not None:
        idx = np.asarray(trace.last_top_k, dtype=np.intp)
    else:
        idx = select_top_k(logits, cfg.top_k)
    chosen = logits[idx] if cfg.use_topk_inference else logits[:1]
    scaled = chosen / cfg.tau if cfg.use_temperature else chosen
    p = _probabilities(scaled).mean(axis=0)
    untempered = _probabilities(logits[idx]).mean(axis=0)
    diagnostics = {"top_k": [int(i) for i in idx], "entropy_after": self_entropy(untempered)}
    return PredictionRecord.from_probabilities(p, true_label, sample_id, diagnostics)


def zero_shot_infer(model: EncoderModel, classes: ClassEmbeddings, image, true_label: int = -1,
                    sample_id: int = 0) -> PredictionRecord:
    """Single clean forward pass, plain softmax over cosine logits."""
    image = np.asarray(image, dtype=np.float64)
    logits = compute_logits(encode_image(model, image[None]), classes).data
    p = _probabilities(logits)[0]
    ent = self_entropy(p)
    return PredictionRecord.from_probabilities(
        p, true_label, sample_id, {"entropy_before": ent, "entropy_after": ent}
    )


def run_episode(model: EncoderModel, classes: ClassEmbeddings, image, cfg: AdaptationConfig,
                view_seed, noise_seed, true_label: int = -1, sample_id: int = 0) -> PredictionRecord:
    """Full per-sample pipeline: views, noise init, adaptation, inference.

    The record's diagnostics carry the trace, view provenance and the
    marginal entropy before and after adaptation.
    """
    views = generate_views(image, cfg.n_views, view_seed, *cfg.crop_scale, flip_prob=cfg.flip_prob)
    shape = views.views.shape[1:]
    if cfg.noise_init == "zero":
        noise0 = zero_noise(shape, cfg.epsilon)
    else:
        noise0 = init_noise(shape, cfg.epsilon, noise_seed)
    before = marginal_entropy(model, classes, views, noise0, cfg.top_k)
    noise, trace = adapt(model, classes, views, cfg, noise=noise0)
    record = infer(model, classes, views, noise, cfg, trace, true_label, sample_id)
    record.diagnostics.update(
        entropy_before=before,
        trace=trace.to_list(),
        provenance=[r.to_dict() for r in views.provenance],
        noise_linf=noise.linf,
    )
    return record
