"""Experiment orchestration: config, per-sample runs, ablations, reports, gradcheck."""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import DatasetSpec, SyntheticDataset, load_dataset, make_synthetic_shift_dataset
from .encoder import (
    ClassEmbeddings,
    EncoderConfig,
    EncoderModel,
    derive_class_embeddings,
    init_model,
    load_class_embeddings,
    load_model,
)
from .engine import (
    AdaptationConfig,
    run_episode,
    tnt_objective,
    zero_shot_infer,
)
from .exceptions import ConfigError, NoiseTuneError
from .metrics import PredictionRecord, ece
from .rng import derive_seed, stream
from .tensor import Tensor

__all__ = [
    "VARIANTS",
    "VARIANT_NAMES",
    "canonical_variant",
    "ExperimentConfig",
    "RunReport",
    "AblationTable",
    "GradcheckReport",
    "CSV_HEADER",
    "run_experiment",
    "run_ablation",
    "gradcheck",
    "write_samples_csv",
    "read_samples_csv",
    "metrics_from_csv",
]

# flag overrides applied on top of the base AdaptationConfig; ZS skips adaptation
VARIANTS: dict[str, dict | None] = {
    "ZS": None,
    "E": dict(use_consistency_loss=False, use_temperature=False, use_topk_inference=False),
    "E+V": dict(use_consistency_loss=True, use_temperature=False, use_topk_inference=False),
    "E+V+T'": dict(use_consistency_loss=True, use_temperature=True, use_topk_inference=False),
    "E+V+T": dict(use_consistency_loss=True, use_temperature=True, use_topk_inference=True),
}
VARIANT_NAMES = tuple(VARIANTS)
_ALIASES = {"E+V+T′": "E+V+T'", "E+V+T_prime": "E+V+T'"}

CSV_HEADER = ["sample_id", "true_label", "pred_label", "confidence", "entropy_before",
              "entropy_after", "variant", "seed"]

SPLITS = ("shifted", "unshifted", "templates")


def canonical_variant(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {list(VARIANT_NAMES)}")
    return name


def _variant_slug(name: str) -> str:
    return name.replace("+", "_").replace("'", "_prime")


def _strict(cls, d: dict, what: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


def _desk_adaptation() -> AdaptationConfig:
    return AdaptationConfig(n_views=32)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one run.

    ``model_seed`` and ``dataset_seed`` default to streams derived from the
    master ``seed``. Per-sample augmentation and noise always derive from the
    master seed and the sample id, so results do not depend on processing
    order or worker count.
    """

    seed: int = 0
    model: EncoderConfig = field(default_factory=EncoderConfig)
    model_seed: int | None = None
    model_path: str | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    dataset_seed: int | None = None
    dataset_path: str | None = None
    split: str = "shifted"
    adaptation: AdaptationConfig = field(default_factory=_desk_adaptation)
    class_embeddings_path: str | None = None
    variant: str = "E+V+T"
    output: str | None = None
    workers: int = 1
    n_bins: int = 15

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.n_bins < 1:
            raise ConfigError(f"n_bins must be >= 1, got {self.n_bins}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "model" in d:
            d["model"] = _strict(EncoderConfig, d["model"], "model")
        if "dataset" in d:
            d["dataset"] = _strict(DatasetSpec, d["dataset"], "dataset")
        if "adaptation" in d:
            a = dict(d["adaptation"])
            a.setdefault("n_views", 32)
            if "crop_scale" in a:
                a["crop_scale"] = tuple(a["crop_scale"])
            d["adaptation"] = _strict(AdaptationConfig, a, "adaptation")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": vars(self.model).copy(),
            "model_seed": self.model_seed,
            "model_path": self.model_path,
            "dataset": self.dataset.to_dict(),
            "dataset_seed": self.dataset_seed,
            "dataset_path": self.dataset_path,
            "split": self.split,
            # echo the flags the variant actually ran with
            "adaptation": (self.effective_adaptation() or self.adaptation).to_dict(),
            "class_embeddings_path": self.class_embeddings_path,
            "variant": self.variant,
            "output": self.output,
            "workers": self.workers,
            "n_bins": self.n_bins,
        }

    def effective_adaptation(self) -> AdaptationConfig | None:
        """Base adaptation config with this variant's flags applied (``None`` for ZS)."""
        flags = VARIANTS[self.variant]
        return None if flags is None else replace(self.adaptation, **flags)

    def resolved_model_seed(self) -> int:
        return self.model_seed if self.model_seed is not None else derive_seed(self.seed, "model")

    def resolved_dataset_seed(self) -> int:
        return self.dataset_seed if self.dataset_seed is not None else derive_seed(self.seed, "dataset")


def build_model(cfg: ExperimentConfig) -> EncoderModel:
    if cfg.model_path:
        return load_model(cfg.model_path)
    return init_model(cfg.model, seed=cfg.resolved_model_seed())


def build_dataset(cfg: ExperimentConfig) -> SyntheticDataset:
    if cfg.dataset_path:
        return load_dataset(cfg.dataset_path)
    return make_synthetic_shift_dataset(cfg.dataset, seed=cfg.resolved_dataset_seed())


def split_samples(ds: SyntheticDataset, split: str) -> tuple[np.ndarray, np.ndarray]:
    if split == "shifted":
        return ds.images, ds.labels
    if split == "templates":
        return ds.templates, np.arange(ds.n_classes, dtype=np.int64)
    if ds.spec is None or ds.seed is None:
        raise ConfigError("the unshifted split needs a dataset with a recorded spec and seed")
    clean = make_synthetic_shift_dataset(ds.spec.unshifted(), seed=ds.seed)
    return clean.images, clean.labels


def build_classes(cfg: ExperimentConfig, model: EncoderModel, ds: SyntheticDataset) -> ClassEmbeddings:
    if cfg.class_embeddings_path:
        return load_class_embeddings(cfg.class_embeddings_path)
    return derive_class_embeddings(model, ds.templates)


# ---------------------------------------------------------------------------
# per-sample work
# ---------------------------------------------------------------------------

@dataclass
class _Context:
    model: EncoderModel
    classes: ClassEmbeddings
    adaptation: AdaptationConfig | None
    seed: int


_WORKER_CONTEXT: _Context | None = None


def _init_worker(ctx: _Context):
    global _WORKER_CONTEXT
    _WORKER_CONTEXT = ctx


def _episode(ctx: _Context, sample_id: int, image: np.ndarray, label: int) -> PredictionRecord:
    try:
        if ctx.adaptation is None:
            return zero_shot_infer(ctx.model, ctx.classes, image, label, sample_id)
        return run_episode(
            ctx.model, ctx.classes, image, ctx.adaptation,
            stream(ctx.seed, "augment", sample_id), stream(ctx.seed, "noise", sample_id),
            true_label=label, sample_id=sample_id,
        )
    except (NoiseTuneError, ArithmeticError, ValueError) as exc:
        # a failed sample counts as a wrong, zero-confidence prediction
        return PredictionRecord(None, -1, 0.0, int(label), int(sample_id),
                                {"error": f"{type(exc).__name__}: {exc}"})


def _worker_episode(task):
    return _episode(_WORKER_CONTEXT, *task)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _finite_mean(values) -> float | None:
    v = [x for x in values if x is not None and np.isfinite(x)]
    return float(np.mean(v)) if v else None


@dataclass
class RunReport:
    variant: str
    seed: int
    records: list[PredictionRecord]
    top1: float
    ece: float
    mean_entropy_before: float | None
    mean_entropy_after: float | None
    n_errors: int
    model_unchanged: bool
    config: dict
    calibration: dict
    duration_s: float = 0.0

    def rows(self) -> list[dict]:
        out = []
        for r in sorted(self.records, key=lambda r: r.sample_id):
            out.append({
                "sample_id": r.sample_id,
                "true_label": r.true_label,
                "pred_label": r.predicted_label,
                "confidence": r.confidence,
                "entropy_before": r.diagnostics.get("entropy_before", float("nan")),
                "entropy_after": r.diagnostics.get("entropy_after", float("nan")),
                "variant": self.variant,
                "seed": self.seed,
            })
        return out

    def to_dict(self, include_duration: bool = True) -> dict:
        d = {
            "variant": self.variant,
            "seed": self.seed,
            "n_samples": len(self.records),
            "top1": self.top1,
            "ece": self.ece,
            "mean_entropy_before": self.mean_entropy_before,
            "mean_entropy_after": self.mean_entropy_after,
            "n_errors": self.n_errors,
            "errors": {str(r.sample_id): r.diagnostics["error"]
                       for r in self.records if "error" in r.diagnostics},
            "model_unchanged": self.model_unchanged,
            "calibration": self.calibration,
            "config": self.config,
        }
        if include_duration:
            d["duration_s"] = self.duration_s
        return d

    def traces(self) -> list[dict]:
        out = []
        for r in sorted(self.records, key=lambda r: r.sample_id):
            d = r.diagnostics
            out.append({
                "sample_id": r.sample_id,
                "trace": d.get("trace", []),
                "top_k": d.get("top_k"),
                "noise_linf": d.get("noise_linf"),
                "provenance": d.get("provenance"),
                "error": d.get("error"),
            })
        return out

    def save(self, directory) -> None:
        """Write ``samples.csv``, ``report.json`` and ``traces.jsonl`` into ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_samples_csv(directory / "samples.csv", self.rows())
        (directory / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(directory / "traces.jsonl", "w") as fh:
            for t in self.traces():
                fh.write(json.dumps(t, sort_keys=True) + "\n")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def samples_csv_text(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in rows:
        w.writerow([_fmt(row[k]) for k in CSV_HEADER])
    return buf.getvalue()


def write_samples_csv(path, rows: Sequence[dict]) -> None:
    Path(path).write_text(samples_csv_text(rows))


def read_samples_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ConfigError(f"{path}: expected header {CSV_HEADER}, got {reader.fieldnames}")
        rows = []
        for row in reader:
            rows.append({
                "sample_id": int(row["sample_id"]),
                "true_label": int(row["true_label"]),
                "pred_label": int(row["pred_label"]),
                "confidence": float(row["confidence"]),
                "entropy_before": float(row["entropy_before"]),
                "entropy_after": float(row["entropy_after"]),
                "variant": row["variant"],
                "seed": int(row["seed"]),
            })
    return rows


def metrics_from_rows(rows: Sequence[dict], n_bins: int = 15) -> dict:
    """Recompute top-1, ECE and mean entropies from per-sample rows."""
    records = [PredictionRecord(None, r["pred_label"], r["confidence"], r["true_label"], r["sample_id"])
               for r in rows]
    cal = ece(records, n_bins)
    return {
        "n_samples": len(records),
        "top1": cal.top1_accuracy,
        "ece": cal.ece,
        "mean_entropy_before": _finite_mean(r["entropy_before"] for r in rows),
        "mean_entropy_after": _finite_mean(r["entropy_after"] for r in rows),
    }


def metrics_from_csv(path, n_bins: int = 15) -> dict:
    return metrics_from_rows(read_samples_csv(path), n_bins)


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

def run_experiment(
    cfg: ExperimentConfig,
    model: EncoderModel | None = None,
    dataset: SyntheticDataset | None = None,
    classes: ClassEmbeddings | None = None,
    order: Sequence[int] | None = None,
) -> RunReport:
    """Run one variant over every sample of the configured split.

    ``model``, ``dataset`` and ``classes`` may be passed in to share them
    across runs. ``order`` permutes the processing order (results are keyed by
    sample id and do not depend on it).
    """
    start = time.perf_counter()
    model = model if model is not None else build_model(cfg)
    dataset = dataset if dataset is not None else build_dataset(cfg)
    classes = classes if classes is not None else build_classes(cfg, model, dataset)
    images, labels = split_samples(dataset, cfg.split)
    if images.shape[1:] != (model.config.channels, model.config.image_size, model.config.image_size):
        raise ConfigError(f"dataset images {images.shape[1:]} do not match the encoder input size")
    if classes.dim != model.config.embed_dim:
        raise ConfigError(f"class embeddings have dim {classes.dim}, encoder has {model.config.embed_dim}")
    if labels.max() >= classes.n_classes:
        raise ConfigError("dataset labels exceed the number of classes")

    before = model.state_bytes()
    ctx = _Context(model, classes, cfg.effective_adaptation(), cfg.seed)
    ids = list(range(len(labels))) if order is None else [int(i) for i in order]
    tasks = [(i, images[i], int(labels[i])) for i in ids]
    if cfg.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers, initializer=_init_worker,
                                 initargs=(ctx,)) as pool:
            records = list(pool.map(_worker_episode, tasks, chunksize=max(1, len(tasks) // (4 * cfg.workers))))
    else:
        records = [_episode(ctx, *t) for t in tasks]
    records.sort(key=lambda r: r.sample_id)
    unchanged = model.state_bytes() == before
    if not unchanged:
        raise NoiseTuneError("encoder parameters changed during the run")

    cal = ece(records, cfg.n_bins)
    cal_dict = cal.to_dict()
    cal_dict.pop("mean_entropy", None)
    report = RunReport(
        variant=cfg.variant,
        seed=cfg.seed,
        records=records,
        top1=cal.top1_accuracy,
        ece=cal.ece,
        mean_entropy_before=_finite_mean(r.diagnostics.get("entropy_before") for r in records),
        mean_entropy_after=_finite_mean(r.diagnostics.get("entropy_after") for r in records),
        n_errors=sum("error" in r.diagnostics for r in records),
        model_unchanged=unchanged,
        config=cfg.to_dict(),
        calibration=cal_dict,
        duration_s=time.perf_counter() - start,
    )
    if cfg.output:
        report.save(cfg.output)
    return report


@dataclass
class AblationTable:
    reports: dict[str, RunReport]

    def rows(self) -> list[dict]:
        out = []
        for name, rep in self.reports.items():
            a = rep.config["adaptation"]
            out.append({
                "variant": name,
                "top1": rep.top1,
                "ece": rep.ece,
                "use_consistency_loss": None if VARIANTS[name] is None else a["use_consistency_loss"],
                "use_temperature": None if VARIANTS[name] is None else a["use_temperature"],
                "use_topk_inference": None if VARIANTS[name] is None else a["use_topk_inference"],
            })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["variant", "top1", "ece", "use_consistency_loss", "use_temperature", "use_topk_inference"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.rows():
            w.writerow(["" if row[c] is None else _fmt(row[c]) for c in cols])
        return buf.getvalue()


def run_ablation(base_cfg: ExperimentConfig, variants: Sequence[str] = VARIANT_NAMES) -> AblationTable:
    """Run each variant over the same model, dataset and seeds.

    With an ``output`` directory each variant is saved to its own
    subdirectory and the comparison table goes to ``ablation.csv``.
    """
    model = build_model(base_cfg)
    dataset = build_dataset(base_cfg)
    classes = build_classes(base_cfg, model, dataset)
    reports = {}
    for name in variants:
        name = canonical_variant(name)
        out = str(Path(base_cfg.output) / _variant_slug(name)) if base_cfg.output else None
        cfg = replace(base_cfg, variant=name, output=out)
        reports[name] = run_experiment(cfg, model, dataset, classes)
    table = AblationTable(reports)
    if base_cfg.output:
        Path(base_cfg.output).mkdir(parents=True, exist_ok=True)
        (Path(base_cfg.output) / "ablation.csv").write_text(table.to_csv())
    return table


# ---------------------------------------------------------------------------
# gradient self-check
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    op_errors: dict[str, float]
    path_errors: dict[str, float]
    clamp_mask_ok: bool
    op_tolerance: float
    path_tolerance: float
    n_seeds: int
    duration_s: float

    @property
    def failures(self) -> list[str]:
        bad = [k for k, v in self.op_errors.items() if not v <= self.op_tolerance]
        bad += [k for k, v in self.path_errors.items() if not v <= self.path_tolerance]
        if not self.clamp_mask_ok:
            bad.append("clamp_gated boundary mask")
        return bad

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "failures": self.failures,
            "op_errors": self.op_errors,
            "path_errors": self.path_errors,
            "clamp_mask_ok": self.clamp_mask_ok,
            "op_tolerance": self.op_tolerance,
            "path_tolerance": self.path_tolerance,
            "n_seeds": self.n_seeds,
            "duration_s": self.duration_s,
        }


def _op_cases(rng: np.random.Generator) -> dict[str, tuple]:
    """Each case is ``(function of input tensors, list of input arrays)``."""
    def normal(*shape):
        return rng.standard_normal(shape)

    def positive(*shape):
        return rng.uniform(0.5, 2.0, shape)

    def away_from(lo, hi, *shape):
        # values at least 0.05 from either clamp edge
        x = rng.uniform(lo - 1.0, hi + 1.0, shape)
        near = (np.abs(x - lo) < 0.05) | (np.abs(x - hi) < 0.05)
        return np.where(near, (lo + hi) / 2.0, x)

    return {
        "add": (lambda a, b: T.add(a, b), [normal(3, 4), normal(3, 4)]),
        "sub": (lambda a, b: T.sub(a, b), [normal(3, 4), normal(3, 4)]),
        "mul": (lambda a, b: T.mul(a, b), [normal(3, 4), normal(3, 4)]),
        "scalar_mul": (lambda a: T.scalar_mul(a, -1.7), [normal(3, 4)]),
        "log": (lambda a: T.log(a), [positive(3, 4)]),
        "xlogx": (lambda a: T.xlogx(a), [positive(3, 4)]),
        "gelu": (lambda a: T.gelu(a), [normal(3, 4)]),
        "sum": (lambda a: T.sum(a, axis=1), [normal(3, 4)]),
        "mean": (lambda a: T.mean(a, axis=0), [normal(3, 4)]),
        "softmax": (lambda a: T.softmax(a, axis=1), [normal(3, 5)]),
        "l2_normalize": (lambda a: T.l2_normalize(a, axis=1), [normal(3, 4)]),
        "layer_norm": (lambda a, s, b: T.layer_norm(a, s, b), [normal(2, 3, 6), normal(6), normal(6)]),
        "clamp_gated": (lambda a: T.clamp_gated(a, 0.0, 1.0), [away_from(0.0, 1.0, 3, 4)]),
        "euclidean_distance": (lambda a, b: T.euclidean_distance(a, b), [normal(5), normal(5)]),
        "matmul": (lambda a, b: T.matmul(a, b), [normal(3, 4), normal(4, 2)]),
        "matmul_batched": (lambda a, b: T.matmul(a, b), [normal(2, 3, 4), normal(2, 4, 5)]),
        "reshape": (lambda a: T.reshape(a, (4, 3)), [normal(3, 4)]),
        "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [normal(2, 3, 4)]),
        "take": (lambda a: T.take(a, [2, 0, 2], axis=0), [normal(3, 4)]),
        "expand": (lambda a: T.expand(a, 3), [normal(2, 4)]),
    }


def _check_case(fn, arrays, weight_rng) -> float:
    """Max relative error over all inputs of ``sum(W * fn(inputs))``."""
    probe = fn(*[Tensor(a) for a in arrays])
    w = Tensor(weight_rng.standard_normal(probe.shape))

    def scalar(*ts):
        return T.sum(T.mul(fn(*ts), w)) if probe.ndim else T.mul(fn(*ts), w)

    worst = 0.0
    for j in range(len(arrays)):
        inputs = [Tensor(a, requires_grad=(i == j)) for i, a in enumerate(arrays)]
        T.backward(scalar(*inputs))
        analytic = inputs[j].grad

        def f(t, j=j):
            return scalar(*[t if i == j else Tensor(a) for i, a in enumerate(arrays)])

        numeric = T.finite_difference_grad(f, Tensor(arrays[j]), h=1e-5)
        worst = max(worst, T.relative_error(analytic, numeric))
    return worst


def _clamp_mask_ok() -> bool:
    x = Tensor(np.array([-0.5, 0.0, 0.3, 1.0, 1.5]), requires_grad=True)
    T.backward(T.sum(T.clamp_gated(x, 0.0, 1.0)))
    return bool(np.array_equal(x.grad, [0.0, 1.0, 1.0, 1.0, 0.0]))


def _path_error(model: EncoderModel, classes: ClassEmbeddings, views: np.ndarray, xi: np.ndarray,
                cfg: AdaptationConfig, indices=None) -> float:
    """Relative error of d(loss)/d(xi) through encoder, logits and loss, with the selection fixed."""
    t = Tensor(xi, requires_grad=True)
    loss, _, _, idx, _ = tnt_objective(model, classes, views, t, cfg)
    T.backward(loss)
    analytic = t.grad.reshape(-1)

    def f(u):
        return tnt_objective(model, classes, views, u, cfg, indices=idx)[0]

    flat = None if indices is None else list(indices)
    numeric = T.finite_difference_grad(f, Tensor(xi), h=1e-6, indices=flat).data.reshape(-1)
    if flat is not None:
        analytic, numeric = analytic[flat], numeric[flat]
    return T.relative_error(analytic, numeric)


def gradcheck(n_seeds: int = 10, op_tolerance: float = 1e-6, path_tolerance: float = 1e-4,
              full_size_entries: int = 8) -> GradcheckReport:
    """Compare analytic gradients with central differences.

    Every op is checked on random inputs for each seed. The encoder-to-loss
    path is checked with respect to the noise map on a small encoder (all
    entries) and on the default-size encoder (``full_size_entries`` random
    entries per seed). Views are kept away from the pixel clamp edges so the
    objective is smooth at the probe points.
    """
    start = time.perf_counter()
    op_errors: dict[str, float] = {}
    path_errors = {"encoder_to_loss_small": 0.0, "encoder_to_loss_default": 0.0}
    small = EncoderConfig(image_size=8, channels=3, patch_size=4, embed_dim=8, n_blocks=2)
    small_cfg = AdaptationConfig(n_views=4, top_k_fraction=0.5)
    full_cfg = AdaptationConfig(n_views=4, top_k_fraction=0.5)
    for seed in range(n_seeds):
        rng = stream(seed, "gradcheck", "ops")
        wrng = stream(seed, "gradcheck", "weights")
        for name, (fn, arrays) in _op_cases(rng).items():
            op_errors[name] = max(op_errors.get(name, 0.0), _check_case(fn, arrays, wrng))

        for key, ecfg, acfg, n_entries in (
            ("encoder_to_loss_small", small, small_cfg, None),
            ("encoder_to_loss_default", EncoderConfig(), full_cfg, full_size_entries),
        ):
            prng = stream(seed, "gradcheck", key)
            model = init_model(ecfg, seed=seed)
            shape = (ecfg.channels, ecfg.image_size, ecfg.image_size)
            templates = prng.uniform(0.1, 0.9, (3,) + shape)
            classes = derive_class_embeddings(model, templates)
            views = prng.uniform(0.1, 0.9, (acfg.n_views,) + shape)
            xi = np.clip(prng.standard_normal(shape), -acfg.epsilon, acfg.epsilon)
            idx = None
            if n_entries is not None:
                idx = prng.choice(int(np.prod(shape)), size=n_entries, replace=False)
            err = _path_error(model, classes, views, xi, acfg, idx)
            path_errors[key] = max(path_errors[key], err)
    return GradcheckReport(op_errors, path_errors, _clamp_mask_ok(), op_tolerance, path_tolerance,
                           n_seeds, time.perf_counter() - start)
