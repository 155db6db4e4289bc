"""Training, evaluation, gradient checking and mask export."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses
from .data import (
    EmotionTaxonomy,
    GifSample,
    SamplerConfig,
    SyntheticConfig,
    default_taxonomy,
    derive_category,
    extract_patches,
    generate_synthetic,
    sample_frames,
    split_indices,
)
from .errors import ConfigurationError, NumericAbort
from .heatmap import HeatmapConfig, build_supervision, write_pgm
from .losses import LossWeights
from .model import KavanParams, ModelConfig, forward
from .tensor import Tensor, backward

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    lr: float = 5e-3
    steps: int = 500
    batch_size: int = 16
    clip_norm: float = 0.0  # global gradient-norm cap; 0 disables
    schedule: str = "cosine"  # or "constant"; cosine decays lr to 0 over the run

    def __post_init__(self):
        if self.name not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.name!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown lr schedule {self.schedule!r}")
        if self.lr <= 0 or self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("lr must be > 0, steps >= 0, batch_size >= 1")
        if not np.isfinite(self.clip_norm) or self.clip_norm < 0:
            raise ConfigurationError("clip_norm must be finite and >= 0")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    heatmap: HeatmapConfig = field(default_factory=HeatmapConfig)
    seed: int = 0
    sampling: str = "random"  # frame sampling during training
    shuffle: bool = False
    data: str | None = None
    taxonomy: str | None = None

    def __post_init__(self):
        if self.sampling not in ("random", "center"):
            raise ConfigurationError(f"unknown sampling mode {self.sampling!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {"model": ModelConfig, "loss": LossWeights, "optimizer": OptimizerConfig, "heatmap": HeatmapConfig}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in d.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigurationError(f"config section {key!r} must be an object")
                bad = set(value) - set(sections[key].__dataclass_fields__)
                if bad:
                    raise ConfigurationError(f"unknown keys in {key!r}: {sorted(bad)}")
                try:
                    kwargs[key] = sections[key](**value)
                except (TypeError, ValueError) as exc:
                    raise ConfigurationError(f"invalid {key!r} section: {exc}") from None
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        return asdict(self)

    def check_paths(self) -> None:
        for name in ("data", "taxonomy"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise ConfigurationError(f"{name} path {p} does not exist")


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)
    return norm


def learning_rate(cfg: OptimizerConfig, step: int) -> float:
    if cfg.schedule == "cosine" and cfg.steps > 1:
        return 0.5 * cfg.lr * (1.0 + np.cos(np.pi * step / (cfg.steps - 1)))
    return cfg.lr


def make_optimizer(cfg: OptimizerConfig, params: Sequence[Tensor]):
    return Adam(params, cfg.lr) if cfg.name == "adam" else SGD(params, cfg.lr)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Prepared:
    id: str
    inputs: np.ndarray  # (n, 49, P) patches or (n, 49, D) features
    heatmaps: np.ndarray  # (n, 49)
    intensities: np.ndarray
    category: int


def prepare(samples: Sequence[GifSample], cfg: RunConfig, taxonomy: EmotionTaxonomy) -> list[Prepared]:
    out = []
    for s in samples:
        if cfg.model.inputs == "frames":
            if s.frames is None:
                raise ConfigurationError(f"sample {s.id} has no raw frames")
            inputs = extract_patches(s.frames)
        else:
            if s.features is None:
                raise ConfigurationError(f"sample {s.id} has no precomputed features")
            inputs = s.features.reshape(s.n_frames, -1, s.features.shape[-1])
        heat = np.stack([h.flat for h in build_supervision(s.keypoints, cfg.heatmap)])
        out.append(Prepared(s.id, inputs, heat, s.intensities, derive_category(s.intensities, taxonomy)))
    return out


def assemble(batch: Sequence[Prepared], T: int, mode: str, rng: np.random.Generator | None = None):
    """Stack sampled frames of each example into (B, T, ...) arrays."""
    picks = [sample_frames(p.inputs.shape[0], SamplerConfig(T, mode), rng) for p in batch]
    X = np.stack([p.inputs[idx] for p, idx in zip(batch, picks)])
    H = np.stack([p.heatmaps[idx] for p, idx in zip(batch, picks)])
    Y = np.stack([p.intensities for p in batch])
    cats = np.array([p.category for p in batch], dtype=np.int64)
    return X, H, Y, cats


def objective(params: KavanParams, cfg: RunConfig, X, H, Y, cats):
    """Forward pass and total loss; returns (loss tensor, component floats, output)."""
    out = forward(params, cfg.model, X)
    parts: dict = {}
    L_E = losses.emotion_loss(out.intensities, out.logits, (Y, cats), cfg.loss, parts=parts)
    L_kp = losses.keypoint_loss(out.masks, [H[:, t] for t in range(H.shape[1])])
    total = losses.total_loss(L_E, L_kp, cfg.loss)
    parts["kp"] = L_kp.item()
    parts["total"] = total.item()
    return total, parts, out


# ---------------------------------------------------------------------------
# train / evaluate
# ---------------------------------------------------------------------------


def train(
    cfg: RunConfig,
    dataset: Sequence[GifSample],
    taxonomy: EmotionTaxonomy | None = None,
    history: list | None = None,
    params: KavanParams | None = None,
):
    """Minimize the total loss; returns (params, metrics report on the training set)."""
    if not dataset:
        raise ConfigurationError("training set is empty")
    taxonomy = taxonomy or default_taxonomy()
    prepared = sorted(prepare(dataset, cfg, taxonomy), key=lambda p: p.id)
    params = params or KavanParams.init(cfg.model, cfg.seed)
    opt = make_optimizer(cfg.optimizer, params.parameters())
    rng = np.random.default_rng([cfg.seed, 1])
    order = np.arange(len(prepared))
    bs = min(cfg.optimizer.batch_size, len(prepared))
    cursor = len(prepared)  # forces a fresh epoch at step 0
    for step in range(cfg.optimizer.steps):
        if cursor + bs > len(order):
            order = rng.permutation(len(prepared)) if cfg.shuffle else np.arange(len(prepared))
            cursor = 0
        batch = [prepared[i] for i in order[cursor : cursor + bs]]
        cursor += bs
        X, H, Y, cats = assemble(batch, cfg.model.frames, cfg.sampling, rng)
        loss, parts, _ = objective(params, cfg, X, H, Y, cats)
        if not all(np.isfinite(v) for v in parts.values()):
            raise NumericAbort(step, parts)
        params.zero_grad()
        backward(loss)
        clip_gradients(opt.params, cfg.optimizer.clip_norm)
        opt.lr = learning_rate(cfg.optimizer, step)
        opt.step()
        if history is not None:
            history.append({"step": step, **parts})
        if step % 50 == 0:
            log.info("step %d %s", step, " ".join(f"{k}={v:.5f}" for k, v in parts.items()))
    report = metrics_report([evaluate_prepared(params, cfg, prepared)])
    return params, report


def dataset_loss(params: KavanParams, cfg: RunConfig, prepared: Sequence[Prepared]) -> dict:
    """Loss components over a whole prepared set with center-sampled frames."""
    X, H, Y, cats = assemble(prepared, cfg.model.frames, "center")
    _, parts, _ = objective(params, cfg, X, H, Y, cats)
    return parts


def predict(params: KavanParams, cfg: RunConfig, prepared: Sequence[Prepared], chunk: int = 64):
    """Center-sampled forward over a dataset; returns numpy predictions and masks."""
    preds, logits, masks = [], [], []
    for start in range(0, len(prepared), chunk):
        X, _, _, _ = assemble(prepared[start : start + chunk], cfg.model.frames, "center")
        out = forward(params, cfg.model, X)
        preds.append(out.intensities.data)
        logits.append(out.logits.data)
        masks.append(np.stack([m.data for m in out.masks], axis=1))
    return np.concatenate(preds), np.concatenate(logits), np.concatenate(masks)


def compute_metrics(pred, logits, masks, prepared: Sequence[Prepared], T: int) -> dict:
    """Metrics from raw predictions; usable with injected predictions."""
    _, H, Y, cats = assemble(prepared, T, "center")
    per_nmse = losses.nmse_value(pred, Y)
    ranks = [losses.rank_violations(p, y) for p, y in zip(pred, Y)]
    kp = ((np.asarray(masks) - H) ** 2).sum(axis=(1, 2))
    return {
        "accuracy": float(np.mean(np.argmax(logits, axis=1) == cats)),
        "nmse": float(per_nmse.mean()),
        "nmse_std": float(per_nmse.std()),
        "mean_rank_violations": float(np.mean(ranks)),
        "kp_loss": float(kp.mean()),
        "n": len(prepared),
    }


def evaluate_prepared(params: KavanParams, cfg: RunConfig, prepared: Sequence[Prepared]) -> dict:
    pred, logits, masks = predict(params, cfg, prepared)
    return compute_metrics(pred, logits, masks, prepared, cfg.model.frames)


def evaluate(params: KavanParams, dataset: Sequence[GifSample], taxonomy: EmotionTaxonomy | None = None, cfg: RunConfig | None = None) -> dict:
    cfg = cfg or RunConfig()
    taxonomy = taxonomy or default_taxonomy()
    return metrics_report([evaluate_prepared(params, cfg, prepare(dataset, cfg, taxonomy))])


METRIC_KEYS = ("accuracy", "nmse", "nmse_std", "mean_rank_violations", "kp_loss")


def metrics_report(splits: Sequence[dict]) -> dict:
    average = {k: float(np.mean([s[k] for s in splits])) for k in METRIC_KEYS}
    return {"splits": list(splits), "average": average}


def cross_validate(cfg: RunConfig, dataset: Sequence[GifSample], taxonomy=None, n_splits: int = 5) -> dict:
    """Seeded 80/20 splits; test metrics per split and their average."""
    taxonomy = taxonomy or default_taxonomy()
    splits = []
    for k in range(n_splits):
        tr, te = split_indices(len(dataset), seed=cfg.seed * 1000 + k)
        params, _ = train(cfg, [dataset[i] for i in tr], taxonomy)
        m = evaluate_prepared(params, cfg, prepare([dataset[i] for i in te], cfg, taxonomy))
        splits.append({"split": k, **m})
    return metrics_report(splits)


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

TINY_MODEL = ModelConfig(temporal="hs_lstm", tiers=2, node_size=1, frames=2, D=4, d=4)


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst_parameter: str
    n_checked: int
    runtime: float
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


GRAD_FLOOR = 1e-5


def relative_error(analytic: float, numeric: float, floor: float = GRAD_FLOOR) -> float:
    """|a - n| / max(|a|, |n|, floor).

    Central differences at h=1e-5 carry roundoff of about |loss| * 1e-11, so
    gradients smaller than ``floor`` are compared on an absolute scale.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(
    cfg: RunConfig | None = None, h: float = 1e-5, batch: int = 2, probe_scale: float = 0.5
) -> GradcheckReport:
    """Central differences on every parameter element of a tiny model.

    Parameters are redrawn uniformly in [-probe_scale, probe_scale]; the
    training init leaves attention gradients near 1e-9, below what finite
    differences can resolve.
    """
    cfg = cfg or RunConfig(model=TINY_MODEL, seed=0)
    start = time.perf_counter()
    samples = generate_synthetic(batch, SyntheticConfig(seed=cfg.seed + 11, min_frames=4, max_frames=4))
    prepared = prepare(samples, cfg, default_taxonomy())
    X, H, Y, cats = assemble(prepared, cfg.model.frames, "center")
    params = KavanParams.init(cfg.model, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 2])
    for _, p in params.named_parameters():
        p.data = rng.uniform(-probe_scale, probe_scale, p.shape)

    loss, _, _ = objective(params, cfg, X, H, Y, cats)
    params.zero_grad()
    backward(loss)

    worst, worst_name, n = 0.0, "", 0
    for name, p in params.named_parameters():
        analytic = p.grad.copy()
        base = p.data
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            p.data = plus
            fp = objective(params, cfg, X, H, Y, cats)[0].item()
            p.data = minus
            fm = objective(params, cfg, X, H, Y, cats)[0].item()
            p.data = base
            err = relative_error(analytic[idx], (fp - fm) / (2 * h))
            n += 1
            if err > worst:
                worst, worst_name = err, f"{name}{list(idx)}"
    return GradcheckReport(worst, worst_name, n, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# mask export
# ---------------------------------------------------------------------------


def dump_masks(params: KavanParams, cfg: RunConfig, sample: GifSample, out_dir, taxonomy=None) -> list[Path]:
    """Per frame: one JSON with heatmap and mask, one PGM with both side by side."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prepared = prepare([sample], cfg, taxonomy or default_taxonomy())
    X, H, _, _ = assemble(prepared, cfg.model.frames, "center")
    out = forward(params, cfg.model, X)
    frames = sample_frames(sample.n_frames, SamplerConfig(cfg.model.frames, "center"))
    written = []
    for t, m in enumerate(out.masks):
        heat = H[0, t].reshape(7, 7)
        pred = m.data[0].reshape(7, 7)
        stem = out_dir / f"{sample.id}_t{t:02d}"
        payload = {"frame_index": int(frames[t]), "heatmap": heat.tolist(), "mask": pred.tolist()}
        json_path = stem.with_suffix(".json")
        json_path.write_text(json.dumps(payload))
        pgm_path = stem.with_suffix(".pgm")
        write_pgm(pgm_path, np.hstack([_unit(heat), np.zeros((7, 1)), _unit(pred)]))
        written += [json_path, pgm_path]
    return written


def _unit(grid: np.ndarray) -> np.ndarray:
    span = grid.max() - grid.min()
    return np.zeros_like(grid) if span == 0 else (grid - grid.min()) / span


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = {
    "kavan": {},
    "uniform_mask": {"model": {"attention": "uniform"}, "loss": {"w_kp": 0.0}},
    "plain_lstm": {"model": {"temporal": "plain_lstm"}},
}


def variant_config(base: RunConfig, overrides: dict) -> RunConfig:
    d = base.to_dict()
    for section, values in overrides.items():
        d[section] = {**d[section], **values}
    return RunConfig.from_dict(d)


# At margin 0 the summed rank hinge is smallest when all predictions are
# equal, and on 200 samples that pull wins over nMSE before useful features
# form. The larger set also needs more updates than the overfit default.
ABLATION_BASE = RunConfig(
    loss=LossWeights(rank_margin=0.05),
    optimizer=OptimizerConfig(steps=1000),
)


def ablation_study(
    base: RunConfig = ABLATION_BASE,
    seeds: Sequence[int] = range(5),
    n_train: int = 200,
    n_test: int = 50,
    variants: dict = ABLATION_VARIANTS,
) -> dict:
    """Test metrics per seed for each variant on fresh synthetic data."""
    taxonomy = default_taxonomy()
    results: dict = {name: [] for name in variants}
    for seed in seeds:
        data = generate_synthetic(n_train + n_test, SyntheticConfig(seed=seed), taxonomy)
        train_set, test_set = data[:n_train], data[n_train:]
        for name, overrides in variants.items():
            cfg = RunConfig.from_dict({**variant_config(base, overrides).to_dict(), "seed": seed})
            params, _ = train(cfg, train_set, taxonomy)
            m = evaluate_prepared(params, cfg, prepare(test_set, cfg, taxonomy))
            log.info("seed %d %s %s", seed, name, m)
            results[name].append(m)
    return results
