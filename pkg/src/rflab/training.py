"""First-stage rectified flow matching training.

Each step draws ``x0 ~ N(0, I)``, ``t ~ U(t_min, 1 - t_min)`` and a
condition-dropout mask, forms ``x_t = (1 - t) x0 + t x1``, and regresses the
estimator toward ``u = x1 - x0`` with the per-item logit-normal weight
``w(t)``. All draws come from per-step substreams of the run seed.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from rflab.errors import ConfigurationError, DimensionError, DomainError, TrainingError, UsageError
from rflab.estimator import ConditionSeq, EstimatorConfig, LatentSeq, forward
from rflab.rng import StepStreams
from rflab.tensor_core import (
    LayerParams,
    Tensor,
    adam_init,
    adam_step,
    backward,
    clip_grad_norm,
    mean,
    mul,
    square,
    sub,
    sum as tsum,
)

log = logging.getLogger(__name__)

# v(x, t, c, null) -> Tensor; used to swap the estimator for stubs in tests
FieldFn = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], Tensor]


@dataclass
class TrainItem:
    x1: LatentSeq
    c: ConditionSeq


@dataclass
class Dataset:
    """Columnar store of training pairs: x1 [N, L_x, D_x], c [N, L_c, D_c], null [N]."""

    x1: np.ndarray
    c: np.ndarray
    null: np.ndarray | None = None

    def __post_init__(self):
        self.x1 = np.asarray(self.x1, dtype=np.float32)
        self.c = np.asarray(self.c, dtype=np.float32)
        if self.null is None:
            self.null = np.zeros(len(self.x1), dtype=bool)
        self.null = np.asarray(self.null, dtype=bool)
        if not (len(self.x1) == len(self.c) == len(self.null)):
            raise DimensionError(f"dataset columns disagree: {len(self.x1)}, {len(self.c)}, {len(self.null)}")

    def __len__(self) -> int:
        return len(self.x1)

    def __getitem__(self, i: int) -> TrainItem:
        return TrainItem(LatentSeq(self.x1[i]), ConditionSeq(self.c[i], bool(self.null[i])))

    def __iter__(self) -> Iterator[TrainItem]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x1[idx], self.c[idx], self.null[idx])


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 2000
    lr: float = 1e-3
    cond_drop_prob: float = 0.2
    reweight: bool = True
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    t_min: float = 1e-5
    log_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0.0 <= self.cond_drop_prob <= 1.0:
            raise ConfigurationError(f"cond_drop_prob must be in [0, 1], got {self.cond_drop_prob}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigurationError(f"invalid batch_size/steps: {self.batch_size}/{self.steps}")
        if not 0.0 < self.t_min < 0.5:
            raise ConfigurationError(f"t_min must be in (0, 0.5), got {self.t_min}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def interpolate(x0: np.ndarray, x1: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
    """Point on the straight path and its velocity: ``((1-t) x0 + t x1, x1 - x0)``.

    ``t`` may be a scalar or one value per leading batch item.
    """
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise DimensionError(f"interpolate shape mismatch: {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=x0.dtype)
    if np.any(t < 0) or np.any(t > 1):
        raise DomainError(f"t must lie in [0, 1], got {t}")
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    return (1 - t) * x0 + t * x1, x1 - x0


def logit_normal_weight(t):
    """Logit-normal(0, 1) density, used as a per-timestep loss weight.

    ``w(t) = exp(-logit(t)^2 / 2) / (sqrt(2 pi) t (1 - t))`` on the open
    interval (0, 1). Works on scalars and arrays.
    """
    ta = np.asarray(t, dtype=np.float64)
    if np.any(ta <= 0.0) or np.any(ta >= 1.0):
        raise DomainError(f"logit-normal weight is undefined outside (0, 1), got {t}")
    logit = np.log(ta) - np.log1p(-ta)
    w = np.exp(-0.5 * logit * logit) / (math.sqrt(2.0 * math.pi) * ta * (1.0 - ta))
    return float(w) if np.ndim(t) == 0 else w


@dataclass
class RFMDraws:
    x0: np.ndarray
    t: np.ndarray
    drop: np.ndarray


def draw_rfm(streams: StepStreams, shape: tuple[int, ...], cfg: TrainConfig) -> RFMDraws:
    batch = shape[0]
    x0 = streams("noise").standard_normal(shape).astype(np.float32)
    t = streams("time").uniform(cfg.t_min, 1.0 - cfg.t_min, size=batch)
    drop = streams("dropout").random(batch) < cfg.cond_drop_prob
    return RFMDraws(x0, t, drop)


def estimator_field(params: LayerParams, est_cfg: EstimatorConfig) -> FieldFn:
    return lambda x, t, c, null: forward(params, x, t, c, est_cfg, null=null)


def weighted_sq_error(v: Tensor, target: np.ndarray, w: np.ndarray) -> Tensor:
    """``mean_b w_b * ||v_b - target_b||^2`` (squared norm over all non-batch axes)."""
    diff = sub(v, Tensor(target, dtype=v.dtype))
    per_item = tsum(square(diff), axis=tuple(range(1, v.ndim)))
    return mean(mul(per_item, Tensor(w, dtype=v.dtype)))


def rfm_loss(params: LayerParams, est_cfg: EstimatorConfig, x1: np.ndarray, c: np.ndarray,
             null: np.ndarray, streams: StepStreams, cfg: TrainConfig,
             field: FieldFn | None = None) -> Tensor:
    """Weighted RFM loss for one batch (x1 [B, L_x, D_x], c [B, L_c, D_c])."""
    if len(x1) == 0:
        raise UsageError("rfm_loss needs a non-empty batch")
    field = field or estimator_field(params, est_cfg)
    d = draw_rfm(streams, x1.shape, cfg)
    xt, u = interpolate(d.x0, x1, d.t.astype(np.float32))
    w = logit_normal_weight(d.t) if cfg.reweight else np.ones_like(d.t)
    v = field(xt, d.t, c, np.asarray(null, dtype=bool) | d.drop)
    return weighted_sq_error(v, u, w)


@dataclass
class TrainResult:
    params: LayerParams
    losses: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    adam: object = None
    null_drift: float | None = None

    def write_csv(self, path) -> None:
        write_loss_csv(path, self.losses, self.wall_ms)


def write_loss_csv(path, losses, wall_ms) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "wall_ms"])
        for i, (loss, ms) in enumerate(zip(losses, wall_ms)):
            writer.writerow([i, repr(float(loss)), f"{ms:.3f}"])


def sample_indices(n: int, streams: StepStreams, batch: int) -> np.ndarray:
    return streams("batch").integers(0, n, size=batch)


def run_training(params: LayerParams, step_loss: Callable[[LayerParams, int], Tensor],
                 cfg: TrainConfig) -> TrainResult:
    """Generic Adam loop shared by first-stage, reflow and distillation training."""
    state = adam_init(params)
    result = TrainResult(params=params, adam=state)
    start = time.perf_counter()
    for step in range(cfg.steps):
        params.zero_grad()
        loss = step_loss(params, step)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step} (lr={cfg.lr})")
        backward(loss)
        grads = {k: t.grad for k, t in params.items() if t.grad is not None}
        grads, _ = clip_grad_norm(grads, cfg.clip_norm)
        adam_step(params, grads, state, cfg.lr, cfg.betas, cfg.eps)
        result.losses.append(value)
        result.wall_ms.append((time.perf_counter() - start) * 1000.0)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            recent = np.mean(result.losses[-cfg.log_every:])
            log.info("step %d loss %.5f", step + 1, recent)
    params.zero_grad()
    return result


def train(params: LayerParams, est_cfg: EstimatorConfig, dataset: Dataset, cfg: TrainConfig,
          field: FieldFn | None = None) -> TrainResult:
    """Optimize ``params`` in place on the RFM objective; deterministic given ``cfg.seed``."""
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")

    def step_loss(p: LayerParams, step: int) -> Tensor:
        streams = StepStreams(cfg.seed, step)
        idx = sample_indices(len(dataset), streams, cfg.batch_size)
        return rfm_loss(p, est_cfg, dataset.x1[idx], dataset.c[idx], dataset.null[idx],
                        streams, cfg, field=field)

    return run_training(params, step_loss, cfg)
