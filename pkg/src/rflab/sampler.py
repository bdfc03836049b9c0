"""ODE sampling from noise (t=0) to data (t=1), with classifier-free guidance.

A *field* is any callable ``field(x, t, c, null) -> ndarray`` with ``x`` shaped
like the state. :class:`EstimatorField` wraps trained parameters and counts
evaluations; tests plug in closed-form stubs.
"""

from __future__ import annotations

import concurrent.futures
import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from rflab.errors import ConfigurationError, SolverError, StiffnessError
from rflab.estimator import EstimatorConfig, forward
from rflab.tensor_core import LayerParams, no_grad

MAX_SNAPSHOTS = 256


class Field(Protocol):
    def __call__(self, x: np.ndarray, t, c, null) -> np.ndarray: ...


class EstimatorField:
    """Inference wrapper around ``forward`` with an evaluation counter."""

    def __init__(self, params: LayerParams, cfg: EstimatorConfig):
        self.params = params
        self.cfg = cfg
        self.evals = 0

    def __call__(self, x, t, c, null=False) -> np.ndarray:
        self.evals += 1
        x = np.asarray(x)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[:1]) if x.ndim == 3 else t
        with no_grad():
            return forward(self.params, x, t, c, self.cfg, null=null).data


class CountingField:
    """Wrap a plain callable and count its evaluations."""

    def __init__(self, fn: Callable):
        self.fn = fn
        self.evals = 0

    def __call__(self, x, t, c, null=False):
        self.evals += 1
        return self.fn(x, t, c, null)


@dataclass(frozen=True)
class SolverConfig:
    kind: str = "euler"
    steps: int = 25
    rtol: float = 1e-5
    atol: float = 1e-5
    record_trajectory: bool = False
    first_step: float = 1.0
    max_steps: int = 100_000

    def __post_init__(self):
        if self.kind not in ("euler", "dopri5"):
            raise ConfigurationError(f"solver kind must be 'euler' or 'dopri5', got {self.kind!r}")
        if self.kind == "euler" and self.steps < 1:
            raise ConfigurationError(f"euler needs steps >= 1, got {self.steps}")
        if self.kind == "dopri5" and (self.rtol <= 0 or self.atol <= 0):
            raise ConfigurationError(f"dopri5 needs positive tolerances, got rtol={self.rtol} atol={self.atol}")


@dataclass(frozen=True)
class GuidanceConfig:
    gamma: float = 4.5
    enabled: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigurationError(f"guidance scale must be >= 0, got {self.gamma}")

    @property
    def scale(self) -> float:
        return float(self.gamma) if self.enabled else 1.0


NO_GUIDANCE = GuidanceConfig(gamma=1.0, enabled=False)


@dataclass
class Trajectory:
    """Recorded solve: ``states[k]`` at ``times[k]``; ``fields[k]`` is the field used
    on the step leaving ``times[k]`` (one fewer than states)."""

    times: list[float] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    fields: list[np.ndarray] = field(default_factory=list)
    batched: bool = False

    def thin(self, limit: int = MAX_SNAPSHOTS) -> "Trajectory":
        n = len(self.states)
        if n <= limit:
            return self
        keep = np.unique(np.round(np.linspace(0, n - 1, limit)).astype(int))
        fields = [self.fields[k] for k in keep if k < len(self.fields)]
        return Trajectory([self.times[k] for k in keep], [self.states[k] for k in keep], fields, self.batched)


def guided_field(field: Field, x, t, c, g: GuidanceConfig, null=None) -> np.ndarray:
    """``gamma v(x,t|c) + (1 - gamma) v(x,t|null)``; the null branch is skipped at gamma = 1."""
    gamma = g.scale
    v_c = field(x, t, c, False if null is None else null)
    if gamma == 1.0:
        return v_c
    v_n = field(x, t, c, True)
    return gamma * v_c + (1.0 - gamma) * v_n


def _check(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise SolverError(f"non-finite state {where}")


def euler_solve(field: Field, x0, c, s: SolverConfig, g: GuidanceConfig = NO_GUIDANCE,
                null=None) -> tuple[np.ndarray, Trajectory | None]:
    """Uniform-grid Euler: ``x <- x + eps v(x, k eps)`` for k = 0..steps-1."""
    if s.kind != "euler":
        raise ConfigurationError(f"euler_solve called with solver kind {s.kind!r}")
    x = np.array(x0, copy=True)
    eps = 1.0 / s.steps
    traj = Trajectory(batched=x.ndim == 3) if s.record_trajectory else None
    for k in range(s.steps):
        t = k / s.steps
        v = guided_field(field, x, t, c, g, null)
        if traj is not None:
            traj.times.append(t)
            traj.states.append(x.copy())
            traj.fields.append(np.array(v, copy=True))
        x = x + eps * v
        _check(x, f"after Euler step {k} (t={t:.4f})")
    if traj is not None:
        traj.times.append(1.0)
        traj.states.append(x.copy())
        traj = traj.thin()
    return x, traj


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B_LOW = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b - bl for b, bl in zip(_B, _B_LOW))

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
PI_BETA = 0.04
PI_ALPHA = 0.2 - 0.75 * PI_BETA
MIN_STEP = 1e-12


def dopri5_solve(field: Field, x0, c, s: SolverConfig, g: GuidanceConfig = NO_GUIDANCE,
                 null=None) -> tuple[np.ndarray, Trajectory | None]:
    """Adaptive Dormand-Prince 5(4) with PI step control; lands exactly on t = 1.

    The whole ``x0`` array (e.g. a batch) is integrated as one system; the
    error norm is the RMS of ``err / (atol + rtol * max(|x|, |x_new|))``.
    """
    if s.kind != "dopri5":
        raise ConfigurationError(f"dopri5_solve called with solver kind {s.kind!r}")

    def f(x, t):
        return np.asarray(guided_field(field, x, t, c, g, null), dtype=np.float64)

    dtype = np.asarray(x0).dtype
    x = np.array(x0, dtype=np.float64, copy=True)
    t = 0.0
    h = min(s.first_step, 1.0)
    prev_err = 1e-4
    k1 = f(x, t)
    traj = Trajectory(batched=x.ndim == 3) if s.record_trajectory else None
    rejected = False
    for _ in range(s.max_steps):
        if t >= 1.0:
            break
        if h < MIN_STEP:
            raise StiffnessError(f"step size underflow (h={h:.3e}) at t={t:.6f}")
        last = t + h >= 1.0
        if last:
            h = 1.0 - t
        ks = [k1]
        for i in range(1, 7):
            xi = x + h * sum(a * k for a, k in zip(_A[i], ks))
            ks.append(f(xi, t + _C[i] * h))
        x_new = x + h * sum(b * k for b, k in zip(_B, ks) if b)
        err = h * sum(e * k for e, k in zip(_E, ks) if e)
        scale = s.atol + s.rtol * np.maximum(np.abs(x), np.abs(x_new))
        norm = float(np.sqrt(np.mean((err / scale) ** 2)))
        if not math.isfinite(norm):
            raise SolverError(f"non-finite error estimate at t={t:.6f}")
        if norm <= 1.0:
            if traj is not None:
                traj.times.append(t)
                traj.states.append(x.astype(dtype))
                traj.fields.append(k1.astype(dtype))
            t = 1.0 if last else t + h
            x = x_new
            _check(x, f"at t={t:.6f}")
            k1 = ks[6]
            if norm == 0.0:
                factor = MAX_FACTOR
            else:
                factor = SAFETY * norm ** (-PI_ALPHA) * prev_err ** PI_BETA
                factor = min(MAX_FACTOR, max(MIN_FACTOR, factor))
            if rejected:
                factor = min(1.0, factor)
            prev_err = max(norm, 1e-4)
            rejected = False
        else:
            factor = max(MIN_FACTOR, SAFETY * norm ** (-0.2))
            rejected = True
        h *= factor
    else:
        raise SolverError(f"dopri5 exceeded {s.max_steps} steps")
    if traj is not None:
        traj.times.append(1.0)
        traj.states.append(x.astype(dtype))
        traj = traj.thin()
    return x.astype(dtype), traj


def solve(field: Field, x0, c, s: SolverConfig, g: GuidanceConfig = NO_GUIDANCE, null=None):
    fn = euler_solve if s.kind == "euler" else dopri5_solve
    return fn(field, x0, c, s, g, null)


def straightness(traj: Trajectory) -> float:
    """Mean over recorded k of ``||v_k - (x_end - x_start)||^2 / ||x_end - x_start||^2``.

    Per sample for batched trajectories, then averaged. A sample whose net
    displacement is exactly zero contributes 0.
    """
    if len(traj.states) < 2:
        raise ConfigurationError("straightness needs at least two states")
    start = np.asarray(traj.states[0], dtype=np.float64)
    end = np.asarray(traj.states[-1], dtype=np.float64)
    axes = tuple(range(1, start.ndim)) if traj.batched else None
    disp = end - start
    denom = np.sum(disp * disp, axis=axes)
    dev = np.mean([np.sum((np.asarray(v, dtype=np.float64) - disp) ** 2, axis=axes)
                   for v in traj.fields], axis=0)
    ratio = np.divide(dev, denom, out=np.zeros_like(np.asarray(dev, dtype=np.float64)),
                      where=np.asarray(denom) > 0)
    return float(np.mean(ratio))


def sample_chunked(field_factory: Callable[[], Field], x0: np.ndarray, c: np.ndarray,
                   s: SolverConfig, g: GuidanceConfig, null=None, chunk: int = 256,
                   workers: int = 1) -> np.ndarray:
    """Solve ``x0`` in fixed-size chunks, optionally on a thread pool.

    The chunk size, not the worker count, fixes the arithmetic, so outputs are
    identical for any ``workers``.
    """
    starts = list(range(0, len(x0), chunk))

    def run(i: int) -> np.ndarray:
        sl = slice(i, i + chunk)
        nl = null if null is None or np.ndim(null) == 0 else null[sl]
        return solve(field_factory(), x0[sl], c[sl], s, g, nl)[0]

    if workers <= 1 or len(starts) <= 1:
        parts = [run(i) for i in starts]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    return np.concatenate(parts) if parts else np.zeros_like(x0)


def export_trajectory_csv(path, traj: Trajectory, max_dims: int = 8, sample: int = 0) -> None:
    """CSV with columns t, x0..x{n}: the first ``max_dims`` flattened dims of one sample."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        first = _sample_state(traj.states[0], traj.batched, sample).ravel()
        n = min(max_dims, first.size)
        writer.writerow(["t"] + [f"x{i}" for i in range(n)])
        for t, state in zip(traj.times, traj.states):
            flat = _sample_state(state, traj.batched, sample).ravel()[:n]
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in flat])


def _sample_state(state: np.ndarray, batched: bool, sample: int) -> np.ndarray:
    return np.asarray(state)[sample] if batched else np.asarray(state)
