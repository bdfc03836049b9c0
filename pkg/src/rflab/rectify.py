"""Reflow and one-step distillation with the guided vector field.

Reflow data: for every training condition, draw fresh noise ``x0'``, solve
the guided ODE to get ``x1_hat`` and store ``(x0', x1_hat, c)``.

Both second-stage objectives regress the *guided combination*
``gamma v(.|c) + (1 - gamma) v(.|null)`` of a single network:

* reflow:  ``w(t) ||v_cfg(x_t, t | c) - (x1_hat - x0')||^2`` at
  ``x_t = (1 - t) x0' + t x1_hat`` (noise is never resampled),
* distill: ``||x0' + v_cfg(x0', 0 | c) - x1_hat||^2`` (t fixed at 0,
  unweighted, on the same triplets).

Condition dropout is off in both stages. Because only the combination is
trained, the resulting checkpoint must be sampled at the same gamma; the
stage records it as ``sample_gamma`` in its metadata.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from rflab.errors import SolverError, UsageError
from rflab.estimator import EstimatorConfig, forward
from rflab.rng import StepStreams, substream
from rflab.sampler import Field, GuidanceConfig, SolverConfig, solve
from rflab.tensor_core import LayerParams, Tensor, add, mul, no_grad
from rflab.tensor_core.io import load_tensors, save_tensors
from rflab.training import (
    TrainConfig,
    TrainResult,
    interpolate,
    logit_normal_weight,
    run_training,
    sample_indices,
    weighted_sq_error,
)

log = logging.getLogger(__name__)

GENERATION_CHUNK = 256


@dataclass
class ReflowTriplet:
    x0_prime: np.ndarray
    x1_hat: np.ndarray
    c: np.ndarray
    null: bool = False


@dataclass
class ReflowMeta:
    source: str = ""
    solver: str = "euler"
    steps: int = 25
    gamma: float = 4.5
    seed: int = 0
    count: int = 0
    skipped: int = 0
    rtol: float | None = None
    atol: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ReflowStore:
    """Columnar triplets: x0 [N, L_x, D_x], x1hat [N, L_x, D_x], c [N, L_c, D_c], null [N]."""

    x0: np.ndarray
    x1hat: np.ndarray
    c: np.ndarray
    null: np.ndarray
    meta: ReflowMeta = field(default_factory=ReflowMeta)

    def __len__(self) -> int:
        return len(self.x0)

    def __getitem__(self, i: int) -> ReflowTriplet:
        return ReflowTriplet(self.x0[i], self.x1hat[i], self.c[i], bool(self.null[i]))


def source_id(params: LayerParams) -> str:
    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def generate_reflow_data(field_factory: Callable[[], Field], c: np.ndarray, latent_shape: tuple[int, int],
                         solver: SolverConfig, g: GuidanceConfig, seed: int,
                         null: np.ndarray | None = None, source: str = "",
                         chunk: int = GENERATION_CHUNK, workers: int = 1) -> ReflowStore:
    """Sample ``x1_hat`` from fresh noise for every condition with the guided field.

    Noise for chunk ``i`` comes from substream ``(seed, i, "reflow.noise")``.
    A chunk whose solve fails is retried item by item; failing items are
    dropped and counted in ``meta.skipped``.
    """
    c = np.asarray(c, dtype=np.float32)
    n = len(c)
    null = np.zeros(n, dtype=bool) if null is None else np.asarray(null, dtype=bool)
    starts = list(range(0, n, chunk))

    def run(ci: int):
        lo = starts[ci]
        sl = slice(lo, lo + chunk)
        cc = c[sl]
        x0 = substream(seed, ci, "reflow.noise").standard_normal((len(cc),) + tuple(latent_shape)).astype(np.float32)
        try:
            x1, _ = solve(field_factory(), x0, cc, solver, g, null[sl])
            return x0, x1, np.arange(lo, lo + len(cc))
        except SolverError:
            keep_x0, keep_x1, keep_idx = [], [], []
            for j in range(len(cc)):
                try:
                    x1j, _ = solve(field_factory(), x0[j:j + 1], cc[j:j + 1], solver, g, null[sl][j:j + 1])
                except SolverError as exc:
                    log.warning("reflow item %d skipped: %s", lo + j, exc)
                    continue
                keep_x0.append(x0[j:j + 1])
                keep_x1.append(x1j)
                keep_idx.append(lo + j)
            if not keep_idx:
                return x0[:0], x0[:0], np.zeros(0, dtype=int)
            return np.concatenate(keep_x0), np.concatenate(keep_x1), np.array(keep_idx)

    if workers > 1 and len(starts) > 1:
        import concurrent.futures
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(starts))))
    else:
        parts = [run(i) for i in range(len(starts))]

    shape = (0,) + tuple(latent_shape)
    x0 = np.concatenate([p[0] for p in parts]) if parts else np.zeros(shape, np.float32)
    x1 = np.concatenate([p[1] for p in parts]) if parts else np.zeros(shape, np.float32)
    idx = np.concatenate([p[2] for p in parts]).astype(int) if parts else np.zeros(0, dtype=int)
    meta = ReflowMeta(source=source, solver=solver.kind, steps=solver.steps, gamma=g.scale, seed=seed,
                      count=len(idx), skipped=n - len(idx),
                      rtol=solver.rtol if solver.kind == "dopri5" else None,
                      atol=solver.atol if solver.kind == "dopri5" else None)
    if meta.skipped:
        log.warning("reflow generation skipped %d of %d items", meta.skipped, n)
    return ReflowStore(x0, x1.astype(np.float32), c[idx], null[idx], meta)


def guided_prediction(params: LayerParams, est_cfg: EstimatorConfig, x: np.ndarray, t, c: np.ndarray,
                      gamma: float) -> Tensor:
    """Differentiable ``gamma v(x,t|c) + (1 - gamma) v(x,t|null)``; one branch when gamma = 1."""
    batch = len(x)
    v_c = forward(params, x, t, c, est_cfg, null=np.zeros(batch, dtype=bool))
    if gamma == 1.0:
        return v_c
    v_n = forward(params, x, t, c, est_cfg, null=np.ones(batch, dtype=bool))
    return add(mul(v_c, gamma), mul(v_n, 1.0 - gamma))


def reflow_loss(params: LayerParams, est_cfg: EstimatorConfig, x0: np.ndarray, x1hat: np.ndarray,
                c: np.ndarray, gamma: float, streams: StepStreams, cfg: TrainConfig) -> Tensor:
    t = streams("time").uniform(cfg.t_min, 1.0 - cfg.t_min, size=len(x0))
    xt, u = interpolate(x0, x1hat, t.astype(np.float32))
    w = logit_normal_weight(t) if cfg.reweight else np.ones_like(t)
    v = guided_prediction(params, est_cfg, xt, t, c, gamma)
    return weighted_sq_error(v, u, w)


def distill_loss(params: LayerParams, est_cfg: EstimatorConfig, x0: np.ndarray, x1hat: np.ndarray,
                 c: np.ndarray, gamma: float) -> Tensor:
    t = np.zeros(len(x0))
    v = guided_prediction(params, est_cfg, x0, t, c, gamma)
    return weighted_sq_error(v, x1hat - x0, np.ones(len(x0)))


def _require(store: ReflowStore) -> None:
    if len(store) == 0:
        raise UsageError("reflow store is empty")


def null_probe(params: LayerParams, est_cfg: EstimatorConfig, store: ReflowStore, n: int = 16) -> np.ndarray:
    x = store.x0[:n]
    with no_grad():
        return forward(params, x, np.full(len(x), 0.5), store.c[:n], est_cfg,
                       null=np.ones(len(x), dtype=bool)).data.copy()


def reflow_train(params: LayerParams, est_cfg: EstimatorConfig, store: ReflowStore, cfg: TrainConfig,
                 gamma: float | None = None) -> TrainResult:
    """Second-stage training on stored pairs with the guided regression target."""
    _require(store)
    gamma = store.meta.gamma if gamma is None else gamma
    probe = null_probe(params, est_cfg, store)

    def step_loss(p: LayerParams, step: int) -> Tensor:
        streams = StepStreams(cfg.seed, step)
        idx = sample_indices(len(store), streams, cfg.batch_size)
        return reflow_loss(p, est_cfg, store.x0[idx], store.x1hat[idx], store.c[idx], gamma, streams, cfg)

    result = run_training(params, step_loss, cfg)
    drift = float(np.sqrt(np.mean((null_probe(params, est_cfg, store) - probe) ** 2)))
    log.info("reflow null-branch drift (RMS on probe batch): %.5f", drift)
    result.null_drift = drift
    return result


def distill_train(params: LayerParams, est_cfg: EstimatorConfig, store: ReflowStore, cfg: TrainConfig,
                  gamma: float | None = None) -> TrainResult:
    """One-step distillation on the reflow triplets (field evaluated at t = 0)."""
    _require(store)
    gamma = store.meta.gamma if gamma is None else gamma

    def step_loss(p: LayerParams, step: int) -> Tensor:
        streams = StepStreams(cfg.seed, step)
        idx = sample_indices(len(store), streams, cfg.batch_size)
        return distill_loss(p, est_cfg, store.x0[idx], store.x1hat[idx], store.c[idx], gamma)

    return run_training(params, step_loss, cfg)


def one_step_sample(field: Field, x0: np.ndarray, c: np.ndarray, g: GuidanceConfig) -> np.ndarray:
    """``x0 + v_cfg(x0, 0 | c)``: a single Euler step."""
    return solve(field, x0, c, SolverConfig(kind="euler", steps=1), g)[0]


# --------------------------------------------------------------------------
# Triplet store files
# --------------------------------------------------------------------------

def save_store(directory, store: ReflowStore, shard_size: int = 4096) -> list[Path]:
    """Write ``shard{k}.rfck`` files plus ``meta.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, lo in enumerate(range(0, max(len(store), 1), shard_size)):
        tensors = {}
        for i in range(lo, min(lo + shard_size, len(store))):
            tensors[f"item{i}.x0"] = store.x0[i]
            tensors[f"item{i}.x1hat"] = store.x1hat[i]
            tensors[f"item{i}.c"] = store.c[i]
            tensors[f"item{i}.null"] = np.array([float(store.null[i])], dtype=np.float32)
        path = directory / f"shard{k}.rfck"
        save_tensors(path, tensors)
        paths.append(path)
    meta = {**store.meta.to_dict(), "shards": [p.name for p in paths]}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return paths


def load_store(directory) -> ReflowStore:
    directory = Path(directory)
    meta_raw = json.loads((directory / "meta.json").read_text())
    shards = meta_raw.pop("shards")
    items: dict[int, dict[str, np.ndarray]] = {}
    for name in shards:
        for key, arr in load_tensors(directory / name).items():
            head, part = key.split(".", 1)
            items.setdefault(int(head[4:]), {})[part] = arr
    order = sorted(items)
    meta = ReflowMeta(**meta_raw)
    if not order:
        return ReflowStore(np.zeros((0,)), np.zeros((0,)), np.zeros((0,)), np.zeros(0, dtype=bool), meta)
    return ReflowStore(
        x0=np.stack([items[i]["x0"] for i in order]),
        x1hat=np.stack([items[i]["x1hat"] for i in order]),
        c=np.stack([items[i]["c"] for i in order]),
        null=np.array([items[i]["null"][0] > 0.5 for i in order]),
        meta=meta,
    )
