"""Sampling + scoring harness shared by the CLI, the demos and the acceptance suite.

Gauss tasks are scored by per-class W2 against a fresh ground-truth batch,
Events tasks by matched-filter alignment accuracy.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from rflab.errors import DimensionError
from rflab.estimator import EstimatorConfig
from rflab.metrics import alignment_accuracy, per_class_w2
from rflab.rng import substream
from rflab.sampler import EstimatorField, GuidanceConfig, SolverConfig, sample_chunked
from rflab.tensor_core import LayerParams
from rflab.toydata import GaussTaskSpec, event_conditions, gauss_conditions, gen_gauss


@dataclass
class EvalBatch:
    """Conditions, noise and the reference needed to score one batch of samples."""

    c: np.ndarray
    x0: np.ndarray
    labels: np.ndarray | None = None
    reference: np.ndarray | None = None


def eval_batch(task, n: int, seed: int) -> EvalBatch:
    """``n`` is samples per class for Gauss tasks and item count for Events tasks."""
    if isinstance(task, GaussTaskSpec):
        labels = np.repeat(np.arange(task.num_classes), n)
        c = gauss_conditions(task, labels)
        ref = gen_gauss(task, seed=seed + 1, samples_per_class=n).x1
        shape = (len(labels), task.latent_len, task.dim)
        x0 = substream(seed, 0, "eval.noise").standard_normal(shape).astype(np.float32)
        return EvalBatch(c, x0, labels, ref)
    c = event_conditions(task, n, seed)
    x0 = substream(seed, 0, "eval.noise").standard_normal((n, task.latent_len, task.dim)).astype(np.float32)
    return EvalBatch(c, x0)


def check_task(task, cfg: EstimatorConfig) -> None:
    cond_dim = task.num_classes if isinstance(task, GaussTaskSpec) else task.num_events
    if cfg.latent_dim != task.dim or cfg.cond_dim != cond_dim or cfg.regulate_ratio != task.regulate_ratio:
        raise DimensionError(
            f"checkpoint expects latent_dim={cfg.latent_dim}, cond_dim={cfg.cond_dim}, "
            f"ratio={cfg.regulate_ratio}; task has {task.dim}, {cond_dim}, {task.regulate_ratio}")


@dataclass
class SampleRun:
    x: np.ndarray
    evals_per_sample: int
    wall_ms: float


def run_sampler(params: LayerParams, cfg: EstimatorConfig, batch: EvalBatch, solver: SolverConfig,
                g: GuidanceConfig, workers: int = 1) -> SampleRun:
    fields: list[EstimatorField] = []

    def factory():
        f = EstimatorField(params, cfg)
        fields.append(f)
        return f

    start = time.perf_counter()
    x = sample_chunked(factory, batch.x0, batch.c, solver, g, workers=workers)
    ms = (time.perf_counter() - start) * 1000.0
    return SampleRun(x, max((f.evals for f in fields), default=0), ms)


def score(task, batch: EvalBatch, x: np.ndarray) -> dict:
    if isinstance(task, GaussTaskSpec):
        return {"w2": per_class_w2(x, batch.labels, batch.reference, batch.labels),
                "alignment": math.nan, "chance": math.nan}
    a = alignment_accuracy(x, batch.c, task)
    return {"w2": math.nan, "alignment": a.accuracy, "chance": a.chance}


def eval_suite(params: LayerParams, cfg: EstimatorConfig, task, steps_grid=(1, 5, 25),
               gamma_grid=(0.0, 1.0, 2.0, 4.0, 8.0), gamma: float = 4.5, n: int = 256,
               seed: int = 1234, dopri5: bool = False, workers: int = 1) -> list[dict]:
    """One row per Euler step count (at ``gamma``), optionally one Dopri5 row,
    and one row per guidance scale (25 Euler steps)."""
    check_task(task, cfg)
    batch = eval_batch(task, n, seed)
    rows = []
    g = GuidanceConfig(gamma)
    solvers = [("steps", s, SolverConfig(steps=s)) for s in steps_grid]
    if dopri5:
        solvers.append(("dopri5", "", SolverConfig(kind="dopri5")))
    for kind, steps, solver in solvers:
        run = run_sampler(params, cfg, batch, solver, g, workers)
        rows.append({"kind": kind, "steps": steps, "gamma": g.scale, **score(task, batch, run.x),
                     "field_evals": run.evals_per_sample, "wall_ms": run.wall_ms})
    for gm in gamma_grid:
        gg = GuidanceConfig(gm)
        run = run_sampler(params, cfg, batch, SolverConfig(steps=25), gg, workers)
        rows.append({"kind": "gamma", "steps": 25, "gamma": gg.scale, **score(task, batch, run.x),
                     "field_evals": run.evals_per_sample, "wall_ms": run.wall_ms})
    return rows


BENCH_COLUMNS = ["solver", "steps", "field_evals", "ms_per_sample"]


def bench(params: LayerParams, cfg: EstimatorConfig, task, gamma: float = 4.5, n: int = 64,
          repeats: int = 3, seed: int = 0) -> tuple[list[dict], float]:
    """Per-sample wall clock for Euler {1, 5, 25} and Dopri5; returns rows and the 25/1 ratio.

    Each configuration is timed ``repeats`` times and the fastest run kept.
    """
    check_task(task, cfg)
    c = (gauss_conditions(task, np.arange(n) % task.num_classes) if isinstance(task, GaussTaskSpec)
         else event_conditions(task, n, seed))
    x0 = substream(seed, 0, "bench.noise").standard_normal((n, task.latent_len, task.dim)).astype(np.float32)
    batch = EvalBatch(c, x0)
    g = GuidanceConfig(gamma)
    rows = []
    for label, solver in (("euler", SolverConfig(steps=1)), ("euler", SolverConfig(steps=5)),
                          ("euler", SolverConfig(steps=25)), ("dopri5", SolverConfig(kind="dopri5"))):
        runs = [run_sampler(params, cfg, batch, solver, g) for _ in range(repeats)]
        best = min(r.wall_ms for r in runs)
        rows.append({"solver": label, "steps": solver.steps if label == "euler" else "",
                     "field_evals": runs[0].evals_per_sample, "ms_per_sample": best / n})
    ratio = rows[2]["ms_per_sample"] / rows[0]["ms_per_sample"]
    return rows, ratio


def task_kind(task) -> str:
    return "gauss" if isinstance(task, GaussTaskSpec) else "events"
