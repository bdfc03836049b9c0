"""``rflab`` command line: data generation, the three training stages, sampling,
evaluation and benchmarking.

Exit codes: 0 ok, 1 internal error, 2 config parse, 3 I/O, 4 missing
prerequisite, 5 shape/task mismatch. The only environment variable read is
``RF_THREADS`` (sampling worker count; never changes numeric output).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rflab import __version__
from rflab.errors import (
    CapacityError,
    ConfigurationError,
    DimensionError,
    FormatError,
    PrerequisiteError,
    RFLabError,
)
from rflab.estimator import BASE, LARGE, SMALL, TINY, EstimatorConfig, init_params
from rflab.evaluate import BENCH_COLUMNS, bench, check_task, eval_suite, task_kind
from rflab.metrics import write_report
from rflab.plots import polyline_svg, scatter_svg
from rflab.rectify import (
    distill_train,
    generate_reflow_data,
    load_store,
    reflow_train,
    save_store,
    source_id,
)
from rflab.rng import substream
from rflab.sampler import (
    EstimatorField,
    GuidanceConfig,
    SolverConfig,
    export_trajectory_csv,
    sample_chunked,
    solve,
)
from rflab.tensor_core.io import load_checkpoint, save_checkpoint
from rflab.toydata import (
    GaussTaskSpec,
    event_conditions,
    gauss_conditions,
    generate,
    load_dataset,
    spec_from_dict,
    store_dataset,
)
from rflab.training import Dataset, TrainConfig, train

log = logging.getLogger("rflab")

VERSION = f"rflab {__version__}"
PRESETS = {"tiny": TINY, "small": SMALL, "base": BASE, "large": LARGE}

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_IO, EXIT_PREREQ, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5


# --------------------------------------------------------------------------
# Run configuration
# --------------------------------------------------------------------------

RUN_SECTIONS = {"task", "estimator", "train", "solver", "guidance", "reflow", "eval", "seed", "out_dir"}
REFLOW_KEYS = {"train", "distill", "num_items"}
EVAL_KEYS = {"steps", "gammas", "n", "seed", "dopri5"}


def _strict(d: dict, allowed: set, where: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where} must be a JSON object, got {type(d).__name__}")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    return d


@dataclass
class RunConfig:
    task: object
    data: str | None
    estimator: EstimatorConfig
    train: TrainConfig
    solver: SolverConfig
    guidance: GuidanceConfig
    reflow_train: TrainConfig
    distill_train: TrainConfig
    reflow_items: int | None
    eval: dict
    seed: int
    out_dir: Path
    source: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "RunConfig":
        _strict(raw, RUN_SECTIONS, "run config")
        seed = int(raw.get("seed", 0))
        task_raw = dict(raw.get("task") or {"kind": "gauss"})
        data = task_raw.pop("data", None)
        task_raw.setdefault("seed", seed)
        task = spec_from_dict(task_raw)

        est_raw = dict(_strict(raw.get("estimator", {}), set(EstimatorConfig.__dataclass_fields__) | {"preset"},
                               "estimator"))
        preset = est_raw.pop("preset", "tiny")
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown estimator preset {preset!r}; choose from {sorted(PRESETS)}")
        gauss = isinstance(task, GaussTaskSpec)
        derived = {
            "latent_dim": task.dim,
            "cond_dim": task.num_classes if gauss else task.num_events,
            "regulate_ratio": task.regulate_ratio,
            "max_seq_len": max(64, task.latent_len),
        }
        estimator = EstimatorConfig.from_dict({**PRESETS[preset], **derived, **est_raw})

        train_raw = dict(raw.get("train", {}))
        train_raw.setdefault("seed", seed)
        tcfg = TrainConfig.from_dict(train_raw)

        solver = SolverConfig(**_strict(raw.get("solver", {}), {"kind", "steps", "rtol", "atol", "first_step",
                                                                  "max_steps"}, "solver"))
        guidance = GuidanceConfig(**_strict(raw.get("guidance", {}), {"gamma", "enabled"}, "guidance"))

        reflow = _strict(raw.get("reflow", {}), REFLOW_KEYS, "reflow")
        second_stage = {"cond_drop_prob": 0.0, "seed": seed + 1}
        rtrain = TrainConfig.from_dict({**train_raw, **second_stage, **reflow.get("train", {})})
        dtrain = TrainConfig.from_dict({**train_raw, **second_stage, "seed": seed + 2, "reweight": False,
                                        **reflow.get("distill", {})})

        ev = {"steps": [1, 5, 25], "gammas": [0.0, 1.0, 2.0, 4.0, 8.0], "n": 256, "seed": 1234, "dopri5": False}
        ev.update(_strict(raw.get("eval", {}), EVAL_KEYS, "eval"))

        out_dir = Path(raw.get("out_dir", "runs/default"))
        if base_dir is not None and not out_dir.is_absolute():
            out_dir = base_dir / out_dir
        return cls(task, data, estimator, tcfg, solver, guidance, rtrain, dtrain, reflow.get("num_items"),
                   ev, seed, out_dir, source=raw)

    def resolved(self) -> dict:
        task = self.task.to_dict()
        if self.data is not None:
            task["data"] = self.data
        return {
            "task": task,
            "estimator": self.estimator.to_dict(),
            "train": self.train.to_dict(),
            "solver": {"kind": self.solver.kind, "steps": self.solver.steps, "rtol": self.solver.rtol,
                       "atol": self.solver.atol, "first_step": self.solver.first_step,
                       "max_steps": self.solver.max_steps},
            "guidance": {"gamma": self.guidance.gamma, "enabled": self.guidance.enabled},
            "reflow": {"train": self.reflow_train.to_dict(), "distill": self.distill_train.to_dict(),
                       "num_items": self.reflow_items},
            "eval": dict(self.eval),
            "seed": self.seed,
            "out_dir": str(self.out_dir),
        }

    # artifact locations
    def path(self, name: str) -> Path:
        return self.out_dir / name


STAGE1, REFLOW, DISTILL, STORE = "stage1.rfck", "reflow.rfck", "distill.rfck", "reflow_data"


def parse_json_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise PrerequisiteError(f"config file not found: {path}") from exc
    return json.loads(text)


def load_run_config(path) -> RunConfig:
    return RunConfig.from_dict(parse_json_file(path))


def workers() -> int:
    raw = os.environ.get("RF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigurationError(f"RF_THREADS must be an integer, got {raw!r}") from exc


def write_sidecar(path, config: dict, **extra) -> None:
    doc = {"version": VERSION, "config": config, **extra}
    Path(str(path) + ".meta.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


def require(path: Path, what: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(f"{what} not found: expected {path}")
    return path


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    raw = parse_json_file(args.spec)
    spec = spec_from_dict(raw)
    seed = spec.seed if args.seed is None else args.seed
    ds = generate(spec, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    store_dataset(out, ds)
    write_sidecar(out, {"spec": spec.to_dict(), "seed": seed}, count=len(ds))
    print(f"wrote {len(ds)} items to {out}")
    return EXIT_OK


def _dataset(run: RunConfig) -> Dataset:
    if run.data is not None:
        return load_dataset(require(Path(run.data), "dataset"))
    return generate(run.task, run.task.seed)


def _check_dataset(run: RunConfig, ds: Dataset) -> None:
    want_x = (run.task.latent_len, run.task.dim)
    if len(ds) and tuple(ds.x1.shape[1:]) != want_x:
        raise DimensionError(f"dataset items have shape {ds.x1.shape[1:]}, task expects {want_x}")


def _save_stage(run: RunConfig, name: str, params, result, stage: str, parent: str | None,
                sample_gamma: float, extra: dict | None = None) -> Path:
    run.out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run.path(name)
    ident = source_id(params)
    meta = {"stage": stage, "id": ident, "parent": parent, "version": VERSION,
            "sample_gamma": sample_gamma, "task": run.task.to_dict(), "run": run.resolved(), **(extra or {})}
    save_checkpoint(ckpt, params, run.estimator.to_dict(), meta, result.adam)
    loss_csv = run.path(name.replace(".rfck", ".loss.csv"))
    result.write_csv(loss_csv)
    write_sidecar(ckpt, run.resolved(), stage=stage, id=ident, parent=parent)
    write_sidecar(loss_csv, run.resolved(), stage=stage)
    (run.out_dir / "run.resolved.json").write_text(json.dumps(run.resolved(), indent=2, sort_keys=True))
    losses = result.losses
    if losses:
        print(f"{stage}: {len(losses)} steps, loss {losses[0]:.4f} -> {np.mean(losses[-min(50, len(losses)):]):.4f}")
    print(f"wrote {ckpt}")
    return ckpt


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    ds = _dataset(run)
    _check_dataset(run, ds)
    params = init_params(run.estimator, run.seed)
    result = train(params, run.estimator, ds, run.train)
    _save_stage(run, STAGE1, params, result, "stage1", None, run.guidance.scale)
    return EXIT_OK


def _load_stage(run: RunConfig, name: str, what: str):
    ckpt = load_checkpoint(require(run.path(name), what))
    cfg = EstimatorConfig.from_dict(ckpt.config)
    if cfg != run.estimator:
        raise DimensionError(f"{name} was trained with estimator {cfg.to_dict()}, config asks for "
                             f"{run.estimator.to_dict()}")
    return ckpt, cfg


def cmd_reflow_gen(args) -> int:
    run = load_run_config(args.config)
    ckpt, cfg = _load_stage(run, STAGE1, "stage-1 checkpoint")
    ds = _dataset(run)
    _check_dataset(run, ds)
    c = ds.c if run.reflow_items is None else ds.c[: run.reflow_items]
    store = generate_reflow_data(lambda: EstimatorField(ckpt.params, cfg), c,
                                 (run.task.latent_len, run.task.dim), run.solver, run.guidance,
                                 seed=run.seed, source=ckpt.meta.get("id", ""), workers=workers())
    paths = save_store(run.path(STORE), store)
    for p in paths:
        write_sidecar(p, run.resolved())
    print(f"wrote {len(store)} triplets ({store.meta.skipped} skipped) to {run.path(STORE)}")
    return EXIT_OK


def cmd_reflow_train(args) -> int:
    run = load_run_config(args.config)
    ckpt, cfg = _load_stage(run, STAGE1, "stage-1 checkpoint")
    store = load_store(_store_dir(run))
    result = reflow_train(ckpt.params, cfg, store, run.reflow_train)
    _save_stage(run, REFLOW, ckpt.params, result, "reflow", ckpt.meta.get("id"), store.meta.gamma,
                {"reflow_data": store.meta.to_dict(), "null_drift": result.null_drift})
    return EXIT_OK


def _store_dir(run: RunConfig) -> Path:
    require(run.path(STORE) / "meta.json", "reflow store")
    return run.path(STORE)


def cmd_distill(args) -> int:
    run = load_run_config(args.config)
    store_dir = _store_dir(run)
    ckpt, cfg = _load_stage(run, REFLOW, "reflow checkpoint")
    store = load_store(store_dir)
    result = distill_train(ckpt.params, cfg, store, run.distill_train)
    _save_stage(run, DISTILL, ckpt.params, result, "distill", ckpt.meta.get("id"), store.meta.gamma,
                {"reflow_data": store.meta.to_dict()})
    return EXIT_OK


def _load_any(path):
    ckpt = load_checkpoint(require(Path(path), "checkpoint"))
    cfg = EstimatorConfig.from_dict(ckpt.config)
    task_raw = ckpt.meta.get("task")
    if task_raw is None:
        raise ConfigurationError(f"{path} carries no task description in its metadata")
    task = spec_from_dict(task_raw)
    check_task(task, cfg)
    return ckpt, cfg, task


def _task_override(args, task):
    if getattr(args, "task", None) is None:
        return task
    other = spec_from_dict(parse_json_file(args.task))
    return other


def _gamma(args, ckpt) -> GuidanceConfig:
    if args.no_guidance:
        return GuidanceConfig(gamma=1.0, enabled=False)
    gamma = args.gamma if args.gamma is not None else ckpt.meta.get("sample_gamma", 4.5)
    return GuidanceConfig(gamma=gamma)


def _conditions(task, n: int, seed: int) -> np.ndarray:
    if isinstance(task, GaussTaskSpec):
        return gauss_conditions(task, np.arange(n) % task.num_classes)
    return event_conditions(task, n, seed)


def cmd_sample(args) -> int:
    ckpt, cfg, task = _load_any(args.ckpt)
    task = _task_override(args, task)
    check_task(task, cfg)
    solver = SolverConfig(kind="dopri5", rtol=args.rtol, atol=args.atol) if args.dopri5 \
        else SolverConfig(steps=args.steps)
    g = _gamma(args, ckpt)
    c = _conditions(task, args.n, args.seed)
    x0 = substream(args.seed, 0, "sample.noise").standard_normal(
        (args.n, task.latent_len, task.dim)).astype(np.float32)
    fields: list[EstimatorField] = []

    def factory():
        fields.append(EstimatorField(ckpt.params, cfg))
        return fields[-1]

    x = sample_chunked(factory, x0, c, solver, g, workers=workers())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store_dataset(out / "samples.rfds", Dataset(x, c))
    info = {"ckpt": str(args.ckpt), "ckpt_id": ckpt.meta.get("id"), "solver": solver.kind,
            "steps": solver.steps if solver.kind == "euler" else None, "gamma": g.scale, "n": args.n,
            "seed": args.seed, "field_evals_per_sample": fields[0].evals if fields else 0}
    write_sidecar(out / "samples.rfds", ckpt.meta.get("run", {}), **info)
    if args.trajectory:
        k = min(args.n, 16)
        traced = SolverConfig(kind=solver.kind, steps=solver.steps, rtol=solver.rtol, atol=solver.atol,
                              record_trajectory=True)
        _, traj = solve(EstimatorField(ckpt.params, cfg), x0[:k], c[:k], traced, g)
        export_trajectory_csv(out / "trajectory.csv", traj)
        write_sidecar(out / "trajectory.csv", ckpt.meta.get("run", {}), **info)
        states = np.stack(traj.states)  # [T, k, L, D]
        polyline_svg(out / "trajectory.svg", [states[:, i, 0, :] for i in range(k)])
    if task.dim >= 2 and isinstance(task, GaussTaskSpec):
        ref = generate(task, task.seed).x1
        scatter_svg(out / "scatter.svg", [ref[:, 0], x[:, 0]], ["#bbbbbb", "#d62728"])
    print(f"wrote {args.n} samples to {out / 'samples.rfds'} "
          f"({info['field_evals_per_sample']} field evaluations per sample)")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt, cfg, task = _load_any(args.ckpt)
    ev = dict(ckpt.meta.get("run", {}).get("eval", {}))
    if args.config:
        ev.update(load_run_config(args.config).eval)
    gamma = _gamma(args, ckpt).scale
    rows = eval_suite(ckpt.params, cfg, task,
                      steps_grid=tuple(ev.get("steps", (1, 5, 25))),
                      gamma_grid=tuple(ev.get("gammas", (0.0, 1.0, 2.0, 4.0, 8.0))),
                      gamma=gamma, n=args.n or ev.get("n", 256), seed=ev.get("seed", 1234),
                      dopri5=args.dopri5 or ev.get("dopri5", False), workers=workers())
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, rows)
    write_sidecar(report, ckpt.meta.get("run", {}), ckpt=str(args.ckpt), ckpt_id=ckpt.meta.get("id"),
                  task=task_kind(task))
    print(f"wrote {len(rows)} rows to {report}")
    return EXIT_OK


def cmd_bench(args) -> int:
    import csv

    ckpt, cfg, task = _load_any(args.ckpt)
    rows, ratio = bench(ckpt.params, cfg, task, gamma=_gamma(args, ckpt).scale, n=args.n, repeats=args.repeats)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    with open(report, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "ms_per_sample": f"{row['ms_per_sample']:.5f}"})
        writer.writerow({"solver": "ratio_25_to_1", "steps": "", "field_evals": "", "ms_per_sample": f"{ratio:.3f}"})
    write_sidecar(report, ckpt.meta.get("run", {}), ckpt=str(args.ckpt), ratio_25_to_1=ratio)
    print(f"25-step / 1-step wall-clock ratio: {ratio:.2f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rflab", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=VERSION)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress (loss every log_every steps)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a toy dataset file plus JSON sidecar")
    g.add_argument("--spec", required=True, help="task spec JSON ({'kind': 'gauss'|'events', ...})")
    g.add_argument("--out", required=True, help="output .rfds path")
    g.add_argument("--seed", type=int, default=None, help="override the spec's seed")
    g.set_defaults(fn=cmd_gen_data)

    for name, fn, text in (("train", cmd_train, "stage-1 flow matching training"),
                           ("reflow-gen", cmd_reflow_gen, "sample reflow triplets from the stage-1 model"),
                           ("reflow-train", cmd_reflow_train, "reflow on stored triplets"),
                           ("distill", cmd_distill, "one-step distillation on the reflow triplets")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True, help="run config JSON (see docs/config.md)")
        s.set_defaults(fn=fn)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--ckpt", required=True, help="checkpoint file")
    how = s.add_mutually_exclusive_group()
    how.add_argument("--steps", type=int, default=25, help="Euler steps (default 25)")
    how.add_argument("--dopri5", action="store_true", help="adaptive Dormand-Prince instead of Euler")
    s.add_argument("--rtol", type=float, default=1e-5, help="Dopri5 relative tolerance")
    s.add_argument("--atol", type=float, default=1e-5, help="Dopri5 absolute tolerance")
    s.add_argument("--n", type=int, default=256, help="number of samples")
    s.add_argument("--gamma", type=float, default=None,
                   help="guidance scale (default: the checkpoint's sample_gamma)")
    s.add_argument("--no-guidance", action="store_true", help="conditional field only (same as --gamma 1)")
    s.add_argument("--seed", type=int, default=0, help="noise / condition seed")
    s.add_argument("--task", default=None, help="task spec JSON overriding the checkpoint's task")
    s.add_argument("--trajectory", action="store_true", help="also write trajectory.csv and trajectory.svg")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="step-count and guidance-scale sweep, CSV report")
    e.add_argument("--ckpt", required=True, help="checkpoint file")
    e.add_argument("--report", required=True, help="output CSV")
    e.add_argument("--config", default=None, help="run config whose eval section overrides the checkpoint's")
    e.add_argument("--n", type=int, default=None, help="samples per class (Gauss) or items (Events)")
    e.add_argument("--gamma", type=float, default=None, help="guidance scale for the step sweep")
    e.add_argument("--no-guidance", action="store_true", help="step sweep without guidance")
    e.add_argument("--dopri5", action="store_true", help="add a Dopri5 row")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="per-sample wall clock for Euler 1/5/25 and Dopri5")
    b.add_argument("--ckpt", required=True, help="checkpoint file")
    b.add_argument("--report", required=True, help="output CSV")
    b.add_argument("--n", type=int, default=64, help="batch size per timing run")
    b.add_argument("--repeats", type=int, default=3, help="timing repeats (fastest kept)")
    b.add_argument("--gamma", type=float, default=None, help="guidance scale")
    b.add_argument("--no-guidance", action="store_true", help="time without guidance")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except json.JSONDecodeError as exc:
        print(f"error: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (DimensionError, CapacityError) as exc:
        print(f"error: shape/task mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (FormatError, OSError) as exc:
        print(f"error: I/O: {exc}", file=sys.stderr)
        return EXIT_IO
    except RFLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
