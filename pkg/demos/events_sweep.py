"""Guidance sweep on the event-alignment task.

    python3 demos/events_sweep.py              # 2000 training steps, a few minutes
    python3 demos/events_sweep.py --quick      # 300 steps

Trains one model, then reports alignment accuracy against chance for each
guidance scale and the wall-clock cost of 1 versus 25 Euler steps.
"""

import argparse
import csv
import json
from pathlib import Path

from rflab.cli import main as rflab


def run(cmd: list[str]) -> None:
    code = rflab(cmd)
    if code:
        raise SystemExit(f"rflab {cmd[0]} failed with exit code {code}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true", help="short training run")
    ap.add_argument("--out", default="runs/events", help="output directory")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    conf = {"seed": 0, "out_dir": str(out), "task": {"kind": "events"},
            "estimator": {"preset": "tiny"},
            "train": {"steps": 300 if args.quick else 2000, "batch_size": 32},
            "eval": {"n": 256, "steps": [1, 25], "gammas": [0, 0.5, 1, 2, 4, 8]}}
    path = out / "run.json"
    path.write_text(json.dumps(conf, indent=2))

    run(["train", "--config", str(path)])
    ck = str(out / "stage1.rfck")
    run(["eval", "--ckpt", ck, "--report", str(out / "eval.csv")])
    print(f"\n{'gamma':>5} {'alignment':>9} {'chance':>7}")
    with open(out / "eval.csv") as fh:
        for r in csv.DictReader(fh):
            if r["kind"] == "gamma":
                print(f"{float(r['gamma']):5.1f} {float(r['alignment']):9.3f} {float(r['chance']):7.3f}")

    print()
    run(["bench", "--ckpt", ck, "--report", str(out / "bench.csv")])


if __name__ == "__main__":
    main()
