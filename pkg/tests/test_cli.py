import csv
import json

import pytest

from rflab.cli import RunConfig, main
from rflab.errors import ConfigurationError
from rflab.tensor_core.io import load_checkpoint
from rflab.toydata import load_dataset


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path


def _config(tmp, **over):
    cfg = {
        "seed": 3,
        "task": {"kind": "gauss", "samples_per_class": 16},
        "estimator": {"preset": "tiny", "hidden_dim": 16, "heads": 2, "ffn_dim": 16, "layers": 1},
        "train": {"steps": 4, "batch_size": 8},
        "solver": {"steps": 3},
        "guidance": {"gamma": 2.0},
        "reflow": {"num_items": 24, "train": {"steps": 2}, "distill": {"steps": 2}},
        "eval": {"n": 4, "steps": [1, 2], "gammas": [0.0, 1.0, 3.0]},
        "out_dir": str(tmp / "run"),
    }
    cfg.update(over)
    return _write(tmp / "run.json", cfg)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    conf = _config(tmp)
    for cmd in ("train", "reflow-gen", "reflow-train", "distill"):
        assert main([cmd, "--config", str(conf)]) == 0, cmd
    return tmp, conf


def test_gen_data_is_deterministic(tmp_path):
    spec = _write(tmp_path / "spec.json", {"kind": "events", "num_items": 5})
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "a.rfds"), "--seed", "4"]) == 0
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "b.rfds"), "--seed", "4"]) == 0
    assert (tmp_path / "a.rfds").read_bytes() == (tmp_path / "b.rfds").read_bytes()
    side = json.loads((tmp_path / "a.rfds.meta.json").read_text())
    assert side["version"].startswith("rflab ") and side["config"]["seed"] == 4
    assert len(load_dataset(tmp_path / "a.rfds")) == 5


def test_malformed_json_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"kind": "gauss",\n  "sigma": }')
    assert main(["gen-data", "--spec", str(bad), "--out", str(tmp_path / "x.rfds")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_unknown_key_exit_2(tmp_path):
    conf = _config(tmp_path, train={"stepz": 3})
    assert main(["train", "--config", str(conf)]) == 2


def test_missing_config_exit_4(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.json")]) == 4


def test_distill_without_store_exit_4(tmp_path, capsys):
    conf = _config(tmp_path)
    assert main(["distill", "--config", str(conf)]) == 4
    assert "reflow store" in capsys.readouterr().err


def test_dataset_shape_mismatch_exit_5(tmp_path):
    spec = _write(tmp_path / "spec.json", {"kind": "gauss", "dim": 3, "samples_per_class": 2})
    main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "d3.rfds")])
    conf = _config(tmp_path, task={"kind": "gauss", "data": str(tmp_path / "d3.rfds")})
    assert main(["train", "--config", str(conf)]) == 5


def test_run_config_defaults():
    run = RunConfig.from_dict({"seed": 7, "task": {"kind": "events"}})
    assert run.estimator.latent_dim == 4 and run.estimator.cond_dim == 4 and run.estimator.regulate_ratio == 4
    assert run.train.seed == 7 and run.reflow_train.seed == 8 and run.distill_train.seed == 9
    assert run.reflow_train.cond_drop_prob == 0.0 and not run.distill_train.reweight
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"estimator": {"preset": "huge"}})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"sampler": {}})


def test_pipeline_artifacts(pipeline):
    tmp, _ = pipeline
    run = tmp / "run"
    for name in ("stage1.rfck", "reflow.rfck", "distill.rfck"):
        ck = load_checkpoint(run / name)
        assert ck.meta["version"].startswith("rflab ")
        assert (run / (name + ".meta.json")).exists()
        assert (run / name.replace(".rfck", ".loss.csv")).exists()
    s1, rf = load_checkpoint(run / "stage1.rfck"), load_checkpoint(run / "reflow.rfck")
    assert rf.meta["parent"] == s1.meta["id"]
    assert rf.meta["sample_gamma"] == 2.0
    meta = json.loads((run / "reflow_data" / "meta.json").read_text())
    assert meta["count"] == 24 and meta["gamma"] == 2.0 and meta["source"] == s1.meta["id"]


def test_sample_one_step_evals(pipeline, tmp_path):
    tmp, _ = pipeline
    out = tmp_path / "s1"
    assert main(["sample", "--ckpt", str(tmp / "run" / "stage1.rfck"), "--steps", "1", "--n", "8",
                 "--gamma", "2", "--out", str(out)]) == 0
    side = json.loads((out / "samples.rfds.meta.json").read_text())
    assert side["field_evals_per_sample"] == 2
    assert (out / "scatter.svg").exists()
    assert load_dataset(out / "samples.rfds").x1.shape == (8, 1, 2)


def test_gamma_one_matches_no_guidance(pipeline, tmp_path):
    tmp, _ = pipeline
    ck = str(tmp / "run" / "stage1.rfck")
    main(["sample", "--ckpt", ck, "--n", "6", "--steps", "4", "--gamma", "1", "--out", str(tmp_path / "a")])
    main(["sample", "--ckpt", ck, "--n", "6", "--steps", "4", "--no-guidance", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "samples.rfds").read_bytes() == (tmp_path / "b" / "samples.rfds").read_bytes()


def test_sample_trajectory_and_threads(pipeline, tmp_path, monkeypatch):
    tmp, _ = pipeline
    ck = str(tmp / "run" / "stage1.rfck")
    main(["sample", "--ckpt", ck, "--n", "300", "--steps", "2", "--trajectory", "--out", str(tmp_path / "one")])
    monkeypatch.setenv("RF_THREADS", "3")
    main(["sample", "--ckpt", ck, "--n", "300", "--steps", "2", "--out", str(tmp_path / "three")])
    assert (tmp_path / "one" / "samples.rfds").read_bytes() == (tmp_path / "three" / "samples.rfds").read_bytes()
    rows = (tmp_path / "one" / "trajectory.csv").read_text().splitlines()
    assert rows[0] == "t,x0,x1" and len(rows) == 4
    assert (tmp_path / "one" / "trajectory.svg").read_text().startswith("<svg")


def test_sample_missing_ckpt_exit_4(tmp_path):
    assert main(["sample", "--ckpt", str(tmp_path / "none.rfck"), "--out", str(tmp_path / "o")]) == 4


def test_sample_task_mismatch_exit_5(pipeline, tmp_path):
    tmp, _ = pipeline
    task = _write(tmp_path / "t.json", {"kind": "gauss", "dim": 3})
    assert main(["sample", "--ckpt", str(tmp / "run" / "stage1.rfck"), "--task", str(task),
                 "--out", str(tmp_path / "o")]) == 5


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_eval_rows_and_determinism(pipeline, tmp_path):
    tmp, _ = pipeline
    ck = str(tmp / "run" / "stage1.rfck")
    assert main(["eval", "--ckpt", ck, "--report", str(tmp_path / "a.csv"), "--dopri5"]) == 0
    main(["eval", "--ckpt", ck, "--report", str(tmp_path / "b.csv"), "--dopri5"])
    a, b = _rows(tmp_path / "a.csv"), _rows(tmp_path / "b.csv")
    assert [r["kind"] for r in a] == ["steps", "steps", "dopri5", "gamma", "gamma", "gamma"]
    assert [r["steps"] for r in a[:2]] == ["1", "2"]
    assert [float(r["gamma"]) for r in a[3:]] == [0.0, 1.0, 3.0]
    assert a[0]["field_evals"] == "2"
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]
    assert strip(a) == strip(b)


def test_bench_report(pipeline, tmp_path):
    tmp, _ = pipeline
    assert main(["bench", "--ckpt", str(tmp / "run" / "distill.rfck"), "--report", str(tmp_path / "b.csv"),
                 "--n", "4", "--repeats", "1"]) == 0
    rows = _rows(tmp_path / "b.csv")
    assert rows[-1]["solver"] == "ratio_25_to_1"
    assert float(rows[-1]["ms_per_sample"]) > 0
    evals = {(r["solver"], r["steps"]): int(r["field_evals"]) for r in rows[:-1]}
    assert evals[("euler", "1")] == 2 and evals[("euler", "25")] == 50


def test_help_lists_every_command(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for cmd in ("gen-data", "train", "reflow-gen", "reflow-train", "distill", "sample", "eval", "bench"):
        assert cmd in out


def test_version(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    assert capsys.readouterr().out.startswith("rflab ")
