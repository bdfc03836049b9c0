import numpy as np
import pytest

import rflab.rectify as rectify
from rflab.errors import SolverError, UsageError
from rflab.estimator import EstimatorConfig, forward, init_params
from rflab.rectify import (
    ReflowMeta,
    ReflowStore,
    distill_loss,
    distill_train,
    generate_reflow_data,
    guided_prediction,
    load_store,
    one_step_sample,
    reflow_loss,
    reflow_train,
    save_store,
    source_id,
)
from rflab.rng import StepStreams
from rflab.sampler import CountingField, GuidanceConfig, SolverConfig
from rflab.tensor_core import Tensor
from rflab.training import TrainConfig, interpolate, logit_normal_weight, weighted_sq_error

CFG = EstimatorConfig(latent_dim=2, cond_dim=3, hidden_dim=16, heads=2, ffn_dim=16, layers=1, max_seq_len=8)


def _perturbed(seed=0):
    p = init_params(CFG, seed)
    p["out_conv.w"].data[...] = np.random.default_rng(seed).normal(0, 0.1, p["out_conv.w"].shape)
    return p


def _store(n=12, seed=0):
    r = np.random.default_rng(seed)
    x0 = r.normal(size=(n, 1, 2)).astype(np.float32)
    x1 = r.normal(size=(n, 1, 2)).astype(np.float32)
    c = np.eye(3, dtype=np.float32)[r.integers(0, 3, n)][:, None, :]
    meta = ReflowMeta(source="t", solver="euler", steps=5, gamma=2.0, seed=seed, count=n)
    return ReflowStore(x0, x1, c, np.zeros(n, bool), meta)


def zero_field(x, t, c, null):
    return np.zeros_like(x)


def test_zero_field_returns_noise():
    c = np.zeros((10, 1, 3), np.float32)
    store = generate_reflow_data(lambda: zero_field, c, (1, 2), SolverConfig(steps=5), GuidanceConfig(4.5), seed=3)
    assert np.array_equal(store.x1hat, store.x0)
    assert store.meta.count == 10 and store.meta.skipped == 0


def test_generation_is_deterministic_and_chunked():
    c = np.random.default_rng(0).normal(size=(40, 1, 3)).astype(np.float32)
    field = lambda x, t, c, null: c[..., :2] - x
    s = SolverConfig(steps=4)
    a = generate_reflow_data(lambda: field, c, (1, 2), s, GuidanceConfig(2.0), seed=9, chunk=16)
    b = generate_reflow_data(lambda: field, c, (1, 2), s, GuidanceConfig(2.0), seed=9, chunk=16, workers=3)
    assert a.x0.tobytes() == b.x0.tobytes() and a.x1hat.tobytes() == b.x1hat.tobytes()
    other = generate_reflow_data(lambda: field, c, (1, 2), s, GuidanceConfig(2.0), seed=10, chunk=16)
    assert not np.array_equal(a.x0, other.x0)


def test_failing_items_are_skipped():
    c = np.zeros((6, 1, 3), np.float32)
    c[2, 0, 0] = 1.0

    def field(x, t, c, null):
        out = np.zeros_like(x)
        out[c[:, 0, 0] > 0] = np.nan
        return out

    store = generate_reflow_data(lambda: field, c, (1, 2), SolverConfig(steps=2), GuidanceConfig(1.0), seed=0)
    assert store.meta.skipped == 1 and len(store) == 5
    assert not store.c[:, 0, 0].any()


def test_guided_prediction_is_affine():
    p = _perturbed()
    st = _store()
    x, t = st.x0, np.full(len(st), 0.3)
    v_c = forward(p, x, t, st.c, CFG, null=np.zeros(len(x), bool)).data
    v_n = forward(p, x, t, st.c, CFG, null=np.ones(len(x), bool)).data
    got = guided_prediction(p, CFG, x, t, st.c, 3.0).data
    assert np.allclose(got, 3 * v_c - 2 * v_n, atol=1e-6)
    assert np.array_equal(guided_prediction(p, CFG, x, t, st.c, 1.0).data, v_c)


def test_reflow_loss_at_gamma_one_is_plain_rfm_on_pairs():
    p = _perturbed()
    st = _store()
    tc = TrainConfig()
    got = reflow_loss(p, CFG, st.x0, st.x1hat, st.c, 1.0, StepStreams(1, 2), tc).item()
    t = StepStreams(1, 2)("time").uniform(tc.t_min, 1 - tc.t_min, size=len(st))
    xt, u = interpolate(st.x0, st.x1hat, t.astype(np.float32))
    v = forward(p, xt, t, st.c, CFG, null=np.zeros(len(st), bool))
    assert got == weighted_sq_error(v, u, logit_normal_weight(t)).item()


def test_straight_stub_gives_zero_loss(monkeypatch):
    st = _store()
    target = st.x1hat - st.x0
    monkeypatch.setattr(rectify, "forward", lambda p, x, t, c, cfg, null=None: Tensor(target))
    assert reflow_loss(None, CFG, st.x0, st.x1hat, st.c, 1.0, StepStreams(0, 0), TrainConfig()).item() == 0.0
    assert distill_loss(None, CFG, st.x0, st.x1hat, st.c, 1.0).item() == 0.0
    assert distill_loss(None, CFG, st.x0, st.x1hat, st.c, 4.5).item() < 1e-10


def test_distill_feeds_t_zero(monkeypatch):
    seen = []

    def spy(p, x, t, c, cfg, null=None):
        seen.append(np.asarray(t))
        return forward(p, x, t, c, cfg, null=null)

    monkeypatch.setattr(rectify, "forward", spy)
    distill_train(_perturbed(), CFG, _store(), TrainConfig(steps=3, batch_size=4, cond_drop_prob=0.0))
    assert len(seen) == 6  # two branches per step at gamma = 2
    assert all(np.all(t == 0.0) for t in seen)


def test_reflow_train_logs_finite_drift():
    res = reflow_train(_perturbed(), CFG, _store(), TrainConfig(steps=4, batch_size=4, cond_drop_prob=0.0))
    assert len(res.losses) == 4
    assert np.isfinite(res.null_drift) and res.null_drift > 0


def test_empty_store_is_refused():
    st = _store()
    empty = ReflowStore(st.x0[:0], st.x1hat[:0], st.c[:0], st.null[:0], st.meta)
    with pytest.raises(UsageError):
        reflow_train(_perturbed(), CFG, empty, TrainConfig(steps=1))


def test_one_step_sample_eval_count():
    x0 = np.ones((3, 1, 2))
    f = CountingField(lambda x, t, c, null: np.full_like(x, 2.0) if not np.all(null) else np.zeros_like(x))
    out = one_step_sample(f, x0, x0, GuidanceConfig(4.5))
    assert f.evals == 2
    assert np.array_equal(out, x0 + 9.0)
    f.evals = 0
    one_step_sample(f, x0, x0, GuidanceConfig(1.0))
    assert f.evals == 1


def test_store_round_trip(tmp_path):
    st = _store(10)
    st.null[4] = True
    paths = save_store(tmp_path / "s", st, shard_size=4)
    assert [p.name for p in paths] == ["shard0.rfck", "shard1.rfck", "shard2.rfck"]
    back = load_store(tmp_path / "s")
    for name in ("x0", "x1hat", "c", "null"):
        assert getattr(back, name).tobytes() == getattr(st, name).tobytes()
    assert back.meta == st.meta


def test_source_id_tracks_params():
    a, b = _perturbed(0), _perturbed(0)
    assert source_id(a) == source_id(b) and len(source_id(a)) == 16
    b["out_conv.w"].data[0, 0, 0] += 1
    assert source_id(a) != source_id(b)


def test_solver_error_type_is_caught_not_swallowed():
    # everything fails: store is empty and every item is counted as skipped
    bad = lambda x, t, c, null: np.full_like(x, np.inf)
    st = generate_reflow_data(lambda: bad, np.zeros((3, 1, 3)), (1, 2), SolverConfig(steps=1),
                              GuidanceConfig(1.0), seed=0)
    assert len(st) == 0 and st.meta.skipped == 3
    assert issubclass(SolverError, RuntimeError)
