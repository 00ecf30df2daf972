import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from treet.estimator import (Monitor, ReferenceSpec, TrainConfig, TrainingDiverged, bounding_box,
                             build_batch, dv_bound, estimate_te, history_mask, log_mean_exp,
                             make_windows, sample_reference, train_estimator, _result)
from treet.processes import gen_benchmark

TINY = dict(batch_size=32, learning_rate=5e-3, max_epochs=3, samples_per_epoch=2000, memory=2,
            parallel=10, norm="residual", embed_dim=8, head_dim=8, ff_dim=16, seed=5)


@given(st.floats(-50, 50), st.integers(0, 2 ** 32 - 1))
def test_dv_constant_shift_invariance(c, seed):
    rng = np.random.default_rng(seed)
    j = torch.as_tensor(rng.standard_normal(200))
    r = torch.as_tensor(rng.standard_normal(300))
    assert abs(float(dv_bound(j + c, r + c)) - float(dv_bound(j, r))) < 1e-9
    assert abs(_result((j + c).numpy(), (r + c).numpy()).value - _result(j.numpy(), r.numpy()).value) < 1e-9


def test_log_mean_exp_is_stable():
    t = torch.tensor([1000.0, 1000.0], dtype=torch.float64)
    assert float(log_mean_exp(t)) == 1000.0
    small = torch.tensor([0.1, -0.3, 2.0], dtype=torch.float64)
    assert math.isclose(float(log_mean_exp(small)), math.log(np.mean(np.exp(small.numpy()))))


def test_dv_bound_is_tight_at_log_ratio():
    # samples from N(1, 1) against N(0, 1): the optimal potential is y - 1/2
    rng = np.random.default_rng(0)
    p = torch.as_tensor(rng.normal(1, 1, 200_000))
    q = torch.as_tensor(rng.normal(0, 1, 200_000))
    assert abs(float(dv_bound(p - 0.5, q - 0.5)) - 0.5) < 0.02
    assert float(dv_bound(0.5 * p, 0.5 * q)) < 0.5


@given(st.integers(20, 300), st.integers(0, 6), st.integers(1, 12))
def test_windows_tile_series_once(n, memory, parallel):
    length = memory + parallel
    if n < length:
        return
    a = np.arange(n, dtype=float)
    w = make_windows(a, length, memory)
    outputs = w[:, memory:, 0].ravel()
    assert np.array_equal(outputs, np.arange(memory, memory + len(outputs)))
    assert np.array_equal(w[1:, :memory, 0], w[:-1, -memory:, 0]) if memory else True


def test_short_series_rejected():
    with pytest.raises(ValueError):
        make_windows(np.zeros(5), 6, 2)


def test_history_mask():
    m = history_mask(6, 5, 2)
    assert m[:, 0].tolist() == [0, 0, 0, 1, 1, 1]
    assert history_mask(6, 5, 5) is None and history_mask(6, 5, None) is None
    with pytest.raises(ValueError):
        history_mask(8, 5, 2)


def test_build_batch_layout():
    rng = np.random.default_rng(0)
    yw, xw = rng.standard_normal((4, 7, 1)), rng.standard_normal((4, 7, 1))
    ref = rng.standard_normal((4, 4, 1))
    b = build_batch(yw, xw, ref, 3)
    assert b.xy_in.shape == (4, 7, 2)
    assert np.array_equal(b.xy_in[..., 0], yw[..., 0]) and np.array_equal(b.xy_in[..., 1], xw[..., 0])
    assert np.array_equal(b.xy_ref[..., 0], ref[..., 0]) and np.array_equal(b.xy_ref[..., 1], xw[:, 3:, 0])


def test_build_batch_lag_truncation():
    yw, xw = np.ones((2, 6, 1)), np.ones((2, 6, 1))
    b = build_batch(yw, xw, np.zeros((2, 1, 1)), 5, lags=(3, 1))
    assert b.y_in[0, :, 0].tolist() == [0, 0, 1, 1, 1, 1]
    assert b.xy_in[0, :, 1].tolist() == [0, 0, 0, 0, 1, 1]


@given(st.integers(0, 2 ** 32 - 1))
def test_reference_lies_in_batch_box(seed):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((8, 12, 2)) * [1.0, 5.0]
    ref = sample_reference(y, ReferenceSpec(), rng, 4)
    lo, hi = y.reshape(-1, 2).min(0), y.reshape(-1, 2).max(0)
    assert ref.shape == (8, 4, 2) and np.all(ref >= lo) and np.all(ref <= hi)


def test_degenerate_box_is_widened():
    with pytest.warns(UserWarning, match="degenerate"):
        lo, hi = bounding_box(np.zeros((4, 3)))
    assert np.all(hi > lo)


def test_fixed_uniform_reference():
    ref = sample_reference(np.zeros((2, 5, 1)), ReferenceSpec("uniform", -2, 3), np.random.default_rng(0))
    assert ref.min() >= -2 and ref.max() <= 3
    with pytest.raises(ValueError):
        ReferenceSpec("uniform", 1, 1)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(memory=-1)
    assert TrainConfig(memory=4, parallel=30).window == 34
    assert TrainConfig().eval_samples == 100_000


def test_lr_schedule_endpoints():
    c = TrainConfig(max_epochs=11, learning_rate=1e-2, lr_final=0.1)
    assert math.isclose(c.lr_at(0), 1e-2) and math.isclose(c.lr_at(10), 1e-3)
    assert TrainConfig(learning_rate=1e-2).lr_at(7) == 1e-2


def test_monitor_divergence_and_plateau():
    m = Monitor(TrainConfig(patience=3, tol=1e-3, ema_decay=0.0))
    assert not any(m.update(e, 0.0, 0.5) for e in range(3))
    assert m.update(3, 0.0, 0.5)
    with pytest.raises(TrainingDiverged) as err:
        Monitor(TrainConfig()).update(0, 0.0, 1e3)
    assert len(err.value.history) == 1
    with pytest.raises(TrainingDiverged):
        Monitor(TrainConfig()).update(0, 0.0, float("nan"))


def source(n, seed):
    return gen_benchmark(n, 0.0, 0.9, seed)


def test_training_is_deterministic():
    cfg = TrainConfig(**TINY)
    a, ra = estimate_te(source, cfg)
    b, rb = estimate_te(source, cfg)
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())
    assert ra.history == rb.history


def test_history_rows_and_estimate():
    res = train_estimator(source, TrainConfig(**TINY))
    assert [h["epoch"] for h in res.history] == [0, 1, 2]
    for h in res.history:
        assert math.isclose(h["te_raw"], h["d_xy"] - h["d_y"])
    est, _ = estimate_te(source, TrainConfig(**TINY))
    assert est.stderr > 0 and est.n_eval >= 2000 and est.memory == 2
    assert math.isclose(est.te, est.d_xy.value - est.d_y.value)
