import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from treet.density import (analytic_reference_density, conditional_density, evaluate_density,
                           gaussian_grid, hmm_contexts, kalman_conditional, kalman_report, kl_tv,
                           make_grid, normalize_weights, riccati_fixed_point, support_log_density,
                           uniform_grid)
from treet.processes import HmmSpec, gen_hmm


class StubNet:
    """Potential with a known closed form: g(y | context) = fn(y, last context value)."""

    def __init__(self, memory, fn):
        self.config = SimpleNamespace(memory=memory)
        self.value_embed = torch.zeros(1, dtype=torch.float64)
        self.fn = fn

    def __call__(self, x, ref):
        return None, self.fn(ref[:, 0, 0], x[:, -2, 0])[:, None]


GRID = make_grid(0.0, 1.0, 1601)


@given(st.lists(st.floats(-30, 30), min_size=5, max_size=50), st.floats(-500, 500))
@pytest.mark.filterwarnings("ignore:grid endpoints")
def test_normalization_and_shift_invariance(vals, c):
    pts = np.linspace(0, 1, len(vals))
    a = normalize_weights(np.array(vals), pts)
    b = normalize_weights(np.array(vals) + c, pts)
    assert abs(a.masses.sum() - 1) < 1e-6
    assert np.max(np.abs(a.masses - b.masses)) < 1e-9


def test_all_zero_weights_rejected():
    with pytest.raises(ValueError):
        normalize_weights(np.full(5, -np.inf), np.arange(5.0))


def test_edge_mass_warns():
    with pytest.warns(UserWarning, match="endpoints"):
        normalize_weights(np.zeros(10), np.arange(10.0))


def test_plug_in_identity():
    # g = log N(y; 0.3 * context, 0.4) against a flat reference recovers that Gaussian
    net = StubNet(2, lambda y, c: torch.as_tensor(norm.logpdf(y.numpy(), 0.3 * c.numpy(), math.sqrt(0.4))))
    ctx = np.random.default_rng(0).standard_normal((7, 2, 1))
    for d, c in zip(conditional_density(net, ctx, GRID, chunk_rows=5000), ctx[:, -1, 0]):
        pdf = norm.pdf(GRID, 0.3 * c, math.sqrt(0.4))
        assert np.max(np.abs(d.masses - pdf / pdf.sum())) < 1e-6
        assert abs(d.masses.sum() - 1) < 1e-9


def test_zero_network_returns_the_reference():
    net = StubNet(1, lambda y, c: torch.zeros_like(y))
    grid = np.linspace(0, 3.6, 1801)
    ref = support_log_density(0.8, 2.8)
    (d,) = conditional_density(net, np.zeros((1, 1, 1)), grid, ref)
    u = uniform_grid(0.8, 2.8, grid)
    assert abs(d.masses.sum() - 1) < 1e-9 and abs(u.masses.sum() - 1) < 1e-9
    assert kl_tv(d, u)[1] < 1e-3
    assert np.all(d.masses[(grid < 0.8) | (grid > 2.8)] == 0)


def test_context_width_checked():
    net = StubNet(3, lambda y, c: y)
    with pytest.raises(ValueError):
        conditional_density(net, np.zeros((2, 2, 1)), GRID)


def test_gaussian_kl_and_tv():
    grid = make_grid(0.5, 1.0, 4001, 12)
    p, q = gaussian_grid(0, 1, grid), gaussian_grid(1, 1, grid)
    kl, tv = kl_tv(p, q)
    assert abs(kl - 0.5) < 0.01
    assert abs(tv - (2 * norm.cdf(0.5) - 1)) < 1e-3
    assert kl_tv(p, p) == (0.0, 0.0)


def test_disjoint_masses_have_unit_tv():
    grid = np.linspace(0, 10, 101)
    kl, tv = kl_tv(uniform_grid(1, 2, grid), uniform_grid(7, 8, grid))
    assert abs(tv - 1.0) < 1e-12 and kl > 20


def test_grid_refinement_moves_kl_by_under_one_percent():
    def kl(n):
        g = make_grid(0, 1.5, n)
        return kl_tv(gaussian_grid(0, 1, g), gaussian_grid(0.7, 0.5, g))[0]

    exact = math.log(math.sqrt(0.5)) + (1 + 0.49) / (2 * 0.5) - 0.5
    assert abs(kl(1601) - kl(3201)) / kl(3201) < 0.01
    assert abs(kl(1601) - exact) / exact < 0.01


def test_riccati_matches_quadratic_root():
    spec = HmmSpec(alpha=0.9, gamma=0.5, var_w=0.5, var_v=0.5)
    a, q, g, r = spec.alpha, spec.var_w, spec.gamma, spec.var_v
    bq = r - a * a * r - q * g * g
    p = (-bq + math.sqrt(bq * bq + 4 * g * g * q * r)) / (2 * g * g)
    assert abs(riccati_fixed_point(spec) - p) < 1e-10


def stationary_cov(spec, n):
    lag = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    return spec.gamma ** 2 * spec.var_w / (1 - spec.alpha ** 2) * spec.alpha ** lag + spec.var_v * np.eye(n)


@pytest.mark.parametrize("memory", [1, 3, 8])
def test_kalman_equals_gaussian_conditioning(memory):
    spec = HmmSpec(alpha=0.9, gamma=0.5, var_w=0.5, var_v=0.5)
    cov = stationary_cov(spec, memory + 1)
    h = np.random.default_rng(1).standard_normal((4, memory))
    k = np.linalg.solve(cov[:memory, :memory], cov[:memory, memory])
    mean, var = kalman_conditional(spec, h)
    assert np.allclose(mean, h @ k, atol=1e-12)
    assert np.allclose(var, cov[memory, memory] - cov[memory, :memory] @ k, atol=1e-12)


def test_kalman_degenerate_cases():
    h = np.random.default_rng(2).standard_normal((3, 5))
    mean, var = kalman_conditional(HmmSpec(gamma=0.0), h)
    assert np.all(mean == 0) and np.allclose(var, 0.5)
    # no process noise: the stationary state is identically zero
    mean, var = kalman_conditional(HmmSpec(var_w=0.0), h)
    assert np.allclose(mean, 0) and np.allclose(var, 0.5)


def test_kalman_rejects_unsupported_models():
    with pytest.raises(ValueError):
        kalman_conditional(HmmSpec(noise="uniform"), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        kalman_conditional(HmmSpec(delay=3, beta=0.05), np.zeros((1, 2)))


def test_uniform_reference_density():
    spec = HmmSpec(noise="uniform", gamma=0.5)
    grid = np.linspace(-3, 5, 4001)
    d = analytic_reference_density(spec, 3.6, grid)
    assert abs(d.masses.sum() - 1) < 1e-9
    assert np.all(d.masses[(grid < 0.8 - 0.002) | (grid > 2.8 + 0.002)] == 0)


def test_contexts_align_with_series():
    pair = gen_hmm(500, HmmSpec(), 3)
    yh, xh, x_now, y_now = hmm_contexts(pair, 4, 50, 0)
    t = int(np.flatnonzero(pair.x[:, 0] == x_now[0])[0])
    assert np.array_equal(yh[0, :, 0], pair.y[t - 4:t, 0]) and y_now[0] == pair.y[t, 0]
    assert yh.shape == (50, 4, 1) and xh.shape == (50, 4, 1)


def test_evaluation_paths():
    spec = HmmSpec()
    pair = gen_hmm(5000, spec, 0)
    zero, est, refs = evaluate_density(StubNet(3, lambda y, c: y), spec, pair,
                                       n_contexts=32, zero_network=True)
    assert zero.n_contexts == 32 and 0 < zero.tv_mean < 1
    kal = kalman_report(spec, pair, 3, n_contexts=256)
    # the exact predictive law sits well below the marginal-shaped reference
    assert 0.25 < kal.kl_mean < 0.4 and kal.kl_mean < zero.kl_mean
    assert set(kal.to_json()) == {"model", "kl_mean", "tv_mean", "n_contexts", "grid_spec"}
