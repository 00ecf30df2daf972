"""Conditional densities recovered from trained potentials.

A trained potential approximates ``log p(y | context) - log p~(y)`` up to a
constant.  Substituting grid values for the present sample and normalising
``exp(g) p~`` over the grid gives a discrete conditional law per context.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy.stats import norm

from .nn import TreetNet
from .processes import HmmSpec, TimeSeriesPair

MASS_FLOOR = 1e-12
EDGE_WARN = 1e-3


@dataclass
class DensityGrid:
    """Discrete law on uniformly spaced ``points``; ``masses`` sum to one."""

    points: np.ndarray
    masses: np.ndarray
    weights: np.ndarray | None = None
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        if self.points.shape != self.masses.shape or self.points.ndim != 1:
            raise ValueError("points and masses must be matching 1-d arrays")
        if np.any(self.masses < 0):
            raise ValueError("negative probability mass")

    @property
    def delta(self) -> float:
        return float(self.points[1] - self.points[0])

    @property
    def density(self) -> np.ndarray:
        return self.masses / self.delta

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y", "p"])
            w.writerows(zip(self.points.tolist(), self.density.tolist()))


def make_grid(center: float, scale: float, n_points: int = 1601, width: float = 8.0) -> np.ndarray:
    if scale <= 0 or n_points < 2:
        raise ValueError("grid needs a positive scale and at least two points")
    return np.linspace(center - width * scale, center + width * scale, n_points)


def grid_from_samples(y: np.ndarray, n_points: int = 1601, width: float = 8.0) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    return make_grid(float(y.mean()), float(y.std()), n_points, width)


def normalize_weights(log_w: np.ndarray, points: np.ndarray, context: dict | None = None
                      ) -> DensityGrid:
    """Normalise ``exp(log_w)`` over the grid (max-subtracted)."""
    log_w = np.asarray(log_w, dtype=np.float64)
    if not np.isfinite(log_w).any():
        raise ValueError("all grid weights are zero")
    w = np.exp(log_w - np.max(log_w[np.isfinite(log_w)]))
    total = w.sum()
    if not total > 0:
        raise ValueError("all grid weights are zero")
    masses = w / total
    if masses[0] + masses[-1] > EDGE_WARN:
        warnings.warn(f"grid endpoints hold {masses[0] + masses[-1]:.3g} of the mass; "
                      "the grid may not cover the bulk of the density")
    return DensityGrid(points, masses, w, context or {})


def conditional_density(net: TreetNet, contexts: np.ndarray, grid: np.ndarray,
                        ref_log_density: Callable[[np.ndarray], np.ndarray] | None = None,
                        present: np.ndarray | None = None, chunk_rows: int = 65536
                        ) -> list[DensityGrid]:
    """Per-context conditional laws of the present Y sample.

    Parameters
    ----------
    net : trained potential with memory ``l``
    contexts : (C, l, d_in) history rows, oldest first
    grid : (G,) candidate values for the present Y sample
    ref_log_density : log of the reference density at grid values; ``None``
        treats it as constant over the grid (uniform reference)
    present : optional (C, d_in - 1) extra present-row entries (the X window's
        present sample for the joint network), appended after the Y value
    """
    contexts = np.asarray(contexts, dtype=np.float64)
    if contexts.ndim == 2:
        contexts = contexts[..., None]
    c, mem, d_in = contexts.shape
    if mem != net.config.memory:
        raise ValueError(f"contexts hold {mem} rows but the network memory is {net.config.memory}")
    g = len(grid)
    log_ref = np.zeros(g) if ref_log_density is None else np.asarray(ref_log_density(grid), float)
    per = max(1, chunk_rows // g)
    out = []
    dtype = net.value_embed.dtype
    for s in range(0, c, per):
        ctx = contexts[s:s + per]
        b = len(ctx)
        rows = np.concatenate([ctx, np.zeros((b, 1, d_in))], 1)
        ref = np.broadcast_to(grid[None, :, None], (b, g, 1))
        if present is not None:
            extra = np.broadcast_to(np.asarray(present[s:s + per], float)[:, None, :], (b, g, d_in - 1))
            ref = np.concatenate([ref, extra], -1)
        if ref.shape[-1] != d_in:
            raise ValueError(f"present rows have width {ref.shape[-1]}, network expects {d_in}")
        x = torch.as_tensor(np.repeat(rows, g, 0), dtype=dtype)
        r = torch.as_tensor(np.ascontiguousarray(ref.reshape(b * g, 1, d_in)), dtype=dtype)
        with torch.no_grad():
            _, scores = net(x, r)
        scores = scores.double().numpy().reshape(b, g)
        for i in range(b):
            out.append(normalize_weights(scores[i] + log_ref, grid, {"index": s + i}))
    return out


def kl_tv(p: DensityGrid, q: DensityGrid) -> tuple[float, float]:
    """``KL(p || q)`` in nats (q floored at 1e-12) and total variation."""
    if p.points.shape != q.points.shape or not np.allclose(p.points, q.points, rtol=0, atol=1e-12):
        raise ValueError("densities live on different grids")
    pm, qm = p.masses, np.maximum(q.masses, MASS_FLOOR)
    nz = pm > 0
    kl = float(np.sum(pm[nz] * np.log(pm[nz] / qm[nz])))
    tv = 0.5 * float(np.abs(p.masses - q.masses).sum())
    return max(kl, 0.0), min(tv, 1.0)


def gaussian_grid(mean: float, var: float, grid: np.ndarray) -> DensityGrid:
    """Cell-integrated Gaussian masses (cells of width Δ centred on grid points)."""
    half = 0.5 * (grid[1] - grid[0])
    sd = math.sqrt(var)
    masses = norm.cdf(grid + half, mean, sd) - norm.cdf(grid - half, mean, sd)
    return DensityGrid(grid, masses, context={"mean": mean, "var": var})


def uniform_grid(low: float, high: float, grid: np.ndarray) -> DensityGrid:
    half = 0.5 * (grid[1] - grid[0])
    overlap = np.clip(np.minimum(grid + half, high) - np.maximum(grid - half, low), 0.0, None)
    return DensityGrid(grid, overlap / (high - low), context={"low": low, "high": high})


# -- analytic references -------------------------------------------------------


def _state_variance(spec: HmmSpec) -> float:
    return spec.var_w / (1.0 - spec.alpha ** 2)


def riccati_fixed_point(spec: HmmSpec, tol: float = 1e-14, max_iter: int = 100_000) -> float:
    """Steady-state prior variance ``P_{t|t-1}`` by iterating the Riccati map."""
    a, q, g, r = spec.alpha, spec.var_w, spec.gamma, spec.var_v
    p = _state_variance(spec)
    for _ in range(max_iter):
        nxt = a * a * (p - (g * p) ** 2 / (g * g * p + r)) + q
        if abs(nxt - p) < tol:
            return nxt
        p = nxt
    raise RuntimeError("Riccati iteration did not converge")


def kalman_conditional(spec: HmmSpec, y_history: np.ndarray, x0: float = 0.0,
                       p0: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance of ``Y_t`` given the rows of ``y_history``.

    The prior on the state before the first observation is ``N(x0, p0)``,
    stationary by default.  ``y_history`` is ``(C, l)``; returns two ``(C,)``.
    """
    if spec.delay != 0 or spec.noise != "gaussian":
        raise ValueError("the Kalman reference needs a Gaussian HMM without state delay")
    a, q, g, r = spec.alpha, spec.var_w, spec.gamma, spec.var_v
    y_history = np.atleast_2d(np.asarray(y_history, dtype=np.float64))
    m = np.full(len(y_history), float(x0))
    p = _state_variance(spec) if p0 is None else float(p0)
    for t in range(y_history.shape[1]):
        if t:
            m, p = a * m, a * a * p + q
        s = g * g * p + r
        gain = p * g / s
        m = m + gain * (y_history[:, t] - g * m)
        p = p - gain * g * p
    if y_history.shape[1]:
        m, p = a * m, a * a * p + q
    return g * m, np.full(len(m), g * g * p + r)


def analytic_reference_density(spec: HmmSpec, x_t: float, grid: np.ndarray) -> DensityGrid:
    """Density of ``Y_t`` given the latent ``X_t``, discretised on ``grid``."""
    mean = spec.gamma * x_t
    if spec.noise == "gaussian":
        return gaussian_grid(mean, spec.var_v, grid)
    return uniform_grid(mean - 1.0, mean + 1.0, grid)


# -- evaluation ----------------------------------------------------------------


@dataclass
class DensityReport:
    model: str
    kl_mean: float
    tv_mean: float
    n_contexts: int
    grid_spec: dict
    kl: np.ndarray = field(repr=False)
    tv: np.ndarray = field(repr=False)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("kl")
        d.pop("tv")
        return d

    def save(self, path: str | Path, extra: dict | None = None):
        Path(path).write_text(json.dumps({**self.to_json(), **(extra or {})}, indent=2, sort_keys=True))


def hmm_contexts(pair: TimeSeriesPair, memory: int, n_contexts: int, seed: int):
    """Random held-out contexts: Y histories, X windows and the latent present state."""
    n = len(pair)
    if n <= memory + 1:
        raise ValueError("series too short for the requested memory")
    rng = np.random.default_rng(seed)
    ts = np.sort(rng.choice(np.arange(memory, n), size=min(n_contexts, n - memory), replace=False))
    idx = ts[:, None] + np.arange(-memory, 0)[None, :]
    return pair.y[idx], pair.x[idx], pair.x[ts, 0], pair.y[ts, 0]


def support_log_density(low: float, high: float) -> Callable[[np.ndarray], np.ndarray]:
    """Log of a uniform reference on [low, high] up to its constant; -inf outside."""

    def log_density(y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return np.where((y >= low) & (y <= high), 0.0, -np.inf)

    return log_density


def evaluate_density(net: TreetNet, spec: HmmSpec, pair: TimeSeriesPair, n_contexts: int = 512,
                     seed: int = 0, grid: np.ndarray | None = None, model: str = "y",
                     zero_network: bool = False, support: tuple[float, float] | None = None) -> tuple[DensityReport, list[DensityGrid], list[DensityGrid]]:
    """Average ``KL(estimate || P_{Y_t|X_t})`` and TV over held-out contexts.

    ``model="y"`` uses the Y-only potential on Y histories; ``model="xy"``
    feeds ``[Y, X]`` rows with the present X sample of each context.
    ``zero_network`` replaces the network output with zero (the estimate is
    then the reference law itself).  The reference is uniform on ``support``,
    by default the range of ``pair.y``; the estimate vanishes outside it.
    """
    grid = grid_from_samples(pair.y) if grid is None else grid
    low, high = (float(pair.y.min()), float(pair.y.max())) if support is None else support
    log_ref = support_log_density(low, high)
    yh, xh, x_now, _ = hmm_contexts(pair, net.config.memory, n_contexts, seed)
    if zero_network:
        est = [normalize_weights(log_ref(grid), grid, {"index": i}) for i in range(len(yh))]
    elif model == "y":
        est = conditional_density(net, yh, grid, log_ref)
    elif model == "xy":
        est = conditional_density(net, np.concatenate([yh, xh], -1), grid, log_ref, present=x_now[:, None])
    else:
        raise ValueError(f"unknown density model {model!r}")
    refs = [analytic_reference_density(spec, float(x), grid) for x in x_now]
    scores = np.array([kl_tv(p, q) for p, q in zip(est, refs)])
    grid_spec = {"low": float(grid[0]), "high": float(grid[-1]), "n_points": len(grid),
                 "support": [low, high]}
    report = DensityReport(model, float(scores[:, 0].mean()), float(scores[:, 1].mean()),
                           len(est), grid_spec, scores[:, 0], scores[:, 1])
    return report, est, refs


def kalman_report(spec: HmmSpec, pair: TimeSeriesPair, memory: int, n_contexts: int = 512,
                  seed: int = 0, grid: np.ndarray | None = None) -> DensityReport:
    """Same scores for the Kalman predictive law on the same contexts."""
    grid = grid_from_samples(pair.y) if grid is None else grid
    yh, _, x_now, _ = hmm_contexts(pair, memory, n_contexts, seed)
    mean, var = kalman_conditional(spec, yh[..., 0])
    scores = np.array([kl_tv(gaussian_grid(m, v, grid), analytic_reference_density(spec, float(x), grid))
                       for m, v, x in zip(mean, var, x_now)])
    grid_spec = {"low": float(grid[0]), "high": float(grid[-1]), "n_points": len(grid)}
    return DensityReport("kalman", float(scores[:, 0].mean()), float(scores[:, 1].mean()),
                         len(yh), grid_spec, scores[:, 0], scores[:, 1])
