"""Ground-truth capacities and transfer entropies (all values in nats)."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import toeplitz
from scipy.stats import norm

from .processes import gen_benchmark

METHODS = ("closed-form", "water-filling", "polynomial-root", "monte-carlo", "numeric-optimization")


@dataclass(frozen=True)
class OracleResult:
    value: float
    method: str
    error_bar: float = 0.0
    note: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown oracle method {self.method!r}")
        if self.error_bar < 0:
            raise ValueError("error_bar must be >= 0")
        if self.method == "monte-carlo" and not self.error_bar > 0:
            raise ValueError("Monte-Carlo results need a positive error bar")


def bits_to_nats(bits: float) -> float:
    return bits * math.log(2.0)


def nats_to_bits(nats: float) -> float:
    return nats / math.log(2.0)


def awgn_capacity(power: float, noise_var: float = 1.0) -> OracleResult:
    if power <= 0 or noise_var <= 0:
        raise ValueError("power and noise variance must be positive")
    return OracleResult(0.5 * math.log1p(power / noise_var), "closed-form")


# -- colored noise ----------------------------------------------------------------


def frequency_grid(n_freq: int = 4096) -> np.ndarray:
    return (np.arange(n_freq) + 0.5) / n_freq - 0.5


def ma_psd(alpha: float, noise_var: float = 1.0, delay: int = 1, n_freq: int = 4096) -> np.ndarray:
    """PSD of Z_t = N_t + alpha N_{t-delay} on a uniform grid of [-1/2, 1/2)."""
    f = frequency_grid(n_freq)
    return noise_var * np.abs(1 + alpha * np.exp(-2j * np.pi * f * delay)) ** 2


def ar1_psd(alpha: float, noise_var: float = 1.0, n_freq: int = 4096) -> np.ndarray:
    """PSD of Z_t = N_t + alpha Z_{t-1}."""
    f = frequency_grid(n_freq)
    return noise_var / np.abs(1 - alpha * np.exp(-2j * np.pi * f)) ** 2


def water_filling_capacity(psd: np.ndarray, power: float, tol: float = 1e-13) -> OracleResult:
    """Feedforward capacity of an additive Gaussian channel with noise spectrum ``psd``.

    ``psd`` samples a uniform frequency grid over one period; the water level
    nu solves ``mean(max(nu - N, 0)) = power`` by bisection.
    """
    psd = np.asarray(psd, dtype=np.float64)
    if (psd <= 0).any():
        raise ValueError("noise psd must be strictly positive")
    if power <= 0:
        return OracleResult(0.0, "water-filling")
    lo, hi = float(psd.min()), float(psd.max()) + power
    for _ in range(300):
        nu = 0.5 * (lo + hi)
        if np.maximum(nu - psd, 0).mean() > power:
            hi = nu
        else:
            lo = nu
        if hi - lo < tol * max(1.0, hi):
            break
    else:
        raise RuntimeError(f"water level bisection did not converge in bracket [{lo}, {hi}]")
    nu = 0.5 * (lo + hi)
    cap = 0.5 * np.mean(np.log(np.maximum(nu, psd) / psd))
    return OracleResult(float(cap), "water-filling")


def gma_capacity(alpha: float, delay: int, power: float, noise_var: float = 1.0,
                 n_freq: int = 4096) -> OracleResult:
    """Feedforward capacity of Y = X + N_t + alpha N_{t-delay}."""
    return water_filling_capacity(ma_psd(alpha, noise_var, delay, n_freq), power)


def circulant_gaussian_mi(autocov: np.ndarray, power: float, horizon: int = 256) -> OracleResult:
    """Finite-horizon max of (1/n) I(X^n; X^n + Z^n) with circulant noise covariance.

    The noise covariance is the circulant extension of ``autocov`` (lags
    0..q).  Its eigenvalues come from a dense eigendecomposition and the power
    allocation is solved as a convex program, independently of the bisection
    used by :func:`water_filling_capacity`.
    """
    import cvxpy as cp

    col = np.zeros(horizon)
    for lag, c in enumerate(autocov):
        col[lag % horizon] += c
        if lag:
            col[-lag % horizon] += c
    rows = np.array([np.roll(col, i) for i in range(horizon)])
    lam = np.clip(np.linalg.eigvalsh(rows), 1e-12, None)
    p = cp.Variable(horizon, nonneg=True)
    prob = cp.Problem(cp.Maximize(cp.sum(cp.log(1 + cp.multiply(p, 1 / lam)))),
                      [cp.sum(p) <= horizon * power])
    prob.solve(solver=cp.CLARABEL)
    return OracleResult(float(prob.value) / (2 * horizon), "numeric-optimization",
                        note=f"circulant horizon {horizon}")


# -- feedback ----------------------------------------------------------------------


def ma1_feedback_capacity(alpha: float, power: float, noise_var: float = 1.0) -> OracleResult:
    """Feedback capacity of the MA(1) Gaussian channel, ``-log x0``.

    ``x0`` is the root in (0, 1) of the quartic
    ``snr x^2 = (1 - x^2)(1 - |alpha| x)^2`` with ``snr = power / noise_var``.
    """
    if abs(alpha) > 1:
        raise ValueError("MA(1) feedback capacity needs |alpha| <= 1")
    snr, a = power / noise_var, abs(alpha)
    poly = np.polynomial.polynomial
    coeffs = poly.polysub([0.0, 0.0, snr], poly.polymul([1.0, 0.0, -1.0], [1.0, -2 * a, a * a]))
    roots = poly.Polynomial(coeffs).trim(1e-14 * np.abs(coeffs).max()).roots()
    real = roots[np.abs(roots.imag) < 1e-10].real
    valid = np.sort(real[(real > 0) & (real < 1)])
    if len(valid) == 0:
        raise RuntimeError(f"no valid root in (0, 1); roots: {roots}")
    cap = -math.log(valid[0])
    ff = gma_capacity(alpha, 1, power, noise_var).value
    if cap < ff - 1e-9:
        raise RuntimeError(f"root {valid[0]} gives {cap} below feedforward capacity {ff}; roots: {roots}")
    return OracleResult(cap, "polynomial-root")


def ma_noise_cov(alpha: float, noise_var: float, horizon: int, delay: int = 1) -> np.ndarray:
    col = np.zeros(horizon)
    col[0] = noise_var * (1 + alpha * alpha)
    if delay < horizon:
        col[delay] = noise_var * alpha
    return toeplitz(col)


def ar1_noise_cov(alpha: float, noise_var: float, horizon: int) -> np.ndarray:
    return toeplitz(noise_var / (1 - alpha * alpha) * alpha ** np.arange(horizon))


def linear_feedback_di(noise_cov: np.ndarray, power: float, feedback: bool = True,
                       steps: int = 3000, lr: float = 0.02, seed: int = 0) -> OracleResult:
    """Finite-horizon (1/n) I(X^n -> Y^n) maximised over linear Gaussian policies.

    ``X = B U + F Z`` with ``B`` lower triangular, ``F`` strictly lower
    triangular (zero without feedback) and ``U`` white; the average power
    ``tr(B B' + F K_Z F')/n`` is held at ``power`` by rescaling.
    """
    import torch

    n = noise_cov.shape[0]
    kz = torch.as_tensor(noise_cov, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    b_raw = (torch.eye(n, dtype=torch.float64) + 0.01 * torch.randn(n, n, generator=gen, dtype=torch.float64)).requires_grad_()
    f_raw = (0.01 * torch.randn(n, n, generator=gen, dtype=torch.float64)).requires_grad_(feedback)
    low, strict = torch.tril(torch.ones(n, n, dtype=torch.float64)), torch.tril(torch.ones(n, n, dtype=torch.float64), -1)
    eye = torch.eye(n, dtype=torch.float64)
    logdet_z = torch.logdet(kz)
    params = [b_raw] + ([f_raw] if feedback else [])
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)

    def rate():
        b = b_raw * low
        f = f_raw * strict if feedback else torch.zeros_like(b)
        used = (torch.trace(b @ b.T) + torch.trace(f @ kz @ f.T)) / n
        s = torch.sqrt(power / used)
        b, f = s * b, s * f
        ky = (eye + f) @ kz @ (eye + f).T + b @ b.T
        return 0.5 * (torch.logdet(ky) - logdet_z) / n

    for _ in range(steps):
        opt.zero_grad()
        (-rate()).backward()
        opt.step()
        sched.step()
    with torch.no_grad():
        val = float(rate())
    return OracleResult(val, "numeric-optimization", note=f"horizon {n}, feedback={feedback}")


def ar1_feedback_capacity(alpha: float, power: float, noise_var: float = 1.0,
                          horizon: int = 64) -> OracleResult:
    """AR(1) feedback capacity via the finite-horizon linear-policy optimisation."""
    return linear_feedback_di(ar1_noise_cov(alpha, noise_var, horizon), power)


def ar1_feedforward_capacity(alpha: float, power: float, noise_var: float = 1.0) -> OracleResult:
    return water_filling_capacity(ar1_psd(alpha, noise_var), power)


def channel_capacity(spec) -> OracleResult:
    """Oracle capacity for a :class:`~treet.processes.ChannelSpec`."""
    if spec.kind == "awgn":
        return awgn_capacity(spec.power, spec.noise_var)
    if spec.kind == "gma":
        if spec.feedback:
            if spec.delay != 1:
                return linear_feedback_di(ma_noise_cov(spec.alpha, spec.noise_var, 64, spec.delay), spec.power)
            return ma1_feedback_capacity(spec.alpha, spec.power, spec.noise_var)
        return gma_capacity(spec.alpha, spec.delay, spec.power, spec.noise_var)
    if spec.kind == "gar":
        if spec.feedback:
            return ar1_feedback_capacity(spec.alpha, spec.power, spec.noise_var)
        return ar1_feedforward_capacity(spec.alpha, spec.power, spec.noise_var)
    raise ValueError(f"no capacity oracle for channel kind {spec.kind!r}")


# -- benchmark process -------------------------------------------------------------


def benchmark_te_closed_form(lam: float, rho: float) -> float:
    """TE(1) of the threshold process; Y is marginally i.i.d. N(0, 1)."""
    if rho >= 1:
        return math.inf if lam < math.inf else 0.0
    return float(norm.sf(lam) * -0.5 * math.log1p(-rho * rho))


def _batch_means_se(a: np.ndarray, n_batches: int = 50) -> float:
    means = np.array([b.mean() for b in np.array_split(a, n_batches)])
    return float(means.std(ddof=1) / math.sqrt(n_batches))


def benchmark_te_oracle(lam: float, rho: float, n_mc: int = 1_000_000, seed: int = 0) -> OracleResult:
    """Monte-Carlo TE(1) of the threshold process.

    The value is ``P(Y_{t-1} >= lam) * (-1/2 log(1 - rho^2))`` with the
    probability estimated from a simulated path.  A second estimate averages
    the log-ratio of the two conditional densities along the same path; the
    two must agree within five standard errors.
    """
    if n_mc < 10_000:
        raise ValueError(f"n_mc={n_mc} is too small for a Monte-Carlo oracle (need >= 1e4)")
    if not 0 <= rho < 1:
        raise ValueError("rho must lie in [0, 1)")
    if rho == 0:
        return OracleResult(0.0, "closed-form", 0.0, "exact: rho = 0 decouples X and Y")
    pair = gen_benchmark(n_mc + 1, lam, rho, seed)
    x, y = pair.x[:, 0], pair.y[:, 0]
    gain = -0.5 * math.log1p(-rho * rho)
    coupled = y[:-1] >= lam
    mixture = coupled * gain
    s2 = 1 - rho * rho
    yt, xp = y[1:], x[:-1]
    log_ratio = np.where(coupled, -0.5 * np.log(s2) - 0.5 * (yt - rho * xp) ** 2 / s2 + 0.5 * yt ** 2, 0.0)
    se_mix = max(_batch_means_se(mixture), 1e-12)
    se_direct = _batch_means_se(log_ratio)
    if abs(mixture.mean() - log_ratio.mean()) > 5 * math.hypot(se_mix, se_direct):
        warnings.warn(f"mixture ({mixture.mean():.4f}) and direct ({log_ratio.mean():.4f}) "
                      "Monte-Carlo TE disagree")
    return OracleResult(float(mixture.mean()), "monte-carlo", se_mix,
                        f"direct log-ratio estimate {log_ratio.mean():.5f} +- {se_direct:.5f}")


def write_oracle_table(rows: list[tuple[str, OracleResult]], path: str | Path, config_hash: str = ""):
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["spec", "value", "method", "error_bar"])
        for spec, r in rows:
            w.writerow([spec, f"{r.value:.8g}", r.method, f"{r.error_bar:.3g}"])
