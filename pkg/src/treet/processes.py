"""Seeded synthetic processes and additive-noise channels.

Every generator is a pure function of its parameters and seed.  Sub-seeds for
parallel streams come from :func:`split_seed`, which hashes ``(seed, *keys)``
through :class:`numpy.random.SeedSequence`.
"""
from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.signal import lfilter

CHANNEL_KINDS = ("awgn", "gma", "gar", "benchmark")
BURN_IN = 100


def split_seed(seed: int, *keys: int) -> int:
    """Deterministic 32-bit sub-seed for stream ``keys`` of master ``seed``."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


@dataclass(frozen=True)
class ChannelSpec:
    kind: str = "awgn"
    noise_var: float = 1.0
    power: float = 1.0
    feedback: bool = False
    alpha: float = 0.0
    delay: int = 1
    lam: float = 0.0
    rho: float = 0.9

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ValueError(f"unknown channel kind {self.kind!r}; expected one of {CHANNEL_KINDS}")
        if self.noise_var < 0 or self.power <= 0:
            raise ValueError("noise_var must be >= 0 and power > 0")
        if self.kind == "gar" and abs(self.alpha) >= 1:
            raise ValueError(f"AR(1) noise needs |alpha| < 1, got {self.alpha}")
        if self.kind == "gma" and self.delay < 1:
            raise ValueError(f"MA delay must be >= 1, got {self.delay}")
        if self.kind == "benchmark" and not 0 <= self.rho <= 1:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")

    @property
    def snr_db(self) -> float:
        return 10 * np.log10(self.power / self.noise_var)


@dataclass(frozen=True)
class HmmSpec:
    """X_t = alpha X_{t-1} + beta X_{t-k} + W_t,  Y_t = gamma X_t + V_t."""

    alpha: float = 0.9
    beta: float = 0.0
    gamma: float = 0.5
    delay: int = 0
    noise: str = "gaussian"  # or "uniform" (on [-1, 1])
    var_w: float = 0.5
    var_v: float = 0.5

    def __post_init__(self):
        if self.noise not in ("gaussian", "uniform"):
            raise ValueError(f"unknown noise kind {self.noise!r}")
        if self.delay < 0:
            raise ValueError("delay must be >= 0")
        if self.delay == 0 and self.beta != 0:
            raise ValueError("beta must be 0 when there is no state delay")


@dataclass
class TimeSeriesPair:
    x: np.ndarray
    y: np.ndarray
    seed: int | None = None
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if len(self.x) != len(self.y):
            raise ValueError(f"x and y lengths differ: {len(self.x)} vs {len(self.y)}")
        if not (np.isfinite(self.x).all() and np.isfinite(self.y).all()):
            raise ValueError("time series contains non-finite values")

    def __len__(self):
        return len(self.x)

    def shifted(self, s: int) -> "TimeSeriesPair":
        return TimeSeriesPair(self.x[s:], self.y[s:], self.seed, self.spec)

    def swapped(self) -> "TimeSeriesPair":
        return TimeSeriesPair(self.y, self.x, self.seed, self.spec)

    def to_csv(self, path: str | Path):
        dx, dy = self.x.shape[1], self.y.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{i}" for i in range(dx)] + [f"y{i}" for i in range(dy)])
            for t, (xr, yr) in enumerate(zip(self.x, self.y)):
                w.writerow([t, *map(repr, xr.tolist()), *map(repr, yr.tolist())])

    @classmethod
    def from_csv(cls, path: str | Path) -> "TimeSeriesPair":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=np.float64)
        xs = [i for i, h in enumerate(header) if h.startswith("x")]
        ys = [i for i, h in enumerate(header) if h.startswith("y")]
        return cls(body[:, xs], body[:, ys])

    def save_block(self, path: str | Path):
        """Binary block: magic, uint32 header length, JSON header, float64 x then y."""
        header = json.dumps({"n": len(self), "d_x": self.x.shape[1], "d_y": self.y.shape[1],
                             "seed": self.seed, "spec": self.spec}).encode()
        with open(path, "wb") as fh:
            fh.write(b"TSPB" + struct.pack("<I", len(header)) + header)
            fh.write(self.x.astype("<f8").tobytes() + self.y.astype("<f8").tobytes())

    @classmethod
    def load_block(cls, path: str | Path) -> "TimeSeriesPair":
        raw = Path(path).read_bytes()
        if raw[:4] != b"TSPB":
            raise ValueError(f"{path} is not a time-series block file")
        (hlen,) = struct.unpack("<I", raw[4:8])
        head = json.loads(raw[8:8 + hlen])
        data = np.frombuffer(raw[8 + hlen:], dtype="<f8")
        n, dx, dy = head["n"], head["d_x"], head["d_y"]
        x = data[: n * dx].reshape(n, dx)
        y = data[n * dx:].reshape(n, dy)
        return cls(x.copy(), y.copy(), head["seed"], head["spec"])


def gen_benchmark(n: int, lam: float, rho: float, seed: int) -> TimeSeriesPair:
    """Threshold process: Y_t = Z_t if Y_{t-1} < lam else rho X_{t-1} + sqrt(1-rho^2) Z_t."""
    if not 0 <= rho <= 1:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    z = rng.standard_normal(n)
    y = _benchmark_response(x, z, lam, rho)
    return TimeSeriesPair(x, y, seed, {"kind": "benchmark", "lam": lam, "rho": rho})


def _benchmark_response(x: np.ndarray, z: np.ndarray, lam: float, rho: float) -> np.ndarray:
    # time on axis 0, any trailing batch shape
    c = np.sqrt(1.0 - rho * rho)
    if z.ndim == 1:
        xs, zs = x.tolist(), z.tolist()
        out = [zs[0]]
        for t in range(1, len(zs)):
            out.append(zs[t] if out[-1] < lam else rho * xs[t - 1] + c * zs[t])
        return np.array(out)
    y = np.empty_like(z)
    y[0] = z[0]
    for t in range(1, len(z)):
        y[t] = np.where(y[t - 1] < lam, z[t], rho * x[t - 1] + c * z[t])
    return y


def channel_noise(spec: ChannelSpec, shape: tuple[int, ...], rng: np.random.Generator,
                  time_axis: int = 0) -> np.ndarray:
    """Stationary noise Z for an additive channel, burn-in discarded."""
    shape = tuple(shape)
    n = shape[time_axis]
    sigma = np.sqrt(spec.noise_var)
    if spec.kind == "awgn":
        return sigma * rng.standard_normal(shape)
    burn = max(spec.delay, BURN_IN)
    full = list(shape)
    full[time_axis] = n + burn
    noise = sigma * rng.standard_normal(full)
    if spec.kind == "gma":
        k = spec.delay
        head = np.take(noise, np.arange(k, n + burn), axis=time_axis)
        tail = np.take(noise, np.arange(0, n + burn - k), axis=time_axis)
        z = head + spec.alpha * tail
        return np.take(z, np.arange(burn - k, burn - k + n), axis=time_axis)
    if spec.kind == "gar":
        z = lfilter([1.0], [1.0, -spec.alpha], noise, axis=time_axis)
        return np.take(z, np.arange(burn, burn + n), axis=time_axis)
    raise ValueError(f"channel kind {spec.kind!r} has no additive noise")


def apply_channel(x: np.ndarray, spec: ChannelSpec, seed: int | np.random.Generator
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Channel output for input ``x`` with time on axis 0; returns ``(y, z)``."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("channel input contains non-finite values")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if spec.kind == "benchmark":
        z = rng.standard_normal(x.shape)
        return _benchmark_response(x, z, spec.lam, spec.rho), z
    z = channel_noise(spec, x.shape, rng, time_axis=0)
    return x + z, z


class Stationarity(NamedTuple):
    stationary: bool
    min_root: float
    roots: np.ndarray
    residual: float


def stationarity_check(alpha: float, beta: float, k: int) -> Stationarity:
    """Roots of 1 - alpha z - beta z^k; stationary iff all lie outside the unit circle."""
    if k < 0:
        raise ValueError("k must be >= 0")
    coeffs = np.zeros(max(k, 1) + 1)  # ascending powers
    coeffs[0] = 1.0
    coeffs[1] -= alpha
    coeffs[k] -= beta
    # terms this small put roots beyond float range; they cannot reach the unit circle
    coeffs = np.where(np.abs(coeffs) < 1e-14 * np.abs(coeffs).max(), 0.0, coeffs)
    coeffs = np.trim_zeros(coeffs, "b")
    if len(coeffs) <= 1:
        if coeffs[0] == 0:
            raise ValueError("characteristic polynomial vanishes identically")
        return Stationarity(True, float("inf"), np.array([]), 0.0)
    roots = np.roots(coeffs[::-1])
    residual = float(np.max(np.abs(np.polynomial.polynomial.polyval(roots, coeffs))))
    if residual > 1e-6 * np.abs(coeffs).sum():
        warnings.warn(f"ill-conditioned characteristic polynomial: max root residual {residual:.3e}")
    mods = np.abs(roots)
    return Stationarity(bool(np.all(mods > 1.0)), float(mods.min()), roots, residual)


def gen_hmm(n: int, spec: HmmSpec, seed: int) -> TimeSeriesPair:
    """Hidden AR state X and noisy observation Y; returns ``TimeSeriesPair(x=X, y=Y)``."""
    st = stationarity_check(spec.alpha, spec.beta, spec.delay)
    if not st.stationary:
        raise ValueError(f"non-stationary state recursion: root of modulus {st.min_root:.4f} "
                         f"(root {st.roots[np.argmin(np.abs(st.roots))]:.4f}) inside unit circle")
    rng = np.random.default_rng(seed)
    burn = max(10 * spec.delay, BURN_IN)
    if spec.noise == "gaussian":
        w = np.sqrt(spec.var_w) * rng.standard_normal(n + burn)
        v = np.sqrt(spec.var_v) * rng.standard_normal(n + burn)
    else:
        w = rng.uniform(-1.0, 1.0, n + burn)
        v = rng.uniform(-1.0, 1.0, n + burn)
    a = np.zeros(max(spec.delay, 1) + 1)
    a[0] = 1.0
    a[1] -= spec.alpha
    if spec.delay:
        a[spec.delay] -= spec.beta
    x = lfilter([1.0], a, w)
    y = spec.gamma * x + v
    return TimeSeriesPair(x[burn:], y[burn:], seed, {"kind": "hmm", **asdict(spec)})


def power_normalize(x, power: float):
    """Scale a batch so that its mean square equals ``power``; works on arrays and tensors."""
    ms = (x * x).mean()
    if float(ms.detach() if hasattr(ms, "detach") else ms) <= 0:
        raise ValueError("cannot normalize an all-zero batch")
    return x * (power / ms) ** 0.5
