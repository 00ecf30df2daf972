"""Transfer entropy as the difference of two Donsker-Varadhan potentials.

``D_Y`` compares the law of ``Y_t`` given the ``memory`` past values of Y with a
reference density; ``D_XY`` does the same with the X window added to the
conditioning.  Each potential is maximised by its own :class:`~treet.nn.TreetNet`
and the estimate is ``D_XY - D_Y``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Protocol

import numpy as np
import torch

from .nn import ModelConfig, NumericError, TreetNet
from .processes import TimeSeriesPair, split_seed

log = logging.getLogger(__name__)

N_BLOCKS = 20


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: list[dict]):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1024
    learning_rate: float = 8e-3
    max_epochs: int = 200
    samples_per_epoch: int = 100_000
    memory: int = 30
    parallel: int = 30  # outputs per window; window length is memory + parallel
    tol: float = 1e-3
    patience: int = 10
    seed: int = 0
    divergence_cap: float = 50.0
    ema_decay: float = 0.9
    n_eval: int | None = None
    embed_dim: int = 32
    n_heads: int = 1
    head_dim: int = 32
    ff_dim: int = 64
    activation: str = "elu"
    norm: str = "concat"
    positional: str = "sinusoidal"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    lr_final: float = 1.0  # cosine decay to this fraction of learning_rate; 1 keeps it flat

    def __post_init__(self):
        for name in ("batch_size", "learning_rate", "max_epochs", "samples_per_epoch",
                     "parallel", "patience", "divergence_cap"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.memory < 0:
            raise ValueError("memory must be >= 0")
        if not 0 < self.lr_final <= 1:
            raise ValueError("lr_final must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        if self.lr_final == 1.0 or self.max_epochs == 1:
            return self.learning_rate
        frac = min(epoch, self.max_epochs - 1) / (self.max_epochs - 1)
        return self.learning_rate * (self.lr_final + (1 - self.lr_final) * 0.5 * (1 + math.cos(math.pi * frac)))

    @property
    def window(self) -> int:
        return self.memory + self.parallel

    @property
    def eval_samples(self) -> int:
        return self.n_eval or self.samples_per_epoch

    def model_config(self, input_dim: int, output_dim: int = 1) -> ModelConfig:
        return ModelConfig(input_dim=input_dim, embed_dim=self.embed_dim, n_heads=self.n_heads,
                           head_dim=self.head_dim, ff_dim=self.ff_dim, memory=self.memory,
                           output_dim=output_dim, activation=self.activation, norm=self.norm,
                           positional=self.positional, max_len=max(512, self.window))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


@dataclass(frozen=True)
class ReferenceSpec:
    """Reference law for the present Y sample.

    ``box``: uniform on the per-dimension [min, max] of the current Y batch.
    ``uniform``: uniform on the fixed interval [low, high] in every dimension.
    ``custom``: ``sampler(rng, shape)`` draws and ``log_density(y)`` evaluates.
    """

    kind: str = "box"
    low: float = -1.0
    high: float = 1.0
    sampler: Callable | None = None
    log_density: Callable | None = None

    def __post_init__(self):
        if self.kind not in ("box", "uniform", "custom"):
            raise ValueError(f"unknown reference kind {self.kind!r}")
        if self.kind == "uniform" and not self.high > self.low:
            raise ValueError("uniform reference needs high > low")
        if self.kind == "custom" and self.sampler is None:
            raise ValueError("custom reference needs a sampler")


def bounding_box(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = np.asarray(y).reshape(-1, np.shape(y)[-1])
    lo, hi = flat.min(0), flat.max(0)
    flat_dims = hi <= lo
    if flat_dims.any():
        warnings.warn("degenerate reference box; widening by machine epsilon")
        eps = np.finfo(np.float64).eps * np.maximum(1.0, np.abs(lo))
        lo = np.where(flat_dims, lo - eps, lo)
        hi = np.where(flat_dims, hi + eps, hi)
    return lo, hi


def sample_reference(y_batch: np.ndarray, spec: ReferenceSpec, rng: np.random.Generator,
                     n_positions: int | None = None) -> np.ndarray:
    """Draw i.i.d. reference samples, shape ``(batch, n_positions, d_y)``."""
    y_batch = np.asarray(y_batch)
    if y_batch.size == 0:
        raise ValueError("empty batch")
    if y_batch.ndim == 2:
        y_batch = y_batch[..., None]
    b, n, d = y_batch.shape
    shape = (b, n if n_positions is None else n_positions, d)
    if spec.kind == "box":
        lo, hi = bounding_box(y_batch)
        return lo + (hi - lo) * rng.random(shape)
    if spec.kind == "uniform":
        return rng.uniform(spec.low, spec.high, shape)
    return np.asarray(spec.sampler(rng, shape), dtype=np.float64)


@dataclass
class DvPotentialResult:
    joint_mean: float
    ref_log_mean_exp: float
    value: float
    joint_outputs: np.ndarray = field(repr=False)
    ref_outputs: np.ndarray = field(repr=False)


@dataclass
class TreetEstimate:
    te: float
    d_y: DvPotentialResult
    d_xy: DvPotentialResult
    n_eval: int
    stderr: float
    memory: int
    seed: int
    config: dict = field(default_factory=dict)

    @property
    def te_value(self) -> float:
        return self.te

    def to_json(self) -> dict:
        return {"te": self.te, "d_y": self.d_y.value, "d_xy": self.d_xy.value,
                "l": self.memory, "n_eval": self.n_eval, "stderr": self.stderr,
                "seed": self.seed}


def log_mean_exp(t: torch.Tensor) -> torch.Tensor:
    t = t.reshape(-1)
    return torch.logsumexp(t, 0) - math.log(t.numel())


def dv_bound(joint: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Differentiable DV objective ``mean(joint) - log mean exp(ref)``."""
    lme = log_mean_exp(ref)
    if not torch.isfinite(lme):
        raise NumericError("overflow in reference log-mean-exp")
    return joint.mean() - lme


def _result(joint: np.ndarray, ref: np.ndarray) -> DvPotentialResult:
    jm = float(np.mean(joint))
    flat = ref.reshape(-1)
    top = flat.max()
    lme = float(top + np.log(np.mean(np.exp(flat - top))))
    if not (math.isfinite(jm) and math.isfinite(lme)):
        raise NumericError("non-finite DV potential")
    return DvPotentialResult(jm, lme, jm - lme, joint, ref)


# -- window construction ----------------------------------------------------


def make_windows(a: np.ndarray, length: int, memory: int, offset: int = 0) -> np.ndarray:
    """Windows of ``length`` steps whose valid outputs tile the series exactly once.

    Consecutive windows start ``length - memory`` steps apart, so each window
    re-uses the last ``memory`` steps of its predecessor as history.
    """
    a = np.asarray(a)
    if a.ndim == 1:
        a = a[:, None]
    stride = length - memory
    a = a[offset:]
    count = (len(a) - length) // stride + 1
    if count < 1:
        raise ValueError(f"series of length {len(a)} too short for windows of {length}")
    idx = np.arange(count)[:, None] * stride + np.arange(length)[None, :]
    return a[idx]


def history_mask(length: int, memory: int, lags: int | None) -> np.ndarray | None:
    """0/1 weights that blank out lags beyond ``lags`` for single-output windows."""
    if lags is None or lags >= memory:
        return None
    if length != memory + 1:
        raise ValueError("lag truncation needs one output per window (parallel = 1)")
    keep = np.zeros(length)
    keep[memory - lags:] = 1.0
    return keep[:, None]


@dataclass
class Batch:
    """Model inputs for one set of windows."""

    y_in: np.ndarray      # (B, L, d_y)
    xy_in: np.ndarray     # (B, L, d_y + d_x)
    y_ref: np.ndarray     # (B, L - l, d_y)
    xy_ref: np.ndarray    # (B, L - l, d_y + d_x)


def build_batch(yw: np.ndarray, xw: np.ndarray, ref_y: np.ndarray, memory: int,
                lags: tuple[int | None, int | None] = (None, None)) -> Batch:
    """Joint and reference inputs; the XY network sees ``[Y_t, X_t]`` per step.

    ``lags = (k, l_x)`` truncates the Y history to ``k`` past steps and the X
    window to ``l_x`` past steps (plus present) by zeroing older entries.
    """
    length = yw.shape[1]
    ky = history_mask(length, memory, lags[0])
    kx = history_mask(length, memory, lags[1])
    if ky is not None:
        yw = yw * ky
    if kx is not None:
        xw = xw * kx
    xy = np.concatenate([yw, xw], -1)
    xy_ref = np.concatenate([ref_y, xw[:, memory:]], -1)
    return Batch(yw, xy, ref_y, xy_ref)


class DataSource(Protocol):
    def __call__(self, n: int, seed: int) -> TimeSeriesPair: ...


def fixed_source(pair: TimeSeriesPair, window: int, memory: int) -> DataSource:
    """Serve a fixed dataset, shifting the window grid by a seeded offset each call."""

    def source(n: int, seed: int) -> TimeSeriesPair:
        off = int(np.random.default_rng(seed).integers(0, max(1, window - memory)))
        return pair.shifted(off)

    return source


# -- potentials ----------------------------------------------------------------


def _tensor(a: np.ndarray, net: TreetNet) -> torch.Tensor:
    return torch.as_tensor(a, dtype=net.value_embed.dtype)


def dv_potential(net: TreetNet, inputs: np.ndarray, ref_inputs: np.ndarray,
                 chunk: int = 4096) -> DvPotentialResult:
    """Evaluate one potential (no gradients) over windows ``inputs``."""
    joint, ref = [], []
    with torch.no_grad():
        for s in range(0, len(inputs), chunk):
            j, r = net(_tensor(inputs[s:s + chunk], net), _tensor(ref_inputs[s:s + chunk], net))
            joint.append(j.double().numpy())
            ref.append(r.double().numpy())
    return _result(np.concatenate(joint), np.concatenate(ref))


def dv_potential_y(y_windows: np.ndarray, refs: np.ndarray, net_y: TreetNet) -> DvPotentialResult:
    """Potential of Y's own history against the reference law."""
    y_windows = y_windows if y_windows.ndim == 3 else y_windows[..., None]
    refs = refs if refs.ndim == 3 else refs[..., None]
    return dv_potential(net_y, y_windows, refs)


def dv_potential_xy(y_windows: np.ndarray, x_windows: np.ndarray, refs: np.ndarray,
                    net_xy: TreetNet) -> DvPotentialResult:
    """Potential with the X window concatenated to every step (``[Y_t, X_t]``)."""
    y_windows = y_windows if y_windows.ndim == 3 else y_windows[..., None]
    x_windows = x_windows if x_windows.ndim == 3 else x_windows[..., None]
    refs = refs if refs.ndim == 3 else refs[..., None]
    b = build_batch(y_windows, x_windows, refs, net_xy.config.memory)
    return dv_potential(net_xy, b.xy_in, b.xy_ref)


# -- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    net_y: TreetNet
    net_xy: TreetNet
    history: list[dict]
    converged: bool
    config: TrainConfig


def _epoch_windows(source: DataSource, cfg: TrainConfig, seed: int):
    pair = source(cfg.samples_per_epoch + cfg.window, seed)
    yw = make_windows(pair.y, cfg.window, cfg.memory)
    xw = make_windows(pair.x, cfg.window, cfg.memory)
    return yw, xw


def new_networks(cfg: TrainConfig, d_x: int, d_y: int) -> tuple[TreetNet, TreetNet]:
    net_y = TreetNet(cfg.model_config(d_y), seed=split_seed(cfg.seed, 1))
    net_xy = TreetNet(cfg.model_config(d_x + d_y), seed=split_seed(cfg.seed, 2))
    return net_y, net_xy


def _adam(net: torch.nn.Module, lr: float, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(net.parameters(), lr=lr, betas=cfg.betas, eps=cfg.adam_eps)


def set_lr(opts, lr: float):
    for opt in opts:
        for group in opt.param_groups:
            group["lr"] = lr


class _EpochStats:
    """Accumulates whole-epoch DV terms from per-batch network outputs."""

    def __init__(self):
        self.joint_sum = {"y": 0.0, "xy": 0.0}
        self.ref_lse = {"y": -math.inf, "xy": -math.inf}
        self.count = 0

    def add(self, key: str, joint: torch.Tensor, ref: torch.Tensor):
        self.joint_sum[key] += float(joint.detach().sum())
        self.ref_lse[key] = float(np.logaddexp(self.ref_lse[key], float(torch.logsumexp(ref.detach().reshape(-1), 0))))
        if key == "y":
            self.count += joint.numel()

    def value(self, key: str) -> float:
        return self.joint_sum[key] / self.count - (self.ref_lse[key] - math.log(self.count))


def train_epoch(nets: tuple[TreetNet, TreetNet], opts: tuple[torch.optim.Optimizer, torch.optim.Optimizer],
                yw: np.ndarray, xw: np.ndarray, cfg: TrainConfig, ref: ReferenceSpec,
                rng: np.random.Generator, lags: tuple[int | None, int | None] = (None, None)
                ) -> tuple[float, float]:
    """One pass over shuffled windows; returns the epoch's ``(D_Y, D_XY)``.

    Both networks see the same reference draws and step on the summed loss,
    which is separable, so each optimizer still follows its own potential.
    """
    net_y, net_xy = nets
    opt_y, opt_xy = opts
    order = rng.permutation(len(yw))
    stats = _EpochStats()
    for s in range(0, len(order), cfg.batch_size):
        idx = order[s:s + cfg.batch_size]
        refs = sample_reference(yw[idx], ref, rng, yw.shape[1] - cfg.memory)
        b = build_batch(yw[idx], xw[idx], refs, cfg.memory, lags)
        jy, ry = net_y(_tensor(b.y_in, net_y), _tensor(b.y_ref, net_y))
        jxy, rxy = net_xy(_tensor(b.xy_in, net_xy), _tensor(b.xy_ref, net_xy))
        loss = -(dv_bound(jy, ry) + dv_bound(jxy, rxy))
        opt_y.zero_grad()
        opt_xy.zero_grad()
        loss.backward()
        opt_y.step()
        opt_xy.step()
        stats.add("y", jy, ry)
        stats.add("xy", jxy, rxy)
    return stats.value("y"), stats.value("xy")


class Monitor:
    """EMA of the per-epoch estimate with the divergence and plateau rules."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.history: list[dict] = []
        self.ema = None

    def update(self, epoch: int, d_y: float, d_xy: float, **extra) -> bool:
        """Record an epoch; returns True once the EMA has plateaued."""
        cfg = self.cfg
        te = d_xy - d_y
        self.ema = te if self.ema is None else cfg.ema_decay * self.ema + (1 - cfg.ema_decay) * te
        row = {"epoch": epoch, "d_y": d_y, "d_xy": d_xy, "te_raw": te, "te_ema": self.ema, **extra}
        self.history.append(row)
        log.debug("epoch %d: %s", epoch, row)
        if not math.isfinite(te) or abs(te) > cfg.divergence_cap:
            raise TrainingDiverged(f"estimate diverged at epoch {epoch}: te={te:.4g}", self.history)
        recent = [h["te_ema"] for h in self.history[-cfg.patience - 1:]]
        return len(recent) > cfg.patience and max(recent) - min(recent) < cfg.tol


def train_estimator(source: DataSource, cfg: TrainConfig, ref: ReferenceSpec = ReferenceSpec(),
                    lags: tuple[int | None, int | None] = (None, None),
                    callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Ascend both DV potentials with independent Adam optimizers.

    Each epoch draws ``samples_per_epoch`` fresh samples from ``source``.
    Training stops when the smoothed estimate moves less than ``tol`` over
    ``patience`` epochs, or after ``max_epochs``.
    """
    yw, xw = _epoch_windows(source, cfg, split_seed(cfg.seed, 10, 0))
    nets = new_networks(cfg, xw.shape[-1], yw.shape[-1])
    opts = tuple(_adam(n, cfg.learning_rate, cfg) for n in nets)
    monitor = Monitor(cfg)
    converged = False
    for epoch in range(cfg.max_epochs):
        if epoch:
            yw, xw = _epoch_windows(source, cfg, split_seed(cfg.seed, 10, epoch))
        rng = np.random.default_rng(split_seed(cfg.seed, 11, epoch))
        set_lr(opts, cfg.lr_at(epoch))
        d_y, d_xy = train_epoch(nets, opts, yw, xw, cfg, ref, rng, lags)
        converged = monitor.update(epoch, d_y, d_xy)
        if callback:
            callback(monitor.history[-1])
        if converged:
            break
    return TrainResult(nets[0], nets[1], monitor.history, converged, cfg)


def evaluate(net_y: TreetNet, net_xy: TreetNet, source: DataSource, n_eval: int, seed: int,
             ref: ReferenceSpec = ReferenceSpec(), parallel: int | None = None,
             lags: tuple[int | None, int | None] = (None, None)) -> TreetEstimate:
    """Estimate TE on ``n_eval`` fresh samples with fresh reference draws."""
    memory = net_y.config.memory
    length = memory + (parallel or 30)
    pair = source(n_eval + length, split_seed(seed, 20))
    yw = make_windows(pair.y, length, memory)
    xw = make_windows(pair.x, length, memory)
    return evaluate_windows(net_y, net_xy, yw, xw, seed, ref, lags)


def evaluate_windows(net_y: TreetNet, net_xy: TreetNet, yw: np.ndarray, xw: np.ndarray, seed: int,
                     ref: ReferenceSpec = ReferenceSpec(),
                     lags: tuple[int | None, int | None] = (None, None), chunk: int = 1024
                     ) -> TreetEstimate:
    """Estimate TE on given windows; box references are drawn per ``chunk`` windows."""
    memory = net_y.config.memory
    rng = np.random.default_rng(split_seed(seed, 21))
    refs = np.concatenate([sample_reference(yw[s:s + chunk], ref, rng, yw.shape[1] - memory)
                           for s in range(0, len(yw), chunk)])
    b = build_batch(yw, xw, refs, memory, lags)
    d_y = dv_potential(net_y, b.y_in, b.y_ref)
    d_xy = dv_potential(net_xy, b.xy_in, b.xy_ref)
    return TreetEstimate(d_xy.value - d_y.value, d_y, d_xy, int(d_y.joint_outputs.size),
                         block_stderr(d_y, d_xy), memory, seed)


def block_stderr(d_y: DvPotentialResult, d_xy: DvPotentialResult, n_blocks: int = N_BLOCKS) -> float:
    """Batch-means standard error of ``D_XY - D_Y`` over contiguous window blocks."""
    parts = [np.array_split(a, n_blocks) for a in
             (d_y.joint_outputs, d_y.ref_outputs, d_xy.joint_outputs, d_xy.ref_outputs)]
    vals = [_result(jxy, rxy).value - _result(jy, ry).value for jy, ry, jxy, rxy in zip(*parts)]
    return float(np.std(vals, ddof=1) / math.sqrt(n_blocks))


def estimate_te(source: DataSource, cfg: TrainConfig, ref: ReferenceSpec = ReferenceSpec(),
                seed: int | None = None, lags: tuple[int | None, int | None] = (None, None)
                ) -> tuple[TreetEstimate, TrainResult]:
    """Train on ``source`` and evaluate on fresh data."""
    seed = cfg.seed if seed is None else seed
    result = train_estimator(source, cfg, ref, lags)
    est = evaluate(result.net_y, result.net_xy, source, cfg.eval_samples, split_seed(seed, 99),
                   ref, cfg.parallel, lags)
    est.seed = seed
    est.config = asdict(cfg)
    return est, result


def with_memory(cfg: TrainConfig, memory: int, **kw) -> TrainConfig:
    return replace(cfg, memory=memory, **kw)
