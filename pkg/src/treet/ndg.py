"""Neural distribution generator and the alternating capacity optimisation.

The generator maps i.i.d. noise ``U_t`` plus its own last ``l`` outputs (and
the last ``l`` channel outputs when feedback is on) to the next channel input.
Per-step rows are ``[X_i, Y_i, U_i]``: history rows carry ``U = 0``, the present
row carries ``X = Y = 0``.  Histories are detached, so a generated sample only
back-propagates through its own step.

Capacity is estimated by alternating between fitting the two potentials on
generated data and moving the generator up the estimated TE with the
potentials frozen.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np
import torch

from .estimator import (Monitor, ReferenceSpec, TrainConfig, TreetEstimate, _adam, set_lr,
                        dv_bound, evaluate_windows, new_networks, sample_reference, train_epoch)
from .nn import ModelConfig, TreetNet, param_hash
from .processes import ChannelSpec, channel_noise, split_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NdgConfig:
    noise_dim: int = 1
    noise: str = "uniform"  # uniform on [-1, 1], or "gaussian"
    memory: int = 10
    feedback: bool = False
    embed_dim: int = 16
    head_dim: int = 16
    ff_dim: int = 32
    learning_rate: float = 8e-4
    update_period: int = 4
    seed: int = 0

    def __post_init__(self):
        if min(self.noise_dim, self.embed_dim, self.head_dim, self.ff_dim) < 1:
            raise ValueError("NDG dimensions must be positive")
        if self.memory < 0:
            raise ValueError("memory must be >= 0")
        if self.update_period < 1:
            raise ValueError("update_period must be >= 1")
        if self.noise not in ("uniform", "gaussian"):
            raise ValueError(f"unknown noise law {self.noise!r}")


def new_generator(cfg: NdgConfig, d_x: int = 1, d_y: int = 1) -> TreetNet:
    """Causal-attention generator over a window of ``memory + 1`` rows.

    With a window of exactly ``memory + 1`` rows the fixed-past band covers
    every earlier row, so the single output is plain causal attention.
    """
    d_in = d_x + (d_y if cfg.feedback else 0) + cfg.noise_dim
    mc = ModelConfig(input_dim=d_in, embed_dim=cfg.embed_dim, head_dim=cfg.head_dim,
                     ff_dim=cfg.ff_dim, memory=cfg.memory, output_dim=d_x, norm="residual",
                     positional="learned",
                     max_len=max(cfg.memory + 1, 8))
    return TreetNet(mc, seed=split_seed(cfg.seed, 3)).double()


@dataclass
class NdgState:
    """Last ``l`` inputs (and outputs under feedback), oldest first, detached."""

    x_hist: torch.Tensor
    y_hist: torch.Tensor | None
    step: int = 0

    @classmethod
    def zeros(cls, batch: int, memory: int, d_x: int = 1, d_y: int | None = None,
              dtype=torch.float64) -> "NdgState":
        y = None if d_y is None else torch.zeros(batch, memory, d_y, dtype=dtype)
        return cls(torch.zeros(batch, memory, d_x, dtype=dtype), y)

    def push(self, x: torch.Tensor, y: torch.Tensor | None = None) -> "NdgState":
        def roll(h, new):
            return torch.cat([h[:, 1:], new.detach()[:, None]], 1) if h.shape[1] else h

        y_hist = None if self.y_hist is None else roll(self.y_hist, y)
        return NdgState(roll(self.x_hist, x), y_hist, self.step + 1)


def ndg_step(net: TreetNet, state: NdgState, u: torch.Tensor) -> torch.Tensor:
    """Next input ``x_t`` of shape ``(batch, d_x)`` from history and noise ``u``."""
    mem = net.config.memory
    if state.x_hist.shape[1] != mem or (state.y_hist is not None and state.y_hist.shape[1] != mem):
        raise ValueError(f"history length must equal the generator memory {mem}")
    b = u.shape[0]
    hist = [state.x_hist.detach()]
    pres = [torch.zeros(b, 1, state.x_hist.shape[-1], dtype=u.dtype)]
    if state.y_hist is not None:
        hist.append(state.y_hist.detach())
        pres.append(torch.zeros(b, 1, state.y_hist.shape[-1], dtype=u.dtype))
    hist.append(torch.zeros(b, mem, u.shape[-1], dtype=u.dtype))
    pres.append(u[:, None])
    rows = torch.cat([torch.cat(hist, -1), torch.cat(pres, -1)], 1)
    if rows.shape[-1] != net.config.input_dim:
        raise ValueError(f"generator expects rows of width {net.config.input_dim}, got {rows.shape[-1]}")
    out = net(rows)
    return out.reshape(b, -1)


def draw_noise(cfg: NdgConfig, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if cfg.noise == "uniform":
        return rng.uniform(-1.0, 1.0, shape)
    return rng.standard_normal(shape)


def generate_sequence(net: TreetNet, channel: ChannelSpec, cfg: NdgConfig, batch: int, length: int,
                      seed: int, requires_grad: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Generate ``batch`` independent sequences of ``length`` channel uses.

    Each step's inputs are rescaled over the batch to mean square ``power``.
    Returns ``(X, Y)`` of shape ``(batch, length, 1)``.
    """
    if channel.kind == "benchmark":
        raise ValueError("capacity optimisation needs an additive-noise channel")
    rng = np.random.default_rng(seed)
    u = torch.as_tensor(draw_noise(cfg, (length, batch, cfg.noise_dim), rng))
    z = torch.as_tensor(channel_noise(channel, (length, batch), rng, time_axis=0))
    state = NdgState.zeros(batch, cfg.memory, 1, 1 if cfg.feedback else None)
    xs, ys = [], []
    with torch.set_grad_enabled(requires_grad):
        for t in range(length):
            x = ndg_step(net, state, u[t])
            x = power_scale(x, channel.power)
            y = x + z[t][:, None]
            xs.append(x)
            ys.append(y)
            state = state.push(x, y)
    return torch.stack(xs, 1), torch.stack(ys, 1)


def power_scale(x: torch.Tensor, power: float) -> torch.Tensor:
    ms = (x * x).mean()
    if float(ms.detach()) <= 0:
        raise ValueError("generator produced an all-zero batch")
    return x * torch.sqrt(power / ms)


def attention_heatmap(net_xy: TreetNet, xy_windows: np.ndarray | torch.Tensor) -> np.ndarray:
    """Head-averaged softmax weights ``(windows, queries, lags 0..l)`` of the XY network."""
    x = torch.as_tensor(xy_windows, dtype=net_xy.value_embed.dtype)
    with torch.no_grad():
        w = net_xy.attention_weights(x)
    return w.mean(1).numpy()


def lag_profile(heatmap: np.ndarray) -> np.ndarray:
    """Mean attention weight per relative lag over windows and queries."""
    return heatmap.reshape(-1, heatmap.shape[-1]).mean(0)


@dataclass
class CapacityResult:
    te_star: float
    estimate: TreetEstimate
    generator: TreetNet
    net_y: TreetNet
    net_xy: TreetNet
    history: list[dict]
    converged: bool
    eval_windows: tuple[np.ndarray, np.ndarray]


def _windows(x: torch.Tensor, y: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
    return y.detach().numpy(), x.detach().numpy()


def _ndg_objective(net_y: TreetNet, net_xy: TreetNet, x: torch.Tensor, y: torch.Tensor,
                   memory: int, ref: ReferenceSpec, rng: np.random.Generator) -> torch.Tensor:
    dtype = net_y.value_embed.dtype
    x, y = x.to(dtype), y.to(dtype)
    refs = torch.as_tensor(sample_reference(y.detach().numpy(), ref, rng, y.shape[1] - memory),
                           dtype=dtype)
    xy = torch.cat([y, x], -1)
    xy_ref = torch.cat([refs, x[:, memory:]], -1)
    jy, ry = net_y(y, refs)
    jxy, rxy = net_xy(xy, xy_ref)
    return dv_bound(jxy, rxy) - dv_bound(jy, ry)


def optimize_capacity(channel: ChannelSpec, cfg: TrainConfig, ndg_cfg: NdgConfig | None = None,
                      ref: ReferenceSpec = ReferenceSpec(), final_epochs: int = 4,
                      callback: Callable[[dict], None] | None = None) -> CapacityResult:
    """Alternate potential fitting and generator ascent; returns the evaluated TE*.

    Every ``update_period``-th epoch updates the generator (potentials frozen);
    the others fit both potentials on freshly generated windows (generator
    frozen).  ``final_epochs`` potential-only epochs run before evaluation.
    """
    ndg_cfg = ndg_cfg or NdgConfig(memory=cfg.memory, feedback=channel.feedback, seed=cfg.seed)
    if ndg_cfg.feedback != channel.feedback:
        ndg_cfg = replace(ndg_cfg, feedback=channel.feedback)
    gen = new_generator(ndg_cfg)
    nets = new_networks(cfg, 1, 1)
    opts = tuple(_adam(n, cfg.learning_rate, cfg) for n in nets)
    gen_opt = _adam(gen, ndg_cfg.learning_rate, cfg)
    n_windows = max(1, cfg.samples_per_epoch // cfg.parallel)
    monitor = Monitor(cfg)
    converged = False
    period = ndg_cfg.update_period
    for epoch in range(cfg.max_epochs + final_epochs):
        seed = split_seed(cfg.seed, 30, epoch)
        rng = np.random.default_rng(split_seed(cfg.seed, 31, epoch))
        ndg_turn = epoch < cfg.max_epochs and epoch % period == period - 1
        if ndg_turn:
            frozen = [param_hash(n) for n in nets]
            for n in nets:
                n.requires_grad_(False)
            vals = []
            for s in range(max(1, n_windows // cfg.batch_size)):
                x, y = generate_sequence(gen, channel, ndg_cfg, cfg.batch_size, cfg.window,
                                         split_seed(seed, s), requires_grad=True)
                obj = _ndg_objective(*nets, x, y, cfg.memory, ref, rng)
                gen_opt.zero_grad()
                (-obj).backward()
                gen_opt.step()
                vals.append(float(obj.detach()))
            for n in nets:
                n.requires_grad_(True)
            assert frozen == [param_hash(n) for n in nets], "potentials moved during generator update"
            row = {"epoch": epoch, "phase": "ndg", "te_raw": float(np.mean(vals))}
            log.debug("epoch %d: %s", epoch, row)
            if callback:
                callback(row)
            continue
        frozen = param_hash(gen)
        x, y = generate_sequence(gen, channel, ndg_cfg, n_windows, cfg.window, seed)
        yw, xw = _windows(x, y)
        set_lr(opts, cfg.lr_at(epoch))
        d_y, d_xy = train_epoch(nets, opts, yw, xw, cfg, ref, rng)
        assert frozen == param_hash(gen), "generator moved during potential update"
        plateau = monitor.update(epoch, d_y, d_xy, phase="treet")
        if callback:
            callback(monitor.history[-1])
        if plateau and epoch >= cfg.max_epochs:
            converged = True
    x, y = generate_sequence(gen, channel, ndg_cfg, max(1, cfg.eval_samples // cfg.parallel),
                             cfg.window, split_seed(cfg.seed, 40))
    yw, xw = _windows(x, y)
    est = evaluate_windows(*nets, yw, xw, split_seed(cfg.seed, 41), ref)
    est.config = {"train": asdict(cfg), "ndg": asdict(ndg_cfg), "channel": asdict(channel)}
    return CapacityResult(est.te, est, gen, nets[0], nets[1], monitor.history, converged, (yw, xw))
