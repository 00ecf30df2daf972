"""Single-block causal transformer with fixed-past (banded) attention.

The network maps a window of ``N`` input vectors to one scalar (or
``output_dim`` vector) per position ``t >= memory``.  Each query attends to
its own position and the ``memory`` positions before it, so the output at
``t`` is a function of ``x[t - memory : t + 1]`` only.

Passing ``ref`` to :meth:`TreetNet.forward` evaluates a second branch in the
same call: at every valid position the present input is swapped for a
reference row while the keys and values of the past are re-used from the
real sequence.  Both branches read the same parameters.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "elu": F.elu,
    "relu": F.relu,
    "gelu": F.gelu,
    "tanh": torch.tanh,
}
NORM_EPS = 1e-5


class NumericError(FloatingPointError):
    """Raised when a forward or backward pass produces non-finite values."""


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    embed_dim: int = 32
    n_heads: int = 1
    head_dim: int = 32
    ff_dim: int = 64
    memory: int = 1
    output_dim: int = 1
    activation: str = "elu"
    # "concat": LayerNorm(concat(residual, attention)); "residual": residual + attention
    norm: str = "concat"
    positional: str = "sinusoidal"  # "sinusoidal" | "learned" | "none"
    max_len: int = 512
    scale_scores: bool = True

    def __post_init__(self):
        for name in ("input_dim", "embed_dim", "n_heads", "head_dim", "ff_dim", "output_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.memory < 0:
            raise ValueError(f"memory must be >= 0, got {self.memory}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.norm not in ("concat", "residual"):
            raise ValueError(f"unknown norm mode {self.norm!r}")
        if self.positional not in ("sinusoidal", "learned", "none"):
            raise ValueError(f"unknown positional encoding {self.positional!r}")

    @property
    def model_dim(self) -> int:
        return 2 * self.embed_dim if self.norm == "concat" else self.embed_dim


@dataclass(frozen=True)
class FpcaMask:
    """Banded causal mask: query ``q`` sees key ``k`` iff ``0 <= q - k <= window``."""

    window: int
    length: int

    def __post_init__(self):
        if self.window < 0 or self.length < 1:
            raise ValueError(f"invalid mask window={self.window} length={self.length}")

    @property
    def entries(self) -> np.ndarray:
        q = np.arange(self.length)[:, None]
        k = np.arange(self.length)[None, :]
        return (q - k >= 0) & (q - k <= self.window)

    def additive(self) -> np.ndarray:
        """Mask in additive form (0 for active, -inf for blocked)."""
        return np.where(self.entries, 0.0, -np.inf)


def sinusoidal_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    enc = torch.zeros(length, dim, dtype=torch.float64)
    enc[:, 0::2] = torch.sin(pos * freq)
    enc[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return enc


def _shift(t: torch.Tensor, lag: int) -> torch.Tensor:
    """Delay ``t`` (…, N, d) by ``lag`` steps along the sequence axis, zero-filled."""
    if lag == 0:
        return t
    return F.pad(t, (0, 0, lag, 0))[..., : t.shape[-2], :]


def _check_finite(t: torch.Tensor, what: str, start: int = 0):
    bad = ~torch.isfinite(t)
    if bad.any():
        pos = int(torch.nonzero(bad.reshape(-1, *bad.shape[-2:]).any(-1).any(0))[0]) + start
        raise NumericError(f"non-finite {what} at sequence position {pos}")


class TreetNet(nn.Module):
    """One (modified-)FPCA attention layer, a feed-forward layer and a dense head."""

    def __init__(self, config: ModelConfig, seed: int | None = 0):
        super().__init__()
        self.config = c = config
        hd = c.n_heads * c.head_dim
        d = c.model_dim
        self.value_embed = nn.Parameter(torch.empty(c.embed_dim, c.input_dim))
        if c.positional == "learned":
            self.pos_embed = nn.Parameter(torch.zeros(c.max_len, c.embed_dim))
        else:
            table = sinusoidal_encoding(c.max_len, c.embed_dim)
            if c.positional == "none":
                table.zero_()
            self.register_buffer("pos_table", table.to(torch.get_default_dtype()), persistent=False)
        self.query = nn.Parameter(torch.empty(hd, c.embed_dim))
        self.key = nn.Parameter(torch.empty(hd, c.embed_dim))
        self.value = nn.Parameter(torch.empty(hd, c.embed_dim))
        self.out_proj = nn.Parameter(torch.empty(c.embed_dim, hd))
        if c.norm == "concat":
            self.norm_scale = nn.Parameter(torch.ones(d))
            self.norm_shift = nn.Parameter(torch.zeros(d))
        self.ff_in = nn.Parameter(torch.empty(c.ff_dim, d))
        self.ff_in_bias = nn.Parameter(torch.zeros(c.ff_dim))
        self.ff_out = nn.Parameter(torch.empty(d, c.ff_dim))
        self.ff_out_bias = nn.Parameter(torch.zeros(d))
        self.head = nn.Parameter(torch.empty(c.output_dim, d))
        self.head_bias = nn.Parameter(torch.zeros(c.output_dim))
        self.seed = seed
        self.attention_ops = 0
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int | None = 0):
        gen = torch.Generator().manual_seed(0 if seed is None else int(seed))
        with torch.no_grad():
            for w in (self.value_embed, self.query, self.key, self.value, self.out_proj,
                      self.ff_in, self.ff_out, self.head):
                bound = 1.0 / math.sqrt(w.shape[1])
                w.copy_(torch.rand(w.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)

    # -- building blocks -------------------------------------------------

    def positions(self, start: int, stop: int) -> torch.Tensor:
        if stop > self.config.max_len:
            raise ValueError(f"sequence length {stop} exceeds max_len {self.config.max_len}")
        table = self.pos_embed if self.config.positional == "learned" else self.pos_table
        return table[start:stop]

    def embed(self, x: torch.Tensor, start: int = 0) -> torch.Tensor:
        """Linear value embedding plus positional encoding of positions ``start..``."""
        if x.shape[-1] != self.config.input_dim:
            raise ValueError(f"expected input dim {self.config.input_dim}, got {tuple(x.shape)}")
        return x @ self.value_embed.T + self.positions(start, start + x.shape[-2])

    def _heads(self, xpe: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        b, n, _ = xpe.shape
        return (xpe @ w.T).view(b, n, self.config.n_heads, self.config.head_dim).transpose(1, 2)

    def _project_out(self, a: torch.Tensor) -> torch.Tensor:
        b, h, m, dm = a.shape
        return a.transpose(1, 2).reshape(b, m, h * dm) @ self.out_proj.T

    def _band(self, q, k, v, start, k_present=None, v_present=None, keep_weights=False):
        """Attention of queries at positions ``start..start+M-1`` over their band of keys.

        ``k_present``/``v_present`` replace the lag-0 key/value (modified FPCA).
        Work is one d-dimensional dot product per (query, lag) pair.
        """
        mem = self.config.memory
        m = q.shape[-2]
        scale = 1.0 / math.sqrt(self.config.head_dim) if self.config.scale_scores else 1.0
        scores = []
        for lag in range(mem + 1):
            if lag == 0 and k_present is not None:
                kk = k_present
            else:
                kk = _shift(k, lag)[..., start:start + m, :]
            scores.append((q * kk).sum(-1))
        self.attention_ops += q.numel() * (mem + 1)
        s = torch.stack(scores, -1) * scale
        pos = torch.arange(start, start + m)[:, None]
        blocked = pos < torch.arange(mem + 1)[None, :]
        if blocked.any():
            s = s.masked_fill(blocked, float("-inf"))
        w = torch.softmax(s, dim=-1)
        out = None
        for lag in range(mem + 1):
            if lag == 0 and v_present is not None:
                vv = v_present
            else:
                vv = _shift(v, lag)[..., start:start + m, :]
            term = w[..., lag:lag + 1] * vv
            out = term if out is None else out + term
        _check_finite(out, "attention output", start)
        return out, (w if keep_weights else None)

    def _head_block(self, residual: torch.Tensor, attended: torch.Tensor) -> torch.Tensor:
        c = self.config
        if c.norm == "concat":
            z = F.layer_norm(torch.cat([residual, attended], -1), (c.model_dim,),
                             self.norm_scale, self.norm_shift, NORM_EPS)
        else:
            z = residual + attended
        act = ACTIVATIONS[c.activation]
        z = z + act(z @ self.ff_in.T + self.ff_in_bias) @ self.ff_out.T + self.ff_out_bias
        out = z @ self.head.T + self.head_bias
        return out.squeeze(-1) if c.output_dim == 1 else out

    # -- public ops ------------------------------------------------------

    def fpca_attention(self, xpe: torch.Tensor, return_weights: bool = False):
        """Residual FPCA layer over all N positions: ``xpe + sum_h W_O^h softmax(.) V^h``.

        Weights are returned indexed by lag (``[..., j]`` is the weight on key ``t - j``).
        """
        q, k, v = (self._heads(xpe, w) for w in (self.query, self.key, self.value))
        a, w = self._band(q, k, v, 0, keep_weights=return_weights)
        out = xpe + self._project_out(a)
        return (out, w) if return_weights else out

    def modified_fpca_attention(self, xpe: torch.Tensor, xpe_ref: torch.Tensor,
                                return_weights: bool = False):
        """Residual attention with the present query/key/value taken from ``xpe_ref``.

        ``xpe_ref`` holds the embedded reference rows for positions ``memory..N-1``.
        """
        mem = self.config.memory
        q, k, v = (self._heads(xpe, w) for w in (self.query, self.key, self.value))
        qr, kr, vr = (self._heads(xpe_ref, w) for w in (self.query, self.key, self.value))
        a, w = self._band(qr, k, v, mem, k_present=kr, v_present=vr, keep_weights=return_weights)
        out = xpe_ref + self._project_out(a)
        return (out, w) if return_weights else out

    def forward(self, x: torch.Tensor, ref: torch.Tensor | None = None):
        """Outputs at positions ``memory..N-1``.

        Parameters
        ----------
        x : (B, N, input_dim) tensor
        ref : optional (B, N - memory, input_dim) tensor
            Present-position substitutes for the reference branch.

        Returns
        -------
        joint outputs ``(B, N - memory)``, or ``(joint, ref_outputs)`` when ``ref`` is given.
        """
        mem = self.config.memory
        if x.dim() != 3:
            raise ValueError(f"expected (batch, length, dim) input, got {tuple(x.shape)}")
        n = x.shape[1]
        if n <= mem:
            raise ValueError(f"sequence length {n} must exceed memory {mem}")
        xpe = self.embed(x)
        q, k, v = (self._heads(xpe, w) for w in (self.query, self.key, self.value))
        a, _ = self._band(q[..., mem:, :], k, v, mem)
        joint = self._head_block(xpe[:, mem:], self._project_out(a))
        if ref is None:
            return joint
        if ref.shape != (x.shape[0], n - mem, x.shape[2]):
            raise ValueError(f"reference shape {tuple(ref.shape)} does not match "
                             f"{(x.shape[0], n - mem, x.shape[2])}")
        xpe_ref = self.embed(ref, start=mem)
        qr, kr, vr = (self._heads(xpe_ref, w) for w in (self.query, self.key, self.value))
        a_ref, _ = self._band(qr, k, v, mem, k_present=kr, v_present=vr)
        return joint, self._head_block(xpe_ref, self._project_out(a_ref))

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax weights (B, heads, N - memory, memory + 1) indexed by lag."""
        mem = self.config.memory
        xpe = self.embed(x)
        q, k, v = (self._heads(xpe, w) for w in (self.query, self.key, self.value))
        _, w = self._band(q[..., mem:, :], k, v, mem, keep_weights=True)
        return w


def grad(objective: Callable[[TreetNet], torch.Tensor], net: TreetNet) -> dict[str, torch.Tensor]:
    """Gradient of a scalar objective w.r.t. every parameter block of ``net``."""
    names, params = zip(*net.named_parameters())
    value = objective(net)
    if value.dim() != 0:
        raise ValueError("objective must return a scalar")
    if not value.requires_grad:
        return {n: torch.zeros_like(p) for n, p in zip(names, params)}
    grads = torch.autograd.grad(value, params, allow_unused=True)
    out = {}
    for name, p, g in zip(names, params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter block {name!r}")
        out[name] = g
    return out


def param_hash(net: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(net.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().astype(np.float64).tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(net: TreetNet, path: str | Path, extra: dict | None = None):
    params = {
        name: {"shape": list(p.shape), "data": p.detach().cpu().double().reshape(-1).tolist()}
        for name, p in net.named_parameters()
    }
    doc = {"config": asdict(net.config), "seed": net.seed, "params": params, **(extra or {})}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> TreetNet:
    doc = json.loads(Path(path).read_text())
    net = TreetNet(ModelConfig(**doc["config"]), seed=doc.get("seed"))
    with torch.no_grad():
        for name, p in net.named_parameters():
            block = doc["params"][name]
            p.copy_(torch.tensor(block["data"], dtype=torch.float64).reshape(block["shape"]))
    return net
