"""Conditional vector-field estimator ``v(x, t | c; theta)``.

Pipeline::

    c --length_regulate--> shallow conv stack --\
                                                 fuse (channel concat) -> [L, H]
    x -------------------> shallow conv stack --/
    prepend timestep token -> + positional table -> N pre-norm blocks
    (self-attention, Conv1D FFN) -> LayerNorm -> Conv1D head -> drop token row

Sequences are channel-last: x is [B, L_x, D_x], c is [B, L_c, D_c].

Parameter count, with half = H // 2, Ks = shallow_kernel,
(K1, K2) = ffn_kernels, P = max_seq_len + 1::

    branches   half*(D_x + D_c)*Ks + 2*half*half*Ks + 4*half
    time MLP   2*(H*H + H)
    positions  P*H
    per block  4*(H*H + H) + 4*H + F*H*K1 + F + H*F*K2 + H
    head       2*H + D_x*H + D_x
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from rflab.errors import (
    AlignmentError,
    CapacityError,
    ConfigurationError,
    DimensionError,
    DomainError,
    RFLabError,
)
from rflab.rng import substream
from rflab.tensor_core import (
    LayerParams,
    Tensor,
    add,
    concat,
    conv1d_seq,
    gelu,
    getitem,
    layer_norm,
    linear,
    reshape,
    self_attention,
)


@dataclass(frozen=True)
class EstimatorConfig:
    latent_dim: int = 2
    cond_dim: int = 8
    hidden_dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    max_seq_len: int = 64
    regulate_ratio: int = 1
    shallow_kernel: int = 3
    ffn_kernels: tuple[int, int] = (3, 1)
    head_kernel: int = 1
    cross_attention: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ffn_kernels", tuple(self.ffn_kernels))
        if self.hidden_dim % 2:
            raise ConfigurationError(f"hidden_dim must be even, got {self.hidden_dim}")
        if self.heads < 1 or self.hidden_dim % self.heads:
            raise ConfigurationError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.ffn_dim < self.hidden_dim:
            raise ConfigurationError(f"ffn_dim {self.ffn_dim} must be >= hidden_dim {self.hidden_dim}")
        if self.regulate_ratio < 1:
            raise ConfigurationError(f"regulate_ratio must be >= 1, got {self.regulate_ratio}")
        if self.layers < 0 or self.latent_dim < 1 or self.cond_dim < 1 or self.max_seq_len < 1:
            raise ConfigurationError(f"invalid estimator sizes: {self}")
        for k in (self.shallow_kernel, self.head_kernel, *self.ffn_kernels):
            if k < 1 or k % 2 == 0:
                raise ConfigurationError(f"kernel sizes must be odd and positive, got {k}")
        if self.cross_attention:
            raise ConfigurationError("cross_attention is reserved for a future variant and not implemented")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ffn_kernels"] = list(self.ffn_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown estimator config keys: {sorted(unknown)}")
        return cls(**d)


# Desk-scale and full-scale presets. Only TINY is meant to be trained here.
TINY = dict(hidden_dim=64, layers=2, heads=4, ffn_dim=128)
SMALL = dict(hidden_dim=384, layers=4, heads=8, ffn_dim=1536)
BASE = dict(hidden_dim=576, layers=4, heads=8, ffn_dim=2304)
LARGE = dict(hidden_dim=768, layers=6, heads=8, ffn_dim=3072)


@dataclass
class ConditionSeq:
    """Condition features [L_c, D_c]; ``null_flag`` selects the all-zero condition."""

    features: np.ndarray
    null_flag: bool = False

    def effective(self) -> np.ndarray:
        f = np.asarray(self.features)
        return np.zeros_like(f) if self.null_flag else f


@dataclass
class LatentSeq:
    values: np.ndarray


def length_regulate(c, r: int) -> np.ndarray:
    """Repeat every condition frame ``r`` times along the time axis.

    Row ``i`` of the output is row ``i // r`` of the input. Accepts a
    :class:`ConditionSeq` or an array [..., L_c, D_c].
    """
    if r < 1:
        raise ConfigurationError(f"regulate ratio must be >= 1, got {r}")
    arr = c.effective() if isinstance(c, ConditionSeq) else np.asarray(c)
    return np.repeat(arr, r, axis=-2)


def sinusoid(t, dim: int) -> np.ndarray:
    """Raw sinusoidal embedding of ``1000 t``: [sin(f_i s) | cos(f_i s)], f_i = 10000^(-i/(dim/2))."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise DomainError(f"timestep must lie in [0, 1], got {t}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    s = 1000.0 * t[..., None] * freqs
    return np.concatenate([np.sin(s), np.cos(s)], axis=-1)


def timestep_embed(params: LayerParams, t, dim: int) -> Tensor:
    """Sinusoid followed by a two-layer GELU MLP; [..., dim]."""
    dtype = params["time.0.w"].dtype
    h = Tensor(sinusoid(t, dim), dtype=dtype)
    h = gelu(linear(h, params["time.0.w"], params["time.0.b"]))
    return linear(h, params["time.1.w"], params["time.1.b"])


def fuse(x_proj: Tensor, c_proj: Tensor) -> Tensor:
    """Channel-wise concatenation ``[x_proj | c_proj]`` of aligned sequences."""
    if x_proj.shape[:-1] != c_proj.shape[:-1]:
        raise AlignmentError(f"cannot fuse misaligned sequences {x_proj.shape} and {c_proj.shape}; "
                             "check regulate_ratio")
    return concat([x_proj, c_proj], axis=-1)


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------

def param_shapes(cfg: EstimatorConfig) -> dict[str, tuple[int, ...]]:
    h, half, f = cfg.hidden_dim, cfg.hidden_dim // 2, cfg.ffn_dim
    ks, (k1, k2) = cfg.shallow_kernel, cfg.ffn_kernels
    shapes: dict[str, tuple[int, ...]] = {}
    for branch, din in (("x_proj", cfg.latent_dim), ("c_proj", cfg.cond_dim)):
        shapes[f"{branch}.0.w"] = (half, din, ks)
        shapes[f"{branch}.0.b"] = (half,)
        shapes[f"{branch}.1.w"] = (half, half, ks)
        shapes[f"{branch}.1.b"] = (half,)
    for i in range(2):
        shapes[f"time.{i}.w"] = (h, h)
        shapes[f"time.{i}.b"] = (h,)
    shapes["pos_emb"] = (cfg.max_seq_len + 1, h)
    for n in range(cfg.layers):
        p = f"blocks.{n}"
        for norm in ("norm1", "norm2"):
            shapes[f"{p}.{norm}.gain"] = (h,)
            shapes[f"{p}.{norm}.bias"] = (h,)
        for proj in "qkvo":
            shapes[f"{p}.attn.{proj}.w"] = (h, h)
            shapes[f"{p}.attn.{proj}.b"] = (h,)
        shapes[f"{p}.ffn.0.w"] = (f, h, k1)
        shapes[f"{p}.ffn.0.b"] = (f,)
        shapes[f"{p}.ffn.1.w"] = (h, f, k2)
        shapes[f"{p}.ffn.1.b"] = (h,)
    shapes["out_norm.gain"] = (h,)
    shapes["out_norm.bias"] = (h,)
    shapes["out_conv.w"] = (cfg.latent_dim, h, cfg.head_kernel)
    shapes["out_conv.b"] = (cfg.latent_dim,)
    return shapes


def count_params(cfg: EstimatorConfig) -> int:
    """Exact trainable parameter count (closed form, see module docstring)."""
    h, half, f = cfg.hidden_dim, cfg.hidden_dim // 2, cfg.ffn_dim
    ks, (k1, k2) = cfg.shallow_kernel, cfg.ffn_kernels
    branches = half * (cfg.latent_dim + cfg.cond_dim) * ks + 2 * half * half * ks + 4 * half
    time_mlp = 2 * (h * h + h)
    positions = (cfg.max_seq_len + 1) * h
    block = 4 * (h * h + h) + 4 * h + f * h * k1 + f + h * f * k2 + h
    head = 2 * h + cfg.latent_dim * h * cfg.head_kernel + cfg.latent_dim
    return branches + time_mlp + positions + cfg.layers * block + head


def init_params(cfg: EstimatorConfig, seed: int = 0) -> LayerParams:
    """Fresh parameters.

    Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases, positional table and
    the output head are zero (so a fresh estimator outputs exactly 0); norm
    gains are one.
    """
    rng = substream(seed, 0, "estimator.init")
    params = LayerParams()
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".w") and not name.startswith("out_conv"):
            fan_in = shape[0] if len(shape) == 2 else shape[1] * shape[2]
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True, dtype=np.float32)
    return params


# --------------------------------------------------------------------------
# Forward
# --------------------------------------------------------------------------

def _shallow(params: LayerParams, branch: str, x: Tensor) -> Tensor:
    h = gelu(conv1d_seq(x, params[f"{branch}.0.w"], params[f"{branch}.0.b"]))
    return conv1d_seq(h, params[f"{branch}.1.w"], params[f"{branch}.1.b"])


def _block(params: LayerParams, h: Tensor, heads: int) -> Tensor:
    a = layer_norm(h, params["norm1.gain"], params["norm1.bias"])
    h = add(h, self_attention(a, params.scoped("attn"), heads))
    f = layer_norm(h, params["norm2.gain"], params["norm2.bias"])
    f = gelu(conv1d_seq(f, params["ffn.0.w"], params["ffn.0.b"]))
    return add(h, conv1d_seq(f, params["ffn.1.w"], params["ffn.1.b"]))


def _condition_array(c, null, batch: int | None) -> np.ndarray:
    if isinstance(c, ConditionSeq):
        arr = np.asarray(c.features)
        null = c.null_flag if null is None else null
    else:
        arr = np.asarray(c)
    if null is None:
        return arr
    flags = np.asarray(null, dtype=bool)
    if flags.ndim == 0:
        return np.zeros_like(arr) if flags else arr
    if arr.ndim != 3 or flags.shape != (arr.shape[0],):
        raise DimensionError(f"per-item null flags {flags.shape} need a batched condition, got {arr.shape}")
    return np.where(flags[:, None, None], np.zeros_like(arr), arr)


def forward(params: LayerParams, x, t, c, cfg: EstimatorConfig, null=None) -> Tensor:
    """Vector-field prediction with the same shape as ``x``.

    ``x`` is [L_x, D_x] or [B, L_x, D_x]; ``t`` a scalar or [B] array;
    ``c`` an array [.., L_c, D_c] or a :class:`ConditionSeq`; ``null`` a bool
    or [B] bool array replacing conditions by zeros.
    """
    xa = x.data if isinstance(x, Tensor) else np.asarray(x)
    unbatched = xa.ndim == 2
    if xa.ndim not in (2, 3) or xa.shape[-1] != cfg.latent_dim:
        raise DimensionError(f"latent must be [B, L, {cfg.latent_dim}] or [L, {cfg.latent_dim}], got {xa.shape}")
    ca = _condition_array(c, null, None)
    if unbatched:
        xa, ca = xa[None], ca[None] if ca.ndim == 2 else ca
    if ca.ndim != 3 or ca.shape[-1] != cfg.cond_dim:
        raise DimensionError(f"condition must be [B, L_c, {cfg.cond_dim}], got {ca.shape}")
    if ca.shape[0] != xa.shape[0]:
        if ca.shape[0] == 1:
            ca = np.broadcast_to(ca, (xa.shape[0],) + ca.shape[1:])
        else:
            raise DimensionError(f"batch mismatch: latent {xa.shape}, condition {ca.shape}")
    batch, length = xa.shape[0], xa.shape[1]
    if length > cfg.max_seq_len:
        raise CapacityError(f"sequence length {length} exceeds max_seq_len {cfg.max_seq_len}")
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))

    dtype = params["pos_emb"].dtype
    xt = x if isinstance(x, Tensor) and not unbatched else Tensor(xa, dtype=dtype)
    c_reg = Tensor(length_regulate(ca, cfg.regulate_ratio), dtype=dtype)

    h = fuse(_shallow(params, "x_proj", xt), _shallow(params, "c_proj", c_reg))
    tok = reshape(timestep_embed(params, t_arr, cfg.hidden_dim), (batch, 1, cfg.hidden_dim))
    h = concat([tok, h], axis=1)
    h = add(h, getitem(params["pos_emb"], slice(0, length + 1)))
    for n in range(cfg.layers):
        h = _block(params.scoped(f"blocks.{n}"), h, cfg.heads)
        if h.shape[1] != length + 1:
            raise RFLabError(f"block {n} changed the sequence length to {h.shape[1]}")
    h = layer_norm(h, params["out_norm.gain"], params["out_norm.bias"])
    h = getitem(h, (slice(None), slice(1, None)))
    out = conv1d_seq(h, params["out_conv.w"], params["out_conv.b"])
    return reshape(out, out.shape[1:]) if unbatched else out


def resolve_config(cfg: EstimatorConfig | dict) -> EstimatorConfig:
    return cfg if isinstance(cfg, EstimatorConfig) else EstimatorConfig.from_dict(cfg)


def batch_conditions(conds: Sequence[ConditionSeq]) -> tuple[np.ndarray, np.ndarray]:
    feats = np.stack([np.asarray(c.features) for c in conds])
    return feats, np.array([c.null_flag for c in conds], dtype=bool)
