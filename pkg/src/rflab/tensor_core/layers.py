"""Fused neural-network layers with hand-written backward passes."""

from __future__ import annotations

import math
from typing import Iterator, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from rflab.errors import ConfigurationError, DimensionError
from rflab.tensor_core.tensor import Tensor, matmul, reshape, swapaxes

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class LayerParams:
    """Named parameter tensors keyed by dot-separated paths.

    Iteration is always in lexicographic key order.
    """

    def __init__(self, tensors: Mapping[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = {}
        for name, value in (tensors or {}).items():
            self[name] = value

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        if not isinstance(value, Tensor):
            value = Tensor(value, requires_grad=True)
        self._t[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __len__(self) -> int:
        return len(self._t)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._t))

    def keys(self) -> list[str]:
        return sorted(self._t)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._t[k]) for k in sorted(self._t)]

    def values(self) -> list[Tensor]:
        return [self._t[k] for k in sorted(self._t)]

    def scoped(self, prefix: str) -> "LayerParams":
        """View of the parameters under ``prefix.`` with the prefix stripped."""
        head = prefix + "."
        return LayerParams({k[len(head):]: v for k, v in self._t.items() if k.startswith(head)})

    def numel(self) -> int:
        return int(sum(t.size for t in self._t.values()))

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: self._t[k].data for k in sorted(self._t)}

    def copy(self, dtype=None) -> "LayerParams":
        """Deep copy as fresh leaves (optionally cast)."""
        return LayerParams({k: Tensor(v.data, requires_grad=True, dtype=dtype or v.dtype)
                            for k, v in self._t.items()})

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype=np.float32) -> "LayerParams":
        return cls({k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in arrays.items()})


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is stored as [in, out]."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def grad_fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._from_op(out, parents, "linear", grad_fn)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return Tensor._from_op(out, (x,), "gelu", grad_fn)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, (x,), "softmax", grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply a per-channel affine map.

    Constant rows normalize to zero (the epsilon keeps the denominator
    positive) rather than raising.
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm expects gain/bias of shape ({d},), got {gain.shape}, {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return Tensor._from_op(out, (x, gain, bias), "layer_norm", grad_fn)


def _conv_core(x: Tensor, w: Tensor, b: Tensor | None, padding: int) -> Tensor:
    # channel-last: x [..., L, C_in], w [C_out, C_in, K] -> [..., L_out, C_out]
    c_out, c_in, k = w.shape
    if x.shape[-1] != c_in:
        raise DimensionError(f"conv1d channel mismatch: input has {x.shape[-1]} channels, "
                             f"weight expects {c_in} (weight shape {w.shape})")
    xd, wd = x.data, w.data
    lead, length = xd.shape[:-2], xd.shape[-2]
    l_out = length + 2 * padding - k + 1
    if l_out < 1:
        raise DimensionError(f"conv1d kernel {k} too long for length {length} with padding {padding}")
    x3 = xd.reshape((-1, length, c_in))
    if padding:
        x3 = np.pad(x3, ((0, 0), (padding, padding), (0, 0)))
    # windows: [N, L_out, C_in, K]
    win = sliding_window_view(x3, k, axis=1)
    cols = win.reshape(-1, c_in * k)
    w2 = wd.reshape(c_out, c_in * k)
    out = cols @ w2.T
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (l_out, c_out))

    def grad_fn(g):
        g2 = g.reshape(-1, c_out)
        gw = (g2.T @ cols).reshape(wd.shape)
        gwin = (g2 @ w2).reshape(x3.shape[0], l_out, c_in, k)
        gx3 = np.zeros(x3.shape, dtype=xd.dtype)
        for j in range(k):
            gx3[:, j:j + l_out, :] += gwin[..., j]
        if padding:
            gx3 = gx3[:, padding:padding + length, :]
        gx = gx3.reshape(xd.shape)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._from_op(out, parents, "conv1d", grad_fn)


def conv1d(x: Tensor, w: Tensor, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation along time; ``x`` is [..., C_in, L], ``w`` is [C_out, C_in, K].

    Returns [..., C_out, L_out] with ``L_out = L + 2*padding - K + 1``.
    """
    if x.ndim < 2:
        raise DimensionError(f"conv1d expects [..., C_in, L], got {x.shape}")
    y = _conv_core(swapaxes(x, -1, -2), w, bias, padding)
    return swapaxes(y, -1, -2)


def conv1d_seq(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Length-preserving conv on a channel-last sequence [..., L, C_in]."""
    k = w.shape[-1]
    if k % 2 == 0:
        raise ConfigurationError(f"same-length conv needs an odd kernel, got {k}")
    return _conv_core(x, w, bias, (k - 1) // 2)


def self_attention(x: Tensor, params: LayerParams, heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention on [..., L, D].

    ``params`` holds ``{q,k,v,o}.{w,b}`` linear layers of shape [D, D].
    """
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigurationError(f"hidden size {d} is not divisible into {heads} heads")
    dh = d // heads
    length = x.shape[-2]
    lead = x.shape[:-2]

    def split(t: Tensor) -> Tensor:
        return swapaxes(reshape(t, lead + (length, heads, dh)), -2, -3)

    q = split(linear(x, params["q.w"], params["q.b"]))
    k = split(linear(x, params["k.w"], params["k.b"]))
    v = split(linear(x, params["v.w"], params["v.b"]))
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    att = softmax_lastdim(scores)
    o = reshape(swapaxes(matmul(att, v), -2, -3), lead + (length, d))
    return linear(o, params["o.w"], params["o.b"])
