"""Central finite-difference gradient checking.

The numeric side always runs in float64 under ``no_grad``; the analytic side
runs in whatever dtype is requested. Comparing an f32 analytic gradient with
an f64 numeric one is how the f32 pipeline is validated.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from rflab.tensor_core.tensor import Tensor, backward, no_grad, precision


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)`` in the L2 norm.

    The floor keeps exactly-zero gradients (e.g. a key bias under softmax)
    from turning finite-difference roundoff into a relative error of 1.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(fn: Callable[[dict[str, Tensor]], Tensor], inputs: Mapping[str, np.ndarray],
                 name: str, h: float = 1e-3, coords: np.ndarray | None = None) -> np.ndarray:
    """d fn / d inputs[name] by central differences in float64.

    ``coords`` optionally restricts the check to a subset of flat indices; the
    result then has one entry per coordinate.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    flat = base[name].reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    out = np.empty(idx.size)
    with precision(np.float64), no_grad():
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn({k: Tensor(v, dtype=np.float64) for k, v in base.items()}).item()
            flat[i] = orig - h
            fm = fn({k: Tensor(v, dtype=np.float64) for k, v in base.items()}).item()
            flat[i] = orig
            out[j] = (fp - fm) / (2.0 * h)
    return out if coords is not None else out.reshape(base[name].shape)


def analytic_grad(fn: Callable[[dict[str, Tensor]], Tensor], inputs: Mapping[str, np.ndarray],
                  dtype=np.float32) -> dict[str, np.ndarray]:
    with precision(dtype):
        tensors = {k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in inputs.items()}
        loss = fn(tensors)
        backward(loss)
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}


def check_gradients(fn: Callable[[dict[str, Tensor]], Tensor], inputs: Mapping[str, np.ndarray],
                    dtype=np.float32, h: float = 1e-3, max_coords: int | None = None,
                    seed: int = 0) -> dict[str, float]:
    """Relative error of the analytic gradient of every input.

    With ``max_coords`` set, each input is checked on at most that many
    randomly chosen coordinates.
    """
    grads = analytic_grad(fn, inputs, dtype)
    rng = np.random.default_rng(seed)
    errors = {}
    for name in inputs:
        size = np.asarray(inputs[name]).size
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, max_coords, replace=False))
            num = numeric_grad(fn, inputs, name, h, coords)
            ana = grads[name].reshape(-1)[coords]
        else:
            num = numeric_grad(fn, inputs, name, h)
            ana = grads[name]
        errors[name] = relative_error(ana, num)
    return errors
