"""Reverse-mode autodiff on numpy arrays: tensors, layers, Adam, checkpoint I/O and gradient checks."""

from rflab.tensor_core.tensor import (
    Graph,
    Node,
    Tensor,
    add,
    as_tensor,
    backward,
    checked_mode,
    concat,
    div,
    get_default_dtype,
    getitem,
    is_grad_enabled,
    matmul,
    mean,
    mul,
    no_grad,
    precision,
    reshape,
    square,
    sub,
    sum,
    swapaxes,
)
from rflab.tensor_core.layers import (
    LN_EPS,
    LayerParams,
    conv1d,
    conv1d_seq,
    gelu,
    layer_norm,
    linear,
    self_attention,
    softmax_lastdim,
)
from rflab.tensor_core.optim import AdamState, adam_init, adam_step, clip_grad_norm
from rflab.tensor_core.io import (
    Checkpoint,
    decode_json,
    encode_json,
    load_checkpoint,
    load_tensors,
    read_tensors,
    save_checkpoint,
    save_tensors,
    write_tensors,
)
from rflab.tensor_core.gradcheck import analytic_grad, check_gradients, numeric_grad, relative_error

__all__ = [
    "adam_init",
    "adam_step",
    "AdamState",
    "add",
    "analytic_grad",
    "as_tensor",
    "backward",
    "check_gradients",
    "checked_mode",
    "Checkpoint",
    "clip_grad_norm",
    "concat",
    "conv1d",
    "conv1d_seq",
    "decode_json",
    "div",
    "encode_json",
    "gelu",
    "get_default_dtype",
    "getitem",
    "Graph",
    "is_grad_enabled",
    "layer_norm",
    "LayerParams",
    "linear",
    "LN_EPS",
    "load_checkpoint",
    "load_tensors",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "Node",
    "numeric_grad",
    "precision",
    "read_tensors",
    "relative_error",
    "reshape",
    "save_checkpoint",
    "save_tensors",
    "self_attention",
    "softmax_lastdim",
    "square",
    "sub",
    "sum",
    "swapaxes",
    "Tensor",
    "write_tensors",
]
