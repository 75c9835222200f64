"""Small functional layers over named parameter maps."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True) -> dict[str, np.ndarray]:
    bound = 1.0 / np.sqrt(fan_in)
    out = {"weight": rng.uniform(-bound, bound, size=(fan_in, fan_out))}
    if bias:
        out["bias"] = rng.uniform(-bound, bound, size=(fan_out,))
    return out


def linear(params: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    """``x @ W + b`` over the last axis; leading axes are flattened for one 2-D product."""
    w = params[f"{prefix}.weight"]
    lead = x.shape[:-1]
    flat = x if x.ndim == 2 else ad.reshape(x, (-1, x.shape[-1]))
    y = ad.matmul(flat, w)
    b = params.get(f"{prefix}.bias")
    if b is not None:
        y = y + b
    return y if x.ndim == 2 else ad.reshape(y, lead + (w.shape[1],))


def init_mlp(rng: np.random.Generator, prefix: str, widths: Sequence[int]) -> dict[str, np.ndarray]:
    out = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        for k, v in init_linear(rng, a, b).items():
            out[f"{prefix}.{i}.{k}"] = v
    return out


def mlp(params: Mapping[str, Tensor], prefix: str, x: Tensor, n_layers: int) -> Tensor:
    """Linear layers with relu between them and none after the last."""
    for i in range(n_layers):
        x = linear(params, f"{prefix}.{i}", x)
        if i < n_layers - 1:
            x = ad.relu(x)
    return x


def layer_norm(params: Mapping[str, Tensor], prefix: str, x: Tensor, eps: float = 1e-5) -> Tensor:
    return ad.layer_norm(x, eps) * params[f"{prefix}.gain"] + params[f"{prefix}.bias"]


def init_layer_norm(prefix: str, width: int) -> dict[str, np.ndarray]:
    return {f"{prefix}.gain": np.ones(width), f"{prefix}.bias": np.zeros(width)}
