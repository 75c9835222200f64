"""Parameter-level gradient helpers, including the one-step unrolled meta-gradient."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import ops
from .params import ParameterSet
from .tensor import Tensor, grad

ParamMap = Mapping[str, Tensor]
LossBuilder = Callable[[ParamMap, ParamMap], Tensor]


def _as_map(params: ParameterSet | ParamMap) -> dict[str, Tensor]:
    return params.tensors() if isinstance(params, ParameterSet) else dict(params)


def _check_scalar(loss: Tensor, what: str = "loss") -> None:
    if loss.size != 1:
        raise ValueError(f"{what} must be a scalar, got shape {loss.shape}")


def gradient(loss: Tensor, params: ParameterSet | ParamMap, create_graph: bool = False) -> dict[str, Tensor]:
    """d loss / d param for every named parameter (zeros where unreachable)."""
    _check_scalar(loss)
    pmap = _as_map(params)
    names = list(pmap)
    grads = grad(loss, [pmap[n] for n in names], create_graph=create_graph)
    return dict(zip(names, grads))


def backward(loss: Tensor, params: ParameterSet) -> None:
    """Accumulate d loss / d param into the parameter set's gradient slots."""
    params.accumulate(gradient(loss, params))


def unrolled_gradient(
    outer_loss: LossBuilder,
    inner_loss: LossBuilder,
    theta: ParameterSet | ParamMap,
    phi: ParameterSet | ParamMap,
    lr: float,
    mode: str = "unroll",
) -> dict[str, Tensor]:
    """Total derivative d/dphi outer(phi, theta - lr * grad_theta inner(phi, theta)).

    Loss builders are called as ``builder(phi_map, theta_map)``.

    ``mode="unroll"`` records the inner backward pass and differentiates through
    it.  ``mode="hvp"`` uses ``d_outer/d_phi - lr * (d2 inner / dphi dtheta)^T v``
    with ``v = d_outer/d_theta'`` applied as a Hessian-vector product.
    """
    th = _as_map(theta)
    ph = _as_map(phi)
    names = list(th)

    inner = inner_loss(ph, th)
    _check_scalar(inner, "inner loss")
    g_theta = dict(zip(names, grad(inner, [th[n] for n in names], create_graph=True)))

    if mode == "unroll":
        theta_prime = {n: ops.sub(th[n], ops.scale(g_theta[n], lr)) for n in names}
        outer = outer_loss(ph, theta_prime)
        _check_scalar(outer, "outer loss")
        return gradient(outer, ph)

    if mode == "hvp":
        theta_prime = {
            n: Tensor(th[n].data - lr * g_theta[n].data, requires_grad=True) for n in names
        }
        outer = outer_loss(ph, theta_prime)
        _check_scalar(outer, "outer loss")
        direct = gradient(outer, ph)
        v = gradient(outer, theta_prime)
        dot = None
        for n in names:
            term = ops.sum(ops.mul(g_theta[n], Tensor(v[n].data)))
            dot = term if dot is None else ops.add(dot, term)
        if dot is None:
            return direct
        mixed = gradient(dot, ph)
        return {n: Tensor(direct[n].data - lr * mixed[n].data) for n in ph}

    raise ValueError(f"unknown mode {mode!r}; expected 'unroll' or 'hvp'")


def tensors_to_arrays(grads: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in grads.items()}
