from __future__ import annotations

import typing as t
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from evi_melody.autograd import Tensor
from evi_melody.exceptions import ArgumentError, ConfigError

FloatArray = npt.NDArray[np.float64]


@dataclass(frozen=True, slots=True)
class AdamHyper:  # noqa: D101
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(slots=True)
class AdamState:
    """First & second moment estimates keyed by parameter name, plus the shared step count."""

    m: dict[str, FloatArray] = field(default_factory=dict)
    v: dict[str, FloatArray] = field(default_factory=dict)
    step: int = 0


def l2_penalty(
    params: t.Mapping[str, Tensor], weight_decay: float, names: t.Collection[str] | None = None
) -> tuple[float, dict[str, FloatArray]]:
    """
    Return `wd * sum(theta ** 2)` over the named parameters and its gradient `2 * wd * theta`.

    All parameters are penalized if `names` is not provided.
    """
    selected = params.keys() if names is None else names
    value = weight_decay * sum(float(np.sum(params[name].data ** 2)) for name in selected)
    grads = {name: 2 * weight_decay * params[name].data for name in selected}
    return value, grads


def adam_step(
    params: t.Mapping[str, Tensor],
    grads: t.Mapping[str, FloatArray],
    state: AdamState,
    lr: float,
    hyper: AdamHyper = AdamHyper(),
    weight_decay: float = 0.0,
    decayed: t.Collection[str] | None = None,
) -> AdamState:
    """
    Apply one bias-corrected Adam update in place.

    The L2 gradient `2 * weight_decay * theta` is added to the raw gradient of every parameter in
    `decayed` (all parameters if not provided) before the moment updates. Parameters without a
    gradient entry are treated as having a zero gradient.
    """
    if lr <= 0:
        raise ConfigError(f"Learning rate must be positive, received: {lr}")

    _, l2_grads = l2_penalty(params, weight_decay, decayed) if weight_decay else (0.0, {})
    state.step += 1
    bias1 = 1 - hyper.beta1**state.step
    bias2 = 1 - hyper.beta2**state.step

    for name, param in params.items():
        grad = grads.get(name)
        grad = np.zeros_like(param.data) if grad is None else grad
        if grad.shape != param.shape:
            raise ArgumentError(f"Gradient shape {grad.shape} != parameter '{name}' {param.shape}")
        if name in l2_grads:
            grad = grad + l2_grads[name]

        m = hyper.beta1 * state.m.get(name, 0.0) + (1 - hyper.beta1) * grad
        v = hyper.beta2 * state.v.get(name, 0.0) + (1 - hyper.beta2) * grad**2
        state.m[name], state.v[name] = m, v

        update = lr * (m / bias1) / (np.sqrt(v / bias2) + hyper.eps)
        param.assign(param.data - update)

    return state
