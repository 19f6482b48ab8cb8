"""Stochastic gradient descent with classical momentum and weight decay."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from ..errors import StateError
from .nn import Parameter


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """Apply one update: v <- m*v + grad + wd*param; param <- param - lr*v.

    Gradients are zeroed afterwards. Raises StateError if any parameter has
    no populated gradient.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise StateError(f"parameter {p.name or '<unbound>'} has no gradient")
    for p in params:
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        if momentum:
            if p.velocity is None:
                p.velocity = np.zeros_like(p.data)
            p.velocity = momentum * p.velocity + g
            g = p.velocity
        p.data -= lr * g
        p.grad = None
