"""Rectified Adam with two learning-rate groups.

The variance-rectification term falls back to a plain momentum step while the
adaptive second-moment estimate is unreliable (early steps): the rectified
branch is taken only once rho_t exceeds 4.
"""
from __future__ import annotations

import math

import numpy as np

from .autodiff import ParamStore
from .errors import NumericError


def rho_schedule(t: int, beta2: float) -> tuple[float, float]:
    """(rho_inf, rho_t) of the rectification schedule at step t >= 1."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    beta2_t = beta2 ** t
    rho_t = rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t)
    return rho_inf, rho_t


class RAdam:
    """Optimizer state: first/second moments per parameter plus a shared step count.

    Group learning rates: "encoder" parameters step at lr_encoder, everything
    else at lr_graph.
    """

    def __init__(
        self,
        params: ParamStore,
        lr_graph: float = 1e-3,
        lr_encoder: float = 1e-5,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = {"graph": lr_graph, "encoder": lr_encoder}
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value.data) for p in params}
        self.v = {p.name: np.zeros_like(p.value.data) for p in params}

    def step(self) -> None:
        """Apply one update from the accumulated gradients; rejects non-finite grads."""
        for p in self.params:
            if not np.all(np.isfinite(p.grad.data)):
                raise NumericError(f"non-finite gradient for parameter {p.name!r}; step rejected")
        self.t += 1
        t = self.t
        b1, b2 = self.beta1, self.beta2
        rho_inf, rho_t = rho_schedule(t, b2)
        bias1 = 1.0 - b1 ** t
        rectified = rho_t > 4.0
        if rectified:
            r_t = math.sqrt(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
            )
            bias2 = 1.0 - b2 ** t
        for p in self.params:
            g = p.grad.data
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bias1
            lr = self.lr[p.group]
            if rectified:
                v_hat = np.sqrt(v / bias2)
                p.value.data -= (lr * r_t) * m_hat / (v_hat + self.eps)
            else:
                p.value.data -= lr * m_hat
