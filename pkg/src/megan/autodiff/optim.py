from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from megan.autodiff.nn import Parameter
from megan.errors import ContractError


class Adam:
    """Adam over one parameter group, updated in place.

    The group's values and gradients are packed into two contiguous buffers;
    each parameter's ``data`` and ``grad`` become views into them, so a step
    is a handful of vectorized passes regardless of the parameter count.
    """

    def __init__(self, params: Sequence[Parameter], lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        sizes = [p.data.size for p in self.params]
        total = int(sum(sizes))
        self.flat = np.empty(total)
        self.flat_grad = np.zeros(total)
        self.m = np.zeros(total)
        self.v = np.zeros(total)
        self._tmp = np.empty(total)
        self._data_views: list[np.ndarray] = []
        self._grad_views: list[np.ndarray] = []
        offset = 0
        for p, size in zip(self.params, sizes):
            view = self.flat[offset : offset + size].reshape(p.data.shape)
            view[...] = p.data
            p.data = view
            self._data_views.append(view)
            self._grad_views.append(self.flat_grad[offset : offset + size].reshape(view.shape))
            offset += size

    def zero_grad(self) -> None:
        self.flat_grad.fill(0.0)
        for p, g in zip(self.params, self._grad_views):
            p.grad = g

    def _gather(self) -> None:
        for i, (p, view, gview) in enumerate(zip(self.params, self._data_views, self._grad_views)):
            if p.data is not view:
                raise ContractError(f"parameter {i} storage was replaced; rebuild the optimizer")
            if p.grad is None:
                raise ContractError(f"parameter {i} of shape {p.shape} has no gradient")
            if p.grad is not gview:
                gview[...] = p.grad
                p.grad = gview

    def step(self) -> None:
        self._gather()
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        # (m / c1) / (sqrt(v / c2) + eps) == m * (sqrt(c2) / c1) / (sqrt(v) + eps * sqrt(c2))
        step_size = self.lr * math.sqrt(c2) / c1
        eps_hat = self.eps * math.sqrt(c2)
        g, m, v, tmp = self.flat_grad, self.m, self.v, self._tmp
        m *= b1
        np.multiply(g, 1.0 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp += eps_hat
        np.divide(m, tmp, out=tmp)
        tmp *= step_size
        self.flat -= tmp
