"""Categorical reparameterization for generator selection.

Gumbel-Max draws an exact categorical sample, Gumbel-Softmax relaxes it with
a temperature, and the straight-through wrapper returns the hard one-hot
while passing the relaxed sample's gradient back unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from megan.autodiff import tensor as T
from megan.autodiff.tensor import Tensor
from megan.errors import ContractError


@dataclass
class GumbelNoise:
    a: np.ndarray
    u: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.a.shape


def open_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws strictly inside (0, 1); zeros are rejected and redrawn."""
    u = rng.random(shape)
    bad = u <= 0.0
    while bad.any():
        u[bad] = rng.random(int(bad.sum()))
        bad = u <= 0.0
    return u


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return -np.log(-np.log(u))


def sample_gumbel(shape, rng: np.random.Generator) -> GumbelNoise:
    u = open_uniform(shape, rng)
    return GumbelNoise(a=gumbel_from_uniform(u), u=u)


def _noise_array(noise, shape) -> np.ndarray:
    a = noise.a if isinstance(noise, GumbelNoise) else np.asarray(noise, dtype=np.float64)
    if a.shape != tuple(shape):
        raise ContractError(f"noise shape {a.shape} does not match logits shape {tuple(shape)}")
    return a


def gumbel_max(logits, noise) -> Tensor:
    """one_hot(argmax(logits + a)) per row; ties go to the lowest index."""
    logits = T.as_tensor(logits)
    a = _noise_array(noise, logits.shape)
    idx = np.argmax(logits.data + a, axis=1)
    return Tensor(T.one_hot(idx, logits.shape[1]))


def gumbel_softmax(logits, noise, tau: float) -> Tensor:
    if not tau > 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    logits = T.as_tensor(logits)
    a = _noise_array(noise, logits.shape)
    return T.softmax(T.mul(T.add(logits, Tensor(a)), 1.0 / tau), axis=1)


def straight_through(y) -> Tensor:
    """Hard one-hot of argmax(y) in the forward pass, identity gradient to y.

    Same result as ``y + detach(one_hot(argmax(y)) - y)`` but the forward
    value is exactly 0/1 instead of carrying a rounding residue.
    """
    y = T.as_tensor(y)
    hard = T.one_hot(np.argmax(y.data, axis=1), y.shape[1])
    return T.custom_op(hard, (y,), lambda g: (g,), "straight_through")


@dataclass
class SelectionBatch:
    logits: Tensor
    y: Tensor
    y_hard: Tensor
    tau: float

    @property
    def y_d(self) -> Tensor:
        return T.detach(self.y)

    @property
    def index(self) -> np.ndarray:
        return np.argmax(self.y_hard.data, axis=1)

    @property
    def counts(self) -> np.ndarray:
        n = self.y_hard.shape[1]
        return np.bincount(self.index, minlength=n)


def select(logits, tau: float, rng: np.random.Generator | None = None, noise=None) -> SelectionBatch:
    logits = T.as_tensor(logits)
    if noise is None:
        if rng is None:
            raise ContractError("select needs either an rng or explicit noise")
        noise = sample_gumbel(logits.shape, rng)
    y = gumbel_softmax(logits, noise, tau)
    return SelectionBatch(logits=logits, y=y, y_hard=straight_through(y), tau=tau)


def temperature(iteration: int, initial: float = 0.5, rate: float = 0.001, floor: float = 0.01) -> float:
    return max(initial * math.exp(-rate * iteration), floor)


@dataclass(frozen=True)
class TemperatureSchedule:
    initial: float = 0.5
    rate: float = 0.001
    floor: float = 0.01

    def __call__(self, iteration: int) -> float:
        return temperature(iteration, self.initial, self.rate, self.floor)
