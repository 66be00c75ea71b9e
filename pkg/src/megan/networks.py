"""Generators, gating network and discriminator for 2-D data."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from megan import gumbel
from megan.autodiff import tensor as T
from megan.autodiff.nn import BatchNorm1d, Linear, Module
from megan.autodiff.tensor import Tensor
from megan.errors import ContractError

INIT_STD = 0.02


class Generator(Module):
    """z -> fc1 -> ReLU -> fc2 -> ReLU -> out (R^2), exporting one hidden activation as f."""

    def __init__(self, d_z: int, k_hidden: int, rng: np.random.Generator | None, feature_tap: int = 2):
        if feature_tap not in (1, 2):
            raise ContractError(f"feature_tap must be 1 or 2, got {feature_tap}")
        self.fc1 = Linear(d_z, k_hidden, rng, INIT_STD)
        self.fc2 = Linear(k_hidden, k_hidden, rng, INIT_STD)
        self.out = Linear(k_hidden, 2, rng, INIT_STD)
        self.feature_tap = feature_tap

    def __call__(self, z: Tensor) -> tuple[Tensor, Tensor]:
        h1 = T.relu(self.fc1(z))
        h2 = T.relu(self.fc2(h1))
        f = h2 if self.feature_tap == 2 else h1
        return f, self.out(h2)


def generator_forward(gen: Generator, z) -> tuple[Tensor, Tensor]:
    return gen(T.as_tensor(z))


class GeneratorBank(Module):
    def __init__(self, n: int, d_z: int, k_hidden: int, rng: np.random.Generator | None):
        if n < 1:
            raise ContractError(f"need at least one generator, got {n}")
        self.generators = [Generator(d_z, k_hidden, rng) for _ in range(n)]

    def __len__(self) -> int:
        return len(self.generators)

    def __call__(self, z: Tensor) -> tuple[list[Tensor], list[Tensor]]:
        pairs = [g(z) for g in self.generators]
        return [f for f, _ in pairs], [o for _, o in pairs]


class GatingNetwork(Module):
    """Per-generator encoders h_i = ReLU(W_i f_i) followed by a three-layer trunk."""

    def __init__(self, n: int, d_z: int, k: int, m: int, width: int, rng: np.random.Generator | None):
        self.n = n
        self.encoders = [Linear(k, m, rng, INIT_STD, bias=False) for _ in range(n)]
        self.fc1 = Linear(d_z + n * m, width, rng, INIT_STD)
        self.bn1 = BatchNorm1d(width)
        self.fc2 = Linear(width, width, rng, INIT_STD)
        self.bn2 = BatchNorm1d(width)
        self.fc3 = Linear(width, n, rng, INIT_STD)

    def hidden_states(self, features: Sequence[Tensor]) -> list[Tensor]:
        if len(features) != self.n:
            raise ContractError(f"gating network expects {self.n} feature tensors, got {len(features)}")
        return [T.relu(enc(f)) for enc, f in zip(self.encoders, features)]

    def __call__(self, z: Tensor, features: Sequence[Tensor]) -> Tensor:
        h = self.hidden_states(features)
        x = T.concat([z, *h], axis=1)
        x = T.relu(self.bn1(self.fc1(x)))
        x = T.relu(self.bn2(self.fc2(x)))
        return self.fc3(x)


def assignment_module(gate: GatingNetwork, z, features: Sequence[Tensor], mode: str | None = None) -> Tensor:
    """Selection logits (log pi) for each row; ``mode`` is "train" or "eval" if given."""
    if mode is not None:
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        gate.train(mode == "train")
    return gate(T.as_tensor(z), features)


def gating_forward(gate: GatingNetwork, z, features: Sequence[Tensor], tau: float, rng: np.random.Generator, mode: str | None = None) -> gumbel.SelectionBatch:
    logits = assignment_module(gate, z, features, mode)
    return gumbel.select(logits, tau, rng)


def compose_fake(selection: gumbel.SelectionBatch | Tensor, outputs: Sequence[Tensor]) -> Tensor:
    """FI = sum_i g_i o_i, computed as a row gather when g is one-hot.

    Backward: d/do_i = g_i * grad and d/dg_i = <grad, o_i> per row.
    """
    g = selection.y_hard if isinstance(selection, gumbel.SelectionBatch) else T.as_tensor(selection)
    outputs = [T.as_tensor(o) for o in outputs]
    b, n = g.shape
    if len(outputs) != n:
        raise ContractError(f"selection has {n} columns but {len(outputs)} generator outputs were given")
    for o in outputs:
        if o.shape[0] != b:
            raise ContractError(f"generator output shape {o.shape} does not match batch size {b}")
    stacked = np.stack([o.data for o in outputs], axis=1)  # b x n x d
    gd = g.data
    if np.all((gd == 0.0) | (gd == 1.0)) and np.all(gd.sum(axis=1) == 1.0):
        fake = stacked[np.arange(b), np.argmax(gd, axis=1)].copy()
    else:
        fake = np.einsum("bn,bnd->bd", gd, stacked)

    def bw(grad):
        dg = np.einsum("bd,bnd->bn", grad, stacked) if g.requires_grad else None
        return (dg, *[gd[:, i : i + 1] * grad if o.requires_grad else None for i, o in enumerate(outputs)])

    return T.custom_op(fake, (g, *outputs), bw, "compose_fake")


class Discriminator(Module):
    def __init__(self, width: int, rng: np.random.Generator | None, slope: float = 0.2):
        self.fc1 = Linear(2, width, rng, INIT_STD)
        self.fc2 = Linear(width, width, rng, INIT_STD)
        self.out = Linear(width, 1, rng, INIT_STD)
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        h = T.leaky_relu(self.fc1(x), self.slope)
        h = T.leaky_relu(self.fc2(h), self.slope)
        return self.out(h)


def discriminator_forward(d: Discriminator, x) -> Tensor:
    return d(T.as_tensor(x))


class MeganModel(Module):
    """Generators, gating network (absent when n == 1) and discriminator."""

    def __init__(self, n: int, d_z: int = 32, k_hidden: int = 256, m: int = 100, trunk_width: int = 128, disc_width: int = 128, rng: np.random.Generator | None = None):
        self.n = n
        self.d_z = d_z
        self.gen = GeneratorBank(n, d_z, k_hidden, rng)
        self.gate = GatingNetwork(n, d_z, k_hidden, m, trunk_width, rng) if n > 1 else None
        self.disc = Discriminator(disc_width, rng)

    def generator_parameters(self):
        return self.gen.parameters()

    def gate_parameters(self):
        return self.gate.parameters() if self.gate is not None else []

    def disc_parameters(self):
        return self.disc.parameters()

    def state_entries(self) -> list[tuple[str, np.ndarray]]:
        entries = [(name, p.data) for name, p in self.named_parameters()]
        return entries + list(self.named_buffers())

    def fake_batch(self, z: Tensor, tau: float, rng: np.random.Generator, detach_features: bool = False):
        """Run every generator on z and route each row; returns (fake, selection, outputs).

        ``selection`` is None for a single generator, which bypasses gating.
        """
        features, outputs = self.gen(z)
        if self.gate is None:
            return outputs[0], None, outputs
        if detach_features:
            features = [T.detach(f) for f in features]
        selection = gumbel.select(self.gate(z, features), tau, rng)
        return compose_fake(selection, outputs), selection, outputs

    def generate(self, z: np.ndarray, tau: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode samples and the generator index that produced each row."""
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                fake, selection, _ = self.fake_batch(Tensor(z), tau, rng)
        finally:
            self.train(was_training)
        index = selection.index if selection is not None else np.zeros(len(z), dtype=np.int64)
        return fake.data.copy(), index
