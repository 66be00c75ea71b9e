"""Synthetic 2-D Gaussian mixtures with known mode centers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from megan.autodiff.tensor import Tensor
from megan.errors import ConfigError

_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class MixtureSpec:
    kind: str
    modes: int
    scale: float  # ring radius or grid spacing
    sigma: float
    centers: np.ndarray = field(repr=False, compare=False)

    @property
    def min_center_distance(self) -> float:
        c = self.centers
        d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
        return float(d[~np.eye(len(c), dtype=bool)].min())


def ring_centers(modes: int, radius: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(modes) / modes
    return np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)


def grid_centers(modes: int, spacing: float) -> np.ndarray:
    side = math.isqrt(modes)
    if side * side != modes:
        raise ConfigError(f"grid mixture needs a perfect-square mode count, got {modes}", key="data.modes")
    offsets = (np.arange(side) - (side - 1) / 2.0) * spacing
    xs, ys = np.meshgrid(offsets, offsets, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def make_spec(kind: str = "ring", modes: int | None = None, radius: float = 2.0, spacing: float = 2.0, sigma: float = 0.05) -> MixtureSpec:
    if kind == "ring":
        modes = 8 if modes is None else modes
        scale = radius
    elif kind == "grid":
        modes = 25 if modes is None else modes
        scale = spacing
    else:
        raise ConfigError(f"unknown mixture kind {kind!r} (expected ring or grid)", key="data.kind")
    if modes < 2:
        raise ConfigError(f"a mixture needs at least 2 modes, got {modes}", key="data.modes")
    if not scale > 0:
        raise ConfigError(f"mixture scale must be positive, got {scale}", key="data.radius" if kind == "ring" else "data.spacing")
    if sigma < 0:
        raise ConfigError(f"sigma must be nonnegative, got {sigma}", key="data.sigma")
    centers = ring_centers(modes, scale) if kind == "ring" else grid_centers(modes, scale)
    spec = MixtureSpec(kind=kind, modes=modes, scale=float(scale), sigma=float(sigma), centers=centers)
    if not sigma < spec.min_center_distance / 2.0:
        raise ConfigError(
            f"sigma {sigma} is not below half the minimum center distance {spec.min_center_distance:.4g}; modes would overlap",
            key="data.sigma",
        )
    return spec


@dataclass
class RealBatch:
    points: Tensor
    mode_labels: np.ndarray


def sample_real(spec: MixtureSpec, b: int, rng: np.random.Generator) -> RealBatch:
    if b < 1:
        raise ValueError(f"batch size must be at least 1, got {b}")
    labels = rng.integers(0, spec.modes, size=b)
    noise = rng.standard_normal((b, 2))
    return RealBatch(points=Tensor(spec.centers[labels] + spec.sigma * noise), mode_labels=labels)


def squared_distances(spec: MixtureSpec, points) -> np.ndarray:
    pts = points.data if isinstance(points, Tensor) else np.asarray(points, dtype=np.float64)
    diff = pts[:, None, :] - spec.centers[None, :, :]
    return (diff * diff).sum(-1)


def nearest_mode(spec: MixtureSpec, points) -> np.ndarray:
    """Index of the nearest center; near-exact ties resolve to the lowest index."""
    d2 = squared_distances(spec, points)
    best = d2.min(axis=1, keepdims=True)
    return np.argmax(d2 <= best * (1.0 + _TIE_RTOL), axis=1)
