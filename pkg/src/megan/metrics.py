"""Mode coverage, generator usage and specialization on mixture data."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.spatial.distance import pdist

from megan.data import MixtureSpec, nearest_mode, squared_distances
from megan.errors import ContractError

QUALITY_SIGMAS = 3.0
COVERAGE_FRACTION = 0.1  # a mode needs s / (10 M) high-quality samples


class SampleSource(Protocol):
    n: int
    d_z: int

    def generate(self, z: np.ndarray, tau: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class ModeAssignmentMatrix:
    counts: np.ndarray  # modes x generators, high-quality samples only
    outliers: int

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        n = self.counts.shape[1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", *[f"gen_{i + 1}" for i in range(n)]])
            for j, row in enumerate(self.counts):
                w.writerow([j, *[int(c) for c in row]])
        return path


@dataclass
class EvalReport:
    samples: int
    modes_covered: int
    usage: np.ndarray
    specialization_purity: float
    high_quality_fraction: float
    diversity_proxy: float
    outliers: int

    def as_items(self) -> list[tuple[str, str]]:
        items = [
            ("samples", str(self.samples)),
            ("modes_covered", str(self.modes_covered)),
            ("specialization_purity", repr(float(self.specialization_purity))),
            ("high_quality_fraction", repr(float(self.high_quality_fraction))),
            ("diversity_proxy", repr(float(self.diversity_proxy))),
            ("outliers", str(self.outliers)),
        ]
        items += [(f"usage_{i + 1}", repr(float(u))) for i, u in enumerate(self.usage)]
        return items

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.as_items())

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    def append_csv(self, path: str | Path, label: str) -> Path:
        path = Path(path)
        items = [("label", label), *self.as_items()]
        new = not path.exists() or path.stat().st_size == 0
        with path.open("a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow([k for k, _ in items])
            w.writerow([v for _, v in items])
        return path

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = dict(line.split(" = ", 1) for line in text.splitlines() if line.strip())
        n = sum(1 for k in kv if k.startswith("usage_"))
        usage = [float(kv[f"usage_{i + 1}"]) for i in range(n)]
        return cls(
            samples=int(kv["samples"]),
            modes_covered=int(kv["modes_covered"]),
            usage=np.array(usage),
            specialization_purity=float(kv["specialization_purity"]),
            high_quality_fraction=float(kv["high_quality_fraction"]),
            diversity_proxy=float(kv["diversity_proxy"]),
            outliers=int(kv["outliers"]),
        )


def assignment_matrix(spec: MixtureSpec, points: np.ndarray, gen_index: np.ndarray, n: int) -> ModeAssignmentMatrix:
    d2 = squared_distances(spec, points)
    near = nearest_mode(spec, points)
    good = d2[np.arange(len(points)), near] <= (QUALITY_SIGMAS * spec.sigma) ** 2
    counts = np.zeros((spec.modes, n), dtype=np.int64)
    np.add.at(counts, (near[good], np.asarray(gen_index)[good]), 1)
    return ModeAssignmentMatrix(counts=counts, outliers=int((~good).sum()))


def covered_modes(matrix: ModeAssignmentMatrix, samples: int) -> np.ndarray:
    modes = matrix.counts.shape[0]
    return matrix.counts.sum(axis=1) >= COVERAGE_FRACTION * samples / modes


def purity(matrix: ModeAssignmentMatrix, covered: np.ndarray | None = None) -> float:
    """(1/M) * sum over covered modes of the dominant generator's share."""
    counts = matrix.counts
    row = counts.sum(axis=1)
    if covered is None:
        covered = row > 0
    covered = covered & (row > 0)
    if not covered.any():
        return 0.0
    shares = counts[covered].max(axis=1) / row[covered]
    return float(shares.sum() / counts.shape[0])


def summarize(spec: MixtureSpec, points: np.ndarray, gen_index: np.ndarray, n: int) -> tuple[EvalReport, ModeAssignmentMatrix]:
    s = len(points)
    matrix = assignment_matrix(spec, points, gen_index, n)
    covered = covered_modes(matrix, s)
    usage = np.bincount(np.asarray(gen_index), minlength=n)[:n] / s
    report = EvalReport(
        samples=s,
        modes_covered=int(covered.sum()),
        usage=usage,
        specialization_purity=purity(matrix, covered),
        high_quality_fraction=matrix.total / s,
        diversity_proxy=float(pdist(points).mean()),
        outliers=matrix.outliers,
    )
    return report, matrix


def evaluate(model: SampleSource, spec: MixtureSpec, s: int = 2000, rng: np.random.Generator | None = None, tau: float = 0.5) -> tuple[EvalReport, ModeAssignmentMatrix]:
    """Draw ``s`` latents, route and generate in eval mode, then score the samples."""
    if s < 100:
        raise ContractError(f"evaluation needs at least 100 samples, got {s}")
    if rng is None:
        raise ContractError("evaluate needs an rng")
    z = rng.standard_normal((s, model.d_z))
    points, index = model.generate(z, tau, rng)
    return summarize(spec, points, index, model.n)


def specialization_entropy(matrix: ModeAssignmentMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Per-generator entropy (nats) over modes, and a flag for generators with no samples."""
    counts = matrix.counts.astype(np.float64)
    col = counts.sum(axis=0)
    unused = col == 0
    p = np.divide(counts, col, out=np.zeros_like(counts), where=col > 0)
    logp = np.log(p, out=np.zeros_like(p), where=p > 0)
    ent = -(p * logp).sum(axis=0)
    ent[unused] = 0.0
    return ent + 0.0, unused
