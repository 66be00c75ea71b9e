import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from megan import data, metrics
from megan.errors import ContractError


class OracleModel:
    """Generator i emits exact centers from its block of modes; routing by construction."""

    def __init__(self, spec, n):
        self.spec, self.n, self.d_z = spec, n, 4
        self.blocks = np.array_split(np.arange(spec.modes), n)

    def generate(self, z, tau, rng):
        s = len(z)
        gen = np.arange(s) % self.n
        modes = np.array([self.blocks[g][(k // self.n) % len(self.blocks[g])] for k, g in enumerate(gen)])
        return self.spec.centers[modes].copy(), gen


class ConstantModel:
    def __init__(self, point):
        self.point, self.n, self.d_z = np.asarray(point), 1, 4

    def generate(self, z, tau, rng):
        return np.tile(self.point, (len(z), 1)), np.zeros(len(z), dtype=int)


def test_oracle_models_cover_everything_with_full_purity():
    spec = data.make_spec("ring", 8)
    report, matrix = metrics.evaluate(OracleModel(spec, 4), spec, 2000, np.random.default_rng(0))
    assert report.modes_covered == 8
    assert report.specialization_purity == 1.0
    assert report.high_quality_fraction == 1.0
    np.testing.assert_allclose(report.usage, 0.25)
    assert matrix.total == 2000 and matrix.outliers == 0


def test_collapsed_model():
    spec = data.make_spec("ring", 8)
    report, _ = metrics.evaluate(ConstantModel(spec.centers[3]), spec, 500, np.random.default_rng(0))
    assert report.modes_covered == 1
    assert report.diversity_proxy == pytest.approx(0.0, abs=1e-12)


def test_eval_needs_enough_samples():
    spec = data.make_spec("ring", 8)
    with pytest.raises(ContractError):
        metrics.evaluate(ConstantModel([0, 0]), spec, 99, np.random.default_rng(0))


def test_outliers_are_excluded_from_matrix():
    spec = data.make_spec("ring", 8)
    pts = np.vstack([spec.centers, [[0.0, 0.0], [10.0, 10.0]]])
    matrix = metrics.assignment_matrix(spec, pts, np.zeros(10, dtype=int), 1)
    assert matrix.outliers == 2
    assert matrix.total == 8


def multinomial_purity_oracle(per_mode, n, modes, trials, rng):
    shares = rng.multinomial(per_mode, [1 / n] * n, size=(trials, modes)).max(axis=2) / per_mode
    return shares.mean()


def test_purity_of_random_assignment():
    # 25 samples per mode is the coverage threshold s / (10 M) at s = 2000, M = 8.
    rng = np.random.default_rng(0)
    expected = multinomial_purity_oracle(25, 5, 8, 20000, rng)
    assert expected == pytest.approx(0.31, abs=0.05)
    vals = []
    for _ in range(400):
        counts = rng.multinomial(25, [0.2] * 5, size=8)
        vals.append(metrics.purity(metrics.ModeAssignmentMatrix(counts, 0)))
    assert np.mean(vals) == pytest.approx(expected, abs=0.01)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 6))
def test_purity_is_invariant_to_generator_relabeling(seed, n):
    rng = np.random.default_rng(seed)
    counts = rng.integers(0, 30, size=(8, n))
    perm = rng.permutation(n)
    a = metrics.purity(metrics.ModeAssignmentMatrix(counts, 0))
    b = metrics.purity(metrics.ModeAssignmentMatrix(counts[:, perm], 0))
    assert a == b
    assert 0.0 <= a <= 1.0


def test_entropy_examples():
    one = metrics.ModeAssignmentMatrix(np.array([[0, 5], [7, 5], [0, 5], [0, 5], [0, 5], [0, 5], [0, 5], [0, 5]]), 0)
    ent, unused = metrics.specialization_entropy(one)
    assert ent[0] == 0.0
    assert ent[1] == pytest.approx(math.log(8), abs=1e-12)
    assert ent[1] == pytest.approx(2.079, abs=1e-3)
    assert not unused.any()
    ent, _ = metrics.specialization_entropy(metrics.ModeAssignmentMatrix(np.array([[10, 0], [0, 10]]), 0))
    np.testing.assert_array_equal(ent, [0.0, 0.0])


def test_entropy_flags_unused_generators():
    ent, unused = metrics.specialization_entropy(metrics.ModeAssignmentMatrix(np.array([[3, 0], [4, 0]]), 0))
    assert ent[1] == 0.0 and unused.tolist() == [False, True]


def test_report_roundtrip_and_csv(tmp_path):
    spec = data.make_spec("ring", 8)
    report, matrix = metrics.evaluate(OracleModel(spec, 2), spec, 400, np.random.default_rng(0))
    path = report.write(tmp_path / "r.txt")
    back = metrics.EvalReport.from_text(path.read_text())
    assert back.to_text() == report.to_text()
    report.append_csv(tmp_path / "s.csv", "a")
    report.append_csv(tmp_path / "s.csv", "b")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("label,samples,modes_covered")
    rows = matrix.to_csv(tmp_path / "m.csv").read_text().splitlines()
    assert rows[0] == "mode,gen_1,gen_2" and len(rows) == 9
