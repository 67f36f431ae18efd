import csv
import math

import numpy as np
import pytest

from cotrack.metrics import OspaParams, agent_rmse, cardinality_stats, ospa, ospa_components

P20 = OspaParams(cutoff=20.0, order=1.0)


class TestOspa:
    def test_identical_sets(self, rng):
        X = rng.uniform(0, 100, size=(5, 2))
        assert ospa(X, X, P20) == pytest.approx(0.0, abs=1e-12)

    def test_pure_cardinality_error(self):
        assert ospa(np.zeros((0, 2)), np.array([[3.0, 4.0]]), P20) == pytest.approx(20.0)

    def test_single_pair_distance(self):
        assert ospa(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]), P20) == pytest.approx(5.0)

    def test_empty_empty(self):
        assert ospa(np.zeros((0, 2)), np.zeros((0, 2)), P20) == 0.0

    def test_symmetry(self, rng):
        for _ in range(25):
            X = rng.uniform(0, 50, size=(rng.integers(0, 5), 2))
            Y = rng.uniform(0, 50, size=(rng.integers(0, 5), 2))
            assert ospa(X, Y, P20) == pytest.approx(ospa(Y, X, P20), abs=1e-12)

    def test_bounded_by_cutoff(self, rng):
        for _ in range(25):
            X = rng.uniform(0, 2000, size=(rng.integers(0, 6), 2))
            Y = rng.uniform(0, 2000, size=(rng.integers(0, 6), 2))
            v = ospa(X, Y, P20)
            assert 0.0 <= v <= 20.0 + 1e-12

    def test_triangle_inequality(self, rng):
        for _ in range(40):
            X = rng.uniform(0, 60, size=(rng.integers(1, 5), 2))
            Y = rng.uniform(0, 60, size=(rng.integers(1, 5), 2))
            Z = rng.uniform(0, 60, size=(rng.integers(1, 5), 2))
            assert ospa(X, Z, P20) <= ospa(X, Y, P20) + ospa(Y, Z, P20) + 1e-9

    def test_decomposition_sums_to_total(self, rng):
        for _ in range(20):
            X = rng.uniform(0, 60, size=(rng.integers(1, 6), 2))
            Y = rng.uniform(0, 60, size=(rng.integers(1, 6), 2))
            total, loc, card = ospa_components(X, Y, P20)
            assert total == pytest.approx(loc + card, abs=1e-12)

    def test_higher_order(self):
        p2 = OspaParams(cutoff=10.0, order=2.0)
        v = ospa(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]), p2)
        assert v == pytest.approx(5.0)

    def test_param_validation(self):
        with pytest.raises(ValueError):
            OspaParams(cutoff=-1.0)
        with pytest.raises(ValueError):
            OspaParams(order=0.5)


class TestRmse:
    def test_perfect(self):
        truth = np.array([[1.0, 2.0, 0, 0], [3.0, 4.0, 0, 0]])
        assert agent_rmse(truth, truth[:, :2]) == 0.0

    def test_single_offset(self):
        truth = np.array([[0.0, 0.0, 0, 0]])
        est = np.array([[3.0, 4.0]])
        assert agent_rmse(truth, est) == pytest.approx(5.0)

    def test_anchors_excluded(self):
        truth = np.array([[0.0, 0.0, 0, 0], [10.0, 10.0, 0, 0]])
        est = np.array([[100.0, 100.0], [13.0, 14.0]])
        mask = np.array([False, True])
        assert agent_rmse(truth, est, mask) == pytest.approx(5.0)


class TestCardinality:
    def test_constant_counts(self):
        mean, std = cardinality_stats(np.full((4, 6), 3))
        assert np.all(mean == 3.0)
        assert np.all(std == 0.0)

    def test_mean_of_two(self):
        mean, std = cardinality_stats(np.array([[1], [3]]))
        assert mean[0] == pytest.approx(2.0)

    def test_matches_csv_recomputation(self, rng, tmp_path):
        counts = rng.integers(0, 10, size=(5, 8))
        path = tmp_path / "counts.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for row in counts:
                w.writerow(list(row))
        rows = [[float(v) for v in r] for r in csv.reader(open(path))]
        mean, std = cardinality_stats(counts)
        for t in range(8):
            col = [rows[r][t] for r in range(5)]
            m = sum(col) / 5
            s = math.sqrt(sum((v - m) ** 2 for v in col) / 4)
            assert mean[t] == pytest.approx(m)
            assert std[t] == pytest.approx(s)
