import numpy as np
import pytest

from cotrack.consensus import (
    ConsensusRunner,
    ConsensusState,
    NetworkGraph,
    average_consensus,
    max_consensus,
    metropolis_weights,
    sum_consensus,
)


def path_graph(n):
    adj = np.zeros((n, n), dtype=bool)
    for i in range(n - 1):
        adj[i, i + 1] = adj[i + 1, i] = True
    return NetworkGraph(adj)


def complete_graph(n):
    adj = ~np.eye(n, dtype=bool)
    return NetworkGraph(adj)


class TestGraph:
    def test_disconnected_rejected(self):
        adj = np.zeros((4, 4), dtype=bool)
        adj[0, 1] = adj[1, 0] = True
        with pytest.raises(ValueError):
            NetworkGraph(adj)

    def test_asymmetric_rejected(self):
        adj = np.zeros((3, 3), dtype=bool)
        adj[0, 1] = True
        adj[1, 2] = adj[2, 1] = adj[1, 0] = True
        adj[2, 0] = True  # one-way link
        with pytest.raises(ValueError):
            NetworkGraph(adj)

    def test_diameter(self):
        assert path_graph(5).diameter == 4
        assert complete_graph(4).diameter == 1
        assert NetworkGraph(np.zeros((1, 1), dtype=bool)).diameter == 0


class TestMetropolisWeights:
    def test_two_node_averages_in_one_round(self):
        g = path_graph(2)
        W = metropolis_weights(g)
        assert W[0, 1] == pytest.approx(0.5)
        assert W[0, 0] == pytest.approx(0.5)
        x = np.array([[0.0], [4.0]])
        assert np.allclose(W @ x, [[2.0], [2.0]])

    def test_single_node(self):
        W = metropolis_weights(NetworkGraph(np.zeros((1, 1), dtype=bool)))
        assert W == pytest.approx(np.ones((1, 1)))

    def test_doubly_stochastic(self, rng):
        for _ in range(5):
            n = int(rng.integers(3, 9))
            adj = np.zeros((n, n), dtype=bool)
            for i in range(n - 1):  # random connected graph: path + extras
                adj[i, i + 1] = adj[i + 1, i] = True
            for _ in range(n):
                i, j = rng.integers(0, n, size=2)
                if i != j:
                    adj[i, j] = adj[j, i] = True
            W = metropolis_weights(NetworkGraph(adj))
            assert np.allclose(W.sum(axis=0), 1.0)
            assert np.allclose(W.sum(axis=1), 1.0)
            assert np.allclose(W, W.T)


class TestAverageConsensus:
    def test_three_node_path_converges(self):
        g = path_graph(3)
        out = average_consensus(np.array([[0.0], [3.0], [6.0]]), g, 60)
        assert np.allclose(out, 3.0, atol=1e-6)

    def test_uniform_unchanged(self):
        g = path_graph(4)
        x = np.full((4, 3), 2.5)
        assert np.allclose(average_consensus(x, g, 7), x)

    def test_mean_invariant(self, rng):
        g = path_graph(5)
        x = rng.normal(size=(5, 4))
        out = average_consensus(x, g, 13)
        assert np.allclose(out.mean(axis=0), x.mean(axis=0), atol=1e-12)

    def test_geometric_decrease_on_scenario_graph(self):
        from cotrack.scenario import paper_scenario

        scn = paper_scenario()
        g, _ = scn.graphs_at(0)
        x = np.arange(g.n_agents, dtype=float).reshape(-1, 1)
        mean = x.mean()
        state = ConsensusState(x, g)
        errs = []
        for _ in range(60):
            state.step_average()
            errs.append(np.abs(state.values - mean).max())
        ratios = [errs[i + 1] / errs[i] for i in range(30, 59)]
        assert max(ratios) < 1.0

    def test_geometric_decrease(self):
        g = path_graph(6)
        x = np.arange(6, dtype=float).reshape(6, 1)
        mean = x.mean()
        state = ConsensusState(x, g)
        errs = []
        for _ in range(40):
            state.step_average()
            errs.append(np.abs(state.values - mean).max())
        ratios = [errs[i + 1] / errs[i] for i in range(20, 39)]
        assert max(ratios) < 1.0


class TestSumConsensus:
    def test_all_ones(self):
        g = complete_graph(3)
        out = sum_consensus(np.ones((3, 1)), g, 5)
        assert np.allclose(out, 3.0, atol=1e-9)

    def test_single_holder(self):
        g = complete_graph(4)
        x = np.zeros((4, 1))
        x[2, 0] = 7.0
        out = sum_consensus(x, g, 30)
        assert np.allclose(out, 7.0, atol=1e-8)

    def test_matrix_payloads_elementwise(self, rng):
        g = complete_graph(3)
        mats = rng.normal(size=(3, 4))
        out = sum_consensus(mats, g, 40)
        assert np.allclose(out, mats.sum(axis=0)[None, :].repeat(3, axis=0), atol=1e-8)


class TestMaxConsensus:
    def test_path_diameter_rounds(self):
        g = path_graph(4)
        x = np.array([[3.0], [1.0], [9.0], [2.0]])
        out = max_consensus(x, g, 3)
        assert np.all(out == 9.0)

    def test_equal_inputs_unchanged(self):
        g = path_graph(3)
        x = np.full((3, 2), 1.25)
        assert np.array_equal(max_consensus(x, g), x)

    def test_lexicographic_single_winner(self, rng):
        g = path_graph(5)
        rows = rng.normal(size=(5, 6))
        out = max_consensus(rows, g)
        winner = max(range(5), key=lambda i: tuple(rows[i]))
        assert np.array_equal(out, np.tile(rows[winner], (5, 1)))


class TestRunner:
    def test_sum_exact_bitwise_identical(self, rng):
        g = path_graph(6)
        runner = ConsensusRunner(g, rounds=300)
        x = rng.normal(size=(6, 5))
        out = runner.sum_exact(x)
        for i in range(1, 6):
            assert np.array_equal(out[0], out[i])
        assert np.allclose(out[0], x.sum(axis=0), atol=1e-6)

    def test_sum_exact_matches_round_based_procedure(self, rng):
        g = path_graph(5)
        runner = ConsensusRunner(g, rounds=12)
        x = rng.normal(size=(5, 3))
        out = runner.sum_exact(x)
        manual = average_consensus(x, g, 12) * 5
        manual = max_consensus(manual, g, g.diameter)
        assert np.array_equal(out, manual)

    def test_traffic_accounting(self, rng):
        g = path_graph(4)  # diameter 3
        runner = ConsensusRunner(g, rounds=10)
        runner.sum_exact(rng.normal(size=(4, 7)), tag="a")
        runner.sum_exact(rng.normal(size=(4, 2)), tag="a")
        snap = runner.counter("a").snapshot()
        assert snap["invocations"] == 2
        assert snap["reals"] == (10 + 3) * 7 + (10 + 3) * 2
        assert snap["latency_slots"] == 2 * (10 + 3)

    def test_non_finite_payload_rejected(self):
        runner = ConsensusRunner(path_graph(3), rounds=5)
        bad = np.array([[0.0], [np.inf], [1.0]])
        with pytest.raises(ValueError):
            runner.sum_exact(bad)
