"""Average, sum and max consensus over a simulated agent network.

Average consensus uses Metropolis weights, which are symmetric and doubly
stochastic on any connected graph. A consensus invocation runs Q averaging
rounds followed by D_G max rounds (D_G = graph diameter) that force bitwise
agreement on a single agent's value; its communication cost is accounted as
(Q + D_G) * payload_size real values per agent.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


class NetworkGraph:
    """Undirected agent communication topology."""

    __slots__ = ("adjacency", "neighbors", "diameter", "n_agents")

    def __init__(self, adjacency: np.ndarray):
        adj = np.asarray(adjacency, dtype=bool).copy()
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError("adjacency must be square")
        if not np.array_equal(adj, adj.T):
            raise ValueError("links must be bidirectional (symmetric adjacency)")
        np.fill_diagonal(adj, False)
        self.adjacency = adj
        self.n_agents = adj.shape[0]
        self.neighbors = [np.flatnonzero(adj[i]) for i in range(self.n_agents)]
        ecc = _eccentricities(adj)
        if ecc is None:
            raise ValueError("communication graph is disconnected")
        self.diameter = int(max(ecc)) if self.n_agents > 1 else 0

    def degree(self, i: int) -> int:
        return int(self.neighbors[i].size)


def _eccentricities(adj: np.ndarray):
    """BFS eccentricity per node, or None if the graph is disconnected."""
    n = adj.shape[0]
    ecc = np.zeros(n, dtype=int)
    for start in range(n):
        dist = np.full(n, -1, dtype=int)
        dist[start] = 0
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in np.flatnonzero(adj[u]):
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        if np.any(dist < 0):
            return None
        ecc[start] = dist.max()
    return ecc


def metropolis_weights(graph: NetworkGraph) -> np.ndarray:
    """W_ij = 1/(1 + max(deg_i, deg_j)) on edges, diagonal fills each row to 1."""
    n = graph.n_agents
    deg = np.array([graph.degree(i) for i in range(n)], dtype=float)
    W = np.zeros((n, n))
    ii, jj = np.nonzero(graph.adjacency)
    W[ii, jj] = 1.0 / (1.0 + np.maximum(deg[ii], deg[jj]))
    np.fill_diagonal(W, 1.0 - W.sum(axis=1))
    return W


@dataclass
class ConsensusState:
    """Per-agent values advanced one synchronous round at a time."""

    values: np.ndarray  # (n_agents, payload)
    graph: NetworkGraph
    round: int = 0
    _W: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float)).copy()
        if self.values.shape[0] != self.graph.n_agents:
            raise ValueError("one value row per agent required")
        self._W = metropolis_weights(self.graph)

    def step_average(self) -> "ConsensusState":
        self.values = self._W @ self.values
        self.round += 1
        return self

    def step_max(self) -> "ConsensusState":
        """One synchronous round of lexicographic max with the neighbors."""
        new = self.values.copy()
        for i in range(self.graph.n_agents):
            best = self.values[i]
            for j in self.graph.neighbors[i]:
                if _lex_greater(self.values[j], best):
                    best = self.values[j]
            new[i] = best
        self.values = new
        self.round += 1
        return self


def _lex_greater(a: np.ndarray, b: np.ndarray) -> bool:
    for x, y in zip(a, b):
        if x != y:
            return x > y
    return False


def _lex_argmax(rows: np.ndarray) -> int:
    """Index of the lexicographically largest row (column 0 most significant)."""
    return int(np.lexsort(rows.T[::-1])[-1])


def average_consensus(values, graph: NetworkGraph, rounds: int) -> np.ndarray:
    """Apply x <- Wx for the given number of rounds; one row per agent."""
    state = ConsensusState(values, graph)
    for _ in range(rounds):
        state.step_average()
    return state.values


def sum_consensus(values, graph: NetworkGraph, rounds: int, agent_count: int | None = None) -> np.ndarray:
    """Average consensus scaled by the (network-wide known) agent count."""
    s = graph.n_agents if agent_count is None else agent_count
    return s * average_consensus(values, graph, rounds)


def max_consensus(values, graph: NetworkGraph, rounds: int | None = None) -> np.ndarray:
    """Lexicographic max over flattened payloads; exact after diameter rounds."""
    state = ConsensusState(values, graph)
    n_rounds = graph.diameter if rounds is None else rounds
    for _ in range(n_rounds):
        state.step_max()
    return state.values


@dataclass
class TrafficCounter:
    """Per-agent communication accounting for consensus invocations."""

    invocations: int = 0
    reals: int = 0
    latency_slots: int = 0

    def record(self, payload_size: int, rounds: int):
        self.invocations += 1
        self.reals += rounds * payload_size
        self.latency_slots += rounds

    def snapshot(self) -> dict:
        return {
            "invocations": self.invocations,
            "reals": self.reals,
            "latency_slots": self.latency_slots,
        }


class ConsensusRunner:
    """Bundles a graph with its Metropolis matrix, Q default and counters."""

    def __init__(self, graph: NetworkGraph, rounds: int):
        if rounds < 0:
            raise ValueError("consensus rounds must be >= 0")
        self.graph = graph
        self.rounds = int(rounds)
        self.W = metropolis_weights(graph)
        self.counters: dict[str, TrafficCounter] = {}

    def counter(self, tag: str) -> TrafficCounter:
        if tag not in self.counters:
            self.counters[tag] = TrafficCounter()
        return self.counters[tag]

    def reset_counters(self):
        self.counters = {}

    def sum_exact(self, values: np.ndarray, tag: str = "consensus") -> np.ndarray:
        """Sum consensus followed by a max finalization for exact agreement.

        Returns one identical row per agent: Q averaging rounds, a scale by
        the agent count, then D_G lexicographic-max rounds so every agent
        holds bitwise-identical values despite the finite Q. The max rounds
        provably leave every agent with the global lexicographic-max row, so
        the simulation selects that row directly (bit-identical outcome,
        verified against the round-based procedure in tests).
        """
        x = np.atleast_2d(np.asarray(values, dtype=float))
        if x.shape[0] != self.graph.n_agents:
            raise ValueError("one value row per agent required")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite consensus payload")
        payload = x.shape[1]
        for _ in range(self.rounds):
            x = self.W @ x
        x = self.graph.n_agents * x
        winner = _lex_argmax(x)
        x = np.tile(x[winner], (self.graph.n_agents, 1))
        self.counter(tag).record(payload, self.rounds + self.graph.diameter)
        return x
