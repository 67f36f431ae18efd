"""Decentralized target-belief computation via parallel-label Gibbs rounds.

Each agent holds one local label into its own likelihood message. A round
consists of (1) network consensus over the information-form sums of the
current joint label vector, (2) local candidate scoring where each agent
swaps only its own contribution, and (3) parallel resampling of the local
labels conditioned on the previous joint state. Label vectors are
piggybacked on the consensus rounds (integer metadata, not counted as real
values); every agent therefore archives the same (label -> consensused sums)
map and materializes bitwise-identical beliefs, which is asserted rather
than enforced by extra communication.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .consensus import ConsensusRunner
from .gm import (
    GaussianMixture,
    PriorArrays,
    batch_log_gaussian_terms,
    fuse_batch,
    fuse_batch_log_pi,
    gm_truncate,
)
from .models import PtBelief

log = logging.getLogger(__name__)

_LOG_TINY = math.log(1e-300)  # floor for log eta(0) payload entries
_MISSING = object()


@dataclass
class HogwildState:
    """Joint labels, consensused global sums, and per-agent snapshots."""

    labels: np.ndarray  # (S,) local label per agent
    archive: dict = field(default_factory=dict)  # key -> (c, C, e) global sums
    loo: list = field(default_factory=list)  # per agent: key -> leave-self-out sums
    trace: list = field(default_factory=list)  # (round, agent, label) rows


def hogwild_init(gamma, prior: GaussianMixture, rng: np.random.Generator) -> int:
    """Initial local label, drawn proportionally to the weight each local term
    contributes against the (sub-probability) prior; the constant term's
    weight is u0 times the prior existence mass."""
    log_rho = np.full(gamma.n_labels, -np.inf)
    log_total = prior.log_total_weight
    log_rho[0] = gamma.log_u0 + log_total
    if gamma.n_terms:
        from .gibbs import _logsumexp_rows

        ll = batch_log_gaussian_terms(gamma.e, gamma.H, gamma.C, prior.means, prior.covs)
        log_rho[1:] = gamma.log_u + _logsumexp_rows(prior.log_w[None, :] + ll)
    hi = np.max(log_rho)
    if hi == -np.inf:
        raise ValueError("degenerate local likelihood: all labels have zero weight")
    p = np.exp(log_rho - hi)
    p /= p.sum()
    if p.size == 1:
        return 0
    return int(rng.choice(p.size, p=p))


def _payload(canons, labels, d):
    """Stack each agent's (C_tilde, e_tilde, c) at its current label."""
    S = len(canons)
    rows = np.zeros((S, d * d + d + 1))
    for s, ((c, C, e), lab) in enumerate(zip(canons, labels)):
        rows[s, : d * d] = C[lab].reshape(-1)
        rows[s, d * d : d * d + d] = e[lab]
        rows[s, -1] = c[lab]
    return rows


def hogwild_round(
    state: HogwildState,
    prior_arrays: PriorArrays,
    canons,
    consensus: ConsensusRunner,
    rngs,
    cache: dict,
    tag: str,
    round_index: int,
    label_diffusion: bool = True,
):
    """One synchronous round: consensus, snapshot, parallel local resampling."""
    d = prior_arrays.dim
    S = len(canons)
    rows = _payload(canons, state.labels, d)
    out = consensus.sum_exact(rows, tag=tag)
    glob = out[0]
    C_glob = glob[: d * d].reshape(d, d)
    e_glob = glob[d * d : d * d + d]
    c_glob = glob[-1]
    labels_t = tuple(int(v) for v in state.labels)
    if label_diffusion:
        key = labels_t
    else:
        key = glob.tobytes()  # agents agree on sums without learning labels
    state.archive[key] = (c_glob, C_glob, e_glob)
    new_labels = np.empty(S, dtype=int)
    for s in range(S):
        cl, Cl, el = canons[s]
        lab = labels_t[s]
        base_c = c_glob - cl[lab]
        base_C = C_glob - Cl[lab]
        base_e = e_glob - el[lab]
        # leave-self-out snapshots are keyed by the other agents' labels:
        # vectors differing only in the own label remove to the same product
        loo_key = (
            labels_t[:s] + labels_t[s + 1 :]
            if label_diffusion
            else (base_c, base_C.tobytes(), base_e.tobytes())
        )
        state.loo[s][loo_key] = (base_c, base_C.copy(), base_e.copy())
        if cl.shape[0] == 1:
            new_labels[s] = 0
            continue
        cache_key = (s, labels_t)
        cdf = cache.get(cache_key, _MISSING)
        if cdf is _MISSING:
            cand_c = base_c + cl
            cand_C = base_C[None] + Cl
            cand_e = base_e[None] + el
            log_pi = fuse_batch_log_pi(prior_arrays, cand_C, cand_e, cand_c)
            hi = np.max(log_pi)
            if hi == -np.inf:
                cdf = None
            else:
                cdf = np.cumsum(np.exp(log_pi - hi))
            cache[cache_key] = cdf
        if cdf is None:
            log.warning("agent %d: all candidate labels failed; keeping label %d", s, lab)
            new_labels[s] = lab
            continue
        idx = int(np.searchsorted(cdf, rngs[s].random() * cdf[-1], side="right"))
        new_labels[s] = min(idx, cdf.size - 1)
    for s in range(S):
        state.trace.append((round_index, s, int(new_labels[s])))
    state.labels = new_labels
    return state


def _materialize(prior_arrays: PriorArrays, sums, top: int | None):
    """Fuse archived global sums with every prior component; keep the top
    components by weight."""
    d = prior_arrays.dim
    entries = list(sums)
    if not entries:
        return GaussianMixture.empty(d)
    c = np.array([v[0] for v in entries])
    C = np.stack([v[1] for v in entries])
    e = np.stack([v[2] for v in entries])
    log_w, means, covs = fuse_batch(prior_arrays, C, e, c)
    flat = log_w.reshape(-1)
    good = np.isfinite(flat)
    if not np.any(good):
        return GaussianMixture.empty(d)
    gm = GaussianMixture(flat[good], means.reshape(-1, d)[good], covs.reshape(-1, d, d)[good])
    if top is not None and len(gm) > top:
        gm = gm_truncate(gm, max_components=top, weight_floor=0.0)
    return gm


def extract_delta(
    state: HogwildState,
    prior_arrays: PriorArrays,
    agent: int,
    prior_nonexist: float,
    log_b0: float,
    log_eta0_own: float,
    max_components: int = 20,
    weight_floor: float = 1e-6,
) -> PtBelief:
    """Extrinsic target message for one agent from its leave-self-out sums.

    The existence mixture fuses the prior with the global sums minus the
    agent's own contribution; the nonexistence side divides the belief's
    nonexistence product by the agent's own association factor. The result is
    normalized as an augmented density. Falls back to the normalized prior
    when no snapshots were retained."""
    entries = state.loo[agent].values() if agent < len(state.loo) else []
    gm = _materialize(prior_arrays, entries, top=None)
    log_nonexist = math.log(prior_nonexist) + log_b0 - log_eta0_own if prior_nonexist > 0 else -np.inf
    if gm.is_empty:
        log.warning("agent %d: no extrinsic snapshots; falling back to the prior", agent)
        prior_gm = GaussianMixture(prior_arrays.log_w, prior_arrays.means, prior_arrays.covs)
        return PtBelief(prior_gm, prior_nonexist).normalized()
    gm = gm_truncate(gm, max_components, weight_floor)
    log_exist = gm.log_total_weight
    log_norm = np.logaddexp(log_exist, log_nonexist)
    return PtBelief(gm.scaled(-log_norm), math.exp(log_nonexist - log_norm))


def hogwild_belief(
    prior: PtBelief,
    gammas,
    log_eta0,
    consensus: ConsensusRunner,
    rngs,
    iterations: int = 20,
    top: int | None = None,
    tag: str = "pt",
    label_diffusion: bool = True,
    compute_deltas: bool = False,
    delta_components: int = 20,
    weight_floor: float = 1e-6,
):
    """Run the decentralized sampler for one potential target.

    Args:
        prior: predicted existence-augmented belief (identical at all agents).
        gammas: per-agent likelihood messages (flat unit message where the
            agent does not observe the target).
        log_eta0: per-agent log of the missed/miss-association factor; the
            flat message contributes 0.
        consensus: runner bound to the step's communication graph.
        rngs: one generator per agent.
        iterations: number of rounds T; also the default component budget.

    Returns:
        (beliefs, deltas, state): per-agent normalized beliefs (bitwise
        identical), per-agent extrinsic messages (None unless requested),
        and the sampler state (label trace, archive).
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    S = len(gammas)
    if prior.exist_gm.is_empty:
        raise ValueError("prior existence mixture is empty")
    prior_arrays = PriorArrays(prior.exist_gm)
    canons = [g.canonical() for g in gammas]
    labels = np.array([hogwild_init(g, prior.exist_gm, rngs[s]) for s, g in enumerate(gammas)])
    state = HogwildState(labels=labels, loo=[dict() for _ in range(S)])
    cache: dict = {}
    for r in range(iterations):
        hogwild_round(
            state, prior_arrays, canons, consensus, rngs, cache, tag, r, label_diffusion
        )
    log_eta0 = np.maximum(np.asarray(log_eta0, dtype=float), _LOG_TINY)
    b0_rows = consensus.sum_exact(log_eta0.reshape(S, 1), tag=tag)
    log_b0 = float(b0_rows[0, 0])
    top = iterations if top is None else top
    log_nonexist = (
        math.log(prior.nonexist_mass) + log_b0 if prior.nonexist_mass > 0 else -np.inf
    )
    beliefs = []
    deltas = []
    for s in range(S):
        gm = _materialize(prior_arrays, state.archive.values(), top=top)
        if gm.is_empty:
            raise np.linalg.LinAlgError("no belief component could be materialized")
        log_norm = np.logaddexp(gm.log_total_weight, log_nonexist)
        beliefs.append(PtBelief(gm.scaled(-log_norm), math.exp(log_nonexist - log_norm)))
        if compute_deltas:
            deltas.append(
                extract_delta(
                    state,
                    prior_arrays,
                    s,
                    prior.nonexist_mass,
                    log_b0,
                    float(log_eta0[s]),
                    delta_components,
                    weight_floor,
                )
            )
        else:
            deltas.append(None)
    for s in range(1, S):
        if not _beliefs_identical(beliefs[0], beliefs[s]):
            raise AssertionError("agents materialized different beliefs")
    return beliefs, deltas, state


def _beliefs_identical(a: PtBelief, b: PtBelief) -> bool:
    return (
        np.array_equal(a.exist_gm.log_w, b.exist_gm.log_w)
        and np.array_equal(a.exist_gm.means, b.exist_gm.means)
        and np.array_equal(a.exist_gm.covs, b.exist_gm.covs)
        and a.nonexist_mass == b.nonexist_mass
    )
