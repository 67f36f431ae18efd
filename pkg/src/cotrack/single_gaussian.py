"""Decentralized single-Gaussian target pathway.

Each agent forms a local shard: the S-th root of the predicted existence
density times its own likelihood message, moment-matched to one scaled
Gaussian. Shards are fused network-wide with a single consensus exchange of
d^2 + d + 2 reals per agent: shard precision, precision-weighted mean, the
shard's log canonical offset, and the log association factor. Carrying the
canonical offset (rather than the raw log scale) makes the fused scale the
exact mass of the pointwise shard product, so existence probabilities stay
correctly normalized; precision and mean fusion are the usual sums. The
extrinsic message is recovered locally by subtracting the agent's own shard
in canonical form.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .consensus import ConsensusRunner
from .gm import (
    LOG_2PI,
    GaussianMixture,
    LikelihoodComponent,
    ScaledGaussian,
    canonicalize,
    fuse_prior_with_info,
    gaussian_fractional_power,
    gaussian_product_pair,
    moment_match,
    spd_inv,
    spd_logdet,
    symmetrize,
)

log = logging.getLogger(__name__)

_LOG_TINY = math.log(1e-300)


class ScaledBeliefShard(ScaledGaussian):
    """One agent's moment-matched share of a target's existence density."""


@dataclass
class FusedShard:
    """Network-wide fused shard product plus the nonexistence log product."""

    belief: ScaledGaussian
    log_b0: float


def canonical_offset(g: ScaledGaussian, prec: np.ndarray | None = None) -> float:
    """log g0 of the canonical form c N(x; m, P) = exp(g0 + eta'x - x'Lx/2)."""
    prec = spd_inv(g.cov) if prec is None else prec
    maha = float(g.mean @ (prec @ g.mean))
    return g.log_weight - 0.5 * (g.dim * LOG_2PI + spd_logdet(g.cov) + maha)


def from_canonical(g0: float, eta: np.ndarray, lam: np.ndarray) -> ScaledGaussian:
    """Scaled Gaussian with exact mass from canonical parameters (g0, eta, L)."""
    cov = spd_inv(lam)
    mean = cov @ eta
    log_c = g0 + 0.5 * (eta.size * LOG_2PI - spd_logdet(lam)) + 0.5 * float(eta @ mean)
    return ScaledGaussian(log_c, mean, cov)


def local_shard(alpha_exist: ScaledGaussian, gamma, agent_count: int) -> ScaledBeliefShard:
    """S-th root of the prediction times the local likelihood, moment-matched.

    The constant term of the message contributes a weight-only component with
    the root's own moments; every Gaussian term is fused exactly before the
    match. A flat unit message therefore returns the root itself.
    """
    root = gaussian_fractional_power(alpha_exist, agent_count)
    comps = []
    if gamma.has_constant:
        comps.append(root.scaled(gamma.log_u0))
    for i in range(gamma.n_terms):
        term = LikelihoodComponent(gamma.log_u[i], gamma.e[i], gamma.H[i], gamma.C[i])
        comps.append(fuse_prior_with_info(root, canonicalize(term)))
    if not comps:
        raise ValueError("likelihood message has neither constant nor terms")
    mm = moment_match(GaussianMixture.from_components(comps))
    return ScaledBeliefShard(mm.log_weight, mm.mean, mm.cov)


def fuse_shards(
    shards,
    log_eta0,
    consensus: ConsensusRunner,
    tag: str = "pt",
) -> FusedShard:
    """Consensus fusion of the per-agent shards into one scaled Gaussian.

    Canonical parameters are additive under pointwise products, so one sum
    consensus over (precision, precision-weighted mean, canonical offset,
    log association factor) per agent yields the exact scaled-Gaussian
    product of the shards, identical at every agent after max finalization.
    """
    S = len(shards)
    d = shards[0].dim
    rows = np.zeros((S, d * d + d + 2))
    log_eta0 = np.maximum(np.asarray(log_eta0, dtype=float), _LOG_TINY)
    for s, sh in enumerate(shards):
        prec = spd_inv(sh.cov)
        rows[s, : d * d] = prec.reshape(-1)
        rows[s, d * d : d * d + d] = prec @ sh.mean
        rows[s, -2] = canonical_offset(sh, prec)
        rows[s, -1] = log_eta0[s]
    out = consensus.sum_exact(rows, tag=tag)
    glob = out[0]
    lam = symmetrize(glob[: d * d].reshape(d, d))
    eta = glob[d * d : d * d + d]
    belief = from_canonical(glob[-2], eta, lam)
    return FusedShard(belief, float(glob[-1]))


def extract_delta_single(
    fused: ScaledGaussian,
    own_shard: ScaledGaussian,
    alpha_exist: ScaledGaussian,
    agent_count: int,
):
    """Extrinsic existence density: fused belief with the agent's own shard
    removed (canonical subtraction), multiplied by the S-th root of the
    prediction.

    If the precision difference is not positive definite the fused belief is
    used instead (rare, logged) rather than clamping eigenvalues.

    Returns (delta_existence, fallback_used).
    """
    prec_fused = spd_inv(fused.cov)
    prec_own = spd_inv(own_shard.cov)
    lam_rest = symmetrize(prec_fused - prec_own)
    try:
        np.linalg.cholesky(lam_rest)
    except np.linalg.LinAlgError:
        log.warning("indefinite precision difference; using the fused belief for delta")
        return fused, True
    eta_rest = prec_fused @ fused.mean - prec_own @ own_shard.mean
    g_rest = canonical_offset(fused, prec_fused) - canonical_offset(own_shard, prec_own)
    rest = from_canonical(g_rest, eta_rest, lam_rest)
    root = gaussian_fractional_power(alpha_exist, agent_count)
    return gaussian_product_pair(rest, root), False
