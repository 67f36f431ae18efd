"""Single-target association weights and the iterative association loop.

The association weights beta_k(m) compare each measurement against a
potential target's predicted position (marginalizing over both the target
extrinsic density and the agent extrinsic density); beta_k(0) is the missed
detection weight. The bipartite message iteration between target-oriented
and measurement-oriented association variables then produces the marginal
association messages eta_k(m). Each row of eta is a probability vector over
{0..M} with 0 = missed detection.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .gm import GaussianMixture
from .models import LinearizedObservation

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class AssociationTable:
    """Per-agent association weights and marginal association messages.

    beta: (K, M+1) nonnegative weights, column 0 = missed detection; rows of
    potential targets outside the agent's visibility are zero for m >= 1.
    eta: (K, M+1) rows normalized to sum 1.
    """

    beta: np.ndarray
    eta: np.ndarray
    converged: bool = True
    iterations: int = 0


def compute_beta_gm(
    theta: GaussianMixture,
    delta_exist: GaussianMixture,
    obs: LinearizedObservation,
    measurements: np.ndarray,
    p_detect: float,
    clutter_rate: float,
    f_fa: float,
) -> np.ndarray:
    """Association-weight row for one potential target at one agent.

    beta(m) = sum_ij P_D w_delta_i w_theta_j N(z_m; E mu_i + G m_j,
    R + E Omega_i E' + G P_j G') / (lambda f_fa) and
    beta(0) = 1 - P_D * (total delta existence mass).
    """
    if f_fa <= 0.0:
        raise ValueError("clutter density must be positive (inconsistent configuration)")
    z = np.asarray(measurements, dtype=float).reshape(-1, obs.offset.size)
    M = z.shape[0]
    beta = np.zeros(M + 1)
    exist_mass = delta_exist.total_weight
    beta[0] = max(1.0 - p_detect * exist_mass, 0.0)
    if M == 0 or delta_exist.is_empty or p_detect == 0.0:
        return beta
    # Innovation moments for every (delta component i, theta component j) pair.
    zc = obs.correct(z)  # corrected measurements follow N(Gy + Ex, R), angles wrapped
    mu_part = delta_exist.means @ obs.E.T  # (I, dz)
    m_part = theta.means @ obs.G.T  # (J, dz)
    S_delta = np.einsum("ab,ibc,dc->iad", obs.E, delta_exist.covs, obs.E)
    S_theta = np.einsum("ab,jbc,dc->jad", obs.G, theta.covs, obs.G)
    S = obs.R[None, None] + S_delta[:, None] + S_theta[None, :]  # (I, J, dz, dz)
    resid = zc[:, None, None, :] - (mu_part[None, :, None, :] + m_part[None, None, :, :])
    low = np.linalg.cholesky(0.5 * (S + np.swapaxes(S, -1, -2)))
    y = np.linalg.solve(low[None], resid[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.einsum("ijaa->ija", low)), axis=-1)
    log_n = -0.5 * (z.shape[1] * LOG_2PI + logdet[None] + np.einsum("mija,mija->mij", y, y))
    log_w = (
        delta_exist.log_w[None, :, None]
        + theta.log_w[None, None, :]
        + log_n
        + np.log(p_detect)
        - np.log(clutter_rate * f_fa)
    )
    flat = log_w.reshape(M, -1)
    hi = np.max(flat, axis=1)
    good = hi > -np.inf
    beta[1:][good] = np.exp(hi[good]) * np.sum(np.exp(flat[good] - hi[good, None]), axis=1)
    return beta


def inner_bp(beta: np.ndarray, max_iters: int = 100, tol: float = 1e-8) -> AssociationTable:
    """Bipartite message iteration producing marginal association messages.

    Messages: phi_{k->m} = beta_k(m) / (beta_k(0) + sum_{m' != m} beta_k(m') nu_{m'->k})
    and nu_{m->k} = 1 / (1 + sum_{k' != k} phi_{k'->m}); on exit
    eta_k(m) propto beta_k(m) nu_{m->k} for m >= 1 and eta_k(0) propto beta_k(0).
    Exact on tree-structured instances; reports (without raising) if the
    fixed point is not reached within max_iters.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.ndim != 2 or beta.shape[1] < 1:
        raise ValueError("beta must be (K, M+1)")
    if np.any(beta < 0):
        raise ValueError("negative association weight")
    K, M1 = beta.shape
    M = M1 - 1
    eta = np.zeros_like(beta)
    if M == 0 or K == 0:
        eta[:, 0] = 1.0
        return AssociationTable(beta, eta, converged=True, iterations=0)
    b0 = beta[:, 0]
    bm = beta[:, 1:]
    nu = np.ones((K, M))
    converged = False
    it = 0
    tiny = np.finfo(float).tiny
    for it in range(1, max_iters + 1):
        prod = bm * nu
        denom = b0[:, None] + np.sum(prod, axis=1, keepdims=True) - prod
        phi = bm / np.maximum(denom, tiny)
        tot = 1.0 + np.sum(phi, axis=0, keepdims=True)
        nu_new = 1.0 / np.maximum(tot - phi, tiny)
        delta = np.max(np.abs(nu_new - nu))
        nu = nu_new
        if delta < tol:
            converged = True
            break
    if not converged:
        log.warning("association loop stopped after %d iterations (last delta=%.2e)", it, delta)
    unnorm = np.concatenate([b0[:, None], bm * nu], axis=1)
    row_sum = np.sum(unnorm, axis=1, keepdims=True)
    if np.any(row_sum <= 0):
        raise ValueError("association row with zero total weight")
    eta = unnorm / row_sum
    return AssociationTable(beta, eta, converged=converged, iterations=it)


def extrinsic_weights(beta_row: np.ndarray, eta_row: np.ndarray) -> np.ndarray:
    """Extrinsic association message: the marginal with the local weight
    divided back out, renormalized.

    The likelihood messages already contain the local evidence (their terms
    are the beta integrands evaluated at the state), so weighting them by the
    marginal eta would count beta twice; the extrinsic row eta/beta restores
    the plain sum over association events. On tree-structured instances this
    makes the belief equal the exact Bayesian update. Entries with zero beta
    stay zero."""
    beta_row = np.asarray(beta_row, dtype=float)
    eta_row = np.asarray(eta_row, dtype=float)
    kappa = np.zeros_like(eta_row)
    good = beta_row > 0
    kappa[good] = eta_row[good] / beta_row[good]
    total = kappa.sum()
    if total <= 0:
        raise ValueError("degenerate association row")
    return kappa / total


def enumerate_association_marginals(beta: np.ndarray) -> np.ndarray:
    """Exact marginals by enumerating all consistent joint associations.

    Joint weight of an assignment a (one entry per target, values in {0..M},
    nonzero values distinct) is the product of the beta entries. Exponential
    in the number of targets; intended as a test oracle for small instances.
    """
    beta = np.asarray(beta, dtype=float)
    K, M1 = beta.shape
    M = M1 - 1
    marg = np.zeros_like(beta)
    total = 0.0

    def recurse(k, used, weight, assignment):
        nonlocal total
        if k == K:
            total += weight
            for kk, m in enumerate(assignment):
                marg[kk, m] += weight
            return
        for m in range(M1):
            if m != 0 and m in used:
                continue
            if m != 0:
                used.add(m)
            recurse(k + 1, used, weight * beta[k, m], assignment + [m])
            if m != 0:
                used.discard(m)

    recurse(0, set(), 1.0, [])
    if total <= 0:
        raise ValueError("all joint associations have zero weight")
    return marg / total
