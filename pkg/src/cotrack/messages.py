"""Gaussian-mixture likelihood messages of the outer loop.

A likelihood message over a state x has the generic form
u0 + sum_i u_i N(e_i; H_i x, C_i): inter-agent messages (Phi) carry no
constant term, target-to-agent messages (Lambda) and agent-to-target
messages (gamma) do. Terms indexed by a measurement/component pair (m, j)
are flattened row-major (m outer, j inner) so label bookkeeping is
deterministic.
"""

from __future__ import annotations

import math

import numpy as np

from .gm import (
    LOG_2PI,
    GaussianMixture,
    PriorArrays,
    chol_spd,
    fuse_batch,
    gm_truncate,
    log_sum_exp,
    symmetrize,
)
from .models import LinearizedObservation


class LikelihoodMessage:
    """u0 + sum_i u_i N(e_i; H_i x, C_i) over a state of dimension dim.

    log_u0 is -inf when the constant term is absent. canonical() returns the
    information-form parameters for labels 0..I (label 0 = constant term),
    cached after the first call.
    """

    __slots__ = ("log_u0", "log_u", "e", "H", "C", "dim", "_canon")

    def __init__(self, log_u0, log_u, e, H, C, dim):
        self.log_u0 = float(log_u0)
        self.log_u = np.asarray(log_u, dtype=float).reshape(-1)
        n = self.log_u.size
        if n == 0:
            self.e = np.zeros((0, 0))
            self.H = np.zeros((0, 0, dim))
            self.C = np.zeros((0, 0, 0))
        else:
            self.e = np.asarray(e, dtype=float).reshape(n, -1)
            dz = self.e.shape[1]
            self.H = np.asarray(H, dtype=float).reshape(n, dz, dim)
            self.C = np.asarray(C, dtype=float).reshape(n, dz, dz)
        self.dim = int(dim)
        self._canon = None

    @classmethod
    def unit(cls, dim: int) -> "LikelihoodMessage":
        """The flat message identically equal to 1 (unobserved potential target)."""
        return cls(0.0, np.zeros(0), None, None, None, dim)

    @property
    def n_terms(self) -> int:
        return self.log_u.size

    @property
    def n_labels(self) -> int:
        return self.n_terms + 1

    @property
    def has_constant(self) -> bool:
        return self.log_u0 > -np.inf

    def canonical(self):
        """(c, C_tilde, e_tilde) stacked over labels 0..I (label 0 first)."""
        if self._canon is None:
            n, d = self.n_terms, self.dim
            c = np.full(n + 1, -np.inf)
            Ct = np.zeros((n + 1, d, d))
            et = np.zeros((n + 1, d))
            c[0] = self.log_u0
            if n:
                low = np.linalg.cholesky(symmetrize(self.C))
                ye = np.linalg.solve(low, self.e[..., None])[..., 0]
                yh = np.linalg.solve(low, self.H)
                logdet = 2.0 * np.sum(np.log(np.einsum("iaa->ia", low)), axis=-1)
                dz = self.e.shape[1]
                c[1:] = self.log_u - 0.5 * (dz * LOG_2PI + logdet) - 0.5 * np.einsum("ia,ia->i", ye, ye)
                et[1:] = np.einsum("iab,ia->ib", yh, ye)
                Ct[1:] = symmetrize(np.einsum("iab,iac->ibc", yh, yh))
            self._canon = (c, Ct, et)
        return self._canon

    def log_value(self, x: np.ndarray) -> float:
        """Evaluate the message at a state point (test/diagnostic use)."""
        x = np.asarray(x, dtype=float)
        vals = [self.log_u0]
        for i in range(self.n_terms):
            r = self.e[i] - self.H[i] @ x
            low = chol_spd(self.C[i])
            y = np.linalg.solve(low, r)
            logdet = 2.0 * float(np.sum(np.log(np.diag(low))))
            vals.append(self.log_u[i] - 0.5 * (r.size * LOG_2PI + logdet + float(y @ y)))
        return log_sum_exp(vals)


# Terms whose best-possible value (weight times the Gaussian's peak) falls
# this far below the constant term cannot influence the product.
_LOG_CONST_SLACK = -20.0


def _prune_terms(log_u, e, H, C, max_terms: int, floor: float, log_u0: float = -np.inf,
                 ref_mean=None):
    """Drop irrelevant terms and cap the term count.

    Terms are ranked by their evaluated size at the receiver's reference
    state (log_u plus log N(e; H ref, C)) when a reference is supplied, and
    by weight alone otherwise: association-message weights can be nearly
    uniform across measurements, so the weight by itself does not gate.
    A term is also dropped when log_u plus its peak log-density bound
    -0.5 log det(2 pi C) cannot come within _LOG_CONST_SLACK of the constant
    term: such terms are numerically invisible next to it."""
    n = log_u.size
    if n == 0:
        return log_u, e, H, C
    score = log_u
    if ref_mean is not None:
        r = e - np.einsum("iab,b->ia", H, np.asarray(ref_mean, dtype=float))
        low = np.linalg.cholesky(symmetrize(C))
        y = np.linalg.solve(low, r[..., None])[..., 0]
        logdet = 2.0 * np.sum(np.log(np.einsum("iaa->ia", low)), axis=-1)
        score = log_u - 0.5 * (e.shape[1] * LOG_2PI + logdet + np.einsum("ia,ia->i", y, y))
    hi = np.max(score)
    if hi == -np.inf:
        keep = np.zeros(0, dtype=int)
    else:
        log_floor = hi + math.log(floor) if floor > 0 else -np.inf
        keep = np.flatnonzero(score >= log_floor)
        if log_u0 > -np.inf and keep.size:
            sign, logdet = np.linalg.slogdet(2.0 * math.pi * C[keep])
            peak = np.where(sign > 0, -0.5 * logdet, np.inf)
            keep = keep[log_u[keep] + peak >= log_u0 + _LOG_CONST_SLACK]
        if keep.size > max_terms:
            order = np.argsort(-score[keep], kind="stable")
            keep = np.sort(keep[order[:max_terms]])
    return log_u[keep], e[keep], H[keep], C[keep]


def compute_phi_msg(
    neighbor_belief: GaussianMixture,
    obs: LinearizedObservation,
    w_measurement: np.ndarray,
) -> LikelihoodMessage:
    """Inter-agent likelihood message: the neighbor's state is marginalized out.

    One term per neighbor-belief component: u = w_i,
    e = w - F m_i (bearing wrapped), H = D (observer block),
    C = W + F P_i F'. No constant term.
    """
    F = obs.E  # source block multiplies the neighbor state
    D = obs.G
    wz = obs.correct(np.asarray(w_measurement, dtype=float))
    e = wz[None, :] - neighbor_belief.means @ F.T
    C = obs.R[None] + np.einsum("ab,jbc,dc->jad", F, neighbor_belief.covs, F)
    H = np.broadcast_to(D, (len(neighbor_belief),) + D.shape).copy()
    return LikelihoodMessage(-np.inf, neighbor_belief.log_w, e, H, C, dim=D.shape[1])


def compute_lambda_msg(
    eta_row: np.ndarray,
    delta_exist: GaussianMixture,
    measurements: np.ndarray,
    obs: LinearizedObservation,
    p_detect: float,
    clutter_rate: float,
    f_fa: float,
    max_terms: int = 10**9,
    term_floor: float = 0.0,
    ref_mean=None,
) -> LikelihoodMessage:
    """Target-measurement likelihood message over the agent state.

    Constant term eta(0)(1 - P_D * delta mass); one term per measurement m and
    delta component j with u = eta(m) P_D w_j / (lambda f_fa),
    e = z_m - E mu_j, H = G and C = R + E Omega_j E' (independent of m).
    """
    exist_mass = delta_exist.total_weight
    const = eta_row[0] * max(1.0 - p_detect * exist_mass, 0.0)
    log_u0 = math.log(const) if const > 0 else -np.inf
    dim = obs.G.shape[1]
    dz = obs.offset.size
    z = np.asarray(measurements, dtype=float).reshape(-1, dz)
    M, J = z.shape[0], len(delta_exist)
    if M == 0 or J == 0 or p_detect == 0.0:
        return LikelihoodMessage(log_u0, np.zeros(0), None, None, None, dim)
    zc = obs.correct(z)
    with np.errstate(divide="ignore"):
        log_eta = np.log(eta_row[1:])
    log_u = (
        log_eta[:, None]
        + math.log(p_detect)
        + delta_exist.log_w[None, :]
        - math.log(clutter_rate * f_fa)
    ).reshape(-1)
    e = (zc[:, None, :] - (delta_exist.means @ obs.E.T)[None, :, :]).reshape(M * J, dz)
    C_j = obs.R[None] + np.einsum("ab,jbc,dc->jad", obs.E, delta_exist.covs, obs.E)
    C = np.broadcast_to(C_j[None], (M, J, dz, dz)).reshape(M * J, dz, dz)
    H = np.broadcast_to(obs.G, (M * J,) + obs.G.shape)
    log_u, e, H, C = _prune_terms(
        log_u, e, H.copy(), C.copy(), max_terms, term_floor, log_u0, ref_mean
    )
    return LikelihoodMessage(log_u0, log_u, e, H, C, dim=dim)


def compute_gamma_msg(
    eta_row: np.ndarray,
    theta: GaussianMixture,
    measurements: np.ndarray,
    obs: LinearizedObservation,
    p_detect: float,
    clutter_rate: float,
    f_fa: float,
    max_terms: int = 10**9,
    term_floor: float = 0.0,
    ref_mean=None,
):
    """Likelihood message over the target state plus its nonexistence value.

    Existence part: constant eta(0)(1 - P_D) plus terms
    u = eta(m) P_D w_theta_j / (lambda f_fa), e = z_m - G m_j, H = E,
    C = R + G P_j G'. The nonexistence branch equals eta(0). Callers use the
    flat unit message for potential targets the agent does not observe.
    """
    const = eta_row[0] * (1.0 - p_detect)
    log_u0 = math.log(const) if const > 0 else -np.inf
    dim = obs.E.shape[1]
    dz = obs.offset.size
    z = np.asarray(measurements, dtype=float).reshape(-1, dz)
    M, J = z.shape[0], len(theta)
    eta0 = float(eta_row[0])
    if M == 0 or J == 0 or p_detect == 0.0:
        return LikelihoodMessage(log_u0, np.zeros(0), None, None, None, dim), eta0
    zc = obs.correct(z)
    with np.errstate(divide="ignore"):
        log_eta = np.log(eta_row[1:])
    log_u = (
        log_eta[:, None]
        + math.log(p_detect)
        + theta.log_w[None, :]
        - math.log(clutter_rate * f_fa)
    ).reshape(-1)
    e = (zc[:, None, :] - (theta.means @ obs.G.T)[None, :, :]).reshape(M * J, dz)
    C_j = obs.R[None] + np.einsum("ab,jbc,dc->jad", obs.G, theta.covs, obs.G)
    C = np.broadcast_to(C_j[None], (M, J, dz, dz)).reshape(M * J, dz, dz)
    H = np.broadcast_to(obs.E, (M * J,) + obs.E.shape)
    log_u, e, H, C = _prune_terms(
        log_u, e, H.copy(), C.copy(), max_terms, term_floor, log_u0, ref_mean
    )
    return LikelihoodMessage(log_u0, log_u, e, H, C, dim=dim), eta0


def extract_theta(
    prior,
    loo_sums,
    fallback: GaussianMixture,
    max_components: int = 20,
    weight_floor: float = 1e-6,
) -> GaussianMixture:
    """Extrinsic agent message from leave-one-out product statistics.

    loo_sums is the stacked (c, C_tilde, e_tilde) of the likelihood products
    that exclude the receiving potential target, as retained by the sampler;
    each is fused with every prior component (prior may be passed as a
    mixture or as precomputed PriorArrays) and the result is normalized to
    unit mass. Falls back to the (already normalized) belief when no
    statistics were retained or all fusions failed.
    """
    if loo_sums is None:
        return fallback
    c, Ct, et = loo_sums
    if c.shape[0] == 0:
        return fallback
    prior_arrays = prior if isinstance(prior, PriorArrays) else PriorArrays(prior)
    log_w, means, covs = fuse_batch(prior_arrays, Ct, et, c)
    flat_w = log_w.reshape(-1)
    good = np.isfinite(flat_w)
    if not np.any(good):
        return fallback
    d = prior_arrays.dim
    gm = GaussianMixture(flat_w[good], means.reshape(-1, d)[good], covs.reshape(-1, d, d)[good])
    return gm_truncate(gm.normalized(), max_components, weight_floor).normalized()
