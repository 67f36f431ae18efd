"""Centralized Gibbs sampling of a mixture-times-likelihoods product.

The product of a mixture prior with L likelihood messages has one Gaussian
component per prior component and per label vector i = [i_1..i_L], where
i_l picks a term of likelihood l (0 = its constant term). The sampler walks
the label space with single-label conditional resampling, archives every
distinct label vector it visits, and materializes only the highest-scoring
ones. Components are materialized exactly from their label vector; the
sampler selects, it never perturbs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .gm import (
    GaussianMixture,
    PriorArrays,
    batch_log_gaussian_terms,
    fuse_batch,
    fuse_batch_log_pi,
)

log = logging.getLogger(__name__)


@dataclass
class GibbsProductState:
    """Current label vector, running product sums, and the visit archives."""

    labels: np.ndarray  # (L,) current label per likelihood
    c_sum: float
    C_sum: np.ndarray  # (d, d)
    e_sum: np.ndarray  # (d,)
    archive: set = field(default_factory=set)  # distinct label tuples visited
    loo: list = field(default_factory=list)  # per l: distinct leave-one-out tuples

    def check_sums(self, canon, tol: float = 1e-10):
        """Debug invariant: running sums equal the recomputed label sums."""
        c, C, e = _sums_for(canon, self.labels)
        scale = max(abs(self.c_sum), 1.0)
        assert abs(c - self.c_sum) <= tol * scale
        assert np.allclose(C, self.C_sum, rtol=tol, atol=tol)
        assert np.allclose(e, self.e_sum, rtol=tol, atol=tol)


@dataclass
class GibbsProductResult:
    """Truncated product mixture plus the archives needed for extrinsics."""

    mixture: GaussianMixture
    prior: GaussianMixture
    ranked_labels: list  # archived label tuples, best score first
    state: GibbsProductState | None
    canon: list  # per likelihood: (c, C_tilde, e_tilde) arrays over labels
    prior_arrays: PriorArrays | None = None

    def loo_sums(self, l: int):
        """Stacked (c, C_tilde, e_tilde) of the distinct leave-one-out label
        vectors retained for likelihood l, or None if nothing was retained."""
        if self.state is None or l >= len(self.state.loo):
            return None
        keys = sorted(self.state.loo[l])
        if not keys:
            return None
        d = self.prior.dim
        c = np.zeros(len(keys))
        C = np.zeros((len(keys), d, d))
        e = np.zeros((len(keys), d))
        others = [j for j in range(len(self.canon)) if j != l]
        for row, key in enumerate(keys):
            for j, lab in zip(others, key):
                cj, Cj, ej = self.canon[j]
                c[row] += cj[lab]
                C[row] += Cj[lab]
                e[row] += ej[lab]
        return c, C, e


def _sums_for(canon, labels):
    d = canon[0][1].shape[1] if canon else 0
    c = 0.0
    C = np.zeros((d, d))
    e = np.zeros(d)
    for (cl, Cl, el), lab in zip(canon, labels):
        c += cl[lab]
        C += Cl[lab]
        e += el[lab]
    return c, C, e


def _sample_categorical(log_p: np.ndarray, rng: np.random.Generator) -> int:
    hi = np.max(log_p)
    if hi == -np.inf:
        raise ValueError("degenerate distribution: all labels have zero weight")
    if log_p.size == 1:
        return 0
    cdf = np.cumsum(np.exp(log_p - hi))
    return _sample_cdf(cdf, rng)


def _sample_cdf(cdf: np.ndarray, rng: np.random.Generator) -> int:
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, cdf.size - 1)


def gibbs_init_labels(
    prior: GaussianMixture, likelihoods, rng: np.random.Generator
) -> np.ndarray:
    """Independent initial label per likelihood, each drawn proportionally to
    the weight its term would contribute against the prior alone."""
    if not likelihoods:
        raise ValueError("need at least one likelihood message")
    labels = np.zeros(len(likelihoods), dtype=int)
    for l, msg in enumerate(likelihoods):
        log_rho = np.full(msg.n_labels, -np.inf)
        log_rho[0] = msg.log_u0
        if msg.n_terms:
            ll = batch_log_gaussian_terms(msg.e, msg.H, msg.C, prior.means, prior.covs)
            log_rho[1:] = msg.log_u + _logsumexp_rows(prior.log_w[None, :] + ll)
        labels[l] = _sample_categorical(log_rho, rng)
    return labels


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    hi = np.max(a, axis=-1)
    out = np.full(hi.shape, -np.inf)
    good = hi > -np.inf
    if np.any(good):
        out[good] = hi[good] + np.log(np.sum(np.exp(a[good] - hi[good, None]), axis=-1))
    return out


def gibbs_sweep(
    state: GibbsProductState,
    prior_arrays: PriorArrays,
    canon,
    rng: np.random.Generator,
    cache: dict | None = None,
) -> GibbsProductState:
    """One full cycle of single-label conditional resampling.

    For each likelihood l the current label is removed from the running sums,
    every candidate label q is scored by the total weight of the resulting
    product components (marginalizing the prior index), and a new label is
    drawn. Conditional distributions depend only on (l, labels of the
    others), so they are memoized across sweeps.
    """
    L = len(canon)
    labels_t = tuple(int(v) for v in state.labels)
    for l in range(L):
        cl, Cl, el = canon[l]
        lab = labels_t[l]
        key = (l, labels_t[:l] + labels_t[l + 1 :])
        state.loo[l].add(key[1])
        if cl.shape[0] == 1:
            continue  # single-label likelihood: nothing to resample
        base_c = state.c_sum - cl[lab]
        base_C = state.C_sum - Cl[lab]
        base_e = state.e_sum - el[lab]
        cdf = cache.get(key) if cache is not None else None
        if cdf is None:
            cand_c = base_c + cl
            cand_C = base_C[None] + Cl
            cand_e = base_e[None] + el
            log_pi = fuse_batch_log_pi(prior_arrays, cand_C, cand_e, cand_c)
            hi = np.max(log_pi)
            if hi == -np.inf:
                cdf = None
            else:
                cdf = np.cumsum(np.exp(log_pi - hi))
            if cache is not None:
                cache[key] = cdf
        if cdf is None:
            log.warning("all candidate labels failed numerically; keeping label %d", lab)
            q = lab
        else:
            q = _sample_cdf(cdf, rng)
        if q != lab:
            labels_t = labels_t[:l] + (q,) + labels_t[l + 1 :]
            state.c_sum = base_c + cl[q]
            state.C_sum = base_C + Cl[q]
            state.e_sum = base_e + el[q]
            state.archive.add(labels_t)  # every distinct visited vector counts
    state.labels = np.array(labels_t, dtype=int)
    return state


def gibbs_product(
    prior: GaussianMixture,
    likelihoods,
    iterations: int = 20,
    top: int = 20,
    rng: np.random.Generator | None = None,
) -> GibbsProductResult:
    """Approximate the prior-times-likelihoods product by a truncated mixture.

    Runs the initial draw plus `iterations` sweeps, ranks the distinct label
    vectors visited by their product log-scale c (ties broken by label
    order), and materializes the best `top` against every prior component.
    Returned weights are unnormalized: they carry the belief scale. With no
    likelihoods the prior is returned unchanged.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if rng is None:
        rng = np.random.default_rng()
    likelihoods = list(likelihoods)
    if not likelihoods:
        return GibbsProductResult(prior, prior, [], None, [], None)
    canon = [msg.canonical() for msg in likelihoods]
    labels = gibbs_init_labels(prior, likelihoods, rng)
    c0, C0, e0 = _sums_for(canon, labels)
    state = GibbsProductState(
        labels=labels,
        c_sum=c0,
        C_sum=C0,
        e_sum=e0,
        archive={tuple(int(v) for v in labels)},
        loo=[set() for _ in likelihoods],
    )
    prior_arrays = PriorArrays(prior)
    cache: dict = {}
    for _ in range(iterations):
        gibbs_sweep(state, prior_arrays, canon, rng, cache)
    if __debug__:
        state.check_sums(canon)
    archived = sorted(state.archive)
    lab_mat = np.array(archived, dtype=int)
    c_all = np.zeros(len(archived))
    for l, (cl, _, _) in enumerate(canon):
        c_all += cl[lab_mat[:, l]]
    order = np.argsort(-c_all, kind="stable")
    ranked = [archived[i] for i in order]
    selected = ranked[: min(top, len(ranked))]
    d = prior.dim
    B = len(selected)
    c_arr = np.zeros(B)
    C_arr = np.zeros((B, d, d))
    e_arr = np.zeros((B, d))
    for b, lab in enumerate(selected):
        c_arr[b], C_arr[b], e_arr[b] = _sums_for(canon, lab)
    log_w, means, covs = fuse_batch(prior_arrays, C_arr, e_arr, c_arr)
    flat_w = log_w.reshape(-1)
    good = np.isfinite(flat_w)
    if not np.all(good):
        log.warning("dropped %d product components that failed to factorize", np.sum(~good))
    if not np.any(good):
        raise np.linalg.LinAlgError("no product component could be materialized")
    mixture = GaussianMixture(
        flat_w[good], means.reshape(-1, d)[good], covs.reshape(-1, d, d)[good]
    )
    return GibbsProductResult(mixture, prior, ranked, state, canon, prior_arrays)
