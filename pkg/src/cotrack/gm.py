"""Scaled-Gaussian and Gaussian-mixture algebra in moment form.

All mixture weights are carried as natural logs: belief updates multiply
many small Gaussian evaluations, which underflows double precision long
before the linear algebra itself degrades. Every operation here is a pure
function of its inputs and every returned object is immutable, so values
can be shared freely between concurrent workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

# Relative jitter applied when a Cholesky factorization fails: eps = scale * trace/d.
_JITTER_SCALE = 1e-9
_JITTER_TRIES = 4


def log_sum_exp(values) -> float:
    """Max-shifted log(sum(exp(values))); empty input returns -inf."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return -np.inf
    hi = np.max(v)
    if not np.isfinite(hi):
        return float(hi)  # all -inf (or a stray +inf/nan propagates)
    return float(hi + np.log(np.sum(np.exp(v - hi))))


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def chol_spd(a: np.ndarray) -> np.ndarray:
    """Cholesky factor of a symmetric matrix, adding trace-scaled jitter on failure."""
    a = symmetrize(np.asarray(a, dtype=float))
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    d = a.shape[-1]
    eps = _JITTER_SCALE * max(np.trace(a) / d, np.finfo(float).tiny)
    for _ in range(_JITTER_TRIES):
        try:
            return np.linalg.cholesky(a + eps * np.eye(d))
        except np.linalg.LinAlgError:
            eps *= 100.0
    raise np.linalg.LinAlgError(
        f"matrix not positive definite even after jitter (trace={np.trace(a):.3e})"
    )


def spd_inv(a: np.ndarray) -> np.ndarray:
    """Inverse of an SPD matrix via Cholesky, result symmetrized."""
    low = chol_spd(a)
    inv_low = np.linalg.solve(low, np.eye(low.shape[-1]))
    return symmetrize(inv_low.T @ inv_low)


def spd_logdet(a: np.ndarray) -> float:
    low = chol_spd(a)
    return 2.0 * float(np.sum(np.log(np.diag(low))))


def log_gaussian(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """log N(x; mean, cov) for a single evaluation."""
    x = np.asarray(x, dtype=float)
    r = x - np.asarray(mean, dtype=float)
    low = chol_spd(cov)
    y = np.linalg.solve(low, r)
    logdet = 2.0 * float(np.sum(np.log(np.diag(low))))
    return -0.5 * (r.size * LOG_2PI + logdet + float(y @ y))


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ScaledGaussian:
    """c * N(x; mean, cov) with the scale stored as log c."""

    log_weight: float
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean dim {mean.size}")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise ValueError("non-finite mean or covariance")
        scale = max(np.max(np.abs(cov)), 1.0)
        if np.max(np.abs(cov - cov.T)) > 1e-9 * scale:
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "mean", _freeze(mean))
        object.__setattr__(self, "cov", _freeze(symmetrize(cov)))
        object.__setattr__(self, "log_weight", float(self.log_weight))
        if math.isnan(self.log_weight) or self.log_weight == np.inf:
            raise ValueError(f"invalid log weight {self.log_weight}")

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def weight(self) -> float:
        return math.exp(self.log_weight)

    def log_density(self, x) -> float:
        """log of the scaled density c*N(x; mean, cov)."""
        return self.log_weight + log_gaussian(x, self.mean, self.cov)

    def scaled(self, log_factor: float) -> "ScaledGaussian":
        return ScaledGaussian(self.log_weight + log_factor, self.mean, self.cov)


class GaussianMixture:
    """Ordered list of scaled Gaussians sharing one dimension.

    Stored internally as stacked arrays (log_w, means, covs) so that the
    samplers can run batched linear algebra without re-packing.
    """

    __slots__ = ("log_w", "means", "covs", "dim")

    def __init__(self, log_w, means, covs, dim: int | None = None):
        log_w = np.atleast_1d(np.asarray(log_w, dtype=float))
        means = np.asarray(means, dtype=float)
        covs = np.asarray(covs, dtype=float)
        if log_w.size == 0:
            if dim is None:
                raise ValueError("empty mixture needs an explicit dimension")
            means = np.zeros((0, dim))
            covs = np.zeros((0, dim, dim))
        else:
            means = means.reshape(log_w.size, -1)
            d = means.shape[1]
            covs = covs.reshape(log_w.size, d, d)
            if dim is not None and dim != d:
                raise ValueError(f"dim {dim} does not match component dim {d}")
            dim = d
        if np.any(np.isnan(log_w)) or np.any(log_w == np.inf):
            raise ValueError("invalid log weights")
        if not np.all(np.isfinite(means)) or not np.all(np.isfinite(covs)):
            raise ValueError("non-finite component parameters")
        self.log_w = _freeze(log_w)
        self.means = _freeze(means)
        self.covs = _freeze(symmetrize(covs))
        self.dim = int(dim)

    @classmethod
    def _raw(cls, log_w, means, covs, dim) -> "GaussianMixture":
        """Internal fast path: callers guarantee validated, frozen arrays."""
        gm = object.__new__(cls)
        gm.log_w = log_w
        gm.means = means
        gm.covs = covs
        gm.dim = int(dim)
        return gm

    @classmethod
    def from_components(cls, components) -> "GaussianMixture":
        comps = list(components)
        if not comps:
            raise ValueError("use GaussianMixture.empty(dim) for empty mixtures")
        return cls(
            [c.log_weight for c in comps],
            np.stack([c.mean for c in comps]),
            np.stack([c.cov for c in comps]),
        )

    @classmethod
    def empty(cls, dim: int) -> "GaussianMixture":
        return cls(np.zeros(0), np.zeros((0, dim)), np.zeros((0, dim, dim)), dim=dim)

    @classmethod
    def single(cls, g: ScaledGaussian) -> "GaussianMixture":
        return cls.from_components([g])

    def __len__(self) -> int:
        return self.log_w.size

    @property
    def is_empty(self) -> bool:
        return self.log_w.size == 0

    @property
    def components(self) -> list[ScaledGaussian]:
        return [
            ScaledGaussian(self.log_w[j], self.means[j], self.covs[j])
            for j in range(len(self))
        ]

    @property
    def log_total_weight(self) -> float:
        return log_sum_exp(self.log_w)

    @property
    def total_weight(self) -> float:
        return math.exp(self.log_total_weight)

    def mean(self) -> np.ndarray:
        """Weighted mixture mean (requires positive total weight)."""
        if self.is_empty:
            raise ValueError("mean of an empty mixture")
        w = np.exp(self.log_w - self.log_total_weight)
        return w @ self.means

    def normalized(self) -> "GaussianMixture":
        total = self.log_total_weight
        if total == -np.inf:
            raise ValueError("cannot normalize a zero-weight mixture")
        return GaussianMixture._raw(_freeze(self.log_w - total), self.means, self.covs, self.dim)

    def scaled(self, log_factor: float) -> "GaussianMixture":
        return GaussianMixture._raw(_freeze(self.log_w + log_factor), self.means, self.covs, self.dim)

    def log_density(self, x) -> float:
        x = np.asarray(x, dtype=float)
        terms = [
            self.log_w[j] + log_gaussian(x, self.means[j], self.covs[j])
            for j in range(len(self))
        ]
        return log_sum_exp(terms)

    def check_subprobability(self, tol: float = 1e-9) -> None:
        if self.total_weight > 1.0 + tol:
            raise ValueError(f"mixture mass {self.total_weight} exceeds 1")


@dataclass(frozen=True)
class LikelihoodComponent:
    """u * N(e; H x, C): one Gaussian term of a likelihood message."""

    log_u: float
    e: np.ndarray
    H: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        e = np.atleast_1d(np.asarray(self.e, dtype=float))
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if H.shape[0] != e.size or C.shape != (e.size, e.size):
            raise ValueError("inconsistent likelihood term shapes")
        if not (np.all(np.isfinite(e)) and np.all(np.isfinite(H)) and np.all(np.isfinite(C))):
            raise ValueError("non-finite likelihood term")
        object.__setattr__(self, "e", _freeze(e))
        object.__setattr__(self, "H", _freeze(H))
        object.__setattr__(self, "C", _freeze(C))
        object.__setattr__(self, "log_u", float(self.log_u))

    @property
    def state_dim(self) -> int:
        return self.H.shape[1]


@dataclass(frozen=True)
class CanonicalInfo:
    """Information-form summary (e_tilde, C_tilde, c) of a Gaussian likelihood term.

    The null term (a flat likelihood of scale u0) has zero e_tilde/C_tilde and
    c = log u0.
    """

    e_tilde: np.ndarray
    C_tilde: np.ndarray
    c: float

    def __post_init__(self):
        e = np.atleast_1d(np.asarray(self.e_tilde, dtype=float))
        C = np.atleast_2d(np.asarray(self.C_tilde, dtype=float))
        if C.shape != (e.size, e.size):
            raise ValueError("inconsistent canonical shapes")
        object.__setattr__(self, "e_tilde", _freeze(e))
        object.__setattr__(self, "C_tilde", _freeze(symmetrize(C)))
        object.__setattr__(self, "c", float(self.c))
        if math.isnan(self.c):
            raise ValueError("canonical scale is NaN")

    @classmethod
    def null(cls, dim: int, log_u0: float = 0.0) -> "CanonicalInfo":
        return cls(np.zeros(dim), np.zeros((dim, dim)), log_u0)

    @property
    def dim(self) -> int:
        return self.e_tilde.size


def gaussian_product_pair(a: ScaledGaussian, b: ScaledGaussian) -> ScaledGaussian:
    """Exact pointwise product of two scaled Gaussians.

    Precision matrices add; the product of the scales picks up the factor
    N(m_a - m_b; 0, P_a + P_b).
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch {a.dim} vs {b.dim}")
    prec_a = spd_inv(a.cov)
    prec_b = spd_inv(b.cov)
    cov = spd_inv(prec_a + prec_b)
    mean = cov @ (prec_a @ a.mean + prec_b @ b.mean)
    log_w = a.log_weight + b.log_weight + log_gaussian(a.mean, b.mean, a.cov + b.cov)
    return ScaledGaussian(log_w, mean, cov)


def canonicalize(l: LikelihoodComponent) -> CanonicalInfo:
    """Information form of u*N(e; Hx, C): e~ = H'C^-1 e, C~ = H'C^-1 H,
    c = log u - 0.5 log det(2 pi C) - 0.5 e'C^-1 e."""
    low = chol_spd(l.C)
    y_e = np.linalg.solve(low, l.e)
    y_h = np.linalg.solve(low, l.H)
    logdet = 2.0 * float(np.sum(np.log(np.diag(low))))
    c = l.log_u - 0.5 * (l.e.size * LOG_2PI + logdet) - 0.5 * float(y_e @ y_e)
    return CanonicalInfo(y_h.T @ y_e, y_h.T @ y_h, c)


def fuse_prior_with_info(prior: ScaledGaussian, info: CanonicalInfo) -> ScaledGaussian:
    """Multiply a scaled Gaussian by a likelihood term given in canonical form."""
    if prior.dim != info.dim:
        raise ValueError(f"dimension mismatch {prior.dim} vs {info.dim}")
    prec = spd_inv(prior.cov)
    prec_post = symmetrize(prec + info.C_tilde)
    low = chol_spd(prec_post)
    rhs = prec @ prior.mean + info.e_tilde
    mean = np.linalg.solve(low.T, np.linalg.solve(low, rhs))
    logdet_prec_post = 2.0 * float(np.sum(np.log(np.diag(low))))
    # log det P' - log det P = -logdet(prec_post) - logdet(prec)
    logdet_prec = spd_logdet(prec)
    log_w = (
        prior.log_weight
        + info.c
        - 0.5 * float(prior.mean @ (prec @ prior.mean))
        + 0.5 * float(mean @ rhs)
        + 0.5 * (-logdet_prec_post - (-logdet_prec))
    )
    cov = symmetrize(np.linalg.solve(low.T, np.linalg.solve(low, np.eye(prior.dim))))
    return ScaledGaussian(log_w, mean, cov)


def moment_match(gm: GaussianMixture) -> ScaledGaussian:
    """Single scaled Gaussian matching total mass, mean and covariance of a mixture."""
    if gm.is_empty:
        raise ValueError("cannot moment-match an empty mixture")
    log_total = gm.log_total_weight
    if log_total == -np.inf:
        raise ValueError("cannot moment-match a zero-weight mixture")
    w = np.exp(gm.log_w - log_total)
    mean = w @ gm.means
    diff = gm.means - mean
    cov = np.einsum("j,jab->ab", w, gm.covs) + np.einsum("j,ja,jb->ab", w, diff, diff)
    return ScaledGaussian(log_total, mean, symmetrize(cov))


def gaussian_fractional_power(g: ScaledGaussian, s_count: int) -> ScaledGaussian:
    """S-th root of a scaled Gaussian: mean kept, covariance scaled by S,
    scale adjusted so the root is again a scaled Gaussian."""
    s = int(s_count)
    if s < 1:
        raise ValueError("s_count must be >= 1")
    if s == 1:
        return g
    d = g.dim
    logdet = spd_logdet(g.cov)
    log_w = (
        g.log_weight / s
        + 0.5 * (d * (LOG_2PI + math.log(s)) + logdet)
        - (d * LOG_2PI + logdet) / (2.0 * s)
    )
    return ScaledGaussian(log_w, g.mean, s * g.cov)


def gm_truncate(
    gm: GaussianMixture, max_components: int = 20, weight_floor: float = 1e-6
) -> GaussianMixture:
    """Keep the highest-weight components (up to max_components), dropping any
    below weight_floor relative to the largest. Kept weights are not rescaled;
    beliefs are normalized elsewhere."""
    if max_components < 1:
        raise ValueError("max_components must be >= 1")
    if len(gm) <= 1:
        return gm
    order = np.argsort(-gm.log_w, kind="stable")
    keep = order[:max_components]
    log_floor = gm.log_w[order[0]] + math.log(weight_floor) if weight_floor > 0 else -np.inf
    keep = keep[gm.log_w[keep] >= log_floor]
    if keep.size == 0:
        keep = order[:1]
    keep = np.sort(keep)  # preserve original component order
    return GaussianMixture._raw(
        _freeze(gm.log_w[keep]), _freeze(gm.means[keep]), _freeze(gm.covs[keep]), gm.dim
    )


# ---------------------------------------------------------------------------
# Batched kernels used by the samplers. These mirror fuse_prior_with_info and
# log_gaussian over stacked arrays; the samplers only select among the results
# and never perturb them, so single and batched paths must agree exactly.
# ---------------------------------------------------------------------------


class PriorArrays:
    """Per-component precomputation for repeatedly fusing one mixture prior."""

    __slots__ = (
        "log_w", "means", "covs", "prec", "prec_mean", "logdet_prec", "maha",
        "score_const", "dim",
    )

    def __init__(self, gm: GaussianMixture):
        if gm.is_empty:
            raise ValueError("prior mixture is empty")
        self.log_w = gm.log_w
        self.means = gm.means
        self.covs = gm.covs
        self.dim = gm.dim
        prec = np.stack([spd_inv(c) for c in gm.covs])
        self.prec = prec
        self.prec_mean = np.einsum("jab,jb->ja", prec, gm.means)
        self.logdet_prec = np.array([spd_logdet(p) for p in prec])
        self.maha = np.einsum("ja,ja->j", gm.means, self.prec_mean)
        # log_w - maha/2 + logdet_prec/2: the candidate-independent part of
        # the fused log weight.
        self.score_const = self.log_w - 0.5 * self.maha + 0.5 * self.logdet_prec


def _batch_chol(mats: np.ndarray):
    """Batched Cholesky with per-element jitter fallback; returns (low, ok mask)."""
    try:
        return np.linalg.cholesky(mats), np.ones(mats.shape[:-2], dtype=bool)
    except np.linalg.LinAlgError:
        pass
    flat = mats.reshape(-1, mats.shape[-2], mats.shape[-1])
    low = np.zeros_like(flat)
    ok = np.ones(flat.shape[0], dtype=bool)
    for idx in range(flat.shape[0]):
        try:
            low[idx] = chol_spd(flat[idx])
        except np.linalg.LinAlgError:
            ok[idx] = False
            low[idx] = np.eye(mats.shape[-1])
    return low.reshape(mats.shape), ok.reshape(mats.shape[:-2])


def fuse_batch(prior: PriorArrays, C_tilde: np.ndarray, e_tilde: np.ndarray, c: np.ndarray):
    """Fuse every prior component with every canonical-info row.

    Args:
        C_tilde: (B, d, d), e_tilde: (B, d), c: (B,)
    Returns:
        log_w (B, J), means (B, J, d), covs (B, J, d, d); failed fusions get
        log_w = -inf.
    """
    B = c.shape[0]
    J = prior.log_w.shape[0]
    d = prior.dim
    prec_post = symmetrize(prior.prec[None, :] + C_tilde[:, None])  # (B,J,d,d)
    low, ok = _batch_chol(prec_post)
    rhs = prior.prec_mean[None, :, :] + e_tilde[:, None, :]  # (B,J,d)
    eye = np.broadcast_to(np.eye(d), (B, J, d, d))
    inv_low = np.linalg.solve(low, eye)
    covs = symmetrize(np.einsum("bjka,bjkc->bjac", inv_low, inv_low))
    means = np.einsum("bjac,bjc->bja", covs, rhs)
    logdet_prec_post = 2.0 * np.sum(np.log(np.einsum("bjaa->bja", low)), axis=-1)
    log_w = (
        prior.log_w[None, :]
        + c[:, None]
        - 0.5 * prior.maha[None, :]
        + 0.5 * np.einsum("bja,bja->bj", means, rhs)
        - 0.5 * (logdet_prec_post - prior.logdet_prec[None, :])
    )
    log_w = np.where(ok, log_w, -np.inf)
    return log_w, means, covs


def fuse_batch_log_weights(
    prior: PriorArrays, C_tilde: np.ndarray, e_tilde: np.ndarray, c: np.ndarray
) -> np.ndarray:
    """Weights-only variant of fuse_batch for candidate scoring.

    Uses m''(prec_post)^-1 m' = ||L^-1 rhs||^2 so neither the posterior mean
    nor covariance is materialized; must agree with fuse_batch exactly up to
    the arithmetic of the shared Cholesky factor. Inputs are symmetric by
    construction (the factorization reads one triangle only).
    """
    prec_post = prior.prec[None, :] + C_tilde[:, None]
    low, ok = _batch_chol(prec_post)
    rhs = prior.prec_mean[None, :, :] + e_tilde[:, None, :]
    y = np.linalg.solve(low, rhs[..., None])[..., 0]
    diag = np.einsum("bjaa->bja", low)
    log_w = (
        prior.score_const[None, :]
        + c[:, None]
        + 0.5 * np.einsum("bja,bja->bj", y, y)
        - np.sum(np.log(diag), axis=-1)
    )
    if not ok.all():
        log_w = np.where(ok, log_w, -np.inf)
    return log_w


try:
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _HAVE_NUMBA = False


if _HAVE_NUMBA:

    @_njit(cache=True)
    def _score_kernel(prec, prec_mean, score_const, Cc, ec, cc, out):
        """Candidate scoring loop: log sum_j of the fused component weights.

        Equivalent to fuse_batch_log_weights followed by a logsumexp over the
        prior index, with the same trace-scaled jitter retry on factorization
        failure. Reads lower triangles only.
        """
        B, d = ec.shape
        J = score_const.shape[0]
        L = np.empty((d, d))
        y = np.empty(d)
        w = np.empty(J)
        for b in range(B):
            for j in range(J):
                tr = 0.0
                for a in range(d):
                    tr += prec[j, a, a] + Cc[b, a, a]
                eps = 0.0
                ok = False
                logdet_l = 0.0
                for _attempt in range(5):
                    ok = True
                    logdet_l = 0.0
                    for i in range(d):
                        for k in range(i + 1):
                            s = prec[j, i, k] + Cc[b, i, k]
                            if i == k and eps > 0.0:
                                s += eps
                            for m in range(k):
                                s -= L[i, m] * L[k, m]
                            if i == k:
                                if s <= 0.0:
                                    ok = False
                                    break
                                L[i, i] = np.sqrt(s)
                                logdet_l += np.log(L[i, i])
                            else:
                                L[i, k] = s / L[k, k]
                        if not ok:
                            break
                    if ok:
                        break
                    eps = (1e-9 * tr / d) if eps == 0.0 else eps * 100.0
                if not ok:
                    w[j] = -np.inf
                    continue
                quad = 0.0
                for i in range(d):
                    s = prec_mean[j, i] + ec[b, i]
                    for m in range(i):
                        s -= L[i, m] * y[m]
                    y[i] = s / L[i, i]
                    quad += y[i] * y[i]
                w[j] = score_const[j] + cc[b] + 0.5 * quad - logdet_l
            hi = -np.inf
            for j in range(J):
                if w[j] > hi:
                    hi = w[j]
            if hi == -np.inf:
                out[b] = -np.inf
            else:
                acc = 0.0
                for j in range(J):
                    if w[j] > -np.inf:
                        acc += np.exp(w[j] - hi)
                out[b] = hi + np.log(acc)


def fuse_batch_log_pi(
    prior: PriorArrays, C_tilde: np.ndarray, e_tilde: np.ndarray, c: np.ndarray
) -> np.ndarray:
    """log of the total fused weight per candidate (prior index marginalized).

    Uses the compiled kernel when numba is available; otherwise falls back to
    fuse_batch_log_weights plus a logsumexp over the prior components.
    """
    if _HAVE_NUMBA:
        out = np.empty(c.shape[0])
        _score_kernel(
            prior.prec,
            prior.prec_mean,
            prior.score_const,
            np.ascontiguousarray(C_tilde),
            np.ascontiguousarray(e_tilde),
            np.ascontiguousarray(c),
            out,
        )
        return out
    log_w = fuse_batch_log_weights(prior, C_tilde, e_tilde, c)
    hi = np.max(log_w, axis=1)
    out = np.full(c.shape[0], -np.inf)
    good = hi > -np.inf
    if np.any(good):
        out[good] = hi[good] + np.log(np.sum(np.exp(log_w[good] - hi[good, None]), axis=1))
    return out


def batch_log_gaussian_terms(
    e: np.ndarray, H: np.ndarray, C: np.ndarray, means: np.ndarray, covs: np.ndarray
) -> np.ndarray:
    """log N(e_i; H_i m_j, C_i + H_i P_j H_i') for all term/component pairs.

    Args:
        e: (I, dz), H: (I, dz, d), C: (I, dz, dz); means: (J, d), covs: (J, d, d)
    Returns:
        (I, J) array of log densities (-inf where the innovation covariance
        could not be factorized).
    """
    hp = np.einsum("iab,jbc->ijac", H, covs)  # (I,J,dz,d)
    S = symmetrize(C[:, None] + np.einsum("ijac,idc->ijad", hp, H))  # C + HPH'
    r = e[:, None, :] - np.einsum("iab,jb->ija", H, means)
    low, ok = _batch_chol(S)
    y = np.linalg.solve(low, r[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.einsum("ijaa->ija", low)), axis=-1)
    out = -0.5 * (e.shape[1] * LOG_2PI + logdet + np.einsum("ija,ija->ij", y, y))
    return np.where(ok, out, -np.inf)
