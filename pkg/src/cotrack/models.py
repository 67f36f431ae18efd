"""Agent/target dynamic models and range-bearing measurement models.

States are [px, py, vx, vy] (m, m/s). The nonexistence side of a potential
target is carried as a scalar mass; the dummy density that formally lives
under it integrates out of every expression and is never materialized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gm import GaussianMixture, _freeze, symmetrize

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Wrap angles to (-pi, pi]."""
    wrapped = np.mod(-np.asarray(theta, dtype=float) + math.pi, TWO_PI) - math.pi
    return -wrapped


def cv_transition(dt: float, dim: int = 2) -> np.ndarray:
    """Constant-velocity transition matrix for [p, v] stacked per axis pair."""
    A = np.eye(2 * dim)
    A[:dim, dim:] = dt * np.eye(dim)
    return A


def cv_process_noise(dt: float, sigma_q: float, dim: int = 2) -> np.ndarray:
    """White-acceleration process noise for the constant-velocity model."""
    eye = np.eye(dim)
    top = np.hstack([0.25 * dt**4 * eye, 0.5 * dt**3 * eye])
    bot = np.hstack([0.5 * dt**3 * eye, dt**2 * eye])
    return sigma_q**2 * np.vstack([top, bot])


@dataclass(frozen=True)
class AgentDynamics:
    A: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if A.shape != Q.shape or A.shape[0] != A.shape[1]:
            raise ValueError("A and Q must be square and same shape")
        if not np.all(np.isfinite(A)):
            raise ValueError("non-finite transition matrix")
        object.__setattr__(self, "A", _freeze(A))
        object.__setattr__(self, "Q", _freeze(symmetrize(Q)))


@dataclass(frozen=True)
class TargetDynamics:
    """Kinematic model plus the birth/death kernel of the existence variable."""

    B: np.ndarray
    Sigma: np.ndarray
    p_survival: float
    p_birth: float
    birth_gm: GaussianMixture

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        object.__setattr__(self, "B", _freeze(B))
        object.__setattr__(self, "Sigma", _freeze(symmetrize(Sigma)))
        if not 0.0 <= self.p_survival <= 1.0 or not 0.0 <= self.p_birth <= 1.0:
            raise ValueError("survival/birth probabilities must be in [0, 1]")
        birth_mass = self.birth_gm.total_weight
        if abs(birth_mass - self.p_birth) > 1e-9:
            raise ValueError(
                f"birth mixture mass {birth_mass} must equal p_birth {self.p_birth}"
            )


@dataclass(frozen=True)
class RangeBearingModel:
    """Range-bearing sensor: noise R, detection/clutter statistics and ranges.

    clutter_density_cartesian is the uniform density of generated clutter over
    the region of interest; f_fa is the constant measurement-space density
    1/(max_range * 2 pi) used inside the likelihood ratios. Generation and
    filtering each use their own convention consistently.
    """

    R: np.ndarray
    p_detect: float
    clutter_rate: float
    roi: tuple  # (xmin, xmax, ymin, ymax) in meters
    max_range: float

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if R.shape != (2, 2):
            raise ValueError("R must be 2x2 (range, bearing)")
        object.__setattr__(self, "R", _freeze(symmetrize(R)))
        if not 0.0 <= self.p_detect <= 1.0:
            raise ValueError("p_detect must be in [0, 1]")
        if self.clutter_rate < 0 or self.max_range <= 0:
            raise ValueError("clutter_rate must be >= 0 and max_range > 0")
        xmin, xmax, ymin, ymax = self.roi
        if xmax <= xmin or ymax <= ymin:
            raise ValueError("degenerate region of interest")

    @property
    def roi_area(self) -> float:
        xmin, xmax, ymin, ymax = self.roi
        return (xmax - xmin) * (ymax - ymin)

    @property
    def clutter_density_cartesian(self) -> float:
        return 1.0 / self.roi_area

    @property
    def f_fa(self) -> float:
        return 1.0 / (self.max_range * TWO_PI)


@dataclass(frozen=True)
class LinearizedObservation:
    """First-order expansion z ~ N(G y + E x + offset, R) of a pair measurement.

    G multiplies the observer (agent) state. E multiplies the source state:
    the target for target measurements, the neighboring agent for inter-agent
    measurements. h_point is the predicted measurement at the expansion point
    and lin_point = G y_hat + E x_hat, so offset = h_point - lin_point.
    angular_components lists measurement coordinates on the circle: only the
    true angular difference z - h_point may be wrapped (the linear terms G y,
    E x are tangent-plane coordinates, not angles).
    """

    G: np.ndarray
    E: np.ndarray
    h_point: np.ndarray
    lin_point: np.ndarray
    R: np.ndarray
    angular_components: tuple = ()

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        E = np.atleast_2d(np.asarray(self.E, dtype=float))
        h_point = np.atleast_1d(np.asarray(self.h_point, dtype=float))
        lin_point = np.atleast_1d(np.asarray(self.lin_point, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if G.shape[0] != E.shape[0] or G.shape[0] != h_point.size or lin_point.size != h_point.size:
            raise ValueError("inconsistent measurement dimensions")
        if not (np.all(np.isfinite(G)) and np.all(np.isfinite(E))):
            raise ValueError("non-finite Jacobian blocks")
        object.__setattr__(self, "G", _freeze(G))
        object.__setattr__(self, "E", _freeze(E))
        object.__setattr__(self, "h_point", _freeze(h_point))
        object.__setattr__(self, "lin_point", _freeze(lin_point))
        object.__setattr__(self, "R", _freeze(symmetrize(R)))
        object.__setattr__(self, "angular_components", tuple(self.angular_components))

    @property
    def offset(self) -> np.ndarray:
        return self.h_point - self.lin_point

    def correct(self, z: np.ndarray) -> np.ndarray:
        """Corrected measurements obeying N(Gy + Ex, R), angles wrapped.

        Computes (z - h) + G y_hat + E x_hat with the angular part of z - h
        wrapped to (-pi, pi]; downstream residuals against linear predictions
        need (and must apply) no further wrapping.
        """
        d = np.asarray(z, dtype=float) - self.h_point
        if self.angular_components:
            d = np.array(d)
            idx = list(self.angular_components)
            d[..., idx] = wrap_angle(d[..., idx])
        return d + self.lin_point


@dataclass(frozen=True)
class PtBelief:
    """Existence-augmented potential-target belief.

    exist_gm carries the r=1 part (sub-probability mixture); nonexist_mass is
    the scalar r=0 mass. A normalized belief satisfies
    exist mass + nonexist mass = 1.
    """

    exist_gm: GaussianMixture
    nonexist_mass: float

    def __post_init__(self):
        if self.nonexist_mass < -1e-12:
            raise ValueError("negative nonexistence mass")
        object.__setattr__(self, "nonexist_mass", max(float(self.nonexist_mass), 0.0))

    @property
    def existence(self) -> float:
        """Probability of existence (mass of the r=1 part)."""
        return self.exist_gm.total_weight

    @property
    def total_mass(self) -> float:
        return self.existence + self.nonexist_mass

    def normalized(self) -> "PtBelief":
        total = self.total_mass
        if total <= 0.0:
            raise ValueError("cannot normalize a zero-mass belief")
        gm = self.exist_gm if self.exist_gm.is_empty else self.exist_gm.scaled(-math.log(total))
        return PtBelief(gm, self.nonexist_mass / total)

    @classmethod
    def nonexistent(cls, dim: int) -> "PtBelief":
        return cls(GaussianMixture.empty(dim), 1.0)


def agent_predict(prior: GaussianMixture, dyn: AgentDynamics) -> GaussianMixture:
    """Push a mixture through linear-Gaussian dynamics; weights unchanged."""
    if prior.dim != dyn.A.shape[0]:
        raise ValueError(f"state dim {prior.dim} does not match dynamics {dyn.A.shape}")
    if prior.is_empty:
        return prior
    means = prior.means @ dyn.A.T
    covs = dyn.Q[None, :, :] + np.einsum("ab,jbc,dc->jad", dyn.A, prior.covs, dyn.A)
    return GaussianMixture(prior.log_w, means, covs)


def target_predict(prior: PtBelief, dyn: TargetDynamics) -> PtBelief:
    """Prediction through the birth/death kernel.

    Surviving components keep their weights scaled by the survival
    probability; birth components enter with weight scaled by the prior
    nonexistence probability. The output nonexistence mass is
    1 - P_B + (P_B - P_S) * P_e, which conserves total probability.
    """
    p_exist = prior.existence
    if p_exist > 1.0 + 1e-9:
        raise ValueError(f"existence mass {p_exist} exceeds 1")
    dim = prior.exist_gm.dim
    log_parts = []
    means_parts = []
    covs_parts = []
    if not prior.exist_gm.is_empty and dyn.p_survival > 0.0:
        surv = prior.exist_gm
        log_parts.append(surv.log_w + math.log(dyn.p_survival))
        means_parts.append(surv.means @ dyn.B.T)
        covs_parts.append(
            dyn.Sigma[None, :, :] + np.einsum("ab,jbc,dc->jad", dyn.B, surv.covs, dyn.B)
        )
    birth_scale = 1.0 - p_exist
    if not dyn.birth_gm.is_empty and birth_scale > 0.0:
        log_parts.append(dyn.birth_gm.log_w + math.log(birth_scale))
        means_parts.append(dyn.birth_gm.means)
        covs_parts.append(dyn.birth_gm.covs)
    if log_parts:
        exist = GaussianMixture(
            np.concatenate(log_parts),
            np.concatenate(means_parts),
            np.concatenate(covs_parts),
        )
    else:
        exist = GaussianMixture.empty(dim)
    nonexist = 1.0 - dyn.p_birth + (dyn.p_birth - dyn.p_survival) * p_exist
    return PtBelief(exist, nonexist)


def range_bearing(observer_xy, source_xy):
    """(range, bearing) from observer to source; bearing in (-pi, pi]."""
    d = np.asarray(source_xy, dtype=float)[:2] - np.asarray(observer_xy, dtype=float)[:2]
    r = float(np.hypot(d[0], d[1]))
    if r == 0.0:
        raise ValueError("observer and source coincide")
    return r, float(wrap_angle(math.atan2(d[1], d[0])))


def range_bearing_jacobian(delta: np.ndarray) -> np.ndarray:
    """d(range, bearing)/d(source position) at separation delta = p_src - p_obs."""
    dx, dy = float(delta[0]), float(delta[1])
    r2 = dx * dx + dy * dy
    r = math.sqrt(r2)
    return np.array([[dx / r, dy / r], [-dy / r2, dx / r2]])


def linearize_range_bearing(
    observer_mean: np.ndarray,
    source_mean: np.ndarray,
    R: np.ndarray,
    which: str = "target-measurement",
) -> LinearizedObservation:
    """Linearize the range-bearing map at the given expansion point.

    The observation blocks satisfy z ~ h(obs, src) + G (y - obs) + E (x - src),
    repackaged with offset = h(obs, src) - G obs - E src so corrected
    measurements z - offset follow the plain linear model G y + E x.
    """
    if which not in ("target-measurement", "inter-agent"):
        raise ValueError(f"unknown observation kind {which!r}")
    obs = np.asarray(observer_mean, dtype=float)
    src = np.asarray(source_mean, dtype=float)
    delta = src[:2] - obs[:2]
    if float(np.hypot(delta[0], delta[1])) == 0.0:
        raise ValueError("coincident linearization points")
    jac = range_bearing_jacobian(delta)
    d_obs = obs.size
    d_src = src.size
    G = np.zeros((2, d_obs))
    E = np.zeros((2, d_src))
    G[:, :2] = -jac
    E[:, :2] = jac
    r, theta = range_bearing(obs[:2], src[:2])
    h = np.array([r, theta])
    lin = G @ obs + E @ src
    return LinearizedObservation(G, E, h, lin, R, angular_components=(1,))
