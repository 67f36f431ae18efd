"""Per-step orchestration of the outer message-passing loop.

Execution order per outer iteration (base variants): broadcast agent
beliefs; inter-agent likelihood messages; association weights from the
previous iteration's extrinsic messages (prediction messages on the first
iteration); the association loop; target-measurement likelihood messages;
agent belief product; agent extrinsic messages; target likelihood messages;
target beliefs (variant-dispatched); target extrinsic messages unless this
is the last iteration. SPAWN baselines update the agent belief from
inter-agent messages alone and run one tracking pass with the final agent
belief as the extrinsic message.

Variants: CGM / CG compute target beliefs from the pooled messages; DGM uses
the parallel-label decentralized sampler; DG uses single-Gaussian shard
fusion. CG, DG and CG-SPAWN moment-match every belief and extrinsic message
to a single Gaussian.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import hogwild as hw
from . import single_gaussian as sg
from .association import compute_beta_gm, extrinsic_weights, inner_bp
from .consensus import ConsensusRunner, NetworkGraph
from .gibbs import gibbs_product
from .gm import GaussianMixture, PriorArrays, fuse_batch, gm_truncate, moment_match
from .messages import LikelihoodMessage, compute_gamma_msg, compute_lambda_msg, compute_phi_msg, extract_theta
from .models import PtBelief, agent_predict, linearize_range_bearing, target_predict
from .scenario import FrameMeasurements, Scenario

log = logging.getLogger(__name__)

VARIANTS = ("CGM", "DGM", "CG", "DG", "CGM-SPAWN", "CG-SPAWN")

_LOG_TINY = math.log(1e-300)


@dataclass
class FilterConfig:
    variant: str = "CGM"
    outer_iterations: int = 1
    gibbs_iterations: int = 6
    gibbs_top: int = 12
    consensus_rounds: int = 50
    existence_threshold: float = 0.5
    agent_components: int = 5
    target_components: int = 5
    theta_components: int = 4
    delta_components: int = 4
    max_likelihood_terms: int = 10
    term_floor: float = 1e-3
    weight_floor: float = 1e-3
    assoc_max_iters: int = 100
    assoc_tol: float = 1e-8
    label_diffusion: bool = True
    debug_trace: bool = False
    collect_label_trace: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.outer_iterations < 1:
            raise ValueError("outer_iterations must be >= 1")
        if not 0.0 < self.existence_threshold < 1.0:
            raise ValueError("existence_threshold must be in (0, 1)")

    @property
    def is_spawn(self) -> bool:
        return self.variant.endswith("SPAWN")

    @property
    def single_gaussian(self) -> bool:
        return self.variant in ("CG", "DG", "CG-SPAWN")

    @property
    def decentralized_targets(self) -> bool:
        return self.variant in ("DGM", "DG")


@dataclass
class FilterState:
    agent_beliefs: list
    pt_beliefs: list
    step: int = -1
    diagnostics: dict = field(default_factory=dict)


class RngFactory:
    """Deterministic stream derivation: entropy = (seed, *scope, *path),
    each component reduced mod 2^64, fed to numpy's SeedSequence."""

    MASK = (1 << 64) - 1

    def __init__(self, *scope):
        self.scope = tuple(int(v) & self.MASK for v in scope)

    def __call__(self, *path) -> np.random.Generator:
        entropy = list(self.scope) + [int(v) & self.MASK for v in path]
        return np.random.default_rng(np.random.SeedSequence(entropy))

    def scoped(self, *extra) -> "RngFactory":
        return RngFactory(*(self.scope + tuple(extra)))


def initial_state(scn: Scenario, config: FilterConfig) -> FilterState:
    return FilterState(
        agent_beliefs=scn.initial_agent_beliefs(single_gaussian=config.single_gaussian),
        pt_beliefs=scn.initial_pt_beliefs(),
        step=-1,
    )


def _single(gm: GaussianMixture) -> GaussianMixture:
    if len(gm) <= 1:
        return gm
    return GaussianMixture.single(moment_match(gm))


def _normalize_pair(exist: GaussianMixture, log_nonexist: float) -> PtBelief:
    log_norm = np.logaddexp(exist.log_total_weight, log_nonexist)
    if log_norm == -np.inf:
        raise ValueError("zero-mass target belief")
    return PtBelief(exist.scaled(-float(log_norm)), math.exp(log_nonexist - log_norm))


def _delta_from_loo(
    alpha: PtBelief, loo_sums, log_b0_minus_own: float, config: FilterConfig,
    prior_arrays: PriorArrays | None = None,
) -> PtBelief | None:
    """Extrinsic target message from pooled-product leave-one-out sums."""
    if loo_sums is None:
        return None
    c, C, e = loo_sums
    if c.shape[0] == 0:
        return None
    if prior_arrays is None:
        prior_arrays = PriorArrays(alpha.exist_gm)
    log_w, means, covs = fuse_batch(prior_arrays, C, e, c)
    flat = log_w.reshape(-1)
    good = np.isfinite(flat)
    if not np.any(good):
        return None
    d = alpha.exist_gm.dim
    gm = GaussianMixture(flat[good], means.reshape(-1, d)[good], covs.reshape(-1, d, d)[good])
    gm = gm_truncate(gm, config.delta_components, config.weight_floor)
    if config.single_gaussian:
        gm = _single(gm)
    log_nonexist = (
        math.log(alpha.nonexist_mass) + log_b0_minus_own
        if alpha.nonexist_mass > 0
        else -np.inf
    )
    return _normalize_pair(gm, float(log_nonexist))


def step(
    scn: Scenario,
    state: FilterState,
    t: int,
    frame: FrameMeasurements,
    graph: NetworkGraph,
    visibility,
    config: FilterConfig,
    rng_factory: RngFactory,
) -> FilterState:
    """Advance all agent and potential-target beliefs by one time step.

    `visibility` is the truth-derived set that drove measurement synthesis;
    the filter itself decides which slots an agent processes from predicted
    positions (see below), since agents cannot condition on true existence.
    """
    S = scn.n_agents
    K = scn.n_slots
    cfg = config
    trace: list | None = [] if cfg.debug_trace else None
    runner = ConsensusRunner(graph, cfg.consensus_rounds) if cfg.decentralized_targets else None

    # Prediction messages (Chapman-Kolmogorov); beliefs re-normalized after
    # truncation so downstream weight formulas see unit-mass agent densities.
    phi = []
    for s in range(S):
        gm = agent_predict(state.agent_beliefs[s], scn.agent_dynamics[s])
        phi.append(gm_truncate(gm, cfg.agent_components, cfg.weight_floor).normalized())
    alpha = []
    for k in range(K):
        pt = target_predict(state.pt_beliefs[k], scn.target_dynamics[k])
        exist = gm_truncate(pt.exist_gm, cfg.target_components, cfg.weight_floor)
        if cfg.single_gaussian:
            exist = _single(exist)
        alpha.append(PtBelief(exist, pt.nonexist_mass).normalized())
    if trace is not None:
        trace.append(("predict", 0, -1))

    # Linearization points: prediction-message means for both agents and
    # targets, held fixed across outer iterations.
    phi_mean = [p.mean() for p in phi]
    # Which slots an agent processes is decided from predicted positions (the
    # truth-based sets drive measurement synthesis only): agents cannot know
    # true target existence, and a dead slot must keep being inspected so its
    # missed detections drive the existence mass down.
    alpha_mean = [None if a.exist_gm.is_empty else a.exist_gm.mean() for a in alpha]
    observed = [
        sorted(
            k
            for k in range(K)
            if alpha_mean[k] is not None
            and np.hypot(
                alpha_mean[k][0] - phi_mean[s][0], alpha_mean[k][1] - phi_mean[s][1]
            )
            <= scn.sensors[s].max_range
        )
        for s in range(S)
    ]
    lin_tgt = {
        (s, k): linearize_range_bearing(phi_mean[s], alpha[k].exist_gm.mean(), scn.sensors[s].R)
        for s in range(S)
        for k in observed[s]
    }
    lin_inter = {
        (s, int(ell)): linearize_range_bearing(
            phi_mean[s], phi_mean[int(ell)], scn.inter_R, which="inter-agent"
        )
        for s in range(S)
        for ell in graph.neighbors[s]
    }

    agent_beliefs = list(phi)
    theta = {(s, k): phi[s] for s in range(S) for k in observed[s]}
    delta = {(s, k): alpha[k] for s in range(S) for k in observed[s]}
    pt_beliefs = list(alpha)
    label_trace: list = []

    for p in range(1, cfg.outer_iterations + 1):
        received = list(agent_beliefs)  # broadcast at the top of the iteration
        if trace is not None:
            trace.append(("broadcast", p, -1))
        phi_msgs = {
            (s, ell): compute_phi_msg(received[ell], lin_inter[(s, ell)], frame.inter[s][ell])
            for s in range(S)
            for ell in sorted(frame.inter[s])
        }
        if trace is not None:
            trace.append(("phi_messages", p, -1))

        eta_rows: dict = {}
        gamma_msgs: dict = {}
        eta0: dict = {}

        if cfg.is_spawn:
            # Self-localization from inter-agent messages alone, then one
            # tracking pass with the final agent belief as extrinsic message.
            for s in range(S):
                liks = [phi_msgs[(s, ell)] for ell in sorted(frame.inter[s])]
                res = gibbs_product(
                    phi[s], liks, cfg.gibbs_iterations, cfg.gibbs_top, rng_factory(t, 1, p, s)
                )
                belief = gm_truncate(res.mixture, cfg.agent_components, cfg.weight_floor).normalized()
                if cfg.single_gaussian:
                    belief = _single(belief)
                agent_beliefs[s] = belief
                for k in observed[s]:
                    theta[(s, k)] = belief
            if trace is not None:
                trace.append(("agent_beliefs", p, -1))
            for s in range(S):
                _associate(
                    s, observed[s], frame, theta, delta, lin_tgt, scn, cfg, eta_rows, trace, p
                )
        else:
            for s in range(S):
                _associate(
                    s, observed[s], frame, theta, delta, lin_tgt, scn, cfg, eta_rows, trace, p
                )
                lambda_msgs = []
                for k in observed[s]:
                    lam = compute_lambda_msg(
                        eta_rows[(s, k)],
                        delta[(s, k)].exist_gm,
                        frame.target_z[s],
                        lin_tgt[(s, k)],
                        scn.sensors[s].p_detect,
                        scn.sensors[s].clutter_rate,
                        scn.sensors[s].f_fa,
                        cfg.max_likelihood_terms,
                        cfg.term_floor,
                        ref_mean=phi_mean[s],
                    )
                    lambda_msgs.append(lam)
                if trace is not None:
                    trace.append(("lambda_messages", p, s))
                neighbors = sorted(frame.inter[s])
                liks = [phi_msgs[(s, ell)] for ell in neighbors] + lambda_msgs
                res = gibbs_product(
                    phi[s], liks, cfg.gibbs_iterations, cfg.gibbs_top, rng_factory(t, 1, p, s)
                )
                belief = gm_truncate(res.mixture, cfg.agent_components, cfg.weight_floor).normalized()
                if cfg.single_gaussian:
                    belief = _single(belief)
                agent_beliefs[s] = belief
                if trace is not None:
                    trace.append(("agent_belief", p, s))
                for idx, k in enumerate(observed[s]):
                    th = extract_theta(
                        res.prior_arrays if res.prior_arrays is not None else phi[s],
                        res.loo_sums(len(neighbors) + idx),
                        fallback=belief,
                        max_components=cfg.theta_components,
                        weight_floor=cfg.weight_floor,
                    )
                    if cfg.single_gaussian:
                        th = _single(th)
                    theta[(s, k)] = th
                if trace is not None:
                    trace.append(("theta", p, s))

        for s in range(S):
            for k in observed[s]:
                gamma_msgs[(s, k)], eta0[(s, k)] = compute_gamma_msg(
                    eta_rows[(s, k)],
                    theta[(s, k)],
                    frame.target_z[s],
                    lin_tgt[(s, k)],
                    scn.sensors[s].p_detect,
                    scn.sensors[s].clutter_rate,
                    scn.sensors[s].f_fa,
                    cfg.max_likelihood_terms,
                    cfg.term_floor,
                    ref_mean=alpha_mean[k],
                )
        if trace is not None:
            trace.append(("gamma_messages", p, -1))

        want_delta = p != cfg.outer_iterations
        for k in range(K):
            try:
                pt_beliefs[k] = _target_stage(
                    scn, k, alpha[k], gamma_msgs, eta0, observed, runner, cfg,
                    rng_factory, t, p, delta, want_delta, label_trace,
                )
            except Exception:
                log.exception("target stage failed for slot %d; using its prediction", k)
                pt_beliefs[k] = alpha[k]
                if want_delta:
                    for s in range(S):
                        if k in observed[s]:
                            delta[(s, k)] = alpha[k]
        if trace is not None:
            trace.append(("target_beliefs", p, -1))

    diagnostics = {
        "existence": np.array([pt.existence for pt in pt_beliefs]),
        "traffic": {tag: c.snapshot() for tag, c in runner.counters.items()} if runner else {},
        "graph_diameter": graph.diameter,
    }
    if trace is not None:
        diagnostics["trace"] = trace
    if cfg.collect_label_trace:
        diagnostics["label_trace"] = label_trace
    return FilterState(agent_beliefs, pt_beliefs, t, diagnostics)


def _associate(s, observed_s, frame, theta, delta, lin_tgt, scn, cfg, eta_rows, trace, p):
    """Association weights and the inner loop for one agent; fills eta_rows."""
    z = frame.target_z[s]
    K_s = len(observed_s)
    beta = np.zeros((K_s, z.shape[0] + 1))
    for i, k in enumerate(observed_s):
        beta[i] = compute_beta_gm(
            theta[(s, k)],
            delta[(s, k)].exist_gm,
            lin_tgt[(s, k)],
            z,
            scn.sensors[s].p_detect,
            scn.sensors[s].clutter_rate,
            scn.sensors[s].f_fa,
        )
    if trace is not None:
        trace.append(("beta", p, s))
    table = inner_bp(beta, cfg.assoc_max_iters, cfg.assoc_tol)
    if trace is not None:
        trace.append(("eta", p, s))
    # messages consume the extrinsic association rows; the marginals stay on
    # the table for inspection
    for i, k in enumerate(observed_s):
        eta_rows[(s, k)] = extrinsic_weights(table.beta[i], table.eta[i])
    return table


def _target_stage(
    scn, k, alpha_k, gamma_msgs, eta0, observed, runner, cfg,
    rng_factory, t, p, delta, want_delta, label_trace,
) -> PtBelief:
    """Variant-dispatched target belief update for one slot."""
    S = scn.n_agents
    observers = [s for s in range(S) if k in observed[s]]

    if cfg.decentralized_targets:
        gammas = [
            gamma_msgs.get((s, k), LikelihoodMessage.unit(alpha_k.exist_gm.dim))
            for s in range(S)
        ]
        log_eta0 = np.array(
            [math.log(max(eta0.get((s, k), 1.0), 1e-300)) for s in range(S)]
        )
        if cfg.variant == "DGM":
            rngs = [rng_factory(t, 3, p, k, s) for s in range(S)]
            beliefs, deltas, hstate = hw.hogwild_belief(
                alpha_k,
                gammas,
                log_eta0,
                runner,
                rngs,
                iterations=cfg.gibbs_iterations,
                top=cfg.gibbs_top,
                tag=f"pt:{k}",
                label_diffusion=cfg.label_diffusion,
                compute_deltas=want_delta,
                delta_components=cfg.delta_components,
                weight_floor=cfg.weight_floor,
            )
            if cfg.collect_label_trace:
                label_trace.extend((t, p, k, r, s, lab) for r, s, lab in hstate.trace)
            belief = beliefs[0]
            exist = gm_truncate(belief.exist_gm, cfg.target_components, cfg.weight_floor)
            belief = _normalize_pair(
                exist,
                math.log(belief.nonexist_mass) if belief.nonexist_mass > 0 else -np.inf,
            )
            if want_delta:
                for s in observers:
                    if deltas[s] is not None:
                        delta[(s, k)] = deltas[s]
            return belief
        # DG: single-Gaussian shard fusion
        comp = alpha_k.exist_gm.components[0]
        shards = [sg.local_shard(comp, gammas[s], S) for s in range(S)]
        fused = sg.fuse_shards(shards, log_eta0, runner, tag=f"pt:{k}")
        log_nonexist = (
            math.log(alpha_k.nonexist_mass) + fused.log_b0
            if alpha_k.nonexist_mass > 0
            else -np.inf
        )
        belief = _normalize_pair(GaussianMixture.single(fused.belief), float(log_nonexist))
        if want_delta:
            for s in observers:
                dex, _ = sg.extract_delta_single(fused.belief, shards[s], comp, S)
                log_d0 = log_nonexist - float(log_eta0[s])
                delta[(s, k)] = _normalize_pair(GaussianMixture.single(dex), log_d0)
        return belief

    # Centralized pooled product (CGM, CG and the SPAWN baselines).
    liks = [gamma_msgs[(s, k)] for s in observers]
    log_b0 = float(sum(math.log(max(eta0[(s, k)], 1e-300)) for s in observers))
    if not liks:
        return alpha_k
    res = gibbs_product(
        alpha_k.exist_gm, liks, cfg.gibbs_iterations, cfg.gibbs_top, rng_factory(t, 2, p, k)
    )
    exist = gm_truncate(res.mixture, cfg.target_components, cfg.weight_floor)
    if cfg.single_gaussian:
        exist = _single(exist)
    log_nonexist = (
        math.log(alpha_k.nonexist_mass) + log_b0 if alpha_k.nonexist_mass > 0 else -np.inf
    )
    belief = _normalize_pair(exist, float(log_nonexist))
    if want_delta:
        for idx, s in enumerate(observers):
            d = _delta_from_loo(
                alpha_k,
                res.loo_sums(idx),
                log_b0 - math.log(max(eta0[(s, k)], 1e-300)),
                cfg,
                prior_arrays=res.prior_arrays,
            )
            delta[(s, k)] = d if d is not None else belief
    return belief


def infer(state: FilterState, threshold: float = 0.5):
    """MMSE agent estimates plus the confirmed-target list.

    A potential target is reported iff its existence probability reaches the
    threshold; its state estimate is the existence-conditioned mixture mean.
    """
    agent_estimates = np.array([b.mean() for b in state.agent_beliefs])
    confirmed = []
    for k, pt in enumerate(state.pt_beliefs):
        if not pt.exist_gm.is_empty and pt.existence >= threshold:
            confirmed.append((k, pt.exist_gm.mean()))
    return agent_estimates, confirmed


def save_beliefs(path, state: FilterState) -> None:
    """Belief snapshot as a flat .npz archive (documented in the README)."""
    payload = {"step": np.array([state.step])}
    for s, b in enumerate(state.agent_beliefs):
        payload[f"agent{s}_log_w"] = b.log_w
        payload[f"agent{s}_means"] = b.means
        payload[f"agent{s}_covs"] = b.covs
    for k, pt in enumerate(state.pt_beliefs):
        payload[f"pt{k}_log_w"] = pt.exist_gm.log_w
        payload[f"pt{k}_means"] = pt.exist_gm.means
        payload[f"pt{k}_covs"] = pt.exist_gm.covs
        payload[f"pt{k}_nonexist"] = np.array([pt.nonexist_mass])
    np.savez(path, **payload)


def load_beliefs(path) -> FilterState:
    data = np.load(path)
    agents = []
    s = 0
    while f"agent{s}_log_w" in data:
        agents.append(
            GaussianMixture(data[f"agent{s}_log_w"], data[f"agent{s}_means"], data[f"agent{s}_covs"])
        )
        s += 1
    pts = []
    k = 0
    while f"pt{k}_log_w" in data:
        dim = data[f"pt{k}_means"].shape[1] if data[f"pt{k}_means"].size else 4
        gm = GaussianMixture(
            data[f"pt{k}_log_w"], data[f"pt{k}_means"], data[f"pt{k}_covs"], dim=dim
        )
        pts.append(PtBelief(gm, float(data[f"pt{k}_nonexist"][0])))
        k += 1
    return FilterState(agents, pts, int(data["step"][0]))
