"""Ground-truth generation, measurement synthesis and per-step graphs.

The builtin scenario mirrors the reference setup: a 1500 m x 1500 m region,
50 steps at 1 s, two stationary anchors plus six mobile agents, and up to ten
targets with births at t = 5, 10, 20 and one death at t = 40. Trajectories
are synthetic (deterministic straight-line tracks): they reproduce the
counts, ranges, birth/death schedule and region of the reference scenario,
not its exact coordinates, which were never published.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .consensus import NetworkGraph
from .gm import GaussianMixture, moment_match
from .models import (
    AgentDynamics,
    PtBelief,
    RangeBearingModel,
    TargetDynamics,
    cv_process_noise,
    cv_transition,
    range_bearing,
    wrap_angle,
)


@dataclass(frozen=True)
class TargetTrack:
    birth: int
    death: int  # first step at which the target no longer exists
    states: np.ndarray  # (death - birth, 4)

    def alive(self, t: int) -> bool:
        return self.birth <= t < self.death

    def state(self, t: int) -> np.ndarray:
        if not self.alive(t):
            raise ValueError(f"target not alive at t={t}")
        return self.states[t - self.birth]


@dataclass(frozen=True)
class GroundTruth:
    agent_states: np.ndarray  # (S, n_steps, 4)
    anchors: tuple  # indices of stationary agents with known states
    targets: list  # list[TargetTrack]

    @property
    def n_agents(self) -> int:
        return self.agent_states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.agent_states.shape[1]

    @property
    def n_targets(self) -> int:
        return len(self.targets)

    def agents_at(self, t: int) -> np.ndarray:
        return self.agent_states[:, t, :]

    def alive_targets(self, t: int):
        """(ids, states) of targets existing at step t."""
        ids = [k for k, trk in enumerate(self.targets) if trk.alive(t)]
        states = np.array([self.targets[k].state(t) for k in ids]).reshape(len(ids), 4)
        return ids, states

    def cardinality(self, t: int) -> int:
        return sum(trk.alive(t) for trk in self.targets)

    def is_mobile(self, s: int) -> bool:
        return s not in self.anchors


@dataclass
class FrameMeasurements:
    """One step's unlabeled target measurements and keyed inter-agent ones."""

    target_z: list  # per agent: (M_s, 2) array of (range, bearing)
    inter: list  # per agent: dict neighbor -> (2,) measurement

    @property
    def counts(self) -> list:
        return [z.shape[0] for z in self.target_z]


def build_graphs(truth: GroundTruth, t: int, comm_range: float, meas_ranges):
    """Communication graph and per-agent target-visibility sets at step t.

    Edge (s, l) iff the agents are within comm_range; target k is visible to
    agent s iff alive and within meas_ranges[s]. Raises if the communication
    graph is disconnected.
    """
    pos = truth.agents_at(t)[:, :2]
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=-1))
    adj = dist <= comm_range
    np.fill_diagonal(adj, False)
    graph = NetworkGraph(adj)  # raises on disconnection
    meas_ranges = np.asarray(meas_ranges, dtype=float)
    visibility = []
    ids, states = truth.alive_targets(t)
    for s in range(truth.n_agents):
        vis = set()
        for k, x in zip(ids, states):
            if np.hypot(x[0] - pos[s, 0], x[1] - pos[s, 1]) <= meas_ranges[s]:
                vis.add(k)
        visibility.append(vis)
    return graph, visibility


def synthesize_frame(
    truth: GroundTruth,
    t: int,
    graph: NetworkGraph,
    visibility,
    sensors,
    inter_R: np.ndarray,
    rng: np.random.Generator,
) -> FrameMeasurements:
    """Detections with probability P_D, Poisson clutter uniform over the ROI,
    and one inter-agent measurement per link direction (links never miss)."""
    pos = truth.agents_at(t)
    ids_states = dict(zip(*truth.alive_targets(t)))
    chol_inter = np.linalg.cholesky(inter_R)
    target_z = []
    inter = []
    for s in range(truth.n_agents):
        sensor = sensors[s]
        chol_R = np.linalg.cholesky(sensor.R)
        zs = []
        for k in sorted(visibility[s]):
            if rng.random() < sensor.p_detect:
                r, th = range_bearing(pos[s, :2], ids_states[k][:2])
                noise = chol_R @ rng.standard_normal(2)
                zs.append([r + noise[0], wrap_angle(th + noise[1])])
        n_clutter = rng.poisson(sensor.clutter_rate)
        if n_clutter:
            xmin, xmax, ymin, ymax = sensor.roi
            cx = rng.uniform(xmin, xmax, size=n_clutter)
            cy = rng.uniform(ymin, ymax, size=n_clutter)
            for x, y in zip(cx, cy):
                if x == pos[s, 0] and y == pos[s, 1]:
                    continue  # clutter exactly on the sensor carries no geometry
                zs.append(list(range_bearing(pos[s, :2], (x, y))))
        z = np.array(zs, dtype=float).reshape(len(zs), 2)
        target_z.append(z[rng.permutation(len(zs))])
        w = {}
        for ell in graph.neighbors[s]:
            r, th = range_bearing(pos[s, :2], pos[ell, :2])
            noise = chol_inter @ rng.standard_normal(2)
            w[int(ell)] = np.array([r + noise[0], wrap_angle(th + noise[1])])
        inter.append(w)
    return FrameMeasurements(target_z, inter)


# ---------------------------------------------------------------------------
# Builtin scenario
# ---------------------------------------------------------------------------

# Agent layout: starts, velocities (m/s). The first two entries are anchors.
# The layout strings the agents along a chain that circles the region (the
# anchors sit at its two ends), keeping the communication graph sparse: one
# degree-1 agent, diameter 6, stable edge set at every step for the ranges
# below. Sparse connectivity is what makes few-round consensus visibly lossy.
_AGENT_STARTS = np.array(
    [
        [100.0, 1400.0],
        [1400.0, 1400.0],
        [950.0, 100.0],
        [1430.0, 1050.0],
        [1400.0, 380.0],
        [350.0, 250.0],
        [1150.0, 1430.0],
        [100.0, 750.0],
    ]
)
_AGENT_VELS = np.array(
    [
        [0.0, 0.0],
        [0.0, 0.0],
        [0.5, 0.6],
        [-0.4, 0.6],
        [-0.3, -0.5],
        [0.2, 0.5],
        [0.3, 0.5],
        [0.4, -0.3],
    ]
)

# Target layout: (birth step, death step, start x, start y, vx, vy).
_TARGETS = [
    (0, 50, 200.0, 200.0, 2.0, 1.5),
    (0, 50, 700.0, 1200.0, 1.5, -2.0),
    (0, 50, 1200.0, 900.0, -2.0, 1.0),
    (0, 40, 400.0, 1000.0, 1.0, -1.5),
    (0, 50, 1000.0, 1200.0, -1.0, -2.5),
    (0, 50, 600.0, 400.0, 2.5, 0.5),
    (0, 50, 1300.0, 300.0, -2.0, 2.0),
    (5, 50, 900.0, 800.0, 1.5, 1.5),
    (10, 50, 300.0, 600.0, 2.0, 0.0),
    (20, 50, 1100.0, 500.0, -1.5, -1.0),
]


@dataclass
class ScenarioConfig:
    """Constants of the builtin experiment (§ranges/noise/metric parameters)."""

    n_steps: int = 50
    dt: float = 1.0
    sigma_q_target: float = 0.5
    sigma_q_agent: float = 0.1
    range_var: float = 10.0  # m^2
    bearing_var: float = 100.0  # mrad^2; converted to rad^2 internally
    P_D: float = 0.95
    P_S: float = 0.99
    birth_existence: float = 0.25
    clutter_rate: float = 25.0
    existence_threshold: float = 0.5
    ospa_cutoff: float = 20.0
    ospa_order: float = 1.0
    comm_range: float = 1000.0
    meas_range_mobile: float = 1000.0
    meas_range_anchor: float = 1500.0
    roi: tuple = (0.0, 1500.0, 0.0, 1500.0)
    agent_init_offset: float = 50.0
    agent_init_cov: tuple = (1600.0, 1600.0, 40.0, 40.0)
    target_init_cov: tuple = (1600.0, 1600.0, 16.0, 16.0)
    anchor_pos_var: float = 1e-4
    anchor_vel_var: float = 1e-8
    anchor_process_var: float = 1e-12

    @property
    def R(self) -> np.ndarray:
        """Measurement noise in SI units (m^2, rad^2)."""
        return np.diag([self.range_var, self.bearing_var * 1e-6])


@dataclass
class Scenario:
    """Bundle of ground truth, models and experiment constants."""

    truth: GroundTruth
    agent_dynamics: list
    target_dynamics: list  # one per PT slot (birth density differs per slot)
    sensors: list
    inter_R: np.ndarray
    config: ScenarioConfig

    @property
    def n_agents(self) -> int:
        return self.truth.n_agents

    @property
    def n_slots(self) -> int:
        return len(self.target_dynamics)

    def meas_ranges(self) -> np.ndarray:
        return np.array([s.max_range for s in self.sensors])

    def graphs_at(self, t: int):
        return build_graphs(self.truth, t, self.config.comm_range, self.meas_ranges())

    def frame(self, t: int, rng: np.random.Generator) -> FrameMeasurements:
        graph, visibility = self.graphs_at(t)
        return synthesize_frame(
            self.truth, t, graph, visibility, self.sensors, self.inter_R, rng
        )

    def initial_agent_beliefs(self, single_gaussian: bool = False) -> list:
        """Four equal components offset by +-offset along each axis from the
        true start (moment-matched to one Gaussian in single-Gaussian mode);
        anchors get a tight belief at their known state."""
        cfg = self.config
        beliefs = []
        for s in range(self.n_agents):
            state0 = self.truth.agent_states[s, 0]
            if not self.truth.is_mobile(s):
                cov = np.diag(
                    [cfg.anchor_pos_var, cfg.anchor_pos_var, cfg.anchor_vel_var, cfg.anchor_vel_var]
                )
                beliefs.append(GaussianMixture(np.log([1.0]), state0[None, :], cov[None]))
                continue
            off = cfg.agent_init_offset
            offsets = np.array([[off, 0.0], [-off, 0.0], [0.0, off], [0.0, -off]])
            means = np.tile(state0, (4, 1))
            means[:, :2] += offsets
            means[:, 2:] = 0.0
            covs = np.tile(np.diag(cfg.agent_init_cov), (4, 1, 1))
            gm = GaussianMixture(np.full(4, math.log(0.25)), means, covs)
            if single_gaussian:
                gm = GaussianMixture.single(moment_match(gm))
            beliefs.append(gm)
        return beliefs

    def initial_pt_beliefs(self) -> list:
        """All slots start nonexistent; births enter through prediction."""
        return [PtBelief.nonexistent(4) for _ in range(self.n_slots)]


def paper_scenario() -> Scenario:
    """The builtin experiment configuration ("paper-vi")."""
    cfg = ScenarioConfig()
    n = cfg.n_steps
    steps = np.arange(n)[None, :, None]
    starts = np.concatenate([_AGENT_STARTS, _AGENT_VELS], axis=1)  # (S, 4)
    agent_states = np.repeat(starts[:, None, :], n, axis=1)
    agent_states[:, :, :2] += steps * starts[:, None, 2:]
    targets = []
    for birth, death, x, y, vx, vy in _TARGETS:
        life = np.arange(death - birth)[:, None]
        states = np.repeat(np.array([[x, y, vx, vy]]), death - birth, axis=0)
        states[:, :2] += life * np.array([vx, vy])
        targets.append(TargetTrack(birth, death, states))
    truth = GroundTruth(agent_states, anchors=(0, 1), targets=targets)
    return Scenario(
        truth=truth,
        agent_dynamics=_agent_dynamics(truth, cfg),
        target_dynamics=_target_dynamics(truth, cfg),
        sensors=_sensors(truth, cfg),
        inter_R=cfg.R,
        config=cfg,
    )


def _agent_dynamics(truth: GroundTruth, cfg: ScenarioConfig) -> list:
    A = cv_transition(cfg.dt)
    Q_mobile = cv_process_noise(cfg.dt, cfg.sigma_q_agent)
    Q_anchor = cfg.anchor_process_var * np.eye(4)
    return [
        AgentDynamics(A, Q_mobile if truth.is_mobile(s) else Q_anchor)
        for s in range(truth.n_agents)
    ]


def _target_dynamics(truth: GroundTruth, cfg: ScenarioConfig) -> list:
    B = cv_transition(cfg.dt)
    Sigma = cv_process_noise(cfg.dt, cfg.sigma_q_target)
    dyn = []
    for trk in truth.targets:
        mean = np.array([trk.states[0, 0], trk.states[0, 1], 0.0, 0.0])
        birth = GaussianMixture(
            np.log([cfg.birth_existence]), mean[None, :], np.diag(cfg.target_init_cov)[None]
        )
        dyn.append(
            TargetDynamics(B, Sigma, p_survival=cfg.P_S, p_birth=cfg.birth_existence, birth_gm=birth)
        )
    return dyn


def _sensors(truth: GroundTruth, cfg: ScenarioConfig) -> list:
    return [
        RangeBearingModel(
            R=cfg.R,
            p_detect=cfg.P_D,
            clutter_rate=cfg.clutter_rate,
            roi=cfg.roi,
            max_range=cfg.meas_range_mobile if truth.is_mobile(s) else cfg.meas_range_anchor,
        )
        for s in range(truth.n_agents)
    ]


def truth_to_csv(truth: GroundTruth, path) -> None:
    """Export ground truth as CSV rows (t, id, px, py, vx, vy)."""
    with open(path, "w") as fh:
        fh.write("t,id,px,py,vx,vy\n")
        for t in range(truth.n_steps):
            for s in range(truth.n_agents):
                x = truth.agent_states[s, t]
                fh.write(f"{t},agent{s},{x[0]:.6f},{x[1]:.6f},{x[2]:.6f},{x[3]:.6f}\n")
            for k, trk in enumerate(truth.targets):
                if trk.alive(t):
                    x = trk.state(t)
                    fh.write(f"{t},target{k},{x[0]:.6f},{x[1]:.6f},{x[2]:.6f},{x[3]:.6f}\n")


# ---------------------------------------------------------------------------
# Serialization (schema documented in the README; consumed by the CLI)
# ---------------------------------------------------------------------------


def scenario_to_dict(scn: Scenario) -> dict:
    cfg = scn.config
    agents = []
    for s in range(scn.n_agents):
        state0 = scn.truth.agent_states[s, 0]
        agents.append(
            {
                "start": [float(v) for v in state0[:2]],
                "velocity": [float(v) for v in state0[2:]],
                "anchor": bool(not scn.truth.is_mobile(s)),
            }
        )
    targets = [
        {
            "birth": int(trk.birth),
            "death": int(trk.death),
            "start": [float(trk.states[0, 0]), float(trk.states[0, 1])],
            "velocity": [float(trk.states[0, 2]), float(trk.states[0, 3])],
        }
        for trk in scn.truth.targets
    ]
    keys = [
        "n_steps", "dt", "sigma_q_target", "sigma_q_agent", "range_var",
        "bearing_var", "P_D", "P_S", "birth_existence", "clutter_rate",
        "existence_threshold", "ospa_cutoff", "ospa_order", "comm_range",
        "meas_range_mobile", "meas_range_anchor", "agent_init_offset",
    ]
    out = {k: getattr(cfg, k) for k in keys}
    out["roi"] = [float(v) for v in cfg.roi]
    out["agent_init_cov"] = [float(v) for v in cfg.agent_init_cov]
    out["target_init_cov"] = [float(v) for v in cfg.target_init_cov]
    out["agents"] = agents
    out["targets"] = targets
    return out


def scenario_from_dict(data: dict) -> Scenario:
    cfg = ScenarioConfig()
    for key, value in data.items():
        if key in ("agents", "targets"):
            continue
        if not hasattr(cfg, key):
            raise KeyError(f"unknown scenario key: {key}")
        if key in ("roi", "agent_init_cov", "target_init_cov"):
            value = tuple(float(v) for v in value)
        setattr(cfg, key, value)
    n = int(cfg.n_steps)
    agents = data["agents"]
    anchor_idx = tuple(i for i, a in enumerate(agents) if a.get("anchor", False))
    S = len(agents)
    agent_states = np.zeros((S, n, 4))
    for i, a in enumerate(agents):
        sx, sy = a["start"]
        vx, vy = a.get("velocity", [0.0, 0.0])
        tt = np.arange(n)
        agent_states[i, :, 0] = sx + tt * vx
        agent_states[i, :, 1] = sy + tt * vy
        agent_states[i, :, 2] = vx
        agent_states[i, :, 3] = vy
    targets = []
    for t in data["targets"]:
        birth, death = int(t["birth"]), int(t["death"])
        sx, sy = t["start"]
        vx, vy = t.get("velocity", [0.0, 0.0])
        life = np.arange(death - birth)
        states = np.column_stack(
            [sx + life * vx, sy + life * vy, np.full(life.size, vx), np.full(life.size, vy)]
        )
        targets.append(TargetTrack(birth, death, states))
    truth = GroundTruth(agent_states, anchors=anchor_idx, targets=targets)
    return Scenario(
        truth=truth,
        agent_dynamics=_agent_dynamics(truth, cfg),
        target_dynamics=_target_dynamics(truth, cfg),
        sensors=_sensors(truth, cfg),
        inter_R=cfg.R,
        config=cfg,
    )
