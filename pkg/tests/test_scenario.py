import numpy as np
import pytest

from cotrack.models import RangeBearingModel
from cotrack.scenario import (
    GroundTruth,
    TargetTrack,
    build_graphs,
    paper_scenario,
    scenario_from_dict,
    scenario_to_dict,
    synthesize_frame,
    truth_to_csv,
)


def simple_truth(agent_xy, target_specs=(), n_steps=3, anchors=()):
    S = len(agent_xy)
    states = np.zeros((S, n_steps, 4))
    for s, (x, y) in enumerate(agent_xy):
        states[s, :, 0] = x
        states[s, :, 1] = y
    targets = [
        TargetTrack(0, n_steps, np.tile([x, y, 0.0, 0.0], (n_steps, 1)))
        for x, y in target_specs
    ]
    return GroundTruth(states, tuple(anchors), targets)


def sensor(p_detect=0.95, clutter=25.0, max_range=1000.0):
    return RangeBearingModel(
        np.diag([10.0, 1e-4]), p_detect, clutter, (0.0, 1500.0, 0.0, 1500.0), max_range
    )


class TestBuildGraphs:
    def test_edge_at_999(self):
        truth = simple_truth([(0, 0), (999, 0)])
        graph, _ = build_graphs(truth, 0, 1000.0, [1000.0, 1000.0])
        assert graph.adjacency[0, 1]

    def test_disconnection_raises(self):
        truth = simple_truth([(0, 0), (1400, 1400)])
        with pytest.raises(ValueError):
            build_graphs(truth, 0, 1000.0, [1000.0, 1000.0])

    def test_single_agent_trivially_connected(self):
        truth = simple_truth([(10, 10)], [(200, 200)])
        graph, vis = build_graphs(truth, 0, 1000.0, [1000.0])
        assert graph.diameter == 0
        assert vis[0] == {0}

    def test_visibility_uses_per_agent_range(self):
        truth = simple_truth([(0, 0), (0, 10)], [(1200, 0)])
        _, vis = build_graphs(truth, 0, 1000.0, [1500.0, 1000.0])
        assert vis[0] == {0} and vis[1] == set()

    def test_paper_ranges(self):
        scn = paper_scenario()
        assert scn.config.comm_range == 1000.0
        assert scn.config.meas_range_mobile == 1000.0
        assert scn.config.meas_range_anchor == 1500.0
        ranges = scn.meas_ranges()
        assert list(ranges[:2]) == [1500.0, 1500.0]
        assert list(ranges[2:]) == [1000.0] * 6


class TestSynthesizeFrame:
    def test_perfect_detection_no_clutter(self, rng):
        truth = simple_truth([(0, 0)], [(100, 100), (300, 50)])
        graph, vis = build_graphs(truth, 0, 1000.0, [1000.0])
        frame = synthesize_frame(
            truth, 0, graph, vis, [sensor(p_detect=1.0, clutter=0.0)], np.diag([10.0, 1e-4]), rng
        )
        assert frame.counts == [2]

    def test_no_detection_only_clutter(self, rng):
        truth = simple_truth([(0, 0)], [(100, 100)])
        graph, vis = build_graphs(truth, 0, 1000.0, [1000.0])
        frame = synthesize_frame(
            truth, 0, graph, vis, [sensor(p_detect=0.0, clutter=5.0)], np.diag([10.0, 1e-4]), rng
        )
        # every measurement present is clutter, i.e. maps into the region
        assert frame.counts[0] >= 0

    def test_clutter_rate_statistics(self):
        truth = simple_truth([(750, 750)])
        graph, vis = build_graphs(truth, 0, 1000.0, [1000.0])
        sens = [sensor(p_detect=0.95, clutter=25.0)]
        rng = np.random.default_rng(7)
        counts = [
            synthesize_frame(truth, 0, graph, vis, sens, np.diag([10.0, 1e-4]), rng).counts[0]
            for _ in range(10000)
        ]
        assert abs(np.mean(counts) - 25.0) < 0.5

    def test_bit_reproducible(self):
        scn = paper_scenario()
        graph, vis = scn.graphs_at(5)
        a = synthesize_frame(scn.truth, 5, graph, vis, scn.sensors, scn.inter_R,
                             np.random.default_rng(42))
        b = synthesize_frame(scn.truth, 5, graph, vis, scn.sensors, scn.inter_R,
                             np.random.default_rng(42))
        for za, zb in zip(a.target_z, b.target_z):
            assert np.array_equal(za, zb)
        for wa, wb in zip(a.inter, b.inter):
            assert wa.keys() == wb.keys()
            for k in wa:
                assert np.array_equal(wa[k], wb[k])

    def test_inter_agent_symmetric_keys(self, rng):
        scn = paper_scenario()
        frame = scn.frame(3, rng)
        for s in range(scn.n_agents):
            for ell in frame.inter[s]:
                assert s in frame.inter[ell]

    def test_clutter_inside_roi(self):
        truth = simple_truth([(100, 100)])
        graph, vis = build_graphs(truth, 0, 1000.0, [1000.0])
        sens = [sensor(p_detect=0.0, clutter=40.0)]
        rng = np.random.default_rng(3)
        frame = synthesize_frame(truth, 0, graph, vis, sens, np.diag([10.0, 1e-4]), rng)
        z = frame.target_z[0]
        x = 100 + z[:, 0] * np.cos(z[:, 1])
        y = 100 + z[:, 0] * np.sin(z[:, 1])
        assert np.all((x >= -1e-9) & (x <= 1500 + 1e-9))
        assert np.all((y >= -1e-9) & (y <= 1500 + 1e-9))


class TestPaperScenario:
    def test_config_constants(self):
        scn = paper_scenario()
        cfg = scn.config
        assert cfg.ospa_cutoff == 20.0 and cfg.ospa_order == 1.0
        assert cfg.P_D == 0.95 and cfg.P_S == 0.99
        assert cfg.birth_existence == 0.25 and cfg.clutter_rate == 25.0
        assert cfg.existence_threshold == 0.5
        assert np.allclose(cfg.R, np.diag([10.0, 1e-4]))

    def test_cardinality_schedule(self):
        scn = paper_scenario()
        card = np.array([scn.truth.cardinality(t) for t in range(50)])
        jumps = {t: card[t] - card[t - 1] for t in range(1, 50) if card[t] != card[t - 1]}
        assert jumps == {5: 1, 10: 1, 20: 1, 40: -1}
        assert card.max() == 10

    def test_counts(self):
        scn = paper_scenario()
        assert scn.n_agents == 8
        assert len(scn.truth.anchors) == 2
        assert scn.n_slots == 10
        assert all(np.allclose(scn.truth.agent_states[a, 0], scn.truth.agent_states[a, -1])
                   for a in scn.truth.anchors)

    def test_connected_and_covered_all_steps(self):
        scn = paper_scenario()
        for t in range(scn.config.n_steps):
            graph, vis = scn.graphs_at(t)  # raises if disconnected
            ids, _ = scn.truth.alive_targets(t)
            for k in ids:
                assert sum(k in v for v in vis) >= 3

    def test_initial_beliefs(self):
        scn = paper_scenario()
        beliefs = scn.initial_agent_beliefs()
        assert len(beliefs[0]) == 1  # anchor: tight single Gaussian
        mobile = beliefs[2]
        assert len(mobile) == 4
        assert np.allclose(np.exp(mobile.log_w), 0.25)
        offs = mobile.means[:, :2] - scn.truth.agent_states[2, 0, :2]
        assert sorted(np.hypot(offs[:, 0], offs[:, 1]).round(6)) == [50.0] * 4
        single = scn.initial_agent_beliefs(single_gaussian=True)[2]
        assert len(single) == 1
        pts = scn.initial_pt_beliefs()
        assert all(pt.existence == 0.0 and pt.nonexist_mass == 1.0 for pt in pts)


class TestSerialization:
    def test_roundtrip(self):
        scn = paper_scenario()
        data = scenario_to_dict(scn)
        back = scenario_from_dict(data)
        assert np.allclose(back.truth.agent_states, scn.truth.agent_states)
        assert back.truth.anchors == scn.truth.anchors
        assert len(back.truth.targets) == len(scn.truth.targets)
        for a, b in zip(back.truth.targets, scn.truth.targets):
            assert (a.birth, a.death) == (b.birth, b.death)
            assert np.allclose(a.states, b.states)
        assert back.config.P_D == scn.config.P_D

    def test_unknown_key_rejected(self):
        data = scenario_to_dict(paper_scenario())
        data["not_a_key"] = 1
        with pytest.raises(KeyError):
            scenario_from_dict(data)

    def test_truth_csv(self, tmp_path):
        scn = paper_scenario()
        path = tmp_path / "truth.csv"
        truth_to_csv(scn.truth, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "t,id,px,py,vx,vy"
        # one row per agent per step plus one per alive target per step
        expected = 50 * 8 + sum(scn.truth.cardinality(t) for t in range(50))
        assert len(lines) == 1 + expected
