import math

import numpy as np
import pytest

from safenav import mppi
from safenav.conformal import CalibrationConfig, calibrate, calibrate_scores, extract_discrepancy
from safenav.control import DiscrepancyBounds
from safenav.core import Limits, Pose, VelocityCmd, step_nominal
from safenav.gridmap import Box, ObstacleSet
from safenav.simulator import (
    DISTURBANCE_PRESETS,
    DisturbanceModel,
    RunLog,
    Scenario,
    buffered_disc_clear,
    generate_training,
    init_state,
    load_runlog,
    metrics,
    run_tracking_experiment,
    save_runlog,
    step_true,
)

DT = 0.05


def fresh(pose, model):
    return init_state(pose, model, DT)


class TestStepTrue:
    def test_identity_matches_nominal(self):
        model = DisturbanceModel()
        state = fresh(Pose(0.3, -0.1, 0.0), model)
        res = step_true(state, VelocityCmd(1.0, 0.0), model, DT)
        nominal = step_nominal(state.pose, VelocityCmd(1.0, 0.0), DT)
        assert res.state.pose == nominal
        assert np.all(res.realized == 0.0)

    def test_identity_zero_residual_any_command(self):
        model = DisturbanceModel()
        rng = np.random.default_rng(0)
        state = fresh(Pose(0, 0, 0.4), model)
        for _ in range(20):
            cmd = VelocityCmd(rng.uniform(-2, 2), rng.uniform(-2, 2))
            res = step_true(state, cmd, model, DT)
            assert np.all(res.realized == 0.0)
            state = res.state

    def test_slip(self):
        model = DisturbanceModel(slip_gain=0.8)
        res = step_true(fresh(Pose(0, 0, 0), model), VelocityCmd(1.0, 0.0), model, DT)
        assert res.state.pose.x == pytest.approx(0.8 * DT)
        assert res.realized == pytest.approx([-0.2, 0.0, 0.0])

    def test_lateral_skid_unmatched(self):
        model = DisturbanceModel(lateral_skid=0.1)
        res = step_true(fresh(Pose(0, 0, 0), model), VelocityCmd(0.0, 0.0), model, DT)
        assert res.state.pose.x == pytest.approx(0.0)
        assert res.state.pose.y == pytest.approx(0.1 * DT)
        assert res.realized == pytest.approx([0.0, 0.1, 0.0])

    def test_delay_buffer(self):
        model = DisturbanceModel(input_delay=0.1)  # two control steps
        state = fresh(Pose(0, 0, 0), model)
        r1 = step_true(state, VelocityCmd(1.0, 0.0), model, DT)
        r2 = step_true(r1.state, VelocityCmd(1.0, 0.0), model, DT)
        r3 = step_true(r2.state, VelocityCmd(1.0, 0.0), model, DT)
        assert r1.state.pose.x == 0.0
        assert r2.state.pose.x == 0.0
        assert r3.state.pose.x == pytest.approx(DT)

    def test_lag_first_order(self):
        model = DisturbanceModel(lag_tau=0.05)
        state = fresh(Pose(0, 0, 0), model)
        res = step_true(state, VelocityCmd(1.0, 0.0), model, DT)
        # one-step response of the discrete filter: dt / (tau + dt)
        assert res.state.lag_state[0] == pytest.approx(0.5)
        assert res.state.pose.x == pytest.approx(0.5 * DT)

    def test_noise_seeded(self):
        model = DisturbanceModel(noise_std=(0.1, 0.1))
        a = step_true(fresh(Pose(0, 0, 0), model), VelocityCmd(1, 0), model, DT,
                      rng=np.random.default_rng(5))
        b = step_true(fresh(Pose(0, 0, 0), model), VelocityCmd(1, 0), model, DT,
                      rng=np.random.default_rng(5))
        assert a.state.pose == b.state.pose

    def test_validation(self):
        with pytest.raises(ValueError):
            DisturbanceModel(slip_gain=0.0)
        with pytest.raises(ValueError):
            DisturbanceModel(input_delay=-1.0)


class TestGenerateTraining:
    def test_zero_disturbance_zero_scores(self):
        data = generate_training(DISTURBANCE_PRESETS["identity"], lap_times=(30.0,),
                                 duration=30.0)
        sc = calibrate_scores(data.tuples, CalibrationConfig(epsilon=0.05, subsample=400, seed=0))
        assert sc.matched.max() < 1e-6
        assert sc.unmatched.max() < 1e-6

    def test_tuple_count(self):
        data = generate_training(DISTURBANCE_PRESETS["identity"], lap_times=(20.0, 30.0),
                                 duration=30.0)
        assert len(data.tuples) == 2 * int(30.0 / DT)

    def test_slip_concentration_vs_recorded_oracle(self):
        # the recorded residual is ground truth: its planar magnitude must
        # match the extracted matched norm for a pure-slip model
        model = DisturbanceModel(slip_gain=0.9)
        data = generate_training(model, lap_times=(30.0,), duration=40.0)
        matched = np.array([extract_discrepancy(t).matched_norm for t in data.tuples[20:]])
        truth = np.hypot(data.realized[20:, 0], data.realized[20:, 1])
        assert np.median(np.abs(matched - truth)) < 2e-3
        applied_v = np.array([abs(t.applied_input.v) for t in data.tuples[20:]])
        assert np.mean(matched) == pytest.approx(0.1 * np.mean(applied_v), rel=0.08)

    def test_deterministic(self):
        model = DISTURBANCE_PRESETS["A"]
        a = generate_training(model, lap_times=(20.0,), duration=5.0, seed=3)
        b = generate_training(model, lap_times=(20.0,), duration=5.0, seed=3)
        assert a.tuples == b.tuples


BOUNDS = DiscrepancyBounds(0.434, 0.0214, 0.01, 3000)


def smoke_scenario(**kw):
    defaults = dict(
        obstacles=ObstacleSet(),
        disturbance=DISTURBANCE_PRESETS["identity"],
        laps=1,
        mppi_params=mppi.MppiParams(horizon=30, dt=DT, sample_count=256, seed=0),
    )
    defaults.update(kw)
    return Scenario(**defaults)


class TestTrackingExperiment:
    def test_requires_bounds(self):
        with pytest.raises(ValueError, match="Bounds"):
            run_tracking_experiment(smoke_scenario())

    def test_clean_tracking_rms(self):
        log = run_tracking_experiment(smoke_scenario(), bounds=BOUNDS)
        m = metrics(log)
        assert m.rms_position_error < 0.05
        assert m.contact_count == 0

    def test_deterministic_replay(self):
        sc = smoke_scenario(disturbance=DISTURBANCE_PRESETS["slip-delay-skid"])
        a = run_tracking_experiment(sc, bounds=BOUNDS)
        b = run_tracking_experiment(sc, bounds=BOUNDS)
        assert a.poses.tobytes() == b.poses.tobytes()
        assert a.commands.tobytes() == b.commands.tobytes()
        assert metrics(a) == metrics(b)

    def test_blocked_scenario_smoke(self):
        # one lap of the safety scenario; the full 10-lap 5-seed version is
        # acceptance criterion 6
        boxes = ObstacleSet((Box(1.0, 0.83, 1.5, 1.33),))
        sc = smoke_scenario(obstacles=boxes,
                            disturbance=DISTURBANCE_PRESETS["slip-delay-skid"],
                            mppi_params=mppi.MppiParams(horizon=30, dt=DT, sample_count=512,
                                                        sigma=(0.25, 0.5), seed=1))
        log = run_tracking_experiment(sc, bounds=BOUNDS)
        m = metrics(log, boxes)
        assert m.contact_count == 0
        assert m.certificate_violations == 0
        assert m.min_clearance > 0.39

    def test_runlog_roundtrip(self, tmp_path):
        log = run_tracking_experiment(smoke_scenario(), bounds=BOUNDS)
        path = tmp_path / "run.csv"
        save_runlog(path, log)
        back = load_runlog(path)
        assert np.allclose(back.poses, log.poses)
        assert np.allclose(back.plan_costs, log.plan_costs)
        assert back.events == log.events
        assert metrics(back) == metrics(log)


class TestMetrics:
    def make_log(self, poses, refs, events=()):
        n = len(poses)
        return RunLog(dt=DT, clock=np.arange(n) * DT, poses=np.asarray(poses, float),
                      commands=np.zeros((n, 2)), optimal_states=np.zeros((n, 3)),
                      references=np.asarray(refs, float), plan_costs=np.zeros(n),
                      collision_free=np.ones(n, bool), initial_error_ok=np.ones(n, bool),
                      certificate_ok=np.ones(n, bool), retries=np.zeros(n, int),
                      interval_deviation=np.zeros(n), e0_norms=np.zeros(n),
                      events=list(events))

    def test_perfect_tracking(self):
        poses = [(x, 0.0, 0.0) for x in np.linspace(0, 1, 10)]
        refs = [(x, 0.0) for x in np.linspace(0, 1, 10)]
        m = metrics(self.make_log(poses, refs))
        assert m.rms_position_error == 0.0

    def test_contact_count(self):
        poses = [(0, 0, 0)] * 3
        refs = [(0, 0)] * 3
        m = metrics(self.make_log(poses, refs, events=[{"t": 0.1, "kind": "contact"}]))
        assert m.contact_count == 1

    def test_straight_pass_clearance(self):
        wall = ObstacleSet((Box(-1.0, 0.5, 1.0, 1.0),))
        poses = [(x, 0.0, 0.0) for x in np.linspace(-1, 1, 20)]
        refs = [(x, 0.0) for x in np.linspace(-1, 1, 20)]
        m = metrics(self.make_log(poses, refs), wall)
        assert m.min_clearance == pytest.approx(0.5, abs=0.05)


class TestTheoremChecks:
    def test_tube_containment_closed_loop(self):
        # disturbances realized by the calibration preset; per-interval
        # deviation must stay within r_dt whenever the interval entered
        # within r0, in at least a 1-eps fraction
        model = DISTURBANCE_PRESETS["slip-delay-skid"]
        data = generate_training(model, lap_times=(20.0, 30.0, 40.0, 50.0), duration=40.0)
        eps = 0.01
        bounds = calibrate(data.tuples, CalibrationConfig(epsilon=eps, subsample=3000, seed=0))
        devs, entries = [], []
        for seed in (0, 1):
            sc = smoke_scenario(disturbance=model, laps=5,
                                mppi_params=mppi.MppiParams(horizon=30, dt=DT,
                                                            sample_count=256, seed=seed))
            log = run_tracking_experiment(sc, bounds=bounds)
            devs.append(log.interval_deviation)
            entries.append(log.e0_norms)
        devs = np.concatenate(devs)
        entries = np.concatenate(entries)
        ok_entry = entries <= log.r0
        assert ok_entry.sum() > 4000
        violation = np.mean(devs[ok_entry] > log.r_dt)
        margin = 3 * math.sqrt(eps * (1 - eps) / ok_entry.sum())
        assert violation <= eps + margin

    def test_conformal_end_to_end(self):
        # scores within one closed-loop run are serially correlated, so both
        # sides pool several seeds' runs (whole-lap durations keep the
        # visited-state mixture identical) before the marginal-coverage check
        model = DISTURBANCE_PRESETS["A"]
        eps = 0.05
        train_tuples = []
        for seed in (0, 1, 2):
            train_tuples += generate_training(model, lap_times=(20.0, 30.0),
                                              duration=60.0, seed=seed).tuples
        bounds = calibrate(train_tuples, CalibrationConfig(epsilon=eps, subsample=3000, seed=0))
        held = []
        for seed in (99, 7, 123):
            held += generate_training(model, lap_times=(20.0, 30.0),
                                      duration=60.0, seed=seed).tuples
        samples = [extract_discrepancy(t) for t in held]
        matched = np.array([s.matched_norm for s in samples if s is not None])
        unmatched = np.array([s.unmatched_mag for s in samples if s is not None])
        margin = 3 * math.sqrt(eps * (1 - eps) / len(matched))
        assert np.mean(matched > bounds.z_matched) <= eps + margin
        assert np.mean(unmatched > bounds.z_unmatched) <= eps + margin


def test_buffered_disc_clear_matches_geometry():
    from safenav.gridmap import GridGeometry
    geo = GridGeometry(height=40, width=40, resolution=0.05)
    occ = np.array([[0.0, 0.0]])
    near = np.array([[0.3, 0.0]])
    far = np.array([[1.0, 0.0]])
    assert not buffered_disc_clear(near, occ, 0.4, geo)
    assert buffered_disc_clear(far, occ, 0.4, geo)
    assert buffered_disc_clear(near, np.empty((0, 2)), 0.4, geo)
