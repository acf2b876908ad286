import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from bezierbot.plant import (PlantConfig, TipSensor, ViewportOverflow, ViewSpec, cable_to_config,
                             default_views, forward_kinematics, make_state, measure_tip, project,
                             render, step)

CFG = PlantConfig()
actuation = st.lists(st.floats(-1.0, 1.0, allow_nan=False), min_size=6, max_size=6).map(np.array)


def arc_length(points):
    return np.linalg.norm(np.diff(points, axis=0), axis=1).sum()


class TestCableMap:
    def test_zero_input_is_straight(self):
        assert np.array_equal(cable_to_config(np.zeros(6)), np.zeros((3, 2)))

    def test_single_input_bends_one_segment_in_one_plane(self):
        cfg = PlantConfig(epsilon=0.0)
        u = np.zeros(6)
        u[0] = 0.5
        q = cable_to_config(u, cfg)
        assert q[0, 0] == pytest.approx(0.5 * cfg.gain) and q[0, 1] == 0.0
        assert np.array_equal(q[1:], np.zeros((2, 2)))
        backbone, _ = forward_kinematics(q, cfg)
        first = backbone[:cfg.points_per_segment + 1]
        assert np.allclose(first[:, 2], 0.0)
        rest = backbone[cfg.points_per_segment:]
        # the straight remainder continues along the end tangent of segment 0
        d = np.diff(rest, axis=0)
        assert np.allclose(np.cross(d[0], d[1:]), 0.0, atol=1e-12)

    def test_cubic_term_matches_formula(self):
        u = np.zeros(6)
        u[0] = 0.8
        q = cable_to_config(u, PlantConfig(epsilon=0.1))
        assert q[0, 0] - CFG.gain * 0.8 == pytest.approx(0.1 * 0.8 ** 3 * CFG.gain, abs=1e-12)

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            cable_to_config(np.zeros(5))


class TestKinematics:
    def test_straight_backbone(self):
        backbone, tip = forward_kinematics(np.zeros((3, 2)))
        assert np.allclose(tip, (0.0, -0.3, 0.0))
        assert np.allclose(backbone[:, [0, 2]], 0.0)
        assert len(backbone) == 3 * CFG.points_per_segment + 1

    def test_half_circle_chord(self):
        q = np.zeros((3, 2))
        q[0, 0] = np.pi / 0.1
        backbone, _ = forward_kinematics(q)
        end = backbone[CFG.points_per_segment]
        assert np.linalg.norm(end) == pytest.approx(2 * 0.1 / np.pi, abs=1e-12)
        # a half circle ends pointing back up; the straight remainder heads to +Y
        assert backbone[-1][1] > end[1]

    @given(actuation)
    def test_arc_length_is_constant(self, u):
        fine = PlantConfig(points_per_segment=3000)
        backbone, tip = forward_kinematics(cable_to_config(u, fine), fine)
        assert arc_length(backbone) == pytest.approx(0.3, abs=1e-6)
        assert np.array_equal(tip, backbone[-1])

    def test_continuous_at_zero_curvature(self):
        q = np.full((3, 2), 1e-8)
        assert np.linalg.norm(forward_kinematics(q)[1] - forward_kinematics(np.zeros((3, 2)))[1]) < 1e-6

    @given(actuation)
    def test_tip_within_reach(self, u):
        assert np.linalg.norm(make_state(u).tip) <= 0.3 + 1e-9


class TestStep:
    def test_zero_rate_without_lag(self):
        cfg = PlantConfig(tau=0.0)
        s0 = make_state(np.full(6, 0.3), cfg)
        s1 = step(s0, np.zeros(6), 0.05, cfg)
        assert np.array_equal(s1.u, s0.u) and np.array_equal(s1.tip, s0.tip)

    def test_constant_rate_accumulates(self):
        cfg = PlantConfig(tau=0.0)
        s = make_state(np.zeros(6), cfg)
        rate = np.array([0.5, -0.2, 0.1, 0.0, 0.3, -0.4])
        for _ in range(10):
            s = step(s, rate, 0.05, cfg)
        assert np.allclose(s.u, 10 * 0.05 * rate, atol=1e-15)

    def test_bound_clamp(self):
        s = make_state(np.full(6, 0.95))
        for _ in range(5):
            s = step(s, np.full(6, 2.0), 0.05)
        assert np.all(s.u == CFG.u_bound)

    def test_rate_limit(self):
        cfg = PlantConfig(tau=0.0)
        s = step(make_state(np.zeros(6), cfg), np.full(6, 100.0), 0.05, cfg)
        assert np.allclose(s.u, cfg.u_dot_max * 0.05)

    def test_lag_matches_ode_solution(self):
        s0 = make_state(np.zeros(6))
        rate = np.array([1.0, -1.0, 0.5, 0.0, 2.0, -0.5])
        s1 = step(s0, rate, 0.05)
        target = rate * 0.05
        sol = solve_ivp(lambda t, a: (target - a) / CFG.tau, (0, 0.05), np.zeros(6), rtol=1e-11, atol=1e-13)
        assert np.allclose(s1.u_act, sol.y[:, -1], atol=1e-9)
        assert np.array_equal(s1.u, target)

    def test_non_positive_dt(self):
        with pytest.raises(ValueError):
            step(make_state(np.zeros(6)), np.zeros(6), 0.0)


class TestRendering:
    def test_straight_robot_is_a_vertical_stroke(self):
        view = ViewSpec(1)
        r = render(make_state(np.zeros(6)), view)
        ax, ay = view.anchor
        column = r.image[:, int(ax)]
        bottom = ay + 0.3 * view.scale
        assert np.all(column[int(ay) + 2:int(bottom) - 2] == 255)
        assert column[: int(ay) - 5].max() == 0 and column[int(bottom) + 5:].max() == 0
        assert r.image[:, : int(ax) - 6].max() == 0

    def test_stroke_area_matches_width_times_length(self):
        for view in default_views():
            r = render(make_state(np.array([0.4, -0.3, 0.6, 0.2, -0.5, 0.3])), view)
            expected = view.stroke_width * arc_length(r.centerline)
            assert abs(r.stroke_mask.sum() - expected) <= 0.1 * expected

    def test_deterministic(self):
        s = make_state(np.array([0.1, 0.2, -0.3, 0.4, -0.5, 0.6]))
        assert render(s, ViewSpec(2)).image.tobytes() == render(s, ViewSpec(2)).image.tobytes()

    def test_views_project_different_axes(self):
        point = np.array([[0.01, -0.1, 0.02]])
        v1, v2 = default_views()
        assert np.allclose(project(point, v1), [[128 + 6.2, 24 + 62.0]])
        assert np.allclose(project(point, v2), [[128 + 12.4, 24 + 62.0]])

    def test_base_projects_to_anchor(self):
        for view in default_views():
            assert np.allclose(project(np.zeros(3), view)[0], view.anchor)

    def test_viewport_overflow(self):
        with pytest.raises(ViewportOverflow):
            render(make_state(np.zeros(6)), ViewSpec(1, scale=2000.0))


class TestTipSensor:
    def test_noise_free(self):
        s = make_state(np.full(6, 0.2))
        assert np.array_equal(measure_tip(s), s.tip)
        assert np.array_equal(TipSensor().measure(s), s.tip)

    def test_noise_statistics(self):
        s = make_state(np.zeros(6))
        sensor = TipSensor(noise_std=1e-4, seed=3)
        samples = np.array([sensor.measure(s) for _ in range(10_000)]) - s.tip
        assert np.all(np.abs(samples.std(0) / 1e-4 - 1) < 0.1)
        assert np.all(np.abs(samples.mean(0)) < 1e-5)

    def test_seeded_sequence(self):
        s = make_state(np.zeros(6))
        a, b = TipSensor(1e-3, seed=5), TipSensor(1e-3, seed=5)
        assert np.array_equal([a.measure(s) for _ in range(5)], [b.measure(s) for _ in range(5)])
        rng1, rng2 = np.random.default_rng(9), np.random.default_rng(9)
        assert np.array_equal(measure_tip(s, 1e-3, rng1), measure_tip(s, 1e-3, rng2))
