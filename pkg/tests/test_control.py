import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import expm

from bezierbot import control, node
from bezierbot.control import ControllerGains, Reference

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def affine_model(a, b):
    """Single-layer model with rate exactly ``A x + B u``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    model = node.DynamicsModel(a.shape[0], b.shape[1], hidden=())
    with torch.no_grad():
        model.net[0].weight.copy_(torch.as_tensor(np.hstack([a, b])))
        model.net[0].bias.zero_()
    return model


def static_plant(c):
    """Batched predictor of a plant whose state is ``C u`` at every instant."""
    c = np.asarray(c, float)
    return lambda xb, ub: np.asarray(ub) @ c.T


def exact(lam_s=1.0, lam_p=1.0):
    return ControllerGains(lam_s=lam_s, lam_p=lam_p, lam_damp=0.0, lam_damp_p=0.0, u_dot_max=1e9)


class TestEstimateJacobian:
    def test_constant_field_gives_zero(self, rng):
        model = node.DynamicsModel(4, 3, hidden=())
        with torch.no_grad():
            model.net[0].bias.copy_(torch.as_tensor([1.0, -2.0, 0.5, 3.0]))
        est = control.estimate_jacobian(model, rng.normal(size=4), np.zeros(3))
        assert np.array_equal(est.matrix, np.zeros((4, 3)))

    def test_input_only_field_is_b_times_period(self, rng):
        b = rng.normal(size=(5, 3))
        model = affine_model(np.zeros((5, 5)), b)
        est = control.estimate_jacobian(model, rng.normal(size=5), rng.uniform(-0.5, 0.5, 3))
        assert np.allclose(est.matrix, b * model.horizon, atol=1e-10, rtol=0)
        assert est.matrix.shape == (5, 3) and est.delta_u == 0.01

    def test_linear_field_matches_analytic_sensitivity(self, rng):
        a = np.array([[-1.0, 2.0, 0.0], [-2.0, -0.5, 0.3], [0.0, 0.4, -1.5]])
        b = rng.normal(size=(3, 2))
        model = affine_model(a, b)
        big = np.zeros((5, 5))
        big[:3, :3], big[:3, 3:] = a, b
        sens = expm(big * model.horizon)[:3, 3:]
        est = control.estimate_jacobian(model, rng.normal(size=3), np.zeros(2))
        assert np.abs(est.matrix - sens).max() < 1e-8

    def test_richardson_second_order(self, rng):
        torch.manual_seed(4)
        model = node.DynamicsModel(3, 2, hidden=(16,))
        for p in model.parameters():
            torch.nn.init.normal_(p, std=0.8)
        x, u = rng.normal(size=3), np.array([0.1, -0.2])
        js = [control.estimate_jacobian(model, x, u, d).matrix for d in (0.08, 0.04, 0.02)]
        ratio = np.linalg.norm(js[0] - js[1]) / np.linalg.norm(js[1] - js[2])
        assert ratio == pytest.approx(4.0, rel=0.1)

    def test_one_sided_near_bound(self):
        c = np.arange(12.0).reshape(4, 3)
        est = control.estimate_jacobian(static_plant(c), np.zeros(4), np.array([0.995, 0.0, -1.0]))
        assert est.one_sided.tolist() == [True, False, True]
        assert np.allclose(est.matrix, c, atol=1e-12)

    def test_counts_integrations(self, rng):
        calls = []

        def predict(xb, ub):
            calls.append(len(ub))
            return ub @ np.ones((6, 2))

        control.estimate_jacobian(predict, np.zeros(2), np.zeros(6))
        assert calls == [12]

    def test_non_positive_step(self):
        with pytest.raises(ValueError):
            control.estimate_jacobian(static_plant(np.eye(2)), np.zeros(2), np.zeros(2), 0.0)

    def test_divergence_names_column(self):
        def predict(xb, ub):
            if np.any(ub[:, 1] > 0.005):
                raise node.DivergedIntegration("boom")
            return ub

        with pytest.raises(node.DivergedIntegration, match="column 1"):
            control.estimate_jacobian(predict, np.zeros(3), np.zeros(3))

    def test_non_finite_entry(self):
        with pytest.raises(node.DivergedIntegration):
            control.estimate_jacobian(lambda xb, ub: np.full_like(ub, np.inf), np.zeros(2), np.zeros(2))


class TestDampedPinv:
    def test_identity(self):
        assert np.allclose(control.damped_pinv(np.eye(4), 0.0), np.eye(4))

    def test_moore_penrose_identity(self, rng):
        for shape in ((3, 6), (24, 6)):
            j = rng.normal(size=shape)
            assert np.allclose(j @ control.damped_pinv(j, 0.0) @ j, j, atol=1e-9)

    def test_wide_and_tall_forms(self, rng):
        j = rng.normal(size=(3, 6))
        lam = 0.3
        wide = j.T @ np.linalg.inv(j @ j.T + lam ** 2 * np.eye(3))
        jt = j.T
        tall = np.linalg.inv(jt.T @ jt + lam ** 2 * np.eye(3)) @ jt.T
        assert np.allclose(control.damped_pinv(j, lam), wide)
        assert np.allclose(control.damped_pinv(jt, lam), tall)

    def test_rank_deficient_is_bounded(self):
        j = np.outer([1.0, 2.0, 0.0], [0.5, 0.0, 1.0, 0.0])
        lam = 1e-3
        p = control.damped_pinv(j, lam)
        assert np.all(np.isfinite(p))
        assert np.linalg.norm(p, 2) <= 1 / (2 * lam) + 1e-9

    def test_negative_damping(self):
        with pytest.raises(ValueError):
            control.damped_pinv(np.eye(2), -1.0)

    @given(arrays(float, (4, 6), elements=finite), st.floats(1e-3, 1.0))
    def test_norm_bound(self, j, lam):
        assert np.linalg.norm(control.damped_pinv(j, lam), 2) <= 1 / (2 * lam) * (1 + 1e-9)


class TestClampAndSaturation:
    def test_below_limit_untouched(self):
        u, hit = control.clamp_rate([0.2, -0.5], 1.0)
        assert not hit and u.tolist() == [0.2, -0.5]

    def test_uniform_scaling_keeps_direction(self):
        u, hit = control.clamp_rate([2.0, -4.0, 1.0], 1.0)
        assert hit and np.allclose(u, [0.5, -1.0, 0.25])

    def test_saturated_only_outward(self):
        mask = control.saturated([1.0, 1.0, -1.0, 0.3], [0.1, -0.1, -0.2, 5.0], 1.0)
        assert mask.tolist() == [True, False, True, False]

    def test_drop_columns_zeroes_and_copies(self, rng):
        j = rng.normal(size=(3, 4))
        out = control.drop_columns(j, [False, True, False, True])
        assert np.all(out[:, [1, 3]] == 0) and np.array_equal(out[:, [0, 2]], j[:, [0, 2]])
        assert np.all(j[:, 1] != 0)

    def test_dropped_column_gets_no_command(self, rng):
        j = control.drop_columns(rng.normal(size=(3, 6)), np.arange(6) == 2)
        ud = control.position_control_step(np.zeros(3), Reference(np.ones(3)), j, clamp=False)
        assert ud[2] == 0.0


class TestGains:
    def test_defaults(self):
        g = ControllerGains()
        assert g.lam_damp == 1e-2 and g.position_damping == control.DEFAULT_POSITION_DAMPING

    def test_position_damping_falls_back(self):
        assert ControllerGains(lam_damp=0.2, lam_damp_p=None).position_damping == 0.2

    @pytest.mark.parametrize("kw", [{"lam_s": 0.0}, {"lam_p": -1.0}, {"lam_damp": -1e-3},
                                    {"lam_damp_p": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ControllerGains(**kw)

    def test_per_task(self):
        assert control.default_gains("track").lam_s == 5.0
        assert control.default_gains("self-motion").lam_p == 10.0
        with pytest.raises(ValueError):
            control.default_gains("dance")

    def test_reference_rate_shape(self):
        assert np.array_equal(Reference(np.ones(3)).x_d_rate, np.zeros(3))
        with pytest.raises(ValueError):
            Reference(np.ones(3), np.ones(2))


class TestControllers:
    def test_zero_error_zero_command(self, rng):
        x = rng.normal(size=24)
        assert np.array_equal(control.shape_control_step(x, Reference(x), rng.normal(size=(24, 6))),
                              np.zeros(6))
        p = rng.normal(size=3)
        assert np.array_equal(control.position_control_step(p, Reference(p), rng.normal(size=(3, 6))),
                              np.zeros(6))

    def test_doubling_error_doubles_command(self, rng):
        j = rng.normal(size=(24, 6))
        x = rng.normal(size=24)
        e = rng.normal(size=24)
        g = ControllerGains()
        a = control.shape_control_step(x, Reference(x + e), j, g, clamp=False)
        b = control.shape_control_step(x, Reference(x + 2 * e), j, g, clamp=False)
        assert np.allclose(b, 2 * a, rtol=1e-12, atol=1e-14)

    def test_pure_feedforward(self, rng):
        j = rng.normal(size=(3, 6))
        p = rng.normal(size=3)
        rate = rng.normal(size=3)
        g = ControllerGains()
        got = control.position_control_step(p, Reference(p, rate), j, g, clamp=False)
        assert np.allclose(got, control.damped_pinv(j, g.position_damping) @ rate)

    def test_shape_uses_shape_gain(self, rng):
        j = rng.normal(size=(24, 6))
        e = rng.normal(size=24)
        g1 = ControllerGains(lam_s=1.0, lam_damp=0.0)
        g3 = ControllerGains(lam_s=3.0, lam_damp=0.0)
        a = control.shape_control_step(np.zeros(24), Reference(e), j, g1, clamp=False)
        b = control.shape_control_step(np.zeros(24), Reference(e), j, g3, clamp=False)
        assert np.allclose(b, 3 * a)

    def test_output_is_clamped(self, rng):
        j = rng.normal(size=(3, 6)) * 1e-3
        out = control.position_control_step(np.zeros(3), Reference(np.ones(3)), j, ControllerGains(u_dot_max=0.7))
        assert np.max(np.abs(out)) == pytest.approx(0.7)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            control.shape_control_step(np.zeros(24), Reference(np.zeros(3)), np.zeros((24, 6)))
        with pytest.raises(ValueError):
            control.position_control_step(np.zeros(3), Reference(np.zeros(3)), np.zeros((24, 6)))

    def test_non_finite_input(self):
        with pytest.raises(ValueError):
            control.position_control_step(np.array([np.nan, 0, 0]), Reference(np.zeros(3)), np.eye(3))

    def test_accepts_estimate_objects(self, rng):
        j = rng.normal(size=(3, 6))
        est = control.JacobianEstimate(j, 0.01)
        ref = Reference(np.ones(3))
        assert np.array_equal(control.position_control_step(np.zeros(3), ref, est),
                              control.position_control_step(np.zeros(3), ref, j))

    def test_hybrid_zero_errors(self, rng):
        xs, xp = rng.normal(size=24), rng.normal(size=3)
        out = control.hybrid_step(xs, Reference(xs), rng.normal(size=(24, 6)), xp, Reference(xp),
                                  rng.normal(size=(3, 6)))
        assert np.array_equal(out, np.zeros(6))

    def test_hybrid_position_only(self, rng):
        xs, xp = rng.normal(size=24), rng.normal(size=3)
        jp = rng.normal(size=(3, 6))
        ref_p = Reference(xp + 0.01)
        g = ControllerGains()
        assert np.allclose(control.hybrid_step(xs, Reference(xs), rng.normal(size=(24, 6)), xp, ref_p, jp, g),
                           control.position_control_step(xp, ref_p, jp, g))

    def test_hybrid_clamps_after_summation(self):
        j = np.eye(2)
        g = ControllerGains(lam_damp=0.0, lam_damp_p=0.0, u_dot_max=1.0)
        # each part is exactly at the limit; only the sum exceeds it
        out = control.hybrid_step(np.zeros(2), Reference([1.0, 0.0]), j, np.zeros(2), Reference([1.0, 0.0]), j, g)
        assert np.allclose(out, [1.0, 0.0])

    @given(arrays(float, 24, elements=finite), arrays(float, 3, elements=finite),
           arrays(float, 24, elements=finite), arrays(float, 3, elements=finite))
    def test_hybrid_is_sum_before_clamping(self, xs, xp, es, ep):
        rng = np.random.default_rng(0)
        js, jp = rng.normal(size=(24, 6)), rng.normal(size=(3, 6))
        g = ControllerGains()
        rs, rp = Reference(xs + es), Reference(xp + ep)
        total = control.hybrid_step(xs, rs, js, xp, rp, jp, g, clamp=False)
        parts = (control.shape_control_step(xs, rs, js, g, clamp=False)
                 + control.position_control_step(xp, rp, jp, g, clamp=False))
        assert np.array_equal(total, parts)

    @given(arrays(float, 3, elements=st.floats(-1, 1)), st.floats(1e-3, 1e3))
    def test_direction_invariant_to_error_scale(self, e, k):
        if np.linalg.norm(e) < 1e-3:
            return
        j = np.random.default_rng(1).normal(size=(3, 6))
        g = exact()
        a = control.position_control_step(np.zeros(3), Reference(e), j, g, clamp=False)
        b = control.position_control_step(np.zeros(3), Reference(k * e), j, g, clamp=False)
        assert np.allclose(a / np.linalg.norm(a), b / np.linalg.norm(b), atol=1e-9)


def closed_loop(c, x_d, u0, lam, dt, ticks, kind):
    """Integrate u with the controller acting on a static linear plant ``x = C u``."""
    predict = static_plant(c)
    u = np.array(u0, float)
    errs = []
    step = control.shape_control_step if kind == "shape" else control.position_control_step
    g = exact(lam, lam)
    ref = Reference(x_d)
    for _ in range(ticks + 1):
        x = c @ u
        errs.append(np.linalg.norm(x_d - x))
        jac = control.estimate_jacobian(predict, x, u, u_bound=np.inf)
        u = u + dt * step(x, ref, jac, g, clamp=False)
    return np.array(errs)


class TestClosedLoopOnLinearOracle:
    @pytest.mark.parametrize("kind,rows", [("shape", 24), ("position", 3)])
    def test_exponential_decay(self, rng, kind, rows):
        c = rng.normal(size=(rows, 6))
        lam, dt = 1.5, 0.002
        ticks = int(round(2 / lam / dt))
        x_d = c @ rng.uniform(-0.5, 0.5, 6)
        errs = closed_loop(c, x_d, np.zeros(6), lam, dt, ticks, kind)
        t = np.arange(ticks + 1) * dt
        expected = errs[0] * np.exp(-lam * t)
        assert np.max(np.abs(errs - expected) / expected) < 0.05

    @pytest.mark.parametrize("kind,rows", [("shape", 24), ("position", 3)])
    def test_error_decreases_every_tick(self, rng, kind, rows):
        c = rng.normal(size=(rows, 6))
        errs = closed_loop(c, c @ rng.uniform(-0.5, 0.5, 6), np.zeros(6), 1.0, 0.05, 100, kind)
        assert np.all(np.diff(errs) < 0)
