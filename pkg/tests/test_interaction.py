import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from pedyield.errors import ContractError, FrameUndefinedError
from pedyield.grid import GridFunction1D, GridFunction2D
from pedyield.interaction import (LatentDecision, ModelParams, RiskFeatures, attention_dist,
                                  risk, risk_features, risk_features_batch, sample_transition,
                                  step, transition_batch, yield_prob)
from pedyield.scene import PedestrianState, SceneConfig, VehicleState, candidate_set

coord = st.floats(-30, 30, allow_nan=False)
vel = st.floats(-3.5, 3.5, allow_nan=False)  # keeps |v| under the 5 m/s desired-speed cap


def ped(x, y, vx=0.0, vy=0.0):
    return PedestrianState(np.array([x, y], float), np.array([vx, vy], float))


def veh(x, y, vx, vy):
    return VehicleState(np.array([x, y], float), np.array([vx, vy], float))


def params_with(risk_fn=None, influence=None, sigma_v=0.1):
    return ModelParams(influence or GridFunction1D.zeros(), risk_fn or GridFunction2D.zeros(),
                       sigma_v=sigma_v)


class TestRiskFeatures:

    def test_head_on(self):
        f = risk_features(ped(0, 0), veh(10, 0, -1, 0))
        assert f.tau == pytest.approx(10)
        assert f.dmin == pytest.approx(0, abs=1e-9)

    def test_crossing(self):
        f = risk_features(ped(0, 3, 0, -1), veh(-10, 0, 1, 0))
        assert f.tau == pytest.approx(6.5)
        assert f.dmin == pytest.approx(np.sqrt(24.5))

    def test_zero_relative_velocity(self):
        with pytest.raises(FrameUndefinedError):
            risk_features(ped(0, 3, 1, 0), veh(-10, 0, 1, 0))

    @given(coord, coord, vel, vel, coord, coord, vel, vel, coord, coord)
    def test_galilean_translation(self, px, py, pvx, pvy, yx, yy, vx, vy, tx, ty):
        if np.hypot(vx - pvx, vy - pvy) < 1e-3:
            return
        a = risk_features(ped(px, py, pvx, pvy), veh(yx, yy, vx, vy))
        b = risk_features(ped(px + tx, py + ty, pvx, pvy), veh(yx + tx, yy + ty, vx, vy))
        assert b.tau == pytest.approx(a.tau, rel=1e-9, abs=1e-7)
        assert b.dmin == pytest.approx(a.dmin, rel=1e-6, abs=1e-5)

    @given(coord, coord, vel, vel, coord, coord, vel, vel)
    def test_identity_and_brute_force(self, px, py, pvx, pvy, yx, yy, vx, vy):
        x, v, y, yv = map(np.array, ([px, py], [pvx, pvy], [yx, yy], [vx, vy]))
        rel = yv - v
        if rel @ rel < 1e-2:
            return
        tau, dmin, rr = risk_features_batch(x, v, y, yv)
        assert tau * rr == pytest.approx((x - y) @ rel, abs=1e-9, rel=1e-12)
        if tau < 0:
            return
        # dense sampling around the analytic minimiser
        t = np.concatenate([np.linspace(0, 2 * tau + 1, 20001), [tau]])
        d = np.linalg.norm((x + t[:, None] * v) - (y + t[:, None] * yv), axis=1)
        assert dmin == pytest.approx(d.min(), abs=1e-6)


class TestRisk:

    def test_zero_function(self):
        assert risk(params_with(), RiskFeatures(3.0, 0.2)) == 0.0

    def test_lower_corner_and_clip(self, rng):
        w = rng.normal(size=(5, 5))
        p = params_with(GridFunction2D(w, 0.25))
        assert risk(p, RiskFeatures(1.0, 1.0)) == pytest.approx(w[0, 0] + 0.25)
        assert risk(p, RiskFeatures(100.0, 1.0)) == pytest.approx(w[4, 0] + 0.25)
        # collision geometry hits the floor, not -inf
        assert np.isfinite(risk(p, RiskFeatures(1e-9, 0.0)))


def two_vehicle_scene():
    p = ped(0, 3, 0, -1)
    vehicles = [veh(-10, 0, 1, 0), veh(12, 0.5, -2, 0)]
    return p, vehicles


class TestAttentionAndYield:

    def test_single_candidate(self):
        p = ped(0, 3, 0, -1)
        assert_allclose(attention_dist(params_with(), p, [veh(-10, 0, 1, 0)], {0}), [1.0])

    def test_equal_risk(self):
        p, vs = two_vehicle_scene()
        assert_allclose(attention_dist(params_with(), p, vs, {0, 1}), [0.5, 0.5])

    def test_softmax_ratio(self):
        p, vs = two_vehicle_scene()
        fn = GridFunction2D.zeros()
        feats = [risk_features(p, v) for v in vs]
        A = np.vstack([fn.design(np.log10(f.tau), np.log10(f.dmin))[0, :-1] for f in feats])
        w = np.linalg.lstsq(A, [np.log(2), 0.0], rcond=None)[0]
        params = params_with(GridFunction2D(w, 0.0))
        assert_allclose(attention_dist(params, p, vs, {0, 1}), [2 / 3, 1 / 3], atol=1e-12)
        shifted = params_with(GridFunction2D(w, 5.0))
        assert_allclose(attention_dist(shifted, p, vs, {0, 1}), [2 / 3, 1 / 3], atol=1e-12)

    def test_empty_candidates(self):
        with pytest.raises(ContractError):
            attention_dist(params_with(), ped(0, 0), [], set())

    def test_yield_prob_values(self):
        p, vs = two_vehicle_scene()
        assert yield_prob(params_with(), p, vs[0]) == pytest.approx(0.5)
        ln3 = params_with(GridFunction2D(np.zeros((5, 5)), np.log(3)))
        assert yield_prob(ln3, p, vs[0]) == pytest.approx(0.75)
        with np.errstate(over="raise"):
            assert yield_prob(params_with(GridFunction2D(np.zeros((5, 5)), -1e4)), p, vs[0]) == 0.0


class TestStep:
    vehicles = [veh(-10, 0.5, 1, 0)]

    def test_continue(self):
        out = step(params_with(), ped(0, 0, 1.2, 0), LatentDecision(None, 1), self.vehicles)
        assert_allclose(out, [0.12, 0])

    def test_yield_half(self):
        p = params_with(influence=GridFunction1D(np.full(7, 0.5)))
        out = step(p, ped(0, 0, 1.2, 0), LatentDecision(0, 0), self.vehicles)
        assert_allclose(out, [0.06, 0])

    def test_full_stop(self):
        out = step(params_with(), ped(1, 2, 1.2, 0), LatentDecision(0, 0), self.vehicles)
        assert_allclose(out, [1, 2])

    def test_yield_without_vehicle(self):
        with pytest.raises(ContractError):
            step(params_with(), ped(0, 0, 1, 0), LatentDecision(None, 0), [])

    @given(coord, coord, vel, vel)
    def test_continue_ignores_vehicles(self, x, y, vx, vy):
        p = ped(x, y, vx, vy)
        a = step(params_with(), p, LatentDecision(None, 1), [])
        b = step(params_with(), p, LatentDecision(0, 1), [veh(x + 1, y, -3, 0)])
        assert_allclose(a, b)


class TestSampling:

    def test_deterministic_without_vehicles(self, rng):
        p = ped(1, 1, 0.5, -0.2)
        nxt, dec = sample_transition(params_with(sigma_v=0.0), p, [], rng)
        assert_allclose(nxt.pos, [1.05, 0.98])
        assert_allclose(nxt.des_vel, p.des_vel)
        assert dec == LatentDecision(None, 1)

    def test_yield_frequency(self):
        p, vs = two_vehicle_scene()
        params = params_with(GridFunction2D(np.zeros((5, 5)), np.log(3)), sigma_v=0.0)
        n = 100_000
        x = np.repeat(p.pos[None], n, 0)
        v = np.repeat(p.des_vel[None], n, 0)
        rows = np.array([np.r_[vs[0].pos, vs[0].vel]])
        _, _, att, q = transition_batch(params, x, v, rows, np.random.default_rng(7))
        assert np.all(att == 0)
        prob = yield_prob(params, p, vs[0])
        freq = np.mean(q == 0)
        assert abs(freq - prob) < 3 * np.sqrt(prob * (1 - prob) / n)

    def test_attention_frequency(self):
        p, vs = two_vehicle_scene()
        fn = GridFunction2D.zeros()
        feats = [risk_features(p, v) for v in vs]
        A = np.vstack([fn.design(np.log10(f.tau), np.log10(f.dmin))[0, :-1] for f in feats])
        params = params_with(GridFunction2D(np.linalg.lstsq(A, [np.log(2), 0.0], rcond=None)[0]))
        n = 100_000
        rows = np.array([np.r_[v.pos, v.vel] for v in vs])
        _, _, att, _ = transition_batch(params, np.repeat(p.pos[None], n, 0),
                                        np.repeat(p.des_vel[None], n, 0), rows,
                                        np.random.default_rng(3))
        assert abs(np.mean(att == 0) - 2 / 3) < 3 * np.sqrt(2 / 9 / n)

    def test_velocity_innovations(self):
        n = 100_000
        params = params_with(sigma_v=0.07)
        x = np.zeros((n, 2)); v = np.tile([1.0, 0.0], (n, 1))
        _, vn, _, _ = transition_batch(params, x, v, np.empty((0, 4)), np.random.default_rng(1))
        std = (vn - v).std(axis=0)
        assert np.all(np.abs(std / 0.07 - 1) < 0.02)

    def test_no_candidates_forces_continue(self, rng):
        p = ped(0, 3, 0, 1)  # walking away
        params = params_with(GridFunction2D(np.zeros((5, 5)), 50.0))
        assert candidate_set(p, [veh(-10, 0, 1, 0)], SceneConfig()) == set()
        _, dec = sample_transition(params, p, [veh(-10, 0, 1, 0)], rng)
        assert dec == LatentDecision(None, 1)

    def test_fixed_draw_count(self):
        a, b = np.random.default_rng(5), np.random.default_rng(5)
        params = params_with()
        x = np.zeros((8, 2)); v = np.tile([0.0, -1.0], (8, 1))
        transition_batch(params, x + [0, 3], v, np.array([[-10, 0, 1, 0.0]]), a)
        transition_batch(params, x, v, np.empty((0, 4)), b)
        assert a.random() == b.random()

    def test_params_validation(self):
        with pytest.raises(ContractError):
            ModelParams(sigma_x=0.0)
        with pytest.raises(ContractError):
            ModelParams(influence=GridFunction1D.zeros(7, u_max=5.0))
