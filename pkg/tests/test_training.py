import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy.optimize import minimize
from scipy.special import expit

from pedyield.data_io import CrossingScenario, reference_params, synthesize
from pedyield.errors import TrainingInfeasibleError
from pedyield.grid import GridFunction1D, GridFunction2D
from pedyield.interaction import ModelParams
from pedyield.scene import PedestrianTrack, TrackSet, VehicleTrack
from pedyield.training import (InteractionRecords, TrainingConfig, build_training_set,
                               coordinate_descent, fit, fit_beta, fit_u, record_losses,
                               solve_box_qp, total_loss, update_q)

DT, SX = 0.1, 0.05
C = DT * DT / (2 * SX * SX)


def records(lat, vel, disp, tau=None, dmin=None, q=None):
    n = len(lat)
    tau = np.full(n, 5.0) if tau is None else np.asarray(tau, float)
    dmin = np.full(n, 2.0) if dmin is None else np.asarray(dmin, float)
    return InteractionRecords(
        pos=np.zeros((n, 2)), vel=np.asarray(vel, float).reshape(n, 2), vehicle=np.zeros((n, 4)),
        lat=np.asarray(lat, float), tau=tau, dmin=dmin,
        disp=np.asarray(disp, float).reshape(n, 2), track=np.zeros(n, int), step=np.arange(n),
        q=np.ones(n, int) if q is None else np.asarray(q))


def walker(T=80, start=(0.0, 5.0), vel=(0.0, -0.05)):
    return PedestrianTrack("p", 0, np.asarray(start) + np.arange(T)[:, None] * np.asarray(vel))


def road_vehicle(tid, start, length, y=0.0):
    pos = np.column_stack([-60 + np.arange(length) * 1.0, np.full(length, y)])
    return VehicleTrack(tid, start, pos, np.tile([10.0, 0.0], (length, 1)))


class TestBuildTrainingSet:

    def test_no_vehicles(self):
        ts = TrackSet([walker()], [])
        with pytest.raises(TrainingInfeasibleError, match="training-infeasible"):
            build_training_set(ts, sigma_v=0.05)
        out = build_training_set(ts, sigma_v=0.05, allow_empty=True)
        assert len(out.records) == 0
        assert out.q_free["p"].all()

    def test_ambiguous_pedestrian_excluded(self):
        ts = TrackSet([walker()], [road_vehicle("a", 10, 20), road_vehicle("b", 25, 10, y=1.0)])
        with pytest.raises(TrainingInfeasibleError):
            build_training_set(ts, sigma_v=0.05)
        out = build_training_set(TrackSet([walker(), PedestrianTrack("q", 0, walker().positions)],
                                          ts.vehicles[:1]), sigma_v=0.05)
        assert out.excluded == []
        ts2 = TrackSet([walker()] + [PedestrianTrack("far", 0, walker(start=(0.0, 30.0)).positions)],
                       ts.vehicles)
        out2 = build_training_set(ts2, sigma_v=0.05, allow_empty=True)
        assert out2.excluded == ["p"]

    def test_bookkeeping(self):
        ts = TrackSet([walker()], [road_vehicle("a", 20, 30)])
        out = build_training_set(ts, sigma_v=0.05)
        assert len(out.records) == 30
        assert out.q_free["p"].sum() == 50
        assert_allclose(out.records.step, np.arange(20, 50))


class TestFitU:

    def test_exact_fit_full_stop_and_fraction(self):
        n = 2000
        lat = np.full(n, 2.0)
        vel = np.tile([1.0, 0.0], (n, 1))
        fn = GridFunction1D.zeros()
        u = fit_u(records(lat, vel, np.zeros((n, 2))), np.zeros(n), fn, dt=DT, sigma_x=SX)
        assert abs(u[2]) < 1e-3
        u = fit_u(records(lat, vel, 0.7 * vel * DT), np.zeros(n), fn, dt=DT, sigma_x=SX)
        assert abs(u[2] - 0.7) < 1e-3

    def test_scalar_clip(self):
        assert_allclose(solve_box_qp([[2.0]], [4.0]), [1.0])

    def test_no_yields_returns_zeros(self):
        r = records([1.0], [[1, 0]], [[0.1, 0]])
        with pytest.warns(RuntimeWarning):
            assert_allclose(fit_u(r, np.ones(1), GridFunction1D.zeros()), 0.0)

    @pytest.mark.parametrize("seed", range(4))
    def test_brute_force_two_nodes(self, seed):
        rng = np.random.default_rng(seed)
        n = 40
        lat = rng.uniform(0, 6, n)
        vel = rng.normal(0, 1, (n, 2))
        true_u = rng.uniform(-1.6, 1.6, 2)
        frac = true_u[0] * (1 - lat / 6) + true_u[1] * lat / 6
        disp = frac[:, None] * vel * DT + rng.normal(0, 0.02, (n, 2))
        fn = GridFunction1D.zeros(2)
        u = fit_u(records(lat, vel, disp), np.zeros(n), fn, 1 / 400, DT, SX)

        def loss(U):
            f = U[..., 0, None] * (1 - lat / 6) + U[..., 1, None] * lat / 6
            res = f[..., None] * vel - disp / DT
            return C * (res ** 2).sum(axis=(-1, -2)) + (U ** 2).sum(axis=-1) / 400

        centre, half = np.zeros(2), 1.0
        for _ in range(4):
            g = np.linspace(-half, half, 201)
            U = np.stack(np.meshgrid(centre[0] + g, centre[1] + g, indexing="ij"), -1)
            U = np.clip(U, -1, 1)
            best = np.unravel_index(np.argmin(loss(U)), U.shape[:2])
            centre, half = U[best], half / 20
        assert np.abs(u - centre).max() < 1e-3
        assert np.all(np.abs(u) <= 1.0)

    @settings(max_examples=25)
    @given(st.integers(0, 10_000))
    def test_box_and_regularisation(self, seed):
        rng = np.random.default_rng(seed)
        n = 30
        r = records(rng.uniform(0, 7, n), rng.normal(0, 1, (n, 2)), rng.normal(0, 0.2, (n, 2)))
        q = np.zeros(n)
        fn = GridFunction1D.zeros()
        a = fit_u(r, q, fn, 1 / 400)
        b = fit_u(r, q, fn, 2 / 400)
        assert np.all(np.abs(a) <= 1.0) and np.all(np.abs(b) <= 1.0)
        if np.linalg.norm(a) > 1e-6:
            assert np.linalg.norm(b) < np.linalg.norm(a)


def beta_oracle(X, y, alpha):
    def f(b):
        z = X @ b
        return np.sum(np.logaddexp(0, z) - y * z) + alpha * b @ b

    def g(b):
        return X.T @ (expit(X @ b) - y) + 2 * alpha * b

    return minimize(f, np.zeros(X.shape[1]), jac=g, method="BFGS",
                    options={"gtol": 1e-11, "maxiter": 10_000}).x


class TestFitBeta:

    def test_balanced_labels(self):
        n = 100
        r = records(np.zeros(n), np.zeros((n, 2)), np.zeros((n, 2)), np.full(n, 3.0),
                    np.full(n, 2.0))
        q = np.arange(n) % 2
        fn = GridFunction2D.zeros()
        beta = fit_beta(r, q, fn)
        assert_allclose(beta, 0.0, atol=1e-9)

    @pytest.mark.parametrize("seed", range(4))
    def test_one_cell_separable(self, seed):
        rng = np.random.default_rng(seed)
        n = 60
        tau = 10 ** rng.uniform(0, 1.6, n)
        dmin = 10 ** rng.uniform(0, 1.6, n)
        q = np.where(np.log10(tau) + np.log10(dmin) < 1.6, 0, 1)
        r = records(np.zeros(n), np.zeros((n, 2)), np.zeros((n, 2)), tau, dmin)
        fn = GridFunction2D.zeros(2)
        beta = fit_beta(r, q, fn, 1 / 100)
        X = fn.design(np.log10(tau), np.log10(dmin))
        y = (q == 0).astype(float)
        assert np.abs(beta - beta_oracle(X, y, 1 / 100)).max() < 1e-4
        assert np.all(np.isfinite(beta)) and np.abs(beta).max() < 100
        grad = X.T @ (expit(X @ beta) - y) + 2 / 100 * beta
        assert np.linalg.norm(grad) < 1e-6


def params(f_u=0.0, bias=0.0):
    return ModelParams(GridFunction1D(np.full(7, f_u)), GridFunction2D(np.zeros((5, 5)), bias),
                       sigma_v=0.05)


class TestUpdateQ:

    def test_continue_branch(self):
        r = records([2.0], [[1, 0]], [[0.1, 0]])
        l0, l1 = record_losses(r, params())
        assert l1[0] == pytest.approx(np.log(2))
        assert l0[0] == pytest.approx(2 + np.log(2))
        assert update_q(r, params())[0] == 1

    def test_stop_branch(self):
        r = records([2.0], [[1, 0]], [[0.0, 0]])
        assert update_q(r, params())[0] == 0

    def test_tie(self):
        r = records([2.0], [[1, 0]], [[0.05, 0]])
        assert update_q(r, params(f_u=1.0))[0] == 1

    @given(st.integers(0, 10_000))
    def test_separable(self, seed):
        rng = np.random.default_rng(seed)
        n = 25
        r = records(rng.uniform(0, 6, n), rng.normal(0, 1, (n, 2)), rng.normal(0, 0.1, (n, 2)),
                    10 ** rng.uniform(-1, 2, n), 10 ** rng.uniform(-1, 2, n))
        p = ModelParams(GridFunction1D(rng.uniform(-1, 1, 7)),
                        GridFunction2D(rng.normal(size=(5, 5)), rng.normal()), sigma_v=0.05)
        perm = rng.permutation(n)
        assert_allclose(update_q(r, p)[perm], update_q(r.subset(perm), p))


@pytest.fixture(scope="module")
def data():
    tracks, _ = synthesize(CrossingScenario(), reference_params(), 60, seed=4)
    cfg = TrainingConfig(n_restarts=1)
    return tracks, cfg, build_training_set(tracks, None, cfg)


class TestDescent:

    def test_blocks_never_increase(self, data):
        _, cfg, ts = data
        rng = np.random.default_rng(0)
        out = coordinate_descent(ts.records, cfg.initial_params(ts.sigma_v), cfg,
                                 rng.integers(0, 2, len(ts.records)))
        blocks = np.array(out[3])
        assert np.all(np.diff(blocks) <= 1e-9 * np.abs(blocks[1:]).max())
        assert np.all(np.diff(out[2]) <= 1e-9)
        assert np.all(np.abs(out[0].influence.weights) <= 1)

    def test_loss_matches_report_and_determinism(self, data):
        tracks, cfg, _ = data
        p1, rep1 = fit(tracks, cfg)
        p2, rep2 = fit(tracks, cfg)
        assert p1 == p2
        assert rep1.loss_trace == rep2.loss_trace
        assert np.all(np.diff(rep1.loss_trace) <= 1e-9)
        assert rep1.n_records > 0 and 0 < rep1.yield_fraction < 1

    def test_total_loss_includes_priors(self, data):
        _, cfg, ts = data
        p = params(0.5, 1.0)
        q = np.ones(len(ts.records))
        base = total_loss(ts.records, q, p, cfg)
        l0, l1 = record_losses(ts.records, p)
        prior = cfg.alpha_u * 7 * 0.25 + cfg.alpha_beta * 1.0
        assert base == pytest.approx(l1.sum() + prior)
