"""Probabilistic trajectory forecasts by importance sampling.

The pedestrian's state at the end of the observation window is inferred
with a particle filter whose particles are yield/continue decision
histories, each carrying an exact Kalman filter for position and desired
velocity. A stopped pedestrian's desired velocity is thereby remembered
from before the stop rather than read off the stationary positions.

The weighted end-of-window states are rolled forward with the generative
transition against vehicles that either keep their last velocity or
follow a given future trajectory (an AV's own plan).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_expit

from .errors import ContractError, CoverageError
from .interaction import (LatentDecision, ModelParams, risk_batch, risk_features_batch,
                          transition_batch)
from .scene import gate_frame
from .smoothing import VEL_PRIOR_SECONDS, VEL_PRIOR_STD

MODES = ("extrapolate", "known")


@dataclass
class PredictionRequest:
    """Inputs for one forecast.

    ``vehicle_history`` is ``(m, K, 4)`` rows of ``x, y, vx, vy`` aligned
    with the ``K`` observations (NaN where a vehicle is absent).
    ``vehicle_future`` is ``(m, >=horizon, 4)`` and only used in ``known``
    mode, where it replaces constant-velocity extrapolation.
    """

    observations: np.ndarray
    vehicle_history: np.ndarray | None = None
    horizon: int = 50
    n_samples: int = 100
    mode: str = "extrapolate"
    vehicle_future: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        obs = self.observations
        if len(obs) and not isinstance(obs, np.ndarray) and hasattr(obs[0], "pos_hat"):
            obs = [o.pos_hat for o in obs]
        self.observations = np.asarray(obs, dtype=float).reshape(-1, 2)
        K = len(self.observations)
        if self.vehicle_history is None:
            self.vehicle_history = np.empty((0, K, 4))
        self.vehicle_history = np.asarray(self.vehicle_history, dtype=float).reshape(-1, K, 4)
        if self.horizon < 1 or self.n_samples < 1:
            raise ContractError("horizon and n_samples must be at least 1")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}")
        if self.mode == "known" and self.vehicle_future is None:
            raise ContractError("known-trajectory mode needs vehicle_future")


@dataclass
class Hypotheses:
    """Weighted end-of-window states ``(pos, vel)``."""

    pos: np.ndarray
    vel: np.ndarray
    weights: np.ndarray
    log_weights: np.ndarray

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))


@dataclass
class PredictionSample:
    positions: np.ndarray
    decisions: list
    weight: float


@dataclass
class PredictionSet:
    """Sampled futures ``positions[s, h]`` for steps ``h = 1..horizon``.

    ``attended`` and ``q`` are the decisions taken on each step (``-1`` for
    no attended vehicle).
    """

    positions: np.ndarray
    weights: np.ndarray
    attended: np.ndarray
    q: np.ndarray
    ess: float = field(default=np.nan)

    def __len__(self):
        return len(self.weights)

    @property
    def horizon(self) -> int:
        return self.positions.shape[1]

    @property
    def mean_track(self) -> np.ndarray:
        return np.einsum("s,shd->hd", self.weights, self.positions)

    @property
    def samples(self) -> list[PredictionSample]:
        out = []
        for s in range(len(self.weights)):
            dec = [LatentDecision(None if r < 0 else int(r), int(q))
                   for r, q in zip(self.attended[s], self.q[s])]
            out.append(PredictionSample(self.positions[s], dec, float(self.weights[s])))
        return out


def _systematic(w, u):
    """Systematic resampling indices for weights ``w`` and one uniform ``u``."""
    n = len(w)
    cum = np.cumsum(w)
    cum[-1] = 1.0
    return np.searchsorted(cum, (u + np.arange(n)) / n)


def _decision_options(params: ModelParams, x, v, vehicles):
    """Speed factors and log probabilities of each decision outcome.

    Column 0 is "continue" (factor 1); column ``1 + j`` is "yield to
    vehicle ``j``". Features are evaluated at the supplied states.
    """
    n, m = x.shape[0], vehicles.shape[0]
    speed = np.ones((n, m + 1))
    logp = np.full((n, m + 1), -np.inf)
    logp[:, 0] = 0.0
    if m == 0:
        return speed, logp
    vpos, vvel = vehicles[None, :, :2], vehicles[None, :, 2:]
    xe, ve = x[:, None, :], v[:, None, :]
    gated, _, lat = gate_frame(xe, ve, vpos, vvel, params.scene)
    if not gated.any():
        return speed, logp
    tau, dmin, _ = risk_features_batch(xe, ve, vpos, vvel)
    r = np.where(gated, risk_batch(params.risk_fn, tau, dmin), -np.inf)
    active = gated.any(axis=1)
    rmax = np.where(active, r.max(axis=1), 0.0)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        log_att = r - rmax - np.log(np.exp(r - rmax).sum(axis=1, keepdims=True))
        log_yield = np.where(gated, log_att + log_expit(r), -np.inf)
    p_cont = 1.0 - np.exp(log_yield).sum(axis=1)
    with np.errstate(divide="ignore"):
        logp[:, 0] = np.log(np.clip(p_cont, 0.0, 1.0))
    logp[:, 1:] = log_yield
    speed[:, 1:] = params.influence(np.where(gated, lat, 0.0))
    return speed, logp


def posterior_state(observations, params: ModelParams, vehicle_history=None, n_samples=100,
                    rng: np.random.Generator | None = None) -> Hypotheses:
    """Weighted samples of the pedestrian's state at the last observation.

    A Rao-Blackwellised particle filter over the observation window: each
    particle carries a Kalman filter for position and desired velocity
    and a sampled decision history. Given a decision the step is linear
    with speed factor 1 (continue) or ``f_u(lat)`` (yield), so the filter
    is exact per particle; decisions are drawn from their posterior given
    the next observation, with probabilities evaluated at the particle's
    filtered mean. Without candidate vehicles every particle runs the same
    interaction-free filter and the weights stay uniform.
    """
    obs = np.asarray(observations, dtype=float).reshape(-1, 2)
    K = len(obs)
    if K < 2:
        raise ContractError("posterior needs at least 2 observations")
    rng = rng if rng is not None else np.random.default_rng()
    dt, r, qv = params.dt, params.sigma_x ** 2, params.sigma_v ** 2
    veh = np.empty((0, K, 4)) if vehicle_history is None else np.asarray(vehicle_history, float)
    n = n_samples

    k0 = min(int(round(VEL_PRIOR_SECONDS / dt)), K - 1)
    mx = np.repeat(obs[:1], n, axis=0)
    mv = np.repeat(((obs[k0] - obs[0]) / (k0 * dt))[None], n, axis=0)
    a, b, c = np.full(n, r), np.zeros(n), np.full(n, VEL_PRIOR_STD ** 2)
    logw = np.zeros(n)

    for t in range(K - 1):
        u_pick, u_res = rng.random(n), rng.random()
        speed, logp = _decision_options(params, mx, mv, veh[:, t])
        sd = speed * dt
        Pxx = a[:, None] + 2 * sd * b[:, None] + sd * sd * c[:, None]
        S = Pxx + r
        e = obs[t + 1][None, None, :] - (mx[:, None, :] + sd[..., None] * mv[:, None, :])
        ll = -np.log(2 * np.pi * S) - (e * e).sum(axis=2) / (2 * S)
        joint = logp + ll
        jmax = joint.max(axis=1)
        lse = jmax + np.log(np.exp(joint - jmax[:, None]).sum(axis=1))
        logw += lse
        cum = np.cumsum(np.exp(joint - lse[:, None]), axis=1)
        pick = np.minimum(np.argmax(cum > u_pick[:, None], axis=1), speed.shape[1] - 1)
        rows = np.arange(n)
        s = sd[rows, pick]
        # Kalman predict and update under the chosen factor
        Pxx, Pxv, Pvv = Pxx[rows, pick], b + s * c, c + qv
        innov = e[rows, pick]
        Sp = Pxx + r
        kx, kv = Pxx / Sp, Pxv / Sp
        mx = mx + s[:, None] * mv + kx[:, None] * innov
        mv = mv + kv[:, None] * innov
        a, b, c = Pxx - Pxx * kx, Pxv - Pxx * kv, Pvv - Pxv * kv

        w = np.exp(logw - logw.max())
        w /= w.sum()
        if 1.0 / np.sum(w * w) < 0.5 * n:
            idx = _systematic(w, u_res)
            mx, mv, a, b, c = mx[idx], mv[idx], a[idx], b[idx], c[idx]
            logw = np.zeros(n)

    z = rng.standard_normal((2, n, 2))
    l00 = np.sqrt(np.maximum(a, 0.0))
    l10 = np.where(l00 > 1e-15, b / np.where(l00 > 1e-15, l00, 1.0), 0.0)
    l11 = np.sqrt(np.maximum(c - l10 * l10, 0.0))
    pos = mx + l00[:, None] * z[0]
    vel = mv + l10[:, None] * z[0] + l11[:, None] * z[1]
    w = np.exp(logw - logw.max())
    w /= w.sum()
    return Hypotheses(pos, vel, w, logw)


def extrapolate_vehicles(vehicle_history, horizon, dt=0.1) -> np.ndarray:
    """Constant-velocity futures ``(m, horizon, 4)`` from each vehicle's last state.

    A vehicle absent at the last observed step stays absent (NaN).
    """
    hist = np.asarray(vehicle_history, dtype=float)
    if hist.ndim == 2:
        hist = hist[:, None, :]
    last = hist[:, -1]
    h = np.arange(1, horizon + 1) * dt
    fut = np.empty((hist.shape[0], horizon, 4))
    fut[..., :2] = last[:, None, :2] + h[None, :, None] * last[:, None, 2:]
    fut[..., 2:] = last[:, None, 2:]
    return fut


def rollout(params: ModelParams, pos, vel, vehicle_seq, rng: np.random.Generator):
    """Roll states forward; ``vehicle_seq[:, h]`` is the scene at step ``h``.

    Returns positions ``(n, H, 2)`` after each step and the decisions.
    """
    n = pos.shape[0]
    H = vehicle_seq.shape[1]
    out = np.empty((n, H, 2))
    att = np.empty((n, H), dtype=int)
    qs = np.empty((n, H), dtype=int)
    x, v = pos, vel
    for h in range(H):
        x, v, att[:, h], qs[:, h] = transition_batch(params, x, v, vehicle_seq[:, h], rng)
        out[:, h] = x
    return out, att, qs


def _vehicle_sequence(req: PredictionRequest, dt):
    hist = req.vehicle_history
    if req.mode == "known":
        fut = np.asarray(req.vehicle_future, dtype=float).reshape(-1, np.shape(req.vehicle_future)[-2], 4) \
            if np.size(req.vehicle_future) else np.empty((0, req.horizon, 4))
        if fut.shape[0] != hist.shape[0]:
            raise ContractError("vehicle_future must list the same vehicles as vehicle_history")
        if fut.shape[0] and fut.shape[1] < req.horizon:
            raise CoverageError(
                f"known vehicle trajectories cover {fut.shape[1]} steps "
                f"({fut.shape[1] * dt:g} s) but the horizon is {req.horizon} steps "
                f"({req.horizon * dt:g} s)")
        fut = fut[:, :req.horizon]
    else:
        fut = extrapolate_vehicles(hist, req.horizon, dt)
    return np.concatenate([hist[:, -1:], fut[:, :req.horizon - 1]], axis=1)


def predict(req: PredictionRequest, params: ModelParams) -> PredictionSet:
    """Sample ``req.n_samples`` weighted futures; deterministic given ``req.seed``."""
    post_ss, roll_ss = np.random.SeedSequence(req.seed).spawn(2)
    seq = _vehicle_sequence(req, params.dt)
    hyp = posterior_state(req.observations, params, req.vehicle_history, req.n_samples,
                          np.random.default_rng(post_ss))
    pos, att, qs = rollout(params, hyp.pos, hyp.vel, seq, np.random.default_rng(roll_ss))
    return PredictionSet(pos, hyp.weights, att, qs, hyp.ess)


def line_fit(observations, dt=0.1):
    """Least-squares position and velocity at the last observation."""
    obs = np.asarray(observations, dtype=float).reshape(-1, 2)
    if len(obs) < 2:
        raise ContractError("constant-velocity fit needs at least 2 observations")
    t = np.arange(len(obs)) * dt
    tc = t - t.mean()
    vel = tc @ (obs - obs.mean(axis=0)) / (tc @ tc)
    pos = obs.mean(axis=0) + vel * (t[-1] - t.mean())
    return pos, vel


def predict_cv(req: PredictionRequest, dt=0.1) -> PredictionSet:
    """Constant-velocity baseline: one deterministic sample with weight 1."""
    pos, vel = line_fit(req.observations, dt)
    h = np.arange(1, req.horizon + 1) * dt
    track = pos + h[:, None] * vel
    return PredictionSet(track[None], np.ones(1), np.full((1, req.horizon), -1),
                         np.ones((1, req.horizon), dtype=int), 1.0)
