"""Generative pedestrian-vehicle interaction model.

A pedestrian at position ``x`` with desired velocity ``v`` looks at the
candidate vehicles (see :func:`pedyield.scene.gate_mask`), attends to one
of them with softmax probability over perceived risk, and yields to it with
probability ``sigmoid(risk)``. A yielding pedestrian moves at
``f_u(lat) * v``; otherwise at ``v``. The desired velocity then takes a
Gaussian random-walk step.

Scalar helpers operate on the dataclasses in :mod:`pedyield.scene`; the
``*_batch`` functions are the vectorised versions used for sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ContractError, FrameUndefinedError
from .grid import GridFunction1D, GridFunction2D
from .scene import (PedestrianState, SceneConfig, VehicleState, candidate_set,
                    frame_components, gate_frame)

TAU_FLOOR = 1e-3
DMIN_FLOOR = 1e-3


@dataclass(frozen=True)
class RiskFeatures:
    tau: float
    dmin: float


@dataclass(frozen=True)
class LatentDecision:
    """Attended vehicle index (None when no candidates) and yield flag.

    ``q`` follows the model convention: 0 = yield, 1 = continue.
    """

    attended: int | None
    q: int


@dataclass(eq=False)
class ModelParams:
    influence: GridFunction1D = field(default_factory=GridFunction1D.zeros)
    risk_fn: GridFunction2D = field(default_factory=GridFunction2D.zeros)
    sigma_v: float = 0.1
    sigma_x: float = 0.05
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        if not self.sigma_v >= 0:
            raise ContractError("sigma_v must be non-negative")
        if not self.sigma_x > 0:
            raise ContractError("sigma_x must be positive")
        if self.influence.u_max != self.scene.u_max:
            raise ContractError("influence grid range must equal scene u_max")

    @property
    def dt(self) -> float:
        return self.scene.dt

    def replace(self, **changes) -> "ModelParams":
        kw = dict(influence=self.influence, risk_fn=self.risk_fn, sigma_v=self.sigma_v,
                  sigma_x=self.sigma_x, scene=self.scene)
        kw.update(changes)
        return ModelParams(**kw)

    def __eq__(self, other):
        return (isinstance(other, ModelParams) and self.influence == other.influence
                and self.risk_fn == other.risk_fn and self.sigma_v == other.sigma_v
                and self.sigma_x == other.sigma_x and self.scene == other.scene)


def risk_features_batch(x, v, veh_pos, veh_vel):
    """Time to closest approach and minimum separation (broadcasting).

    Returns ``(tau, dmin, rel_speed_sq)``. Entries with zero relative
    velocity give non-finite ``tau``; callers mask them out via gating.
    """
    rx = veh_vel[..., 0] - v[..., 0]
    ry = veh_vel[..., 1] - v[..., 1]
    dx = x[..., 0] - veh_pos[..., 0]
    dy = x[..., 1] - veh_pos[..., 1]
    rr = rx * rx + ry * ry
    with np.errstate(invalid="ignore", divide="ignore"):
        tau = (dx * rx + dy * ry) / rr
    dmin = np.sqrt(np.maximum(dx * dx + dy * dy - tau * tau * rr, 0.0))
    return tau, dmin, rr


def risk_batch(risk_fn: GridFunction2D, tau, dmin):
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.log10(np.maximum(tau, TAU_FLOOR))
        b = np.log10(np.maximum(dmin, DMIN_FLOOR))
    return risk_fn(np.where(np.isnan(a), risk_fn.hi, a), np.where(np.isnan(b), risk_fn.hi, b))


def risk_features(ped: PedestrianState, veh: VehicleState) -> RiskFeatures:
    tau, dmin, rr = risk_features_batch(ped.pos, ped.des_vel, veh.pos, veh.vel)
    if not rr > 1e-18:
        raise FrameUndefinedError("zero relative velocity; closest approach undefined")
    return RiskFeatures(float(tau), float(dmin))


def risk(params: ModelParams, feats: RiskFeatures) -> float:
    return float(risk_batch(params.risk_fn, np.float64(feats.tau), np.float64(feats.dmin)))


def attention_dist(params: ModelParams, ped: PedestrianState, vehicles, candidates) -> np.ndarray:
    """Softmax attention over ``sorted(candidates)``."""
    idx = sorted(candidates)
    if not idx:
        raise ContractError("attention distribution requires a non-empty candidate set")
    risks = np.array([risk(params, risk_features(ped, vehicles[i])) for i in idx])
    w = np.exp(risks - risks.max())
    return w / w.sum()


def yield_prob(params: ModelParams, ped: PedestrianState, veh: VehicleState) -> float:
    return float(expit(risk(params, risk_features(ped, veh))))


def step(params: ModelParams, ped: PedestrianState, decision: LatentDecision, vehicles) -> np.ndarray:
    """Next position under a fixed decision."""
    dt = params.dt
    if decision.q == 1:
        return ped.pos + ped.des_vel * dt
    if decision.attended is None:
        raise ContractError("a yield decision needs an attended vehicle")
    veh = vehicles[decision.attended]
    _, lat, _, _ = frame_components(ped.pos, veh.pos, veh.vel)
    return ped.pos + params.influence(lat) * ped.des_vel * dt


def transition_batch(params: ModelParams, x, v, vehicles, rng: np.random.Generator):
    """Advance ``n`` pedestrians one step.

    ``x`` and ``v`` are ``(n, 2)``; ``vehicles`` is ``(m, 4)`` or
    ``(n, m, 4)`` rows of ``x, y, vx, vy`` with NaN for absent vehicles.
    Exactly ``4n`` random numbers are consumed per call regardless of the
    vehicle configuration, so streams stay aligned across scenes.

    Returns ``(x_next, v_next, attended, q)`` with ``attended = -1`` where
    no vehicle was a candidate.
    """
    n = x.shape[0]
    u_r = rng.random(n)
    u_q = rng.random(n)
    noise = rng.standard_normal((n, 2))
    v_next = v + params.sigma_v * noise
    vehicles = np.asarray(vehicles, dtype=float)
    attended = np.full(n, -1)
    q = np.ones(n, dtype=int)
    if vehicles.size == 0:
        return x + v * params.dt, v_next, attended, q

    if vehicles.ndim == 2:
        vehicles = vehicles[None]
    vpos, vvel = vehicles[..., :2], vehicles[..., 2:]
    xe, ve = x[:, None, :], v[:, None, :]
    gated, _, lat = gate_frame(xe, ve, vpos, vvel, params.scene)
    active = gated.any(axis=1)
    if not active.any():
        return x + v * params.dt, v_next, attended, q

    tau, dmin, _ = risk_features_batch(xe, ve, vpos, vvel)
    r = np.where(gated, risk_batch(params.risk_fn, tau, dmin), -np.inf)
    rmax = r.max(axis=1, keepdims=True)
    w = np.exp(r - np.where(np.isfinite(rmax), rmax, 0.0))
    cum = np.cumsum(w, axis=1)
    pick = np.argmax(cum > (u_r * cum[:, -1])[:, None], axis=1)
    rows = np.arange(n)
    attended = np.where(active, pick, -1)
    p_yield = expit(r[rows, pick])
    q = np.where(active & (u_q < p_yield), 0, 1)
    lat_r = np.nan_to_num(np.broadcast_to(lat, gated.shape)[rows, pick])
    speed_frac = np.where(q == 0, params.influence(lat_r), 1.0)
    return x + speed_frac[:, None] * v * params.dt, v_next, attended, q


def _vehicle_rows(vehicles) -> np.ndarray:
    if len(vehicles) == 0:
        return np.empty((0, 4))
    return np.array([np.concatenate([veh.pos, veh.vel]) for veh in vehicles])


def sample_transition(params: ModelParams, ped: PedestrianState, vehicles,
                      rng: np.random.Generator):
    """Draw the next state and the latent decision that produced it."""
    xn, vn, r, q = transition_batch(params, ped.pos[None], ped.des_vel[None],
                                    _vehicle_rows(vehicles), rng)
    attended = None if r[0] < 0 else int(r[0])
    return PedestrianState(xn[0], vn[0]), LatentDecision(attended, int(q[0]))


__all__ = [
    "ModelParams", "RiskFeatures", "LatentDecision", "risk_features", "risk", "attention_dist",
    "yield_prob", "step", "sample_transition", "transition_batch", "risk_features_batch",
    "risk_batch", "candidate_set",
]
