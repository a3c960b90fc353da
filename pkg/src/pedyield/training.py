"""Parameter estimation by pseudo-likelihood and block coordinate descent.

Pedestrians that ever have more than one candidate vehicle are dropped, so
the attended vehicle is known wherever there is one. Steps without a
candidate feed the Kalman smoother (positions, desired velocities and the
innovation scale). Each remaining step becomes an interaction record whose
loss, for a fixed yield flag ``q``, is

    dt^2 / (2 sigma_x^2) * || s(q) v - disp / dt ||^2  -  log p(q | risk)

with ``s(1) = 1`` and ``s(0) = f_u(lat)``. For fixed flags the influence
weights solve a box-constrained quadratic and the risk weights a
regularised logistic regression; for fixed weights each flag is chosen
independently. The three blocks alternate until the flags stop changing.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .errors import ContractError, NumericalError, TrainingInfeasibleError
from .grid import GridFunction1D, GridFunction2D
from .interaction import DMIN_FLOOR, TAU_FLOOR, ModelParams, risk_batch, risk_features_batch
from .scene import SceneConfig, TrackSet, frame_components, gate_mask
from .smoothing import MIN_TRACK_LENGTH, run_em, smooth_many

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    alpha_u: float = 1.0 / 20 ** 2
    alpha_beta: float = 1.0 / 10 ** 2
    max_iters: int = 50
    tol: float = 1e-6
    vel_window: float = 2.0
    seed: int = 0
    n_restarts: int = 5
    all_yield_start: bool = True
    sigma_x: float = 0.05
    n_u: int = 7
    n_b: int = 5
    b_lo: float = 0.0
    b_hi: float = 1.6
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        if not (self.alpha_u > 0 and self.alpha_beta > 0 and self.tol > 0):
            raise ContractError("prior strengths and tolerance must be positive")
        if self.max_iters < 1 or self.n_restarts < 1:
            raise ContractError("max_iters and n_restarts must be at least 1")

    def initial_params(self, sigma_v=0.1) -> ModelParams:
        return ModelParams(
            influence=GridFunction1D.zeros(self.n_u, self.scene.u_max),
            risk_fn=GridFunction2D.zeros(self.n_b, self.b_lo, self.b_hi),
            sigma_v=sigma_v, sigma_x=self.sigma_x, scene=self.scene,
        )


@dataclass
class InteractionRecords:
    """Struct-of-arrays over interaction steps (exactly one candidate vehicle).

    ``disp`` is the observed displacement to the next step; ``q`` holds the
    current yield flags and is rewritten during training.
    """

    pos: np.ndarray
    vel: np.ndarray
    vehicle: np.ndarray
    lat: np.ndarray
    tau: np.ndarray
    dmin: np.ndarray
    disp: np.ndarray
    track: np.ndarray
    step: np.ndarray
    q: np.ndarray

    def __len__(self):
        return len(self.lat)

    def subset(self, idx) -> "InteractionRecords":
        return InteractionRecords(**{k: v[idx] for k, v in self.__dict__.items()})


@dataclass
class TrainingSet:
    records: InteractionRecords
    q_free: dict            # track id -> bool mask over the track's steps
    excluded: list          # ids of pedestrians with an ambiguous step
    too_short: list
    sigma_v: float
    dt: float


@dataclass
class FitReport:
    final_loss: float
    loss_trace: list
    block_trace: list
    n_iter: int
    converged: bool
    n_excluded: int
    n_records: int
    yield_fraction: float
    sigma_v: float
    restart_losses: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def moving_average_velocity(positions, dt, window_s=2.0):
    """Centred moving average of one-step finite differences, truncated at the ends."""
    positions = np.asarray(positions, dtype=float)
    T = len(positions)
    diffs = np.diff(positions, axis=0) / dt
    half = max(int(round(window_s / dt)) // 2, 1)
    csum = np.vstack([np.zeros((1, 2)), np.cumsum(diffs, axis=0)])
    t = np.arange(T)
    lo = np.clip(t - half, 0, T - 1)
    hi = np.clip(t + half, 1, T - 1)
    lo = np.minimum(lo, hi - 1)
    return (csum[hi] - csum[lo]) / (hi - lo)[:, None]


def candidate_counts(positions, proxy_vel, vehicles, cfg: SceneConfig):
    """Gate mask ``(T, m)`` for one pedestrian against a vehicle block ``(m, T, 4)``."""
    if vehicles.shape[0] == 0:
        return np.zeros((len(positions), 0), dtype=bool)
    vb = np.transpose(vehicles, (1, 0, 2))
    return gate_mask(positions[:, None], proxy_vel[:, None], vb[..., :2], vb[..., 2:], cfg)


def build_training_set(tracks: TrackSet, params: ModelParams | None = None,
                       cfg: TrainingConfig = TrainingConfig(), sigma_v=None,
                       allow_empty=False) -> TrainingSet:
    """Split every pedestrian into smoother steps and interaction records.

    Pooled ``sigma_v`` is estimated by EM unless given. An empty record set
    raises :class:`TrainingInfeasibleError` unless ``allow_empty``.
    """
    dt = tracks.dt
    scene = params.scene if params is not None else cfg.scene
    sigma_x = params.sigma_x if params is not None else cfg.sigma_x
    kept, excluded, too_short = [], [], []
    for ped in tracks.pedestrians:
        if len(ped) < MIN_TRACK_LENGTH:
            too_short.append(ped.track_id)
            continue
        pos = ped.positions
        proxy = moving_average_velocity(pos, dt, cfg.vel_window)
        _, block = tracks.vehicle_block(ped.start, len(ped))
        gated = candidate_counts(pos, proxy, block, scene)
        counts = gated.sum(axis=1)
        if np.any(counts > 1):
            excluded.append(ped.track_id)
            continue
        kept.append((ped, block, gated, counts == 0))

    if not kept:
        raise TrainingInfeasibleError("training-infeasible: no usable pedestrian tracks")

    free_masks = [free for _, _, _, free in kept]
    if sigma_v is None:
        sigma_v = run_em([k[0] for k in kept], free_masks, sigma_x, dt).sigma_v
    smoothed = smooth_many([k[0] for k in kept], free_masks, sigma_v, sigma_x, dt)

    parts = []
    for ti, ((ped, block, gated, free), sm) in enumerate(zip(kept, smoothed)):
        T = len(ped)
        steps = np.flatnonzero(~free[:T - 1])
        if steps.size == 0:
            continue
        veh_idx = gated[steps].argmax(axis=1)
        veh = block[veh_idx, steps]
        x = ped.positions[steps]
        v = sm.vel[steps]
        _, lat, _, _ = frame_components(x, veh[:, :2], veh[:, 2:])
        tau, dmin, rr = risk_features_batch(x, v, veh[:, :2], veh[:, 2:])
        ok = rr > 1e-12
        parts.append(dict(
            pos=x[ok], vel=v[ok], vehicle=veh[ok], lat=lat[ok], tau=tau[ok], dmin=dmin[ok],
            disp=(ped.positions[steps + 1] - x)[ok], track=np.full(ok.sum(), ti),
            step=steps[ok],
        ))
    if not parts:
        if not allow_empty:
            raise TrainingInfeasibleError("training-infeasible: no interaction records")
        parts.append(dict(pos=np.empty((0, 2)), vel=np.empty((0, 2)), vehicle=np.empty((0, 4)),
                          lat=np.empty(0), tau=np.empty(0), dmin=np.empty(0),
                          disp=np.empty((0, 2)), track=np.empty(0, int), step=np.empty(0, int)))
    cat = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    records = InteractionRecords(**cat, q=np.ones(len(cat["lat"]), dtype=int))
    q_free = {ped.track_id: free for ped, _, _, free in kept}
    return TrainingSet(records, q_free, excluded, too_short, float(sigma_v), dt)


def solve_box_qp(H, g, lo=-1.0, hi=1.0, tol=1e-8, max_iter=500):
    """Minimise ``0.5 u'Hu - g'u`` over the box ``[lo, hi]^n`` (H positive definite).

    Projected Newton: Newton steps on the variables not held at a bound,
    with an Armijo search along the projection arc. Stops when the
    projected gradient norm falls below ``tol``.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.size
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,))

    def f(u):
        return 0.5 * u @ H @ u - g @ u

    u = np.clip(np.linalg.solve(H, g), lo, hi)
    for _ in range(max_iter):
        grad = H @ u - g
        pg = u - np.clip(u - grad, lo, hi)
        if np.linalg.norm(pg) < tol:
            return u
        held = ((u <= lo) & (grad > 0)) | ((u >= hi) & (grad < 0))
        free = ~held
        d = np.zeros(n)
        d[free] = -np.linalg.solve(H[np.ix_(free, free)], grad[free])
        f0, step = f(u), 1.0
        while True:
            un = np.clip(u + step * d, lo, hi)
            if f(un) <= f0 + 1e-4 * grad @ (un - u) or step < 1e-12:
                break
            step *= 0.5
        if np.array_equal(un, u):
            # Newton direction stalled; fall back to a projected gradient step.
            L = np.linalg.eigvalsh(H)[-1]
            un = np.clip(u - grad / L, lo, hi)
            if np.array_equal(un, u):
                return u
        u = un
    warnings.warn("box QP hit the iteration limit", RuntimeWarning)
    return u


def _u_quadratic(records: InteractionRecords, q, influence: GridFunction1D, alpha_u, dt, sigma_x):
    sel = q == 0
    c = dt * dt / (2 * sigma_x ** 2)
    B = influence.design(records.lat[sel])
    v = records.vel[sel]
    y = records.disp[sel] / dt
    s = (v * v).sum(axis=1)
    p = (v * y).sum(axis=1)
    H = 2 * c * (B.T * s) @ B + 2 * alpha_u * np.eye(influence.n)
    g = 2 * c * B.T @ p
    return H, g, int(sel.sum())


def fit_u(records: InteractionRecords, q, influence: GridFunction1D, alpha_u=1 / 400,
          dt=0.1, sigma_x=0.05) -> np.ndarray:
    """Influence weights for fixed yield flags (box-constrained least squares)."""
    H, g, n_yield = _u_quadratic(records, q, influence, alpha_u, dt, sigma_x)
    if n_yield == 0:
        warnings.warn("no yielding records; influence weights stay at the prior mean",
                      RuntimeWarning)
        return np.zeros(influence.n)
    return solve_box_qp(H, g, -1.0, 1.0)


def _beta_objective(beta, X, y, alpha):
    z = X @ beta
    nll = np.sum(np.logaddexp(0.0, z) - y * z) + alpha * beta @ beta
    grad = X.T @ (expit(z) - y) + 2 * alpha * beta
    return nll, grad, z


def fit_beta(records: InteractionRecords, q, risk_fn: GridFunction2D, alpha_beta=1 / 100,
             beta0=None, tol=1e-8, max_iter=100) -> np.ndarray:
    """Risk weights and bias by damped Newton (IRLS) on the regularised logistic loss.

    The label is 1 for a yield (``q == 0``).
    """
    X = risk_design(records, risk_fn)
    y = (np.asarray(q) == 0).astype(float)
    beta = np.zeros(X.shape[1]) if beta0 is None else np.array(beta0, dtype=float)
    nll, grad, z = _beta_objective(beta, X, y, alpha_beta)
    for _ in range(max_iter):
        if np.linalg.norm(grad) < tol:
            return beta
        p = expit(z)
        W = p * (1 - p)
        H = (X.T * W) @ X + 2 * alpha_beta * np.eye(X.shape[1])
        d = -np.linalg.solve(H, grad)
        step = 1.0
        while True:
            cand = beta + step * d
            nll_c, grad_c, z_c = _beta_objective(cand, X, y, alpha_beta)
            if nll_c <= nll + 1e-4 * step * grad @ d or step < 1e-10:
                break
            step *= 0.5
        if nll_c > nll:
            break
        beta, nll, grad, z = cand, nll_c, grad_c, z_c
    if not np.all(np.isfinite(beta)):
        raise NumericalError("logistic regression diverged")
    return beta


def risk_design(records: InteractionRecords, risk_fn: GridFunction2D) -> np.ndarray:
    a = np.log10(np.maximum(records.tau, TAU_FLOOR))
    b = np.log10(np.maximum(records.dmin, DMIN_FLOOR))
    return risk_fn.design(a, b)


def record_losses(records: InteractionRecords, params: ModelParams):
    """Per-record loss for ``q = 0`` and ``q = 1`` (without the priors)."""
    dt, sigma_x = params.dt, params.sigma_x
    c = dt * dt / (2 * sigma_x ** 2)
    y = records.disp / dt
    v = records.vel
    f = params.influence(records.lat)
    risk = risk_batch(params.risk_fn, records.tau, records.dmin)
    l1 = c * ((v - y) ** 2).sum(axis=1) - log_expit(-risk)
    l0 = c * ((f[:, None] * v - y) ** 2).sum(axis=1) - log_expit(risk)
    return l0, l1


def update_q(records: InteractionRecords, params: ModelParams) -> np.ndarray:
    """Per-record lower-loss flag; ties go to ``q = 1``."""
    l0, l1 = record_losses(records, params)
    return np.where(l0 < l1, 0, 1)


def total_loss(records: InteractionRecords, q, params: ModelParams, cfg: TrainingConfig) -> float:
    l0, l1 = record_losses(records, params)
    data = np.where(np.asarray(q) == 0, l0, l1).sum()
    prior = (cfg.alpha_u * params.influence.weights @ params.influence.weights
             + cfg.alpha_beta * params.risk_fn.params @ params.risk_fn.params)
    return float(data + prior)


def coordinate_descent(records: InteractionRecords, params: ModelParams, cfg: TrainingConfig,
                       q0):
    """One block-coordinate-descent run from initial flags ``q0``.

    Returns ``(params, q, loss_trace, block_trace, n_iter, converged)``.
    """
    q = np.asarray(q0, dtype=int).copy()
    beta = None
    loss_trace, block_trace = [], []
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        u = fit_u(records, q, params.influence, cfg.alpha_u, params.dt, params.sigma_x) \
            if np.any(q == 0) else np.zeros(params.influence.n)
        params = params.replace(influence=params.influence.with_weights(u))
        block_trace.append(total_loss(records, q, params, cfg))
        beta = fit_beta(records, q, params.risk_fn, cfg.alpha_beta, beta0=beta)
        params = params.replace(risk_fn=params.risk_fn.with_params(beta))
        block_trace.append(total_loss(records, q, params, cfg))
        q_new = update_q(records, params)
        loss = total_loss(records, q_new, params, cfg)
        block_trace.append(loss)
        improvement = loss_trace[-1] - loss if loss_trace else np.inf
        loss_trace.append(loss)
        if np.array_equal(q_new, q):
            converged = True
            break
        q = q_new
        if improvement < cfg.tol * max(1.0, abs(loss)):
            converged = True
            break
    return params, q, loss_trace, block_trace, it, converged


def fit(tracks: TrackSet, cfg: TrainingConfig = TrainingConfig(), training_set=None):
    """Learn influence, risk and ``sigma_v`` from tracks.

    Runs ``cfg.n_restarts`` descents from independent random flag
    initialisations, plus one from all-yield flags when
    ``cfg.all_yield_start``, and keeps the lowest final loss.
    Returns ``(ModelParams, FitReport)``.
    """
    if cfg.scene.dt != tracks.dt:
        cfg = TrainingConfig(**{**cfg.__dict__, "scene": SceneConfig(
            cfg.scene.half_length, cfg.scene.u_max, tracks.dt, cfg.scene.stationary_speed)})
    ts = training_set or build_training_set(tracks, None, cfg)
    records = ts.records
    base = cfg.initial_params(ts.sigma_v)
    inits = [np.random.default_rng(ss).integers(0, 2, len(records))
             for ss in np.random.SeedSequence(cfg.seed).spawn(cfg.n_restarts)]
    if cfg.all_yield_start:
        # Random flags give a near-flat first risk fit, after which noisy
        # displacements can pull every influence weight toward a full stop.
        inits.insert(0, np.zeros(len(records), dtype=int))
    best = None
    restart_losses = []
    for k, q0 in enumerate(inits):
        result = coordinate_descent(records, base, cfg, q0)
        restart_losses.append(result[2][-1])
        log.info("restart %d: loss %.6g after %d iterations", k, result[2][-1], result[4])
        if best is None or result[2][-1] < best[2][-1]:
            best = result
    params, q, trace, blocks, n_iter, converged = best
    records.q = q
    report = FitReport(
        final_loss=trace[-1], loss_trace=trace, block_trace=blocks, n_iter=n_iter,
        converged=converged, n_excluded=len(ts.excluded), n_records=len(records),
        yield_fraction=float(np.mean(q == 0)), sigma_v=ts.sigma_v,
        restart_losses=restart_losses,
    )
    return params, report
