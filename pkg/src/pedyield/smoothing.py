"""Kalman smoothing of interaction-free track segments and EM for ``sigma_v``.

Per axis the latent state is ``(x, v)`` with

    x_t = x_{t-1} + v_{t-1} dt      (transition out of an interaction-free step)
    v_t = v_{t-1} + w_t,            w_t ~ N(0, sigma_v^2)
    xhat_t = x_t + e_t,             e_t ~ N(0, sigma_x^2)

A transition out of a step with a candidate vehicle may contain yielding,
so it is excluded: the position is re-anchored at the next observation,
``x_t ~ N(xhat_t, sigma_x^2)``, independently of ``x_{t-1}``, while the
velocity random walk continues. The first observation enters the same way,
as the position prior. Both axes share one covariance sequence, so the
recursion runs once over 2x2 blocks with means carried for x and y
together, vectorised over a batch of tracks.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .scene import PedestrianTrack

VEL_PRIOR_STD = 1.0
VEL_PRIOR_SECONDS = 0.5
MIN_TRACK_LENGTH = 4
VAR_FLOOR = 1e-14


@dataclass
class SmoothedTrack:
    """Posterior over one track.

    ``cov`` and ``filtered_cov`` are ``(T, 2, 2)`` per-axis covariances of
    ``(x, v)``; the same matrix applies to the x and y axes.
    """

    pos: np.ndarray
    vel: np.ndarray
    cov: np.ndarray
    filtered_cov: np.ndarray
    sigma_v_hat: float
    prior_only: bool = False

    def __len__(self):
        return len(self.pos)


@dataclass
class EMResult:
    sigma_v: float
    converged: bool
    n_iter: int
    loglik: list


@dataclass
class _Batch:
    obs: np.ndarray      # (B, T, 2)
    valid: np.ndarray    # (B, T) bool
    anchor: np.ndarray   # (B, T) bool; position re-anchored at this step
    v0: np.ndarray       # (B, 2)


def _as_positions(track) -> np.ndarray:
    pos = track.positions if isinstance(track, PedestrianTrack) else np.asarray(track, float)
    pos = pos.reshape(-1, 2)
    if len(pos) < MIN_TRACK_LENGTH:
        raise ContractError(f"track too short for smoothing ({len(pos)} < {MIN_TRACK_LENGTH})")
    return pos


def _as_free_mask(q_free_steps, length) -> np.ndarray:
    if q_free_steps is None:
        return np.ones(length, dtype=bool)
    arr = np.asarray(q_free_steps)
    if arr.dtype == bool:
        if arr.shape != (length,):
            raise ContractError("boolean interaction-free mask must match the track length")
        return arr.copy()
    mask = np.zeros(length, dtype=bool)
    idx = np.fromiter((int(t) for t in q_free_steps), dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= length):
        raise ContractError("interaction-free step index outside the track")
    mask[idx] = True
    return mask


def _make_batch(tracks, free_masks, dt) -> _Batch:
    lengths = [len(p) for p in tracks]
    B, T = len(tracks), max(lengths)
    obs = np.zeros((B, T, 2))
    valid = np.zeros((B, T), dtype=bool)
    anchor = np.zeros((B, T), dtype=bool)
    v0 = np.zeros((B, 2))
    for b, (pos, free) in enumerate(zip(tracks, free_masks)):
        n = len(pos)
        obs[b, :n] = pos
        obs[b, n:] = pos[-1]
        valid[b, :n] = True
        anchor[b, 0] = True
        anchor[b, 1:n] = ~free[:n - 1]
        k = min(int(round(VEL_PRIOR_SECONDS / dt)), n - 1)
        v0[b] = (pos[k] - pos[0]) / (k * dt)
    return _Batch(obs, valid, anchor, v0)


def _run(batch: _Batch, sigma_v, sigma_x, dt, want_smooth=True):
    """Forward filter and RTS smoother over a batch.

    Returns a dict with filtered/smoothed means and covariances, the
    smoother gains, and the per-track log likelihood of the non-anchor
    observations.
    """
    obs, valid, anchor = batch.obs, batch.valid, batch.anchor
    B, T, _ = obs.shape
    qv, r = sigma_v ** 2, sigma_x ** 2

    fx = np.empty((B, T, 2)); fv = np.empty((B, T, 2))
    px = np.empty((B, T, 2)); pv = np.empty((B, T, 2))
    fP = np.empty((B, T, 3)); pP = np.empty((B, T, 3))  # (xx, xv, vv)
    loglik = np.zeros(B)

    fx[:, 0] = obs[:, 0]; fv[:, 0] = batch.v0
    fP[:, 0] = (r, 0.0, VEL_PRIOR_STD ** 2)
    px[:, 0], pv[:, 0], pP[:, 0] = fx[:, 0], fv[:, 0], fP[:, 0]

    for t in range(1, T):
        a, b, c = fP[:, t - 1, 0], fP[:, t - 1, 1], fP[:, t - 1, 2]
        anc = anchor[:, t]
        upd = valid[:, t] & ~anc
        # prediction
        mx = np.where(anc[:, None], obs[:, t], fx[:, t - 1] + dt * fv[:, t - 1])
        mv = fv[:, t - 1]
        Pxx = np.where(anc, r, a + 2 * dt * b + dt * dt * c)
        Pxv = np.where(anc, 0.0, b + dt * c)
        Pvv = c + qv
        px[:, t], pv[:, t] = mx, mv
        pP[:, t, 0], pP[:, t, 1], pP[:, t, 2] = Pxx, Pxv, Pvv
        # measurement update
        S = Pxx + r
        e = obs[:, t] - mx
        kx, kv = Pxx / S, Pxv / S
        u = upd[:, None]
        fx[:, t] = np.where(u, mx + kx[:, None] * e, mx)
        fv[:, t] = np.where(u, mv + kv[:, None] * e, mv)
        fP[:, t, 0] = np.where(upd, Pxx - Pxx * kx, Pxx)
        fP[:, t, 1] = np.where(upd, Pxv - Pxx * kv, Pxv)
        fP[:, t, 2] = np.where(upd, Pvv - Pxv * kv, Pvv)
        ll = -0.5 * (2 * np.log(2 * np.pi * S) + (e * e).sum(axis=1) / S)
        loglik += np.where(upd, ll, 0.0)

    out = dict(fx=fx, fv=fv, fP=fP, px=px, pv=pv, pP=pP, loglik=loglik)
    if not want_smooth:
        return out

    sx = fx.copy(); sv = fv.copy(); sP = fP.copy()
    J = np.zeros((B, T, 4))  # gain from t to t+1: (xx, xv, vx, vv)
    for t in range(T - 2, -1, -1):
        a, b, c = fP[:, t, 0], fP[:, t, 1], fP[:, t, 2]
        anc = anchor[:, t + 1]
        # G = P_f F^T, F = [[1, dt], [0, 1]] or [[0, 0], [0, 1]] at an anchor
        g00 = np.where(anc, 0.0, a + dt * b)
        g01 = b
        g10 = np.where(anc, 0.0, b + dt * c)
        g11 = c
        A, Bc, C = pP[:, t + 1, 0], pP[:, t + 1, 1], pP[:, t + 1, 2]
        det = A * C - Bc * Bc
        i00, i01, i11 = C / det, -Bc / det, A / det
        j00 = g00 * i00 + g01 * i01
        j01 = g00 * i01 + g01 * i11
        j10 = g10 * i00 + g11 * i01
        j11 = g10 * i01 + g11 * i11
        J[:, t] = np.stack([j00, j01, j10, j11], axis=1)
        dx = sx[:, t + 1] - px[:, t + 1]
        dv = sv[:, t + 1] - pv[:, t + 1]
        sx[:, t] = fx[:, t] + j00[:, None] * dx + j01[:, None] * dv
        sv[:, t] = fv[:, t] + j10[:, None] * dx + j11[:, None] * dv
        D00 = sP[:, t + 1, 0] - A
        D01 = sP[:, t + 1, 1] - Bc
        D11 = sP[:, t + 1, 2] - C
        # P_s = P_f + J D J^T
        t00 = j00 * D00 + j01 * D01
        t01 = j00 * D01 + j01 * D11
        t10 = j10 * D00 + j11 * D01
        t11 = j10 * D01 + j11 * D11
        sP[:, t, 0] = a + t00 * j00 + t01 * j01
        sP[:, t, 1] = b + t00 * j10 + t01 * j11
        sP[:, t, 2] = c + t10 * j10 + t11 * j11
    out.update(sx=sx, sv=sv, sP=sP, J=J)
    return out


def _expected_innovation_sq(res, valid):
    """Sum over tracks, transitions and axes of E[(v_t - v_{t-1})^2], and the count."""
    sv, sP, J = res["sv"], res["sP"], res["J"]
    dv = sv[:, 1:] - sv[:, :-1]
    # Cov(v_{t+1}, v_t) = [P_s(t+1) J_t^T]_{vv}
    cross = sP[:, 1:, 1] * J[:, :-1, 2] + sP[:, 1:, 2] * J[:, :-1, 3]
    per_axis_var = sP[:, 1:, 2] + sP[:, :-1, 2] - 2 * cross
    terms = (dv * dv).sum(axis=2) + 2 * per_axis_var
    mask = valid[:, 1:]
    return float(terms[mask].sum()), 2 * int(mask.sum())


def run_em(tracks, q_free_steps=None, sigma_x=0.05, dt=0.1, sigma_v0=0.1,
           tol=1e-4, max_iter=100, atol=1e-7) -> EMResult:
    """Pooled maximum-likelihood ``sigma_v`` by expectation-maximisation.

    ``tracks`` is one track or a list; ``q_free_steps`` is matched
    per track (``None`` treats every step as interaction-free).
    """
    single = isinstance(tracks, PedestrianTrack) or (
        isinstance(tracks, np.ndarray) and tracks.ndim == 2)
    if single:
        tracks, q_free_steps = [tracks], [q_free_steps]
    if q_free_steps is None:
        q_free_steps = [None] * len(tracks)
    pos = [_as_positions(tr) for tr in tracks]
    masks = [_as_free_mask(q, len(p)) for q, p in zip(q_free_steps, pos)]
    batch = _make_batch(pos, masks, dt)

    # Over-relaxed EM: the EM step is stretched by ``eta`` in log-variance
    # and kept only if the likelihood does not drop; otherwise plain EM.
    var = float(sigma_v0) ** 2
    res = _run(batch, np.sqrt(var), sigma_x, dt)
    ll = float(res["loglik"].sum())
    trace = [ll]
    eta = 1.0
    for it in range(1, max_iter + 1):
        total, count = _expected_innovation_sq(res, batch.valid)
        em_var = total / count if count else var
        if not np.isfinite(em_var) or em_var <= VAR_FLOOR:
            return EMResult(0.0, True, it, trace)
        cand = var * (em_var / var) ** eta
        res_c = _run(batch, np.sqrt(cand), sigma_x, dt)
        ll_c = float(res_c["loglik"].sum())
        if eta > 1.0 and ll_c < ll - 1e-12 * abs(ll):
            eta = 1.0
            cand = em_var
            res_c = _run(batch, np.sqrt(cand), sigma_x, dt)
            ll_c = float(res_c["loglik"].sum())
        else:
            eta = min(eta * 2.0, 1e3)
        change = abs(np.sqrt(cand) - np.sqrt(var))
        rel = change / np.sqrt(var)
        var, res, ll = cand, res_c, ll_c
        trace.append(ll)
        if rel < tol or change < atol:
            return EMResult(float(np.sqrt(var)), True, it, trace)
        if var <= VAR_FLOOR:
            return EMResult(0.0, True, it, trace)
    warnings.warn(f"sigma_v EM did not converge in {max_iter} iterations", RuntimeWarning)
    return EMResult(float(np.sqrt(var)), False, max_iter, trace)


def estimate_sigma_v(tracks, q_free_steps=None, sigma_x=0.05, dt=0.1, **kw) -> float:
    return run_em(tracks, q_free_steps, sigma_x, dt, **kw).sigma_v


def smooth(track, q_free_steps=None, sigma_x=0.05, dt=0.1, sigma_v=None) -> SmoothedTrack:
    """Posterior means and covariances of position and desired velocity.

    With ``sigma_v=None`` the innovation scale is first estimated on this
    track by EM. If no step is interaction-free the velocity stays at its
    prior and the result is flagged ``prior_only``.
    """
    pos = _as_positions(track)
    mask = _as_free_mask(q_free_steps, len(pos))
    prior_only = not mask[:-1].any()
    if prior_only:
        warnings.warn("no interaction-free steps; velocity estimate is prior-only",
                      RuntimeWarning)
    if sigma_v is None:
        sigma_v = 0.1 if prior_only else run_em(pos, mask, sigma_x, dt).sigma_v
    batch = _make_batch([pos], [mask], dt)
    res = _run(batch, sigma_v, sigma_x, dt)
    return SmoothedTrack(
        pos=res["sx"][0], vel=res["sv"][0],
        cov=_unpack(res["sP"][0]), filtered_cov=_unpack(res["fP"][0]),
        sigma_v_hat=float(sigma_v), prior_only=prior_only,
    )


def smooth_many(tracks, q_free_steps, sigma_v, sigma_x=0.05, dt=0.1) -> list[SmoothedTrack]:
    """Smooth several tracks with a shared ``sigma_v`` in one batched pass."""
    pos = [_as_positions(tr) for tr in tracks]
    masks = [_as_free_mask(q, len(p)) for q, p in zip(q_free_steps, pos)]
    res = _run(_make_batch(pos, masks, dt), sigma_v, sigma_x, dt)
    out = []
    for b, p in enumerate(pos):
        n = len(p)
        out.append(SmoothedTrack(
            pos=res["sx"][b, :n], vel=res["sv"][b, :n], cov=_unpack(res["sP"][b, :n]),
            filtered_cov=_unpack(res["fP"][b, :n]), sigma_v_hat=float(sigma_v),
            prior_only=not masks[b][:-1].any(),
        ))
    return out


def filter_window(positions, sigma_v, sigma_x=0.05, dt=0.1):
    """Forward pass over an interaction-free window (used for prediction).

    Returns the raw recursion outputs for one track; see :func:`_run`.
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    batch = _make_batch([pos], [np.ones(len(pos), dtype=bool)], dt)
    return _run(batch, sigma_v, sigma_x, dt, want_smooth=False)


def _unpack(P):
    out = np.empty(P.shape[:-1] + (2, 2))
    out[..., 0, 0] = P[..., 0]
    out[..., 0, 1] = out[..., 1, 0] = P[..., 1]
    out[..., 1, 1] = P[..., 2]
    return out
