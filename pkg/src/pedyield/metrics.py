"""Forecast error metrics, sliding-window evaluation and timing.

ADE at a horizon is the expected Euclidean error of the predictive
distribution, averaged over evaluation windows. RMSE pools the expected
squared error over windows before taking the root, so ``rmse >= ade``.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError
from .inference import PredictionRequest, PredictionSet, predict, predict_cv
from .interaction import ModelParams
from .scene import TrackSet

COLUMNS = ("t_seconds", "ade_m", "rmse_m", "n")

Predictor = Callable[[PredictionRequest], PredictionSet]


def _errors(truth, prediction: PredictionSet, t):
    if not 0 <= t < prediction.horizon:
        raise ContractError(f"step {t} is outside the {prediction.horizon}-step horizon")
    diff = prediction.positions[:, t] - np.asarray(truth, dtype=float)
    return np.hypot(diff[:, 0], diff[:, 1]), prediction.weights


def expected_error(truth, prediction: PredictionSet, t) -> float:
    """Weighted mean distance to ``truth`` at horizon index ``t`` (0-based)."""
    d, w = _errors(truth, prediction, t)
    return float(w @ d)


def expected_sq_error(truth, prediction: PredictionSet, t) -> float:
    d, w = _errors(truth, prediction, t)
    return float(w @ (d * d))


def ade(truth, prediction: PredictionSet, t) -> float:
    """ADE for one pedestrian at horizon index ``t``."""
    return expected_error(truth, prediction, t)


def rmse(truth, prediction: PredictionSet, t) -> float:
    """RMSE for one pedestrian at horizon index ``t``."""
    return float(np.sqrt(expected_sq_error(truth, prediction, t)))


@dataclass
class MetricTable:
    t_seconds: np.ndarray
    ade: np.ndarray
    rmse: np.ndarray
    n: int

    def rows(self):
        return [(float(t), float(a), float(r), int(self.n))
                for t, a, r in zip(self.t_seconds, self.ade, self.rmse)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for t, a, r, n in self.rows():
            writer.writerow([f"{t:g}", repr(a), repr(r), n])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"columns": list(COLUMNS), "rows": [list(r) for r in self.rows()]}

    def write(self, path_csv, path_json=None):
        with open(path_csv, "w", newline="") as fh:
            fh.write(self.to_csv())
        if path_json is not None:
            with open(path_json, "w") as fh:
                json.dump(self.to_dict(), fh, indent=2)
                fh.write("\n")


@dataclass
class EvalWindow:
    track_id: str
    start: int
    request: PredictionRequest
    truth: np.ndarray


def windows(dataset: TrackSet, obs_seconds=3.0, horizon_seconds=5.0, n_samples=100,
            stride_seconds=1.0, seed=0, mode="extrapolate", track_filter=None):
    """Sliding evaluation windows with full history and future.

    In ``known`` mode the vehicles' recorded futures stand in for the AV
    plan. Each window gets its own seed derived from ``seed`` and its index.
    """
    dt = dataset.dt
    k = int(round(obs_seconds / dt))
    H = int(round(horizon_seconds / dt))
    stride = max(int(round(stride_seconds / dt)), 1)
    out = []
    for ped in dataset.pedestrians:
        if track_filter is not None and not track_filter(ped):
            continue
        for s in range(0, len(ped) - k - H + 1, stride):
            start = ped.start + s
            _, block = dataset.vehicle_block(start, k + H)
            seed_i = int(np.random.SeedSequence([seed, len(out)]).generate_state(1)[0])
            req = PredictionRequest(
                ped.positions[s:s + k], block[:, :k], horizon=H, n_samples=n_samples,
                mode=mode, vehicle_future=block[:, k:] if mode == "known" else None,
                seed=seed_i)
            out.append(EvalWindow(ped.track_id, start, req, ped.positions[s + k:s + k + H]))
    return out


def evaluate(dataset: TrackSet, predictor: Predictor, obs_seconds=3.0, horizon_seconds=5.0,
             n_samples=100, stride_seconds=1.0, seed=0, mode="extrapolate",
             track_filter=None) -> MetricTable:
    """Score ``predictor`` at each whole second of the horizon."""
    wins = windows(dataset, obs_seconds, horizon_seconds, n_samples, stride_seconds, seed,
                   mode, track_filter)
    if not wins:
        raise ContractError("no evaluation windows: dataset empty or tracks too short")
    per_s = int(round(1.0 / dataset.dt))
    secs = np.arange(1, int(np.floor(horizon_seconds + 1e-9)) + 1)
    idx = secs * per_s - 1
    err = np.zeros((len(wins), len(idx)))
    sq = np.zeros_like(err)
    for i, win in enumerate(wins):
        pred = predictor(win.request)
        for j, t in enumerate(idx):
            d, w = _errors(win.truth[t], pred, t)
            err[i, j] = w @ d
            sq[i, j] = w @ (d * d)
    return MetricTable(secs.astype(float), err.mean(axis=0), np.sqrt(sq.mean(axis=0)), len(wins))


def osp_predictor(params: ModelParams) -> Predictor:
    return lambda req: predict(req, params)


def cv_predictor(dt=0.1) -> Predictor:
    return lambda req: predict_cv(req, dt)


def bench(predictor: Predictor, request: PredictionRequest, repetitions=100, warmup=3) -> dict:
    """Wall time per prediction in seconds: mean and 95th percentile."""
    if repetitions < 1:
        raise ContractError("repetitions must be at least 1")
    for _ in range(warmup):
        predictor(request)
    times = np.empty(repetitions)
    for i in range(repetitions):
        t0 = time.perf_counter()
        predictor(request)
        times[i] = time.perf_counter() - t0
    return {"mean_s": float(times.mean()), "p95_s": float(np.percentile(times, 95)),
            "repetitions": int(repetitions), "times_s": times}
