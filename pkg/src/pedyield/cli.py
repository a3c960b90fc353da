"""Command-line entry point: ``pedyield {synthesize,train,predict,evaluate,bench}``.

Exit status is 0 on success, 1 for usage errors, 2 for data errors
(unreadable or malformed inputs, infeasible training, horizon coverage)
and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data_io
from .errors import (ContractError, CoverageError, DataFormatError, NumericalError,
                     TrainingInfeasibleError, VersionError)
from .inference import PredictionRequest, extrapolate_vehicles, predict
from .metrics import bench, cv_predictor, evaluate, osp_predictor
from .training import TrainingConfig, fit

DEFAULT_SEED = 0
log = logging.getLogger("pedyield")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


def _steps(seconds, dt):
    return int(round(seconds / dt))


def _load_params(path):
    return data_io.load_model(path).params


# --- commands ----------------------------------------------------------------

def cmd_synthesize(args):
    scenario = data_io.CrossingScenario(n_steps=args.steps, n_vehicles=args.vehicles)
    tracks, latent = data_io.synthesize(scenario, data_io.reference_params(), args.n, args.seed)
    data_io.write_tracks(tracks, args.out)
    if args.latent:
        np.savez(args.latent, **latent.to_dict())
    print(f"wrote {len(tracks.pedestrians)} pedestrian and {len(tracks.vehicles)} vehicle tracks "
          f"to {args.out}")


def cmd_train(args):
    tracks = data_io.read_tracks(args.dataset, args.schema, args.rate_hz)
    cfg = TrainingConfig(seed=args.seed, n_restarts=args.restarts)
    params, report = fit(tracks, cfg)
    rep = report.to_dict()
    prov = {"dataset": Path(args.dataset).name, "seed": args.seed,
            "fit_report_digest": data_io.digest(json.loads(json.dumps(rep, default=float)))}
    data_io.save_model(params, args.out, prov)
    report_path = args.report or str(Path(args.out).with_suffix(".report.json"))
    _write_json(report_path, rep)
    print(f"final loss {report.final_loss:.6f} after {report.n_iter} iterations "
          f"({report.n_records} records, converged={report.converged})")


def _scene_request(tracks, ped_id, end_step, obs_steps, horizon, samples, seed):
    ped = next((p for p in tracks.pedestrians if p.track_id == ped_id), None)
    if ped is None:
        raise DataFormatError(f"pedestrian {ped_id!r} not found in scene")
    stop = ped.start + len(ped) if end_step is None else end_step + 1
    start = stop - obs_steps
    if start < ped.start or stop > ped.start + len(ped):
        raise DataFormatError(
            f"pedestrian {ped_id!r} lacks {obs_steps} observed steps ending at step {stop - 1}")
    ids, hist = tracks.vehicle_block(start, obs_steps)
    obs = ped.positions[start - ped.start:stop - ped.start]
    return PredictionRequest(obs, hist, horizon=horizon, n_samples=samples, seed=seed), ids, stop


def _known_future(req, ids, stop, av_tracks, dt):
    """Given trajectories for AV tracks, constant velocity for all other vehicles."""
    H = req.horizon
    fut = extrapolate_vehicles(req.vehicle_history, H, dt)
    by_id = {v.track_id: v for v in av_tracks.vehicles}
    if not by_id:
        raise DataFormatError("AV trajectory file holds no vehicle tracks")
    extra = []
    for vid, veh in by_id.items():
        lo, hi = stop, stop + H
        covered = max(0, min(hi, veh.end) - max(lo, veh.start)) if veh.start <= lo else 0
        if covered < H:
            raise CoverageError(
                f"AV trajectory {vid!r} covers {covered * dt:g} s of the "
                f"{H * dt:g} s horizon")
        block = np.concatenate([veh.positions[lo - veh.start:hi - veh.start],
                                veh.velocities[lo - veh.start:hi - veh.start]], axis=1)
        if vid in ids:
            fut[ids.index(vid)] = block
        else:
            extra.append((veh, block))
    hist = req.vehicle_history
    if extra:
        K = hist.shape[1]
        new_hist = np.full((len(extra), K, 4), np.nan)
        for i, (veh, _) in enumerate(extra):
            for k in range(K):
                s = stop - K + k
                if veh.start <= s < veh.end:
                    new_hist[i, k, :2] = veh.positions[s - veh.start]
                    new_hist[i, k, 2:] = veh.velocities[s - veh.start]
        hist = np.concatenate([hist, new_hist])
        fut = np.concatenate([fut, np.stack([b for _, b in extra])])
    return PredictionRequest(req.observations, hist, req.horizon, req.n_samples, "known", fut,
                             req.seed)


def cmd_predict(args):
    params = _load_params(args.model)
    dt = params.dt
    tracks = data_io.read_tracks(args.scene, args.schema, args.rate_hz, 1.0 / dt)
    req, ids, stop = _scene_request(tracks, args.pedestrian, args.at_step,
                                    _steps(args.obs_seconds, dt), _steps(args.horizon_seconds, dt),
                                    args.samples, args.seed)
    if args.av_trajectory:
        av = data_io.read_tracks(args.av_trajectory, args.schema, args.rate_hz, 1.0 / dt)
        req = _known_future(req, ids, stop, av, dt)
    pred = predict(req, params)
    mean = pred.mean_track
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "step", "t_seconds", "x_m", "y_m", "weight"])
        for s in range(len(pred)):
            for h in range(pred.horizon):
                w.writerow([s, h + 1, f"{(h + 1) * dt:g}", repr(float(pred.positions[s, h, 0])),
                            repr(float(pred.positions[s, h, 1])), repr(float(pred.weights[s]))])
        for h in range(pred.horizon):
            w.writerow(["mean", h + 1, f"{(h + 1) * dt:g}", repr(float(mean[h, 0])),
                        repr(float(mean[h, 1])), ""])
    print(f"wrote {len(pred)} samples over {pred.horizon} steps to {args.out} "
          f"(effective sample size {pred.ess:.1f})")


def cmd_evaluate(args):
    tracks = data_io.read_tracks(args.dataset, args.schema, args.rate_hz)
    names = [p.strip().lower() for p in args.predictors.split(",") if p.strip()]
    needs_model = [p for p in names if p in ("osp", "osp-av")]
    if needs_model and not args.model:
        raise UsageError(f"predictor(s) {needs_model} need --model")
    params = _load_params(args.model) if args.model else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    common = dict(obs_seconds=args.obs_seconds, horizon_seconds=args.horizon_seconds,
                  n_samples=args.samples, seed=args.seed)
    for name in names:
        if name == "cv":
            table = evaluate(tracks, cv_predictor(tracks.dt), **common)
        elif name == "osp":
            table = evaluate(tracks, osp_predictor(params), **common)
        elif name == "osp-av":
            table = evaluate(tracks, osp_predictor(params), mode="known", **common)
        else:
            raise UsageError(f"unknown predictor {name!r}; choose from cv, osp, osp-av")
        table.write(out / f"metrics_{name}.csv")
        summary[name] = table.to_dict()
        print(f"{name}: " + "  ".join(f"{t:g}s {a:.3f}/{r:.3f}" for t, a, r, _ in table.rows()))
    _write_json(out / "metrics.json", summary)


def _bench_request(args, dt):
    if args.scene:
        tracks = data_io.read_tracks(args.scene, args.schema, args.rate_hz, 1.0 / dt)
        req, _, _ = _scene_request(tracks, args.pedestrian, args.at_step,
                                   _steps(args.obs_seconds, dt), _steps(args.horizon_seconds, dt),
                                   args.samples, args.seed)
        return req
    scen = data_io.CrossingScenario(n_steps=_steps(args.obs_seconds, dt) + 1, n_vehicles=3)
    tracks, _ = data_io.synthesize(scen, data_io.reference_params(), 1, args.seed)
    req, _, _ = _scene_request(tracks, "p0", None, _steps(args.obs_seconds, dt),
                               _steps(args.horizon_seconds, dt), args.samples, args.seed)
    return req


def cmd_bench(args):
    params = _load_params(args.model) if args.model else data_io.reference_params()
    req = _bench_request(args, params.dt)
    res = bench(osp_predictor(params), req, args.reps)
    report = {"mean_s": res["mean_s"], "p95_s": res["p95_s"], "repetitions": res["repetitions"],
              "n_samples": req.n_samples, "horizon_steps": req.horizon,
              "n_vehicles": int(req.vehicle_history.shape[0])}
    if args.out:
        _write_json(args.out, report)
    print(f"mean {1000 * res['mean_s']:.2f} ms, p95 {1000 * res['p95_s']:.2f} ms "
          f"over {res['repetitions']} repetitions")


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pedyield", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--seed", type=int, default=DEFAULT_SEED)
        if data:
            sp.add_argument("--schema", choices=sorted(data_io.SCHEMAS), default="generic")
            sp.add_argument("--rate-hz", type=float, default=None,
                            help="override the schema's native frame rate")

    def protocol(sp):
        sp.add_argument("--obs-seconds", type=float, default=3.0)
        sp.add_argument("--horizon-seconds", type=float, default=5.0)
        sp.add_argument("--samples", type=int, default=100)

    sp = sub.add_parser("synthesize", help="sample crossing scenes from the reference model")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--steps", type=int, default=80)
    sp.add_argument("--vehicles", type=int, default=1)
    sp.add_argument("--latent", help="also write true states and decisions (.npz)")
    common(sp, data=False)
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("train", help="fit a model to a track file")
    sp.add_argument("dataset")
    sp.add_argument("--out", required=True, help="model file (JSON)")
    sp.add_argument("--report", help="fit report path (default: <out>.report.json)")
    sp.add_argument("--restarts", type=int, default=5)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="sample futures for one pedestrian")
    sp.add_argument("--model", required=True)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--pedestrian", required=True)
    sp.add_argument("--at-step", type=int, default=None,
                    help="last observed step (default: end of the track)")
    sp.add_argument("--av-trajectory", help="track file with the AV's planned trajectory")
    sp.add_argument("--out", required=True)
    common(sp)
    protocol(sp)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="ADE/RMSE tables over sliding windows")
    sp.add_argument("dataset")
    sp.add_argument("--model")
    sp.add_argument("--predictors", default="cv", help="comma list of cv, osp, osp-av")
    sp.add_argument("--out-dir", required=True)
    common(sp)
    protocol(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("bench", help="time single predictions")
    sp.add_argument("--model")
    sp.add_argument("--scene")
    sp.add_argument("--pedestrian", default="p0")
    sp.add_argument("--at-step", type=int, default=None)
    sp.add_argument("--reps", type=int, default=100)
    sp.add_argument("--out")
    common(sp)
    protocol(sp)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"pedyield: error: {exc}", file=sys.stderr)
        return 1
    except TrainingInfeasibleError as exc:
        print(f"pedyield: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, VersionError, CoverageError, ContractError, FileNotFoundError,
            IsADirectoryError, PermissionError) as exc:
        print(f"pedyield: data error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"pedyield: numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
