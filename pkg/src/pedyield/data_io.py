"""Track file ingestion, resampling, synthetic scenes, and model files.

Track files are comma-separated with a one-line header. The generic schema
is::

    track_id,class,frame,x_m,y_m[,vx_mps,vy_mps]

with ``class`` one of ``pedestrian``, ``vehicle`` or ``other``. Named
presets map the inD and DUT column layouts onto the same table; their
native frame rate can be overridden per file.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataFormatError, VersionError
from .grid import GridFunction1D, GridFunction2D
from .interaction import ModelParams, transition_batch
from .scene import PedestrianTrack, SceneConfig, TrackSet, VehicleTrack

FORMAT_VERSION = 1
CLASSES = ("pedestrian", "vehicle", "other")
GENERIC_HEADER = ["track_id", "class", "frame", "x_m", "y_m", "vx_mps", "vy_mps"]


@dataclass(frozen=True)
class SchemaPreset:
    """Column and class-name mapping from a dataset layout to the generic table."""

    name: str
    columns: dict            # generic field -> file column
    classes: dict            # file class label -> generic class
    rate_hz: float
    meta_suffix: tuple | None = None   # (tracks suffix, meta suffix) for a side file

    def map_class(self, label):
        return self.classes.get(str(label).strip().lower())


SCHEMAS = {
    "generic": SchemaPreset(
        "generic",
        {"track_id": "track_id", "class": "class", "frame": "frame", "x": "x_m", "y": "y_m",
         "vx": "vx_mps", "vy": "vy_mps"},
        {c: c for c in CLASSES},
        10.0,
    ),
    # inD: per-recording XX_tracks.csv with class labels in XX_tracksMeta.csv, 25 Hz.
    "ind": SchemaPreset(
        "ind",
        {"track_id": "trackId", "class": "class", "frame": "frame", "x": "xCenter",
         "y": "yCenter", "vx": "xVelocity", "vy": "yVelocity"},
        {"pedestrian": "pedestrian", "car": "vehicle", "truck_bus": "vehicle",
         "truck": "vehicle", "bus": "vehicle", "van": "vehicle", "bicycle": "other",
         "motorcycle": "other"},
        25.0,
        ("tracks.csv", "tracksMeta.csv"),
    ),
    # DUT: per-clip table of ground-plane positions and velocities; frame rate
    # differs between recordings, pass rate_hz explicitly when it is known.
    "dut": SchemaPreset(
        "dut",
        {"track_id": "id", "class": "label", "frame": "frame", "x": "x", "y": "y",
         "vx": "vx", "vy": "vy"},
        {"pedestrian": "pedestrian", "ped": "pedestrian", "person": "pedestrian",
         "vehicle": "vehicle", "veh": "vehicle", "car": "vehicle", "bus": "vehicle",
         "truck": "vehicle", "bicycle": "other", "cyclist": "other"},
        23.98,
    ),
}


@dataclass(eq=False)
class RawTrackTable:
    track_id: np.ndarray
    cls: np.ndarray
    frame: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    rate_hz: float
    n_input: int = 0
    n_dropped: int = 0

    def __len__(self):
        return len(self.frame)

    def of_class(self, cls) -> np.ndarray:
        return np.flatnonzero(self.cls == cls)


def _read_rows(path):
    with open(path, newline="") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        rows = [(reader.line_num, row) for row in reader if any(c.strip() for c in row)]
    return header, rows


def _float(text, line, col):
    text = text.strip()
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise DataFormatError(f"line {line}: column {col!r} is not a number: {text!r}") from None


def load_tracks(path, schema="generic", rate_hz=None, meta_path=None) -> RawTrackTable:
    """Parse and validate a track file.

    Rows whose class is not recognised by the schema are dropped and
    counted in ``n_dropped``; every other problem raises
    :class:`DataFormatError` naming the offending line.
    """
    preset = SCHEMAS[schema] if isinstance(schema, str) else schema
    path = Path(path)
    header, rows = _read_rows(path)
    cols = preset.columns
    required = ["track_id", "frame", "x", "y"] + ([] if preset.meta_suffix else ["class"])
    missing = [cols[k] for k in required if cols[k] not in header]
    if missing:
        raise DataFormatError(f"{path}: missing required column(s) {missing}")
    pos = {k: header.index(v) for k, v in cols.items() if v in header}

    labels = None
    if preset.meta_suffix:
        if meta_path is None:
            suffix, meta_suffix = preset.meta_suffix
            if not path.name.endswith(suffix):
                raise DataFormatError(f"{path}: cannot locate class metadata file")
            meta_path = path.with_name(path.name[: -len(suffix)] + meta_suffix)
        mheader, mrows = _read_rows(meta_path)
        try:
            ki, kc = mheader.index(cols["track_id"]), mheader.index(cols["class"])
        except ValueError:
            raise DataFormatError(f"{meta_path}: missing track id or class column") from None
        labels = {r[ki].strip(): r[kc] for _, r in mrows}

    ids, classes, frames, xs, ys, vxs, vys = [], [], [], [], [], [], []
    seen = {}
    dropped = 0
    for line, row in rows:
        if len(row) < len(header):
            raise DataFormatError(f"line {line}: expected {len(header)} fields, got {len(row)}")
        tid = row[pos["track_id"]].strip()
        label = labels.get(tid) if labels is not None else row[pos["class"]]
        if label is None:
            raise DataFormatError(f"line {line}: track {tid!r} has no class metadata")
        cls = preset.map_class(label)
        try:
            frame = int(float(row[pos["frame"]]))
        except ValueError:
            raise DataFormatError(f"line {line}: bad frame {row[pos['frame']]!r}") from None
        x = _float(row[pos["x"]], line, cols["x"])
        y = _float(row[pos["y"]], line, cols["y"])
        if not (math.isfinite(x) and math.isfinite(y)):
            raise DataFormatError(f"line {line}: position must be finite")
        vx = _float(row[pos["vx"]], line, cols["vx"]) if "vx" in pos else math.nan
        vy = _float(row[pos["vy"]], line, cols["vy"]) if "vy" in pos else math.nan
        if cls is None:
            dropped += 1
            continue
        key = (tid, frame)
        if key in seen:
            raise DataFormatError(
                f"line {line}: duplicate (track_id, frame) = ({tid}, {frame}), "
                f"first seen on line {seen[key]}")
        seen[key] = line
        ids.append(tid); classes.append(cls); frames.append(frame)
        xs.append(x); ys.append(y); vxs.append(vx); vys.append(vy)

    rate = float(rate_hz if rate_hz is not None else preset.rate_hz)
    if not rate > 0:
        raise DataFormatError("native rate must be positive")
    return RawTrackTable(
        track_id=np.array(ids, dtype=object), cls=np.array(classes, dtype=object),
        frame=np.array(frames, dtype=int), x=np.array(xs), y=np.array(ys),
        vx=np.array(vxs), vy=np.array(vys), rate_hz=rate,
        n_input=len(rows), n_dropped=dropped,
    )


def resample(table: RawTrackTable, target_hz=10.0) -> TrackSet:
    """Interpolate every track onto the shared ``1/target_hz`` step grid.

    A missing frame splits a track into segments (``id``, ``id#1``, ...).
    Vehicle velocities are interpolated when the file has them, otherwise
    recomputed by central differences on the resampled positions.
    """
    if table.rate_hz < target_hz - 1e-9:
        raise ContractError(
            f"native rate {table.rate_hz} Hz is below {target_hz} Hz; upsampling refused")
    out = TrackSet(dt=1.0 / target_hz)
    order = np.lexsort((table.frame, table.track_id.astype(str)))
    tids = table.track_id[order]
    bounds = np.flatnonzero(tids[1:] != tids[:-1]) + 1
    for grp in np.split(order, bounds):
        if grp.size == 0 or table.cls[grp[0]] == "other":
            continue
        cls, tid = table.cls[grp[0]], str(table.track_id[grp[0]])
        frames = table.frame[grp]
        cuts = np.flatnonzero(np.diff(frames) > 1) + 1
        for k, seg in enumerate(np.split(grp, cuts)):
            fr = table.frame[seg]
            t = fr / table.rate_hz
            k0 = math.ceil(t[0] * target_hz - 1e-9)
            k1 = math.floor(t[-1] * target_hz + 1e-9)
            if k1 < k0:
                continue
            steps = np.arange(k0, k1 + 1)
            grid = steps / target_hz
            pos = np.column_stack([np.interp(grid, t, table.x[seg]),
                                   np.interp(grid, t, table.y[seg])])
            name = tid if k == 0 else f"{tid}#{k}"
            if cls == "pedestrian":
                out.pedestrians.append(PedestrianTrack(name, int(k0), pos))
                continue
            vx, vy = table.vx[seg], table.vy[seg]
            if np.all(np.isfinite(vx)) and np.all(np.isfinite(vy)):
                vel = np.column_stack([np.interp(grid, t, vx), np.interp(grid, t, vy)])
            elif len(steps) >= 2:
                vel = np.gradient(pos, 1.0 / target_hz, axis=0)
            else:
                continue
            out.vehicles.append(VehicleTrack(name, int(k0), pos, vel))
    return out


def write_tracks(tracks: TrackSet, path):
    """Write a :class:`TrackSet` in the generic schema (frames are step indices)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GENERIC_HEADER)
        for ped in tracks.pedestrians:
            for k, (x, y) in zip(ped.steps, ped.positions):
                w.writerow([ped.track_id, "pedestrian", int(k), repr(float(x)), repr(float(y)), "", ""])
        for veh in tracks.vehicles:
            for i, ((x, y), (vx, vy)) in enumerate(zip(veh.positions, veh.velocities)):
                w.writerow([veh.track_id, "vehicle", veh.start + i, repr(float(x)), repr(float(y)),
                            repr(float(vx)), repr(float(vy))])


def read_tracks(path, schema="generic", rate_hz=None, target_hz=10.0) -> TrackSet:
    return resample(load_tracks(path, schema, rate_hz), target_hz)


# --- model files -------------------------------------------------------------

@dataclass(eq=False)
class ModelFile:
    params: ModelParams
    provenance: dict = field(default_factory=dict)

    def __eq__(self, other):
        return (isinstance(other, ModelFile) and self.params == other.params
                and self.provenance == other.provenance)


def model_to_dict(params: ModelParams, provenance=None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "influence": {"weights": params.influence.weights.tolist(),
                      "u_max": params.influence.u_max},
        "risk": {"weights": params.risk_fn.weights.reshape(-1).tolist(),
                 "bias": params.risk_fn.bias, "lo": params.risk_fn.lo, "hi": params.risk_fn.hi,
                 "n_b": params.risk_fn.n_b},
        "sigma_v": params.sigma_v,
        "sigma_x": params.sigma_x,
        "scene": {"half_length": params.scene.half_length, "u_max": params.scene.u_max,
                  "dt": params.scene.dt, "stationary_speed": params.scene.stationary_speed},
        "provenance": provenance or {},
    }


def model_from_dict(doc) -> ModelFile:
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise VersionError("model file has no format_version field")
    if doc["format_version"] != FORMAT_VERSION:
        raise VersionError(
            f"unsupported model format_version {doc['format_version']!r} "
            f"(expected {FORMAT_VERSION})")
    try:
        inf, rk, sc = doc["influence"], doc["risk"], doc["scene"]
        params = ModelParams(
            influence=GridFunction1D(inf["weights"], inf["u_max"]),
            risk_fn=GridFunction2D(rk["weights"], rk["bias"], rk["lo"], rk["hi"], rk["n_b"]),
            sigma_v=float(doc["sigma_v"]), sigma_x=float(doc["sigma_x"]),
            scene=SceneConfig(sc["half_length"], sc["u_max"], sc["dt"], sc["stationary_speed"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed model file: {exc}") from exc
    return ModelFile(params, doc.get("provenance", {}))


def dumps_model(params: ModelParams, provenance=None) -> str:
    return json.dumps(model_to_dict(params, provenance), indent=2, sort_keys=True) + "\n"


def save_model(params: ModelParams, path, provenance=None):
    Path(path).write_text(dumps_model(params, provenance))


def load_model(path) -> ModelFile:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not a valid model file ({exc})") from exc
    return model_from_dict(doc)


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


# --- synthetic scenes ---------------------------------------------------------

def reference_params(sigma_v=0.02, sigma_x=0.05) -> ModelParams:
    """Ground-truth parameters used by the synthetic scenes.

    Yielding pedestrians slow from 5 m and stop about 3 m from the vehicle
    path; risk falls by 10 per decade of ``tau * dmin`` and crosses zero
    at ``tau * dmin = 10 m s``.
    """
    influence = GridFunction1D([0.0, 0.0, 0.0, 0.3, 0.7, 0.9, 1.0], 6.0)
    g = np.linspace(0.0, 1.6, 5)
    risk = GridFunction2D(10.0 - 10.0 * (g[:, None] + g[None, :]), 0.0, 0.0, 1.6, 5)
    return ModelParams(influence, risk, sigma_v, sigma_x, SceneConfig())


@dataclass(frozen=True)
class CrossingScenario:
    """Pedestrian walking toward a straight road while vehicles drive along it.

    The road is the x axis. Each pedestrian starts ``lateral`` metres from
    it and walks toward it; vehicle ``j`` is timed to pass the
    pedestrian's crossing point ``arrival`` seconds after the start.
    """

    n_steps: int = 80
    n_vehicles: int = 1
    lateral: tuple = (5.0, 8.0)
    ped_speed: tuple = (1.0, 1.6)
    heading_jitter: float = 0.2
    veh_speed: tuple = (4.0, 9.0)
    arrival: tuple = (1.5, 7.0)
    gap_steps: int = 20


@dataclass
class LatentLog:
    """True states and decisions for every synthesised pedestrian.

    Arrays are ``(n, T, ...)``; ``attended`` holds the scene-local vehicle
    index or -1 and ``q`` the yield flag of the step leaving ``t``.
    """

    pos: np.ndarray
    vel: np.ndarray
    attended: np.ndarray
    q: np.ndarray
    vehicles: np.ndarray
    ped_ids: list

    def to_dict(self):
        return {"ped_ids": self.ped_ids, "pos": self.pos.tolist(), "vel": self.vel.tolist(),
                "attended": self.attended.tolist(), "q": self.q.tolist()}


def synthesize(scenario: CrossingScenario = CrossingScenario(), params: ModelParams | None = None,
               n=100, seed=0):
    """Sample ``n`` independent crossing scenes from the generative model.

    Scenes are placed on disjoint step ranges of one :class:`TrackSet`.
    Returns ``(tracks, latent_log)``.
    """
    params = params or reference_params()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    T, m, dt = scenario.n_steps, scenario.n_vehicles, params.dt

    side = rng.choice([-1.0, 1.0], n)
    lateral = rng.uniform(*scenario.lateral, n)
    x0 = np.column_stack([rng.uniform(-5.0, 5.0, n), side * lateral])
    ang = -np.pi / 2 * side + rng.uniform(-scenario.heading_jitter, scenario.heading_jitter, n)
    speed = rng.uniform(*scenario.ped_speed, n)
    v0 = speed[:, None] * np.column_stack([np.cos(ang), np.sin(ang)])

    direction = rng.choice([-1.0, 1.0], (n, m))
    vspeed = rng.uniform(*scenario.veh_speed, (n, m))
    arrival = rng.uniform(*scenario.arrival, (n, m))
    steps = np.arange(T) * dt
    vel = direction * vspeed
    # vehicle positions (n, m, T, 2): along x, lane at y = 0
    vx = x0[:, 0, None, None] + vel[..., None] * (steps[None, None, :] - arrival[..., None])
    veh = np.zeros((n, m, T, 4))
    veh[..., 0] = vx
    veh[..., 2] = vel[..., None]

    pos = np.empty((n, T, 2)); dvel = np.empty((n, T, 2))
    attended = np.full((n, T), -1); q = np.ones((n, T), dtype=int)
    pos[:, 0], dvel[:, 0] = x0, v0
    for t in range(T - 1):
        xn, vn, r, qq = transition_batch(params, pos[:, t], dvel[:, t], veh[:, :, t], rng)
        pos[:, t + 1], dvel[:, t + 1] = xn, vn
        attended[:, t], q[:, t] = r, qq
    obs = pos + params.sigma_x * rng.standard_normal(pos.shape)

    tracks = TrackSet(dt=dt)
    ids = []
    for i in range(n):
        start = i * (T + scenario.gap_steps)
        ids.append(f"p{i}")
        tracks.pedestrians.append(PedestrianTrack(f"p{i}", start, obs[i]))
        for j in range(m):
            tracks.vehicles.append(VehicleTrack(f"v{i}_{j}", start, veh[i, j, :, :2],
                                                veh[i, j, :, 2:]))
    return tracks, LatentLog(pos, dvel, attended, q, veh, ids)
