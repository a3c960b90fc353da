"""Trajectory containers, the vehicle-centric reference frame, and candidate gating.

Positions are metres in a fixed ground-plane frame, velocities m/s. Time is
an integer step index on a uniform grid of spacing ``dt`` seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FrameUndefinedError

STATIONARY_SPEED = 0.1
MAX_DESIRED_SPEED = 5.0


def _vec2(value, name):
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape != (2,):
        raise ContractError(f"{name} must be a 2-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} must be finite, got {arr}")
    return arr


@dataclass(frozen=True)
class SceneConfig:
    half_length: float = 2.0
    u_max: float = 6.0
    dt: float = 0.1
    stationary_speed: float = STATIONARY_SPEED

    def __post_init__(self):
        for name in ("half_length", "u_max", "dt", "stationary_speed"):
            if not getattr(self, name) > 0:
                raise ContractError(f"SceneConfig.{name} must be positive")


@dataclass(frozen=True)
class PedestrianObservation:
    t: int
    pos_hat: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pos_hat", _vec2(self.pos_hat, "pos_hat"))


@dataclass(frozen=True, eq=False)
class PedestrianState:
    """True position and desired velocity of one pedestrian."""

    pos: np.ndarray
    des_vel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pos", _vec2(self.pos, "pos"))
        object.__setattr__(self, "des_vel", _vec2(self.des_vel, "des_vel"))
        if np.hypot(*self.des_vel) > MAX_DESIRED_SPEED:
            raise ContractError(
                f"desired speed {np.hypot(*self.des_vel):.2f} m/s exceeds {MAX_DESIRED_SPEED} m/s"
            )


@dataclass(frozen=True, eq=False)
class VehicleState:
    pos: np.ndarray
    vel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pos", _vec2(self.pos, "pos"))
        object.__setattr__(self, "vel", _vec2(self.vel, "vel"))

    def is_stationary(self, threshold: float = STATIONARY_SPEED) -> bool:
        return bool(np.hypot(*self.vel) < threshold)


@dataclass(frozen=True)
class FrameCoords:
    lon: float
    lat: float
    lat_axis: np.ndarray


def frame_components(ped_pos, veh_pos, veh_vel):
    """Vectorised vehicle-frame decomposition with numpy broadcasting.

    All inputs have a trailing axis of length 2 and broadcast against each
    other. Returns ``(lon, lat, z, speed)`` where ``z`` is the unit lateral
    axis pointing from the vehicle's path toward the pedestrian. When the
    pedestrian is exactly on the path, ``z`` is the left normal of the
    heading. Stationary vehicles yield NaN heading terms; callers gate on
    ``speed``.
    """
    ped_pos = np.asarray(ped_pos, dtype=float)
    veh_pos = np.asarray(veh_pos, dtype=float)
    veh_vel = np.asarray(veh_vel, dtype=float)
    speed = np.hypot(veh_vel[..., 0], veh_vel[..., 1])
    with np.errstate(invalid="ignore", divide="ignore"):
        hx = veh_vel[..., 0] / speed
        hy = veh_vel[..., 1] / speed
    dx = ped_pos[..., 0] - veh_pos[..., 0]
    dy = ped_pos[..., 1] - veh_pos[..., 1]
    lon = dx * hx + dy * hy
    px = dx - lon * hx
    py = dy - lon * hy
    lat = np.hypot(px, py)
    on_path = lat == 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        zx = np.where(on_path, -hy, px / np.where(on_path, 1.0, lat))
        zy = np.where(on_path, hx, py / np.where(on_path, 1.0, lat))
    z = np.stack(np.broadcast_arrays(zx, zy), axis=-1)
    return lon, lat, z, speed


def gate_frame(ped_pos, ped_vel, veh_pos, veh_vel, cfg: SceneConfig):
    """Gate mask together with the ``lon`` and ``lat`` it was computed from.

    Same semantics as :func:`gate_mask`; avoids building the lateral axis
    array in the sampling loops.
    """
    vx, vy = veh_vel[..., 0], veh_vel[..., 1]
    speed = np.hypot(vx, vy)
    with np.errstate(invalid="ignore", divide="ignore"):
        hx, hy = vx / speed, vy / speed
        dx = ped_pos[..., 0] - veh_pos[..., 0]
        dy = ped_pos[..., 1] - veh_pos[..., 1]
        lon = dx * hx + dy * hy
        px, py = dx - lon * hx, dy - lon * hy
        lat = np.hypot(px, py)
        # ped_vel . z, with z the left normal when the pedestrian is on the path
        along = ped_vel[..., 0] * px + ped_vel[..., 1] * py
        normal = ped_vel[..., 1] * hx - ped_vel[..., 0] * hy
        approach = np.where(lat == 0.0, normal, along)
        gated = ((speed >= cfg.stationary_speed) & (lon >= -cfg.half_length)
                 & (lat <= cfg.u_max) & (approach < 0.0))
    return gated, lon, lat


def gate_mask(ped_pos, ped_vel, veh_pos, veh_vel, cfg: SceneConfig):
    """Boolean mask of vehicles a pedestrian may attend to (broadcasting).

    NaN vehicle entries (vehicle absent at that step) are never gated in.
    """
    return gate_frame(np.asarray(ped_pos, dtype=float), np.asarray(ped_vel, dtype=float),
                      np.asarray(veh_pos, dtype=float), np.asarray(veh_vel, dtype=float), cfg)[0]


def to_vehicle_frame(ped: PedestrianState, veh: VehicleState,
                     stationary_speed: float = STATIONARY_SPEED) -> FrameCoords:
    if veh.is_stationary(stationary_speed):
        raise FrameUndefinedError("vehicle is stationary; heading is undefined")
    lon, lat, z, _ = frame_components(ped.pos, veh.pos, veh.vel)
    return FrameCoords(float(lon), float(lat), np.asarray(z, dtype=float))


def candidate_set(ped: PedestrianState, vehicles, cfg: SceneConfig = SceneConfig()) -> set[int]:
    """Indices of vehicles in front of, laterally near, and approached by ``ped``."""
    if len(vehicles) == 0:
        return set()
    pos = np.array([v.pos for v in vehicles])
    vel = np.array([v.vel for v in vehicles])
    mask = gate_mask(ped.pos, ped.des_vel, pos, vel, cfg)
    return {int(i) for i in np.flatnonzero(mask)}


@dataclass(eq=False)
class PedestrianTrack:
    """Contiguous noisy position observations on the global step grid."""

    track_id: str
    start: int
    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(self.positions)):
            raise ContractError(f"pedestrian {self.track_id}: non-finite position")

    def __len__(self):
        return len(self.positions)

    @property
    def steps(self) -> np.ndarray:
        return np.arange(self.start, self.start + len(self.positions))

    @property
    def observations(self) -> list[PedestrianObservation]:
        return [PedestrianObservation(int(t), p) for t, p in zip(self.steps, self.positions)]


@dataclass(eq=False)
class VehicleTrack:
    """Known per-step position and velocity of one vehicle."""

    track_id: str
    start: int
    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(-1, 2)
        if self.positions.shape != self.velocities.shape:
            raise ContractError(f"vehicle {self.track_id}: position/velocity length mismatch")

    def __len__(self):
        return len(self.positions)

    @property
    def end(self) -> int:
        return self.start + len(self.positions)

    def state(self, step: int) -> VehicleState | None:
        i = step - self.start
        if 0 <= i < len(self.positions):
            return VehicleState(self.positions[i], self.velocities[i])
        return None


@dataclass(eq=False)
class TrackSet:
    """Pedestrian and vehicle tracks sharing one step grid of spacing ``dt``."""

    pedestrians: list[PedestrianTrack] = field(default_factory=list)
    vehicles: list[VehicleTrack] = field(default_factory=list)
    dt: float = 0.1

    def vehicle_block(self, start: int, length: int, exclude_ids=()):
        """Stack vehicles overlapping ``[start, start + length)``.

        Returns ``(ids, block)`` with ``block`` of shape ``(m, length, 4)``
        holding ``x, y, vx, vy`` and NaN where a vehicle is absent.
        """
        ids, rows = [], []
        stop = start + length
        for veh in self.vehicles:
            if veh.track_id in exclude_ids or veh.end <= start or veh.start >= stop:
                continue
            block = np.full((length, 4), np.nan)
            lo, hi = max(start, veh.start), min(stop, veh.end)
            block[lo - start:hi - start, :2] = veh.positions[lo - veh.start:hi - veh.start]
            block[lo - start:hi - start, 2:] = veh.velocities[lo - veh.start:hi - veh.start]
            ids.append(veh.track_id)
            rows.append(block)
        if not rows:
            return ids, np.empty((0, length, 4))
        return ids, np.stack(rows)
