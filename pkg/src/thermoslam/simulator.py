"""Deterministic synthetic world and sensor models with full ground truth.

The world is a handful of primitives (axis-aligned boxes, finite rectangles)
with flat albedo and a surface temperature field (base temperature plus
radial hotspots, optionally time-varying). Trajectories are closed-form with
a smooth spin-up ramp so the platform is exactly static during the first
second (the odometry initializer assumes this) and all derivatives are exact.

All randomness flows from one 64-bit seed via independent Philox streams, so
re-running with the same seed reproduces every output byte.
"""

from __future__ import annotations

import csv
import functools
import pathlib
import struct
from dataclasses import dataclass, field

import numpy as np
import yaml
from PIL import Image

from .calibration import LidarNoiseModel
from .geometry import (
    PinholeIntrinsics,
    Pose,
    matrix_to_quat,
    quat_from_rotvec,
    unproject_grid,
)
from .thermal import ThermalImage, register_thermal

GRAVITY = np.array([0.0, 0.0, 9.81])

# camera optical frame relative to the body: z forward (+x body), x right
# (-y body), y down (-z body)
R_CAM_BODY = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])

# stream ids for the splittable generator
_STREAMS = {"imu_accel": 0, "imu_gyro": 1, "lidar_range": 2, "lidar_bearing": 3, "misc": 4}


def stream_rng(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Independent, reproducible generator for one sensor stream (and frame)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_STREAMS[name], int(index)))
    return np.random.Generator(np.random.Philox(ss))


def tangent_bases(bearings: np.ndarray) -> np.ndarray:
    """Vectorized orthonormal tangent bases, (N,3,2), same construction as
    the calibration module's single-bearing version."""
    r = np.asarray(bearings, dtype=float)
    n = len(r)
    axis = np.zeros((n, 3))
    axis[np.arange(n), np.argmin(np.abs(r), axis=1)] = 1.0
    b1 = axis - np.einsum("ni,ni->n", axis, r)[:, None] * r
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    b2 = np.cross(r, b1)
    return np.stack([b1, b2], axis=2)


# --------------------------------------------------------------------------- #
# Scene
# --------------------------------------------------------------------------- #

@dataclass
class Hotspot:
    """Radial surface hotspot; peak follows peak + amplitude*sin(pi*t/period)."""

    center: np.ndarray  # m, on a primitive surface
    radius: float  # m
    peak_celsius: float
    amplitude: float = 0.0
    period_s: float = 60.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.radius <= 0:
            raise ValueError("hotspot radius must be positive")

    def peak_at(self, t: float) -> float:
        if self.amplitude == 0.0:
            return self.peak_celsius
        return self.peak_celsius + self.amplitude * np.sin(np.pi * t / self.period_s)


@dataclass
class Box:
    """Axis-aligned box."""

    lo: np.ndarray
    hi: np.ndarray
    albedo: tuple[float, float, float] = (0.6, 0.6, 0.6)
    base_celsius: float = 22.0
    hotspots: list[Hotspot] = field(default_factory=list)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if not np.all(self.hi > self.lo):
            raise ValueError("box extents must be positive")
        for h in self.hotspots:
            if h.peak_celsius < self.base_celsius:
                raise ValueError("hotspot peak must not be below the base temperature")


@dataclass
class Rect:
    """Finite rectangle spanned by two edge vectors from an origin corner."""

    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    albedo: tuple[float, float, float] = (0.5, 0.5, 0.5)
    base_celsius: float = 22.0
    hotspots: list[Hotspot] = field(default_factory=list)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.edge_u = np.asarray(self.edge_u, dtype=float)
        self.edge_v = np.asarray(self.edge_v, dtype=float)
        n = np.cross(self.edge_u, self.edge_v)
        if np.linalg.norm(n) < 1e-12:
            raise ValueError("rectangle edges are degenerate")
        for h in self.hotspots:
            if h.peak_celsius < self.base_celsius:
                raise ValueError("hotspot peak must not be below the base temperature")


@dataclass
class SimScene:
    primitives: list  # Box | Rect

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene must contain at least one primitive")

    def ray_cast(self, origins: np.ndarray, dirs: np.ndarray, max_range: float = 120.0):
        """Nearest-hit ray cast. Returns (t, hit point, primitive index, hit mask)."""
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        n = len(dirs)
        if len(origins) == 1 and n > 1:
            origins = np.broadcast_to(origins, (n, 3))
        best_t = np.full(n, np.inf)
        best_idx = np.full(n, -1, dtype=int)
        for idx, prim in enumerate(self.primitives):
            if isinstance(prim, Box):
                t = _ray_box(origins, dirs, prim.lo, prim.hi)
            else:
                t = _ray_rect(origins, dirs, prim)
            closer = t < best_t
            best_t[closer] = t[closer]
            best_idx[closer] = idx
        hit = np.isfinite(best_t) & (best_t <= max_range)
        pts = origins + best_t[:, None] * dirs
        pts[~hit] = np.nan
        return best_t, pts, best_idx, hit

    def albedo_at(self, prim_idx: np.ndarray) -> np.ndarray:
        table = np.array(
            [p.albedo for p in self.primitives] + [(0.0, 0.0, 0.0)], dtype=float
        )
        return table[prim_idx]

    def temperature_at(self, points: np.ndarray, prim_idx: np.ndarray, t: float) -> np.ndarray:
        """Surface temperature (deg C) of hit points at time t; NaN for misses."""
        points = np.atleast_2d(points)
        out = np.full(len(points), np.nan)
        for idx, prim in enumerate(self.primitives):
            sel = prim_idx == idx
            if not np.any(sel):
                continue
            temp = np.full(int(np.sum(sel)), prim.base_celsius)
            for h in prim.hotspots:
                d = np.linalg.norm(points[sel] - h.center[None, :], axis=1)
                bump = np.maximum(0.0, 1.0 - (d / h.radius) ** 2)
                temp = np.maximum(temp, prim.base_celsius + (h.peak_at(t) - prim.base_celsius) * bump)
            out[sel] = temp
        return out


def _ray_box(origins, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo[None, :] - origins) * inv
        t2 = (hi[None, :] - origins) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    t = np.where(tmin > 1e-9, tmin, tmax)  # inside the box: exit face
    ok = (tmax >= np.maximum(tmin, 0.0)) & (t > 1e-9)
    return np.where(ok, t, np.inf)


def _ray_rect(origins, dirs, rect: Rect):
    n = np.cross(rect.edge_u, rect.edge_v)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((rect.origin[None, :] - origins) @ n) / denom
        q = origins + t[:, None] * dirs - rect.origin[None, :]
        a = (q @ rect.edge_u) / (rect.edge_u @ rect.edge_u)
        b = (q @ rect.edge_v) / (rect.edge_v @ rect.edge_v)
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
    return np.where(ok, t, np.inf)


# --------------------------------------------------------------------------- #
# Trajectories
# --------------------------------------------------------------------------- #

@dataclass
class TrajectorySpec:
    """Closed-form motion with a static hold and a smooth spin-up ramp."""

    family: str = "figure8"  # static | line | circle | figure8
    duration_s: float = 60.0
    imu_hz: float = 200.0
    lidar_hz: float = 10.0
    camera_hz: float = 10.0
    static_s: float = 1.0
    ramp_s: float = 1.5
    center: tuple[float, float, float] = (0.0, 0.0, 1.2)
    # line
    direction: tuple[float, float, float] = (1.0, 0.0, 0.0)
    speed: float = 0.5  # m/s
    # circle / figure8
    radius: float = 2.0
    angular_rate: float = 0.4  # rad/s of the path phase
    amp_x: float = 2.5
    amp_y: float = 1.5
    yaw_amplitude: float = 0.5  # rad, sinusoidal yaw for figure8/line
    yaw_offset: float = 0.0

    def __post_init__(self):
        if self.family not in ("static", "line", "circle", "figure8"):
            raise ValueError(f"unknown trajectory family {self.family!r}")
        if min(self.imu_hz, self.lidar_hz) <= 0 or self.duration_s <= 0:
            raise ValueError("rates and duration must be positive")
        if self.imu_hz < 10 * self.lidar_hz:
            raise ValueError("IMU rate must be at least 10x the LiDAR rate")


def _phase(t: float, t0: float, ramp: float, rate: float) -> tuple[float, float, float]:
    """Phase angle, rate, and acceleration of the smooth spin-up profile.

    Static before t0; quintic-smoothstep velocity ramp over [t0, t0+ramp];
    constant rate afterwards. C2 everywhere and closed form.
    """
    if t <= t0 or rate == 0.0:
        return 0.0, 0.0, 0.0
    if t >= t0 + ramp or ramp <= 0.0:
        return rate * (0.5 * ramp + (t - t0 - ramp)), rate, 0.0
    s = (t - t0) / ramp
    S = s**3 * (10.0 - 15.0 * s + 6.0 * s * s)  # velocity fraction
    dS = (30.0 * s**2 - 60.0 * s**3 + 30.0 * s**4) / ramp
    integral = ramp * (2.5 * s**4 - 3.0 * s**5 + s**6)
    return rate * integral, rate * S, rate * dS


@dataclass
class MotionSample:
    pose: Pose  # world <- body
    velocity: np.ndarray  # m/s, world
    acceleration: np.ndarray  # m/s^2, world
    angular_rate_body: np.ndarray  # rad/s, body


def sample_pose(spec: TrajectorySpec, t: float) -> MotionSample:
    """Exact pose and derivatives at time t in [0, duration]."""
    if t < -1e-12 or t > spec.duration_s + 1e-9:
        raise ValueError(f"t={t} outside [0, {spec.duration_s}]")
    c = np.asarray(spec.center, dtype=float)
    t0, ramp = spec.static_s, spec.ramp_s

    if spec.family == "static":
        return MotionSample(
            Pose(quat_from_rotvec([0, 0, spec.yaw_offset]), c), np.zeros(3), np.zeros(3), np.zeros(3)
        )

    if spec.family == "line":
        d = np.asarray(spec.direction, dtype=float)
        d = d / np.linalg.norm(d)
        s, sd, sdd = _phase(t, t0, ramp, spec.speed)
        pose = Pose(quat_from_rotvec([0, 0, spec.yaw_offset]), c + s * d)
        return MotionSample(pose, sd * d, sdd * d, np.zeros(3))

    if spec.family == "circle":
        phi, phid, phidd = _phase(t, t0, ramp, spec.angular_rate)
        cp, sp = np.cos(phi), np.sin(phi)
        p = c + spec.radius * np.array([cp, sp, 0.0])
        v = spec.radius * phid * np.array([-sp, cp, 0.0])
        a = spec.radius * (phidd * np.array([-sp, cp, 0.0]) + phid**2 * np.array([-cp, -sp, 0.0]))
        yaw = phi + np.pi / 2 + spec.yaw_offset  # tangent-following
        pose = Pose(quat_from_rotvec([0, 0, yaw]), p)
        return MotionSample(pose, v, a, np.array([0.0, 0.0, phid]))

    # figure8 (Gerono-style lissajous) with sinusoidal yaw
    phi, phid, phidd = _phase(t, t0, ramp, spec.angular_rate)
    A, B = spec.amp_x, spec.amp_y
    sp, cp = np.sin(phi), np.cos(phi)
    s2, c2 = np.sin(2 * phi), np.cos(2 * phi)
    p = c + np.array([A * sp, B * s2, 0.0])
    v = np.array([A * cp * phid, 2 * B * c2 * phid, 0.0])
    a = np.array(
        [A * (cp * phidd - sp * phid**2), 2 * B * (c2 * phidd - 2 * s2 * phid**2), 0.0]
    )
    yaw = spec.yaw_offset + spec.yaw_amplitude * sp
    yawd = spec.yaw_amplitude * cp * phid
    pose = Pose(quat_from_rotvec([0, 0, yaw]), p)
    return MotionSample(pose, v, a, np.array([0.0, 0.0, yawd]))


# --------------------------------------------------------------------------- #
# Sensor models
# --------------------------------------------------------------------------- #

@dataclass
class ImuNoiseConfig:
    accel_noise_density: float = 0.02  # m/s^2/sqrt(Hz)
    gyro_noise_density: float = 0.002  # rad/s/sqrt(Hz)
    accel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gyro_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class NoiseConfig:
    enabled: bool = False
    lidar: LidarNoiseModel = field(default_factory=LidarNoiseModel)
    imu: ImuNoiseConfig = field(default_factory=ImuNoiseConfig)


@dataclass
class LidarPattern:
    channels: int = 16
    points_per_channel: int = 1024
    fov_vertical_deg: float = 30.0
    max_range: float = 60.0


def simulate_imu(spec: TrajectorySpec, noise: NoiseConfig, seed: int = 0) -> np.ndarray:
    """IMU stream as a structured array (t_ns, accel, gyro), body frame.

    Inverts the world-frame kinematics: the specific force measured by the
    accelerometer at rest with identity attitude equals the gravity vector.
    """
    n = int(round(spec.duration_s * spec.imu_hz)) + 1
    ts = np.arange(n) / spec.imu_hz
    accel = np.zeros((n, 3))
    gyro = np.zeros((n, 3))
    for i, t in enumerate(ts):
        m = sample_pose(spec, min(t, spec.duration_s))
        R = m.pose.rotation
        accel[i] = R.T @ (m.acceleration + GRAVITY)
        gyro[i] = m.angular_rate_body
    if noise.enabled:
        rng_a = stream_rng(seed, "imu_accel")
        rng_g = stream_rng(seed, "imu_gyro")
        accel += np.asarray(noise.imu.accel_bias) + rng_a.normal(
            scale=noise.imu.accel_noise_density * np.sqrt(spec.imu_hz), size=(n, 3)
        )
        gyro += np.asarray(noise.imu.gyro_bias) + rng_g.normal(
            scale=noise.imu.gyro_noise_density * np.sqrt(spec.imu_hz), size=(n, 3)
        )
    out = np.zeros(n, dtype=[("t_ns", "i8"), ("accel", "f8", 3), ("gyro", "f8", 3)])
    out["t_ns"] = np.rint(ts * 1e9).astype(np.int64)
    out["accel"] = accel
    out["gyro"] = gyro
    return out


def lidar_ray_directions(pattern: LidarPattern) -> tuple[np.ndarray, np.ndarray]:
    """Body-frame unit directions (channels*n, 3) and per-point sweep offsets."""
    half = np.deg2rad(pattern.fov_vertical_deg) / 2.0
    elev = np.linspace(-half, half, pattern.channels)
    az = np.arange(pattern.points_per_channel) / pattern.points_per_channel * 2.0 * np.pi
    ee, aa = np.meshgrid(elev, az, indexing="ij")
    dirs = np.stack(
        [np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1
    ).reshape(-1, 3)
    offsets = np.broadcast_to(
        np.arange(pattern.points_per_channel) / pattern.points_per_channel,
        (pattern.channels, pattern.points_per_channel),
    ).reshape(-1)
    return dirs, offsets


def simulate_lidar(
    scene: SimScene,
    spec: TrajectorySpec,
    t_start: float,
    pattern: LidarPattern,
    noise: NoiseConfig,
    seed: int = 0,
    scan_index: int = 0,
) -> np.ndarray:
    """One sweep: points in the body frame at each point's own capture time.

    Columns are cast from the exact pose at their timestamp, so a moving
    platform produces the real motion distortion that deskewing removes.
    Output: structured array (xyz f4[3], time_offset_s f4).
    """
    sweep = 1.0 / spec.lidar_hz
    dirs_body, frac = lidar_ray_directions(pattern)
    offsets = frac * sweep
    n = len(dirs_body)

    # per-column pose, expanded to per-ray origins and world directions
    taus = np.unique(offsets)
    col_R = np.empty((len(taus), 3, 3))
    col_t = np.empty((len(taus), 3))
    for j, tau in enumerate(taus):
        m = sample_pose(spec, min(t_start + tau, spec.duration_s))
        col_R[j] = m.pose.rotation
        col_t[j] = m.pose.t
    col_of = np.searchsorted(taus, offsets)
    origins = col_t[col_of]
    d_world = np.einsum("nij,nj->ni", col_R[col_of], dirs_body)
    _, pw, _, hit_all = scene.ray_cast(origins, d_world, max_range=pattern.max_range)
    pts_body = np.full((n, 3), np.nan)
    Rh = col_R[col_of[hit_all]]
    pts_body[hit_all] = np.einsum(
        "nij,nj->ni", Rh.transpose(0, 2, 1), pw[hit_all] - origins[hit_all]
    )

    if noise.enabled and np.any(hit_all):
        rng_d = stream_rng(seed, "lidar_range", scan_index)
        rng_b = stream_rng(seed, "lidar_bearing", scan_index)
        idx = np.where(hit_all)[0]
        d = np.linalg.norm(pts_body[idx], axis=1)
        bearings = pts_body[idx] / d[:, None]
        xi_d = rng_d.normal(scale=noise.lidar.sigma_d, size=len(idx))
        xi_r = rng_b.normal(scale=noise.lidar.sigma_r, size=(len(idx), 2))
        B = tangent_bases(bearings)
        w = np.einsum("nij,nj->ni", B, xi_r)
        angle = np.linalg.norm(w, axis=1)
        safe = np.maximum(angle, 1e-300)
        axis = w / safe[:, None]
        ca, sa = np.cos(angle)[:, None], np.sin(angle)[:, None]
        u = bearings * ca + np.cross(axis, bearings) * sa
        u += axis * np.einsum("ni,ni->n", axis, bearings)[:, None] * (1.0 - ca)
        u = np.where(angle[:, None] > 1e-15, u, bearings)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        pts_body[idx] = (d + xi_d)[:, None] * u

    out = np.zeros(int(np.sum(hit_all)), dtype=[("xyz", "f4", 3), ("time_offset_s", "f4")])
    out["xyz"] = pts_body[hit_all].astype(np.float32)
    out["time_offset_s"] = offsets[hit_all].astype(np.float32)
    return out


@functools.lru_cache(maxsize=8)
def _camera_rays(intr: PinholeIntrinsics) -> np.ndarray:
    rays = unproject_grid(intr).reshape(-1, 3)
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def render_visible(scene: SimScene, pose_cam_world: Pose, intr: PinholeIntrinsics) -> np.ndarray:
    """Flat-shaded RGB render (uint8); background pixels are black."""
    rays = _camera_rays(intr)
    R = pose_cam_world.rotation
    d_world = rays @ R.T
    origin = pose_cam_world.t
    _, _, prim_idx, hit = scene.ray_cast(origin[None, :], d_world)
    rgb = scene.albedo_at(np.where(hit, prim_idx, len(scene.primitives)))
    img = np.clip(np.rint(rgb.reshape(intr.height, intr.width, 3) * 255.0), 0, 255).astype(np.uint8)
    return img


def render_thermal(
    scene: SimScene,
    pose_cam_world: Pose,
    intr: PinholeIntrinsics,
    t: float,
    t_min: float,
    t_max: float,
    timestamp_ns: int = 0,
) -> ThermalImage:
    """Per-pixel surface temperature at time t; misses are flagged invalid."""
    rays = _camera_rays(intr)
    R = pose_cam_world.rotation
    d_world = rays @ R.T
    origin = pose_cam_world.t
    _, pts, prim_idx, hit = scene.ray_cast(origin[None, :], d_world)
    temp = scene.temperature_at(pts, np.where(hit, prim_idx, -1), t)
    temp = np.where(hit, temp, t_min)
    return ThermalImage(
        values=temp.reshape(intr.height, intr.width),
        timestamp_ns=timestamp_ns,
        t_min=t_min,
        t_max=t_max,
        valid=hit.reshape(intr.height, intr.width),
    )


# --------------------------------------------------------------------------- #
# Default scenes and camera rig
# --------------------------------------------------------------------------- #

def default_rig(width: int = 640, height: int = 480):
    """(visible intrinsics, thermal intrinsics, T_cam_body) of the standard rig.

    Both cameras share the optical center (unified mount), so thermal-visible
    alignment is an exact pixel homography; the thermal camera has a slightly
    narrower focal to exercise the resampling path.
    """
    intr_vis = PinholeIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=width, height=height)
    intr_th = PinholeIntrinsics(fx=475.0, fy=475.0, cx=320.0, cy=240.0, width=width, height=height)
    t_cam_body = Pose(matrix_to_quat(R_CAM_BODY), np.array([0.05, -0.02, 0.03]))
    return intr_vis, intr_th, t_cam_body


def default_scene() -> SimScene:
    """Two-structure campus stand-in: large hall, thin wall with hotspots, ground."""
    return SimScene(
        primitives=[
            Rect(
                origin=(-15.0, -15.0, 0.0),
                edge_u=(30.0, 0.0, 0.0),
                edge_v=(0.0, 30.0, 0.0),
                albedo=(0.45, 0.45, 0.42),
                base_celsius=21.0,
            ),
            Box(
                lo=(4.0, -3.0, 0.0),
                hi=(14.0, 3.0, 4.0),
                albedo=(0.70, 0.55, 0.45),
                base_celsius=24.0,
            ),
            Box(
                lo=(-6.0, 4.0, 0.0),
                hi=(2.0, 5.0, 5.0),
                albedo=(0.75, 0.70, 0.65),
                base_celsius=23.0,
                hotspots=[
                    Hotspot(center=(-2.0, 4.0, 2.5), radius=0.8, peak_celsius=60.0),
                    Hotspot(center=(0.5, 4.0, 1.5), radius=0.6, peak_celsius=40.0, amplitude=20.0, period_s=60.0),
                ],
            ),
            Box(lo=(-9.0, -6.0, 0.0), hi=(-8.0, -5.0, 2.5), albedo=(0.5, 0.6, 0.5), base_celsius=22.0),
        ]
    )


def calib_scene() -> SimScene:
    """Single box with contrasting faces for edge-based extrinsic calibration."""
    return SimScene(
        primitives=[
            Rect(
                origin=(-5.0, -5.0, -0.6),
                edge_u=(12.0, 0.0, 0.0),
                edge_v=(0.0, 10.0, 0.0),
                albedo=(0.35, 0.35, 0.35),
                base_celsius=21.0,
            ),
            Box(lo=(1.8, -0.7, -0.5), hi=(2.8, 0.7, 0.5), albedo=(0.85, 0.8, 0.75), base_celsius=24.0),
        ]
    )


def default_trajectory(duration_s: float = 60.0) -> TrajectorySpec:
    return TrajectorySpec(
        family="figure8",
        duration_s=duration_s,
        center=(-1.0, 0.0, 1.2),
        amp_x=2.5,
        amp_y=1.5,
        angular_rate=2.0 * np.pi / 20.0,
        yaw_amplitude=0.5,
    )


def hotspot_trajectory(duration_s: float = 12.0) -> TrajectorySpec:
    """Static pose facing the hotspot wall; used for the semantics checks."""
    return TrajectorySpec(
        family="static",
        duration_s=duration_s,
        center=(-2.0, -1.5, 1.5),
        yaw_offset=np.pi / 2,
    )


# --------------------------------------------------------------------------- #
# Sensor log writing / reading
# --------------------------------------------------------------------------- #

THERMAL_HEADER = struct.Struct("<IIq")  # width, height, timestamp_ns


def write_thermal_bin(path: pathlib.Path, img: ThermalImage):
    h, w = img.values.shape
    with open(path, "wb") as f:
        f.write(THERMAL_HEADER.pack(w, h, img.timestamp_ns))
        f.write(img.values.astype("<f4").tobytes())


def read_thermal_bin(path: pathlib.Path, t_min: float, t_max: float) -> ThermalImage:
    data = pathlib.Path(path).read_bytes()
    w, h, ts = THERMAL_HEADER.unpack_from(data)
    values = np.frombuffer(data, dtype="<f4", offset=THERMAL_HEADER.size).reshape(h, w).astype(float)
    return ThermalImage(values=values, timestamp_ns=ts, t_min=t_min, t_max=t_max)


def write_scan_bin(path: pathlib.Path, scan: np.ndarray):
    rec = np.zeros(len(scan), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("time_offset_s", "<f4")])
    rec["x"] = scan["xyz"][:, 0]
    rec["y"] = scan["xyz"][:, 1]
    rec["z"] = scan["xyz"][:, 2]
    rec["time_offset_s"] = scan["time_offset_s"]
    path.write_bytes(rec.tobytes())


def read_scan_bin(path: pathlib.Path) -> np.ndarray:
    raw = np.frombuffer(
        pathlib.Path(path).read_bytes(),
        dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("time_offset_s", "<f4")],
    )
    out = np.zeros(len(raw), dtype=[("xyz", "f4", 3), ("time_offset_s", "f4")])
    out["xyz"] = np.stack([raw["x"], raw["y"], raw["z"]], axis=1)
    out["time_offset_s"] = raw["time_offset_s"]
    return out


def _pose_to_list(pose: Pose) -> list[float]:
    return [float(x) for x in np.concatenate([pose.q, pose.t])]


def _pose_from_list(vals) -> Pose:
    vals = [float(v) for v in vals]
    return Pose(np.array(vals[:4]), np.array(vals[4:7]))


def scene_to_dict(scene: SimScene) -> dict:
    prims = []
    for p in scene.primitives:
        hs = [
            {
                "center": [float(x) for x in h.center],
                "radius": float(h.radius),
                "peak_celsius": float(h.peak_celsius),
                "amplitude": float(h.amplitude),
                "period_s": float(h.period_s),
            }
            for h in p.hotspots
        ]
        if isinstance(p, Box):
            prims.append(
                {
                    "type": "box",
                    "lo": [float(x) for x in p.lo],
                    "hi": [float(x) for x in p.hi],
                    "albedo": [float(x) for x in p.albedo],
                    "base_celsius": float(p.base_celsius),
                    "hotspots": hs,
                }
            )
        else:
            prims.append(
                {
                    "type": "rect",
                    "origin": [float(x) for x in p.origin],
                    "edge_u": [float(x) for x in p.edge_u],
                    "edge_v": [float(x) for x in p.edge_v],
                    "albedo": [float(x) for x in p.albedo],
                    "base_celsius": float(p.base_celsius),
                    "hotspots": hs,
                }
            )
    return {"primitives": prims}


def scene_from_dict(d: dict) -> SimScene:
    prims = []
    for p in d["primitives"]:
        hs = [Hotspot(**h) for h in p.get("hotspots", [])]
        if p["type"] == "box":
            prims.append(Box(lo=p["lo"], hi=p["hi"], albedo=tuple(p["albedo"]), base_celsius=p["base_celsius"], hotspots=hs))
        elif p["type"] == "rect":
            prims.append(
                Rect(
                    origin=p["origin"],
                    edge_u=p["edge_u"],
                    edge_v=p["edge_v"],
                    albedo=tuple(p["albedo"]),
                    base_celsius=p["base_celsius"],
                    hotspots=hs,
                )
            )
        else:
            raise ValueError(f"unknown primitive type {p['type']!r}")
    return SimScene(primitives=prims)


@dataclass
class LogInfo:
    """Parsed calib.yaml of a sensor log."""

    intr_visible: PinholeIntrinsics
    intr_thermal: PinholeIntrinsics
    t_cam_body: Pose
    h_thermal_to_visible: np.ndarray
    sigma_d: float
    sigma_r: float
    imu_accel_density: float
    imu_gyro_density: float
    t_min: float
    t_max: float
    imu_hz: float
    lidar_hz: float
    camera_hz: float
    sweep_s: float
    seed: int
    noise_enabled: bool


def write_log(
    scene: SimScene,
    spec: TrajectorySpec,
    noise: NoiseConfig,
    seed: int,
    out_dir,
    pattern: LidarPattern | None = None,
    t_min: float = 15.0,
    t_max: float = 70.0,
    write_hot_masks: bool = False,
    hot_threshold_celsius: float | None = None,
) -> pathlib.Path:
    """Produce a complete, self-describing sensor log with ground truth."""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scans").mkdir(exist_ok=True)
    pattern = pattern or LidarPattern()
    intr_vis, intr_th, t_cam_body = default_rig()
    t_body_cam = t_cam_body.inverse()

    # imu.csv
    imu = simulate_imu(spec, noise, seed)
    with open(out / "imu.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["timestamp_ns", "ax", "ay", "az", "gx", "gy", "gz"])
        for row in imu:
            wr.writerow(
                [int(row["t_ns"])]
                + [f"{v:.9f}" for v in row["accel"]]
                + [f"{v:.9f}" for v in row["gyro"]]
            )

    # scans + ground truth at scan ends
    sweep = 1.0 / spec.lidar_hz
    n_scans = int(np.floor(spec.duration_s * spec.lidar_hz + 1e-9))
    gt_rows = []
    m0 = sample_pose(spec, 0.0)
    gt_rows.append((0, m0.pose))
    for k in range(n_scans):
        t_start = k * sweep
        scan = simulate_lidar(scene, spec, t_start, pattern, noise, seed, scan_index=k)
        t_ns = int(round(t_start * 1e9))
        write_scan_bin(out / "scans" / f"{t_ns:019d}.bin", scan)
        t_end = t_start + sweep
        m = sample_pose(spec, min(t_end, spec.duration_s))
        gt_rows.append((int(round(t_end * 1e9)), m.pose))
    with open(out / "groundtruth.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["timestamp_ns", "px", "py", "pz", "qw", "qx", "qy", "qz"])
        for t_ns, pose in gt_rows:
            wr.writerow([t_ns] + [f"{v:.9f}" for v in pose.t] + [f"{v:.12f}" for v in pose.q])

    # camera frames
    h_t2v = intr_vis.K @ np.linalg.inv(intr_th.K)  # co-located rig, identity rotation
    if spec.camera_hz > 0:
        (out / "visible").mkdir(exist_ok=True)
        (out / "thermal").mkdir(exist_ok=True)
        if write_hot_masks:
            (out / "gt_hotmask").mkdir(exist_ok=True)
        n_frames = int(np.floor(spec.duration_s * spec.camera_hz + 1e-9))
        for j in range(1, n_frames + 1):
            t = j / spec.camera_hz
            t_ns = int(round(t * 1e9))
            m = sample_pose(spec, min(t, spec.duration_s))
            cam_pose = m.pose.compose(t_body_cam)
            vis_img = render_visible(scene, cam_pose, intr_vis)
            Image.fromarray(vis_img).save(out / "visible" / f"{t_ns:019d}.png")
            th_img = render_thermal(scene, cam_pose, intr_th, t, t_min, t_max, timestamp_ns=t_ns)
            write_thermal_bin(out / "thermal" / f"{t_ns:019d}.bin", th_img)
            if write_hot_masks:
                thr = hot_threshold_celsius
                if thr is None:
                    thr = t_min + 0.5 * (t_max - t_min)
                mask = ((th_img.values >= thr) & th_img.valid_mask()).astype(np.uint8) * 255
                # ground-truth mask in the visible frame (rig is co-located)
                reg = register_thermal(
                    ThermalImage(mask.astype(float), t_ns, 0.0, 255.0, valid=th_img.valid_mask()),
                    h_t2v,
                    out_shape=(intr_vis.height, intr_vis.width),
                )
                out_mask = ((reg.values >= 127.5) & reg.valid).astype(np.uint8) * 255
                Image.fromarray(out_mask).save(out / "gt_hotmask" / f"{t_ns:019d}.png")

    calib = {
        "schema_version": 1,
        "intrinsics": {
            "visible": {
                "fx": intr_vis.fx, "fy": intr_vis.fy, "cx": intr_vis.cx, "cy": intr_vis.cy,
                "width": intr_vis.width, "height": intr_vis.height,
                "distortion": list(intr_vis.distortion),
            },
            "thermal": {
                "fx": intr_th.fx, "fy": intr_th.fy, "cx": intr_th.cx, "cy": intr_th.cy,
                "width": intr_th.width, "height": intr_th.height,
                "distortion": list(intr_th.distortion),
            },
        },
        "extrinsics": {
            "t_cam_body": _pose_to_list(t_cam_body),
            "h_thermal_to_visible": [[float(v) for v in row] for row in h_t2v],
        },
        "noise": {
            "enabled": bool(noise.enabled),
            "sigma_d": float(noise.lidar.sigma_d),
            "sigma_r": float(noise.lidar.sigma_r),
            "imu_accel_density": float(noise.imu.accel_noise_density),
            "imu_gyro_density": float(noise.imu.gyro_noise_density),
        },
        "thermal_bounds": {"t_min": float(t_min), "t_max": float(t_max)},
        "rates": {
            "imu_hz": float(spec.imu_hz),
            "lidar_hz": float(spec.lidar_hz),
            "camera_hz": float(spec.camera_hz),
            "sweep_s": float(sweep),
        },
        "seed": int(seed),
    }
    with open(out / "calib.yaml", "w") as f:
        yaml.safe_dump(calib, f, sort_keys=True)
    with open(out / "scene.yaml", "w") as f:
        yaml.safe_dump(scene_to_dict(scene), f, sort_keys=True)
    return out


class SensorLog:
    """Reader for the log directory format produced by write_log."""

    def __init__(self, root):
        self.root = pathlib.Path(root)
        if not (self.root / "calib.yaml").exists():
            raise FileNotFoundError(f"{self.root} is not a sensor log (calib.yaml missing)")
        with open(self.root / "calib.yaml") as f:
            c = yaml.safe_load(f)
        iv = c["intrinsics"]["visible"]
        it = c["intrinsics"]["thermal"]
        self.info = LogInfo(
            intr_visible=PinholeIntrinsics(
                fx=iv["fx"], fy=iv["fy"], cx=iv["cx"], cy=iv["cy"],
                width=iv["width"], height=iv["height"], distortion=tuple(iv["distortion"]),
            ),
            intr_thermal=PinholeIntrinsics(
                fx=it["fx"], fy=it["fy"], cx=it["cx"], cy=it["cy"],
                width=it["width"], height=it["height"], distortion=tuple(it["distortion"]),
            ),
            t_cam_body=_pose_from_list(c["extrinsics"]["t_cam_body"]),
            h_thermal_to_visible=np.array(c["extrinsics"]["h_thermal_to_visible"], dtype=float),
            sigma_d=c["noise"]["sigma_d"],
            sigma_r=c["noise"]["sigma_r"],
            imu_accel_density=c["noise"]["imu_accel_density"],
            imu_gyro_density=c["noise"]["imu_gyro_density"],
            t_min=c["thermal_bounds"]["t_min"],
            t_max=c["thermal_bounds"]["t_max"],
            imu_hz=c["rates"]["imu_hz"],
            lidar_hz=c["rates"]["lidar_hz"],
            camera_hz=c["rates"]["camera_hz"],
            sweep_s=c["rates"]["sweep_s"],
            seed=c["seed"],
            noise_enabled=c["noise"]["enabled"],
        )

    def imu(self) -> np.ndarray:
        rows = np.genfromtxt(self.root / "imu.csv", delimiter=",", names=True)
        n = len(rows)
        out = np.zeros(n, dtype=[("t_ns", "i8"), ("accel", "f8", 3), ("gyro", "f8", 3)])
        out["t_ns"] = rows["timestamp_ns"].astype(np.int64)
        out["accel"] = np.stack([rows["ax"], rows["ay"], rows["az"]], axis=1)
        out["gyro"] = np.stack([rows["gx"], rows["gy"], rows["gz"]], axis=1)
        return out

    def scan_files(self) -> list[pathlib.Path]:
        return sorted((self.root / "scans").glob("*.bin"))

    def scan_timestamps_ns(self) -> np.ndarray:
        return np.array([int(p.stem) for p in self.scan_files()], dtype=np.int64)

    def read_scan(self, path) -> np.ndarray:
        return read_scan_bin(path)

    def visible_files(self) -> list[pathlib.Path]:
        d = self.root / "visible"
        return sorted(d.glob("*.png")) if d.exists() else []

    def thermal_files(self) -> list[pathlib.Path]:
        d = self.root / "thermal"
        return sorted(d.glob("*.bin")) if d.exists() else []

    def read_visible(self, path) -> np.ndarray:
        return np.asarray(Image.open(path).convert("RGB"))

    def read_thermal(self, path) -> ThermalImage:
        return read_thermal_bin(path, self.info.t_min, self.info.t_max)

    def groundtruth(self) -> np.ndarray:
        rows = np.genfromtxt(self.root / "groundtruth.csv", delimiter=",", names=True)
        rows = np.atleast_1d(rows)
        n = len(rows)
        out = np.zeros(n, dtype=[("t_ns", "i8"), ("p", "f8", 3), ("q", "f8", 4)])
        out["t_ns"] = rows["timestamp_ns"].astype(np.int64)
        out["p"] = np.stack([rows["px"], rows["py"], rows["pz"]], axis=1)
        out["q"] = np.stack([rows["qw"], rows["qx"], rows["qy"], rows["qz"]], axis=1)
        return out

    def scene(self) -> SimScene:
        with open(self.root / "scene.yaml") as f:
            return scene_from_dict(yaml.safe_load(f))


def make_zhang_views(
    intr: PinholeIntrinsics,
    n_views: int = 8,
    corner_noise_px: float = 0.0,
    seed: int = 0,
    nx: int = 12,
    ny: int = 9,
    spacing: float = 0.03,
):
    """Well-conditioned synthetic planar-target views for intrinsic calibration."""
    from .calibration import PlanarView
    from .geometry import so3_exp

    obj = np.array([[i * spacing, j * spacing] for j in range(ny) for i in range(nx)])
    center = np.array([obj[:, 0].mean(), obj[:, 1].mean(), 0.0])
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=int(seed), spawn_key=(9,))))
    views = []
    for i in range(n_views):
        phase = 2 * np.pi * i / n_views + rng.uniform(-0.3, 0.3)
        axis = np.array([np.cos(phase), np.sin(phase), 0.0])
        rv = axis * rng.uniform(0.45, 0.7) + np.array([0, 0, rng.uniform(-0.5, 0.5)])
        R = so3_exp(rv)
        tv = -R @ center + np.array(
            [rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03), rng.uniform(0.28, 0.45)]
        )
        pc = np.hstack([obj, np.zeros((len(obj), 1))]) @ R.T + tv
        uv = np.stack(
            [intr.fx * pc[:, 0] / pc[:, 2] + intr.cx, intr.fy * pc[:, 1] / pc[:, 2] + intr.cy],
            axis=1,
        )
        if corner_noise_px:
            uv = uv + rng.normal(scale=corner_noise_px, size=uv.shape)
        views.append(PlanarView(obj, uv))
    return views

