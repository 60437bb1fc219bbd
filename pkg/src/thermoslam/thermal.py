"""Thermal-visible image fusion.

Per-frame flow: normalize the temperature raster, compute a dynamic hot
threshold from the frame statistics, segment hot regions, temporally smooth
both the normalized raster and the hot mask, then blend a colormapped thermal
layer over the visible image with the smoothed mask as per-pixel weight.

Frame statistics (mu, sigma) are taken in degrees C over valid pixels of the
whole frame, which keeps the threshold deterministic for a given frame.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy import ndimage

from .geometry import PinholeIntrinsics, Pose

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class ThermalImage:
    """Calibrated temperature raster in degrees C plus normalization bounds."""

    values: np.ndarray  # (H, W) float, degrees C
    timestamp_ns: int
    t_min: float
    t_max: float
    valid: np.ndarray | None = None  # bool mask; None means all valid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.t_max <= self.t_min:
            raise ValueError("t_max must exceed t_min")
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.values.shape:
                raise ValueError("valid mask shape mismatch")

    def valid_mask(self) -> np.ndarray:
        finite = np.isfinite(self.values)
        return finite if self.valid is None else (finite & self.valid)


@dataclass(frozen=True)
class ThermalStats:
    """Frame statistics in degrees C driving the dynamic threshold."""

    mu: float
    sigma: float
    k_sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


@dataclass
class HotComponent:
    label: int
    pixel_count: int
    bbox: tuple[int, int, int, int]  # (row0, col0, row1, col1), half-open
    peak_celsius: float
    centroid: tuple[float, float]  # (u, v) = (col, row)


@dataclass
class HotMask:
    weights: np.ndarray  # (H, W) float in [0, 1]
    components: list[HotComponent] = field(default_factory=list)
    labels: np.ndarray | None = None


@dataclass
class FusedImage:
    rgb: np.ndarray  # (H, W, 3)
    weight: np.ndarray  # (H, W) float in [0, 1]
    thermal_timestamp_ns: int = 0
    visible_timestamp_ns: int = 0


def normalize(thermal: ThermalImage) -> np.ndarray:
    """Map degrees C to [0, 1] between the configured bounds, clipped."""
    span = thermal.t_max - thermal.t_min
    return np.clip((thermal.values - thermal.t_min) / span, 0.0, 1.0)


def frame_stats(thermal: ThermalImage, k_sigma: float) -> ThermalStats:
    mask = thermal.valid_mask()
    if not np.any(mask):
        return ThermalStats(mu=thermal.t_min, sigma=0.0, k_sigma=k_sigma)
    vals = thermal.values[mask]
    return ThermalStats(mu=float(np.mean(vals)), sigma=float(np.std(vals)), k_sigma=k_sigma)


def adaptive_threshold(stats: ThermalStats, t_min: float, t_max: float) -> float:
    """Dynamic hot threshold: clip((mu + k*sigma - t_min) / (t_max - t_min), 0, 1)."""
    if t_max <= t_min:
        raise ValueError("t_max must exceed t_min")
    raw = (stats.mu + stats.k_sigma * stats.sigma - t_min) / (t_max - t_min)
    return float(np.clip(raw, 0.0, 1.0))


def segment_hot(
    normalized: np.ndarray,
    threshold: float,
    *,
    celsius: np.ndarray | None = None,
    valid: np.ndarray | None = None,
) -> HotMask:
    """Threshold the normalized raster and label 8-connected hot components."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    mask = normalized >= threshold
    if valid is not None:
        mask &= valid
    labels, count = ndimage.label(mask, structure=EIGHT_CONNECTED)
    components: list[HotComponent] = []
    if count:
        slices = ndimage.find_objects(labels)
        centroids = ndimage.center_of_mass(mask, labels, index=range(1, count + 1))
        for lab in range(1, count + 1):
            sl = slices[lab - 1]
            comp = labels[sl] == lab
            if celsius is not None:
                peak = float(np.max(celsius[sl][comp]))
            else:
                peak = float("nan")
            row_c, col_c = centroids[lab - 1]
            components.append(
                HotComponent(
                    label=lab,
                    pixel_count=int(np.sum(comp)),
                    bbox=(sl[0].start, sl[1].start, sl[0].stop, sl[1].stop),
                    peak_celsius=peak,
                    centroid=(float(col_c), float(row_c)),
                )
            )
    return HotMask(weights=mask.astype(float), components=components, labels=labels)


def temporal_smooth(current: np.ndarray, previous: np.ndarray | None, alpha: float) -> np.ndarray:
    """Exponential blend: alpha*current + (1-alpha)*previous; pass-through on frame 1."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if previous is None:
        return np.array(current, dtype=float, copy=True)
    current = np.asarray(current, dtype=float)
    previous = np.asarray(previous, dtype=float)
    if current.shape != previous.shape:
        raise ValueError("raster shape mismatch")
    return alpha * current + (1.0 - alpha) * previous


class TemporalSmoother:
    """Owns the previous smoothed raster of one stream; not thread-safe."""

    def __init__(self, alpha: float):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        self.alpha = alpha
        self._previous: np.ndarray | None = None

    def update(self, current: np.ndarray) -> np.ndarray:
        smoothed = temporal_smooth(current, self._previous, self.alpha)
        self._previous = smoothed
        return smoothed

    def reset(self):
        self._previous = None


def fuse(thermal_rgb: np.ndarray, visible: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted per-pixel blend: w*thermal + (1-w)*visible, channelwise."""
    thermal_rgb = np.asarray(thermal_rgb)
    visible = np.asarray(visible)
    if thermal_rgb.shape != visible.shape:
        raise ValueError("raster shape mismatch")
    w = np.asarray(w, dtype=float)
    if w.shape != thermal_rgb.shape[:2]:
        raise ValueError("weight raster shape mismatch")
    wc = w[..., None] if thermal_rgb.ndim == 3 else w
    out = wc * thermal_rgb.astype(float) + (1.0 - wc) * visible.astype(float)
    if thermal_rgb.dtype == np.uint8 and visible.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


# --------------------------------------------------------------------------- #
# Geometric alignment
# --------------------------------------------------------------------------- #

def homography_from_pose(
    pose_thermal_to_visible: Pose,
    intr_thermal: PinholeIntrinsics,
    intr_visible: PinholeIntrinsics,
) -> np.ndarray:
    """Pixel homography for a co-located (rotation-only) thermal/visible pair."""
    if np.linalg.norm(pose_thermal_to_visible.t) > 1e-6:
        raise ValueError("pose-pair alignment requires co-located cameras (zero baseline)")
    R = pose_thermal_to_visible.rotation
    return intr_visible.K @ R @ np.linalg.inv(intr_thermal.K)


def bilinear_sample(
    raster: np.ndarray, uv: np.ndarray, valid: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear lookup of (N,2) pixel coords; returns (values, ok mask).

    A sample is ok only when its four neighbors are inside the raster and,
    if a validity mask is given, all four are valid.
    """
    uv = np.asarray(uv, dtype=float)
    h, w = raster.shape[:2]
    u, v = uv[:, 0], uv[:, 1]
    with np.errstate(invalid="ignore"):
        ok = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    ok &= np.isfinite(u) & np.isfinite(v)
    u0c = np.clip(np.floor(np.nan_to_num(u)).astype(int), 0, w - 2)
    v0c = np.clip(np.floor(np.nan_to_num(v)).astype(int), 0, h - 2)
    fu = u - u0c
    fv = v - v0c
    w00 = (1 - fu) * (1 - fv)
    w10 = fu * (1 - fv)
    w01 = (1 - fu) * fv
    w11 = fu * fv
    if raster.ndim == 3:
        wex = lambda x: x[:, None]  # noqa: E731
    else:
        wex = lambda x: x  # noqa: E731
    vals = (
        wex(w00) * raster[v0c, u0c]
        + wex(w10) * raster[v0c, u0c + 1]
        + wex(w01) * raster[v0c + 1, u0c]
        + wex(w11) * raster[v0c + 1, u0c + 1]
    )
    if valid is not None:
        ok &= valid[v0c, u0c] & valid[v0c, u0c + 1] & valid[v0c + 1, u0c] & valid[v0c + 1, u0c + 1]
    return vals, ok


def register_thermal(
    thermal: ThermalImage,
    h_thermal_to_visible: np.ndarray,
    out_shape: tuple[int, int] | None = None,
) -> ThermalImage:
    """Resample the thermal raster into the visible pixel grid.

    Output pixels whose source falls outside the thermal frame (or touches
    invalid pixels) are flagged invalid and excluded from later statistics.
    """
    H = np.asarray(h_thermal_to_visible, dtype=float)
    if H.shape != (3, 3) or abs(np.linalg.det(H)) < 1e-12:
        raise ValueError("homography must be an invertible 3x3 matrix")
    if out_shape is None:
        out_shape = thermal.values.shape
    rows, cols = out_shape
    Hinv = np.linalg.inv(H)
    uu, vv = np.meshgrid(np.arange(cols, dtype=float), np.arange(rows, dtype=float))
    ones = np.ones_like(uu)
    src = Hinv @ np.stack([uu.ravel(), vv.ravel(), ones.ravel()])
    src_uv = (src[:2] / src[2]).T
    vals, ok = bilinear_sample(thermal.values, src_uv, valid=thermal.valid)
    values = np.where(ok, vals, thermal.t_min).reshape(rows, cols)
    return ThermalImage(
        values=values,
        timestamp_ns=thermal.timestamp_ns,
        t_min=thermal.t_min,
        t_max=thermal.t_max,
        valid=ok.reshape(rows, cols),
    )


# --------------------------------------------------------------------------- #
# Colormap and the per-stream pipeline
# --------------------------------------------------------------------------- #

def iron_colormap() -> np.ndarray:
    """The bundled 256x3 uint8 lookup table for thermal false color."""
    ref = resources.files("thermoslam").joinpath("data/iron_colormap.csv")
    with ref.open("r") as f:
        rows = list(csv.DictReader(f))
    table = np.array([[int(r["r"]), int(r["g"]), int(r["b"])] for r in rows], dtype=np.uint8)
    if table.shape != (256, 3):
        raise ValueError("iron colormap file is corrupt")
    return table


def apply_colormap(normalized: np.ndarray, lut: np.ndarray) -> np.ndarray:
    """Index the LUT with the normalized raster; returns (H, W, 3) uint8."""
    idx = np.clip(np.rint(np.asarray(normalized) * 255.0), 0, 255).astype(np.uint8)
    return lut[idx]


class FusionPipeline:
    """Stateful per-stream fusion: one instance per thermal/visible stream.

    Order per frame: normalize -> threshold (Eq. stats of this frame) ->
    segment -> smooth normalized raster and mask -> colormap -> blend.
    """

    def __init__(
        self,
        k_sigma: float = 2.0,
        alpha: float = 0.7,
        colormap: np.ndarray | None = None,
        compute_components: bool = True,
    ):
        self.k_sigma = k_sigma
        self.alpha = alpha
        self.lut = iron_colormap() if colormap is None else colormap
        self.compute_components = compute_components
        self._mask_smoother = TemporalSmoother(alpha)
        self._raster_smoother = TemporalSmoother(alpha)

    def process(
        self,
        thermal: ThermalImage,
        visible: np.ndarray,
        visible_timestamp_ns: int = 0,
    ) -> tuple[FusedImage, HotMask, float]:
        """Fuse one aligned frame pair; returns (fused, hot mask, threshold)."""
        norm = normalize(thermal)
        stats = frame_stats(thermal, self.k_sigma)
        threshold = adaptive_threshold(stats, thermal.t_min, thermal.t_max)
        valid = thermal.valid_mask()
        if self.compute_components:
            hot = segment_hot(norm, threshold, celsius=thermal.values, valid=valid)
        else:
            # mask only; skips the labeling cost on the odometry path
            mask = (norm >= threshold) & valid
            hot = HotMask(weights=mask.astype(float))
        smoothed_norm = self._raster_smoother.update(norm)
        weight = np.clip(self._mask_smoother.update(hot.weights), 0.0, 1.0)
        thermal_rgb = apply_colormap(smoothed_norm, self.lut).astype(float)
        visible = np.asarray(visible, dtype=float)
        fused_rgb = fuse(thermal_rgb, visible, weight)
        fused = FusedImage(
            rgb=fused_rgb,
            weight=weight,
            thermal_timestamp_ns=thermal.timestamp_ns,
            visible_timestamp_ns=visible_timestamp_ns,
        )
        return fused, hot, threshold

    def reset(self):
        self._mask_smoother.reset()
        self._raster_smoother.reset()
