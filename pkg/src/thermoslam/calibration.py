"""Intrinsic and targetless LiDAR-camera extrinsic calibration.

Extrinsics are estimated by aligning LiDAR edge points with image edges:
image edges are rasterized into a distance field once per image, and a
Levenberg-Marquardt loop minimizes the weighted squared pixel distance of
projected LiDAR edge points to the nearest image edge. Per-point weights are
the inverse of the range/bearing noise propagated into pixel variance.

Intrinsic calibration follows the classic planar-target recipe: per-view
homographies, a closed-form intrinsics initialization from the homography
constraints, then bundle refinement of the reprojection error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize
from scipy.spatial import cKDTree

from .geometry import (
    PinholeIntrinsics,
    Pose,
    matrix_to_quat,
    project_points,
    projection_jacobian,
    projection_jacobians,
    skew,
    so3_exp,
    so3_right_jacobian,
)

UNSTRUCTURED, EDGE, PLANAR = 0, 1, 2

class InsufficientSupportError(ValueError):
    """Not enough points/correspondences to evaluate the operation."""

class DegenerateViewsError(ValueError):
    """View configuration does not constrain the intrinsics."""

# --------------------------------------------------------------------------- #
# Neighborhood covariance and feature classification
# --------------------------------------------------------------------------- #

@dataclass
class NeighborhoodCovariance:
    C: np.ndarray  # 3x3, m^2
    k_neighbors: int
    centroid: np.ndarray
    eigenvalues: np.ndarray  # descending (l1 >= l2 >= l3)
    principal_direction: np.ndarray  # unit vector of l1

def covariance_from_neighbors(neighbors: np.ndarray) -> NeighborhoodCovariance:
    """Mean-centered second moment C = (1/k) sum e_j e_j^T of the neighbor set."""
    neighbors = np.asarray(neighbors, dtype=float)
    k = neighbors.shape[0]
    if k < 1:
        raise InsufficientSupportError("need at least one neighbor")
    centroid = neighbors.mean(axis=0)
    e = neighbors - centroid
    C = (e.T @ e) / k
    C = 0.5 * (C + C.T)
    w, V = np.linalg.eigh(C)  # ascending
    order = np.argsort(w)[::-1]
    return NeighborhoodCovariance(
        C=C,
        k_neighbors=k,
        centroid=centroid,
        eigenvalues=w[order],
        principal_direction=V[:, order[0]],
    )

def neighborhood_covariance(points: np.ndarray, query_index: int, k: int) -> NeighborhoodCovariance:
    """Covariance of the k nearest neighbors of one point (query excluded)."""
    points = np.asarray(points, dtype=float)
    if k < 3:
        raise ValueError("k must be at least 3")
    if len(points) < k + 1:
        raise InsufficientSupportError(f"need at least {k + 1} points, have {len(points)}")
    tree = cKDTree(points)
    _, idx = tree.query(points[query_index], k=k + 1)
    idx = np.atleast_1d(idx)
    neighbors = points[idx[idx != query_index][:k]]
    return covariance_from_neighbors(neighbors)

@dataclass
class FeatureClassification:
    labels: np.ndarray  # (N,) int: 0 unstructured, 1 edge, 2 planar
    eigenvalues: np.ndarray  # (N, 3) descending
    principal_directions: np.ndarray  # (N, 3)
    centroids: np.ndarray  # (N, 3)

    @property
    def edge_indices(self) -> np.ndarray:
        return np.where(self.labels == EDGE)[0]

    @property
    def planar_indices(self) -> np.ndarray:
        return np.where(self.labels == PLANAR)[0]

def classify_features(
    scan: np.ndarray,
    k: int = 20,
    edge_ratio: float = 10.0,
    plane_ratio: float = 8.0,
    lambda3_max: float | None = None,
    sigma_d: float = 0.02,
) -> FeatureClassification:
    """Label each point edge/planar/unstructured from its neighborhood shape.

    Edge: l1/l2 >= edge_ratio. Planar: l2/l3 >= plane_ratio and l3 below
    lambda3_max (default (3 sigma_d)^2). Neighborhoods too small or with zero
    spread are unstructured.
    """
    scan = np.asarray(scan, dtype=float)
    if scan.size == 0:
        raise ValueError("scan must be non-empty")
    n = scan.shape[0]
    if lambda3_max is None:
        lambda3_max = (3.0 * sigma_d) ** 2
    labels = np.zeros(n, dtype=np.int8)
    if n <= k:
        return FeatureClassification(labels, np.zeros((n, 3)), np.zeros((n, 3)), scan.copy())

    tree = cKDTree(scan)
    _, idx = tree.query(scan, k=k + 1)
    neigh = scan[idx[:, 1:]]  # (N, k, 3), self excluded
    centroids = neigh.mean(axis=1)
    e = neigh - centroids[:, None, :]
    C = np.einsum("nki,nkj->nij", e, e) / k
    evals, evecs = np.linalg.eigh(C)  # ascending
    l1, l2, l3 = evals[:, 2], evals[:, 1], evals[:, 0]
    principal = evecs[:, :, 2]

    tiny = 1e-18
    degenerate = l1 <= tiny
    with np.errstate(divide="ignore", invalid="ignore"):
        r_edge = np.where(l2 > tiny, l1 / np.maximum(l2, tiny), np.inf)
        r_plane = np.where(l3 > tiny, l2 / np.maximum(l3, tiny), np.inf)
    is_edge = (r_edge >= edge_ratio) & ~degenerate
    is_plane = (r_plane >= plane_ratio) & (l3 < lambda3_max) & ~is_edge & ~degenerate & (l2 > tiny)
    labels[is_edge] = EDGE
    labels[is_plane] = PLANAR
    return FeatureClassification(
        labels=labels,
        eigenvalues=evals[:, ::-1],
        principal_directions=principal,
        centroids=centroids,
    )

# --------------------------------------------------------------------------- #
# Range/bearing noise model
# --------------------------------------------------------------------------- #

def tangent_basis(bearing: np.ndarray) -> np.ndarray:
    """3x2 orthonormal basis of the plane perpendicular to a unit bearing.

    Built by Gram-Schmidt against the coordinate axis least aligned with the
    bearing, so the basis is deterministic for a given bearing.
    """
    r = np.asarray(bearing, dtype=float)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(r)))] = 1.0
    b1 = axis - np.dot(axis, r) * r
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(r, b1)
    return np.stack([b1, b2], axis=1)

@dataclass
class LidarNoiseModel:
    """Ranging/bearing noise scales; perturbations act via the tangent basis."""

    sigma_d: float = 0.02  # m
    sigma_r: float = 0.001  # rad

    def point_covariance(self, d: float, bearing: np.ndarray) -> np.ndarray:
        """3x3 covariance of a measured point at range d along the bearing."""
        B = tangent_basis(bearing)
        r = np.asarray(bearing, dtype=float)
        return self.sigma_d**2 * np.outer(r, r) + (d * self.sigma_r) ** 2 * (B @ B.T)

    def inverse_variance(self, d: float) -> float:
        """Scalar information of one point (inverse trace of the 3D covariance)."""
        return 1.0 / (self.sigma_d**2 + 2.0 * (d * self.sigma_r) ** 2)

def apply_noise(d_hat: float, bearing: np.ndarray, xi_d: float, xi_r: np.ndarray) -> np.ndarray:
    """Perturbed point (d_hat + xi_d) * Exp([B xi_r]x) r_hat.

    The bearing rotation axis lies in the tangent plane, so the output range
    is exactly d_hat + xi_d; the returned direction is renormalized to keep
    that exact in floating point.
    """
    r = np.asarray(bearing, dtype=float)
    xi_r = np.asarray(xi_r, dtype=float)
    B = tangent_basis(r)
    w = B @ xi_r
    u = so3_exp(w) @ r
    u /= np.linalg.norm(u)
    return (d_hat + xi_d) * u

def apply_noise_jacobian(d_hat: float, bearing: np.ndarray, xi_d: float, xi_r: np.ndarray) -> np.ndarray:
    """3x3 Jacobian of apply_noise w.r.t. (xi_d, xi_r[0], xi_r[1])."""
    r = np.asarray(bearing, dtype=float)
    xi_r = np.asarray(xi_r, dtype=float)
    B = tangent_basis(r)
    w = B @ xi_r
    R = so3_exp(w)
    u = R @ r
    J = np.zeros((3, 3))
    J[:, 0] = u
    # d(Exp(w) r)/dw = -Exp(w) [r]x Jr(w), chained with dw/dxi_r = B
    J[:, 1:] = -(d_hat + xi_d) * (R @ skew(r) @ so3_right_jacobian(w) @ B)
    return J

@dataclass
class EdgeFeature:
    """One LiDAR edge point with its local line direction and information weight."""

    origin: np.ndarray  # m
    direction: np.ndarray  # unit
    support: int
    weight: float  # inverse variance, 1/m^2

def edge_features_from_scan(
    scan: np.ndarray,
    classification: FeatureClassification,
    noise: LidarNoiseModel,
    k: int = 20,
) -> list[EdgeFeature]:
    scan = np.asarray(scan, dtype=float)
    feats = []
    for i in classification.edge_indices:
        p = scan[i]
        d = float(np.linalg.norm(p))
        feats.append(
            EdgeFeature(
                origin=p,
                direction=classification.principal_directions[i],
                support=k,
                weight=noise.inverse_variance(d),
            )
        )
    return feats

# --------------------------------------------------------------------------- #
# Image edges and the edge distance field
# --------------------------------------------------------------------------- #

def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu's between-class variance maximizer over a 1-D sample."""
    values = np.asarray(values, dtype=float).ravel()
    vmax = float(values.max())
    if vmax <= 0:
        return np.inf
    hist, edges = np.histogram(values, bins=bins, range=(0.0, vmax))
    hist = hist.astype(float)
    centers = 0.5 * (edges[:-1] + edges[1:])
    weight1 = np.cumsum(hist)
    weight2 = weight1[-1] - weight1
    csum = np.cumsum(hist * centers)
    mean1 = np.divide(csum, weight1, out=np.zeros_like(csum), where=weight1 > 0)
    mean2 = np.divide(csum[-1] - csum, weight2, out=np.zeros_like(csum), where=weight2 > 0)
    between = weight1 * weight2 * (mean1 - mean2) ** 2
    return float(centers[int(np.argmax(between))])

@dataclass
class EdgePixels:
    uv: np.ndarray  # (N, 2) float, (u, v)
    gradient: np.ndarray  # (N, 2) unit gradient direction
    magnitude: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.uv)

def extract_image_edges(image: np.ndarray) -> EdgePixels:
    """Sobel gradient, Otsu threshold on magnitudes, gradient-direction thinning."""
    img = np.asarray(image, dtype=float)
    if img.size == 0:
        raise ValueError("image must be non-empty")
    if img.ndim == 3:
        img = img.mean(axis=2)
    gx = ndimage.sobel(img, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(img, axis=0, mode="nearest") / 8.0
    mag = np.hypot(gx, gy)
    thresh = otsu_threshold(mag)
    strong = mag > thresh
    if not np.isfinite(thresh) or not strong.any():
        return EdgePixels(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))

    # quantized non-maximum suppression along the gradient direction
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    sector = ((angle + np.pi / 8) // (np.pi / 4)).astype(int) % 4
    offsets = {0: (0, 1), 1: (-1, 1), 2: (-1, 0), 3: (-1, -1)}  # (dv, du) per sector
    keep = np.zeros_like(strong)
    padded = np.pad(mag, 1, mode="constant")
    for s, (dv, du) in offsets.items():
        sel = strong & (sector == s)
        if not sel.any():
            continue
        v, u = np.nonzero(sel)
        ahead = padded[v + 1 + dv, u + 1 + du]
        behind = padded[v + 1 - dv, u + 1 - du]
        m = mag[v, u]
        ok = (m > behind) & (m >= ahead)
        keep[v[ok], u[ok]] = True

    v, u = np.nonzero(keep)
    g = np.stack([gx[v, u], gy[v, u]], axis=1)
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return EdgePixels(
        uv=np.stack([u, v], axis=1).astype(float),
        gradient=g,
        magnitude=mag[v, u],
    )

class EdgeTargetField:
    """Nearest-image-edge association built from a distance transform.

    Each edge pixel carries a locally fitted line (anchor + tangent) from a
    small neighborhood, which gives sub-pixel alignment targets; pixels whose
    neighborhood is not line-like (corners, crossings) are flagged unusable.
    The distance transform's index map answers nearest-edge queries in O(1).
    """

    def __init__(self, edges: EdgePixels | np.ndarray, shape: tuple[int, int], fit_radius: float = 5.0):
        uv = edges.uv if isinstance(edges, EdgePixels) else np.asarray(edges, dtype=float)
        if len(uv) == 0:
            raise InsufficientSupportError("no image edges to build an edge field")
        h, w = shape
        self.shape = (h, w)
        iu = np.clip(np.rint(uv[:, 0]).astype(int), 0, w - 1)
        iv = np.clip(np.rint(uv[:, 1]).astype(int), 0, h - 1)
        grid = np.ones((h, w), dtype=bool)
        grid[iv, iu] = False
        dist, inds = ndimage.distance_transform_edt(grid, return_indices=True)
        self.dist = dist
        pix = np.unique(np.stack([iu, iv], axis=1), axis=0).astype(float)
        tree = cKDTree(pix)
        self.anchors = np.zeros((len(pix), 2))
        self.tangents = np.zeros((len(pix), 2))
        self.line_ok = np.zeros(len(pix), dtype=bool)
        for i, p in enumerate(pix):
            nb = pix[tree.query_ball_point(p, fit_radius)]
            mu = nb.mean(axis=0)
            e = nb - mu
            evals, vecs = np.linalg.eigh(e.T @ e)
            self.anchors[i] = mu
            self.tangents[i] = vecs[:, -1]
            self.line_ok[i] = len(nb) >= 5 and evals[1] > 25.0 * max(evals[0], 1e-12)
        rowmap = -np.ones((h, w), dtype=int)
        rowmap[pix[:, 1].astype(int), pix[:, 0].astype(int)] = np.arange(len(pix))
        self._near_row = rowmap[inds[0], inds[1]]

    def _rows(self, uv: np.ndarray) -> np.ndarray:
        h, w = self.shape
        uvn = np.nan_to_num(np.asarray(uv, dtype=float))
        u = np.clip(np.rint(uvn[:, 0]).astype(int), 0, w - 1)
        v = np.clip(np.rint(uvn[:, 1]).astype(int), 0, h - 1)
        return u, v

    def distance(self, uv: np.ndarray) -> np.ndarray:
        u, v = self._rows(uv)
        return self.dist[v, u]

    def associate(self, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest edge's (anchor, tangent, usable) for each query pixel."""
        u, v = self._rows(uv)
        rows = self._near_row[v, u]
        return self.anchors[rows], self.tangents[rows], self.line_ok[rows]


# --------------------------------------------------------------------------- #
# Extrinsic calibration
# --------------------------------------------------------------------------- #

@dataclass
class ExtrinsicEstimate:
    pose: Pose  # lidar -> camera
    covariance: np.ndarray  # 6x6 (translation, rotation) at the optimum
    final_cost: float
    iterations: int
    converged: bool
    degenerate: bool
    n_points: int
    rms_pixels: float = float("nan")


def _edge_inputs(lidar_edges) -> tuple[np.ndarray, np.ndarray | None]:
    """Edge point array plus optional per-point 3D line directions."""
    if isinstance(lidar_edges, np.ndarray):
        return np.asarray(lidar_edges, dtype=float), None
    pts = np.array([f.origin for f in lidar_edges], dtype=float)
    dirs = np.array([f.direction for f in lidar_edges], dtype=float)
    return pts, dirs


def _pixel_information_weights(
    points: np.ndarray, intr: PinholeIntrinsics, init: Pose, noise: LidarNoiseModel
) -> np.ndarray:
    """Inverse of the range/bearing noise propagated into pixel variance."""
    R = init.rotation
    p_cam = points @ R.T + init.t
    weights = np.zeros(len(points))
    for i, p in enumerate(points):
        d = float(np.linalg.norm(p))
        if d < 1e-9 or p_cam[i, 2] <= 1e-6:
            continue
        cov3 = noise.point_covariance(d, p / d)
        J = projection_jacobian(intr, p_cam[i])
        cov_px = J @ R @ cov3 @ R.T @ J.T
        weights[i] = 1.0 / max(0.5 * np.trace(cov_px), 1e-12)
    return weights


def extrinsic_residuals(
    points: np.ndarray,
    weights: np.ndarray,
    anchors: np.ndarray,
    normals: np.ndarray,
    intr: PinholeIntrinsics,
    pose: Pose,
) -> tuple[np.ndarray, np.ndarray]:
    """Point-to-edge-line residuals and their 6-dof Jacobian (fixed targets).

    Residual i is sqrt(w_i) * n_i . (uv_i - anchor_i); the pose perturbation
    is right-multiplicative, T(d) = T o (Exp(dtheta), drho).
    """
    R = pose.rotation
    p_cam = points @ R.T + pose.t
    uv, _ = project_points(intr, p_cam)
    front = p_cam[:, 2] > 1e-6
    sw = np.sqrt(np.where(front, weights, 0.0))
    diff = np.nan_to_num(uv) - anchors
    res = sw * np.einsum("ni,ni->n", normals, diff)
    Jp = projection_jacobians(intr, p_cam)  # (N,2,3), nan behind camera
    Jp = np.nan_to_num(Jp)
    # d p_cam / d (drho, dtheta) = [R | -R [p]x]
    Jpoint = np.empty((len(points), 3, 6))
    Jpoint[:, :, :3] = R
    Jpoint[:, :, 3:] = -np.einsum("ab,nbc->nac", R, skew_many(points))
    J = sw[:, None] * np.einsum("ni,nij,njk->nk", normals, Jp, Jpoint)
    return res, J


def skew_many(v: np.ndarray) -> np.ndarray:
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def _gate_weights(
    field: EdgeTargetField,
    points: np.ndarray,
    dirs3: np.ndarray | None,
    base_w: np.ndarray,
    intr: PinholeIntrinsics,
    pose: Pose,
    max_dist_px: float,
    min_dir_cos: float = 0.7,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-iteration weights plus fixed line targets for the current pose.

    Gates by association distance and, when LiDAR line directions are known,
    softly by agreement between the projected 3D direction and the image edge
    tangent; incompatible associations are zeroed.
    """
    R = pose.rotation
    p_cam = points @ R.T + pose.t
    uv, vis = project_points(intr, p_cam)
    anchors, tangents, ok = field.associate(uv)
    w = base_w.copy()
    w[vis == 2] = 0.0
    w[~ok] = 0.0
    w[field.distance(uv) > max_dist_px] = 0.0
    if dirs3 is not None:
        Jp = np.nan_to_num(projection_jacobians(intr, p_cam))
        dimg = np.einsum("nij,nj->ni", Jp, dirs3 @ R.T)
        norms = np.linalg.norm(dimg, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            cosang = np.abs(np.einsum("ni,ni->n", dimg, tangents)) / np.where(norms > 1e-12, norms, np.inf)
        w *= np.where(cosang > min_dir_cos, cosang**2, 0.0)
    normals = np.stack([-tangents[:, 1], tangents[:, 0]], axis=1)
    return w, anchors, normals


def calibrate_extrinsics(
    lidar_edges,
    image_edges: EdgePixels | np.ndarray,
    intr: PinholeIntrinsics,
    init: Pose,
    noise: LidarNoiseModel | None = None,
    image_shape: tuple[int, int] | None = None,
    max_iterations: int = 50,
    step_tol: float = 1e-8,
    initial_gate_px: float = 150.0,
) -> ExtrinsicEstimate:
    """Align LiDAR edges to image edges; returns the LiDAR->camera estimate.

    ICP-style iteration: associate each projected edge point with its nearest
    image edge (distance-transform lookup), take one damped Gauss-Newton step
    on the point-to-edge-line cost, shrink the association gate, repeat.
    """
    noise = noise or LidarNoiseModel()
    if image_shape is None:
        image_shape = (intr.height, intr.width)
    field = EdgeTargetField(image_edges, image_shape)
    points, dirs3 = _edge_inputs(lidar_edges)
    base_w = _pixel_information_weights(points, intr, init, noise)

    w0, _, _ = _gate_weights(field, points, dirs3, base_w, intr, init, initial_gate_px)
    if int(np.sum(w0 > 0)) < 6:
        raise InsufficientSupportError("need at least 6 edge points matched from the init pose")

    pose = init
    gate = initial_gate_px
    converged = False
    iterations = 0
    cost = float("inf")
    J = np.zeros((len(points), 6))
    for iterations in range(1, max_iterations + 1):
        w, anchors, normals = _gate_weights(field, points, dirs3, base_w, intr, pose, gate)
        if int(np.sum(w > 0)) < 6:
            break
        res, J = extrinsic_residuals(points, w, anchors, normals, intr, pose)
        cost = float(res @ res)
        H = J.T @ J
        g = J.T @ res
        lam = 1e-6
        delta = np.zeros(6)
        while lam < 1e12:
            try:
                delta = np.linalg.solve(H + lam * np.diag(np.maximum(np.diag(H), 1e-12)), -g)
            except np.linalg.LinAlgError:
                lam *= 5.0
                continue
            candidate = pose.compose(Pose.from_rotvec(delta[3:], delta[:3]))
            res_new, _ = extrinsic_residuals(points, w, anchors, normals, intr, candidate)
            if float(res_new @ res_new) <= cost:
                pose = candidate
                cost = float(res_new @ res_new)
                break
            lam *= 5.0
        gate = max(8.0, gate * 0.7)
        if float(np.linalg.norm(delta)) < step_tol:
            converged = True
            break

    H = J.T @ J
    eigvals = np.linalg.eigvalsh(H)
    degenerate = bool(eigvals[0] < 1e-9 * max(eigvals[-1], 1e-30))
    covariance = np.linalg.pinv(H)
    n_active = int(np.sum(base_w > 0))
    wsum = float(np.sum(base_w))
    rms = float(np.sqrt(cost / wsum)) if wsum > 0 else float("nan")
    return ExtrinsicEstimate(
        pose=pose,
        covariance=covariance,
        final_cost=cost,
        iterations=iterations,
        converged=converged,
        degenerate=degenerate,
        n_points=n_active,
        rms_pixels=rms,
    )
# --------------------------------------------------------------------------- #
# Intrinsic calibration (planar target, multiple views)
# --------------------------------------------------------------------------- #

@dataclass
class PlanarView:
    """Detected grid corners of one view: target-plane XY (m) and pixels."""

    object_xy: np.ndarray  # (N, 2)
    image_uv: np.ndarray  # (N, 2)

    def __post_init__(self):
        self.object_xy = np.asarray(self.object_xy, dtype=float)
        self.image_uv = np.asarray(self.image_uv, dtype=float)
        if self.object_xy.shape != self.image_uv.shape or self.object_xy.ndim != 2:
            raise ValueError("object and image corners must be matching (N,2) arrays")

@dataclass
class IntrinsicsEstimate:
    intrinsics: PinholeIntrinsics
    mean_reprojection_error: float
    per_view_errors: list[float]
    view_poses: list[Pose] = field(default_factory=list)

def _normalize_2d(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = pts.mean(axis=0)
    dif = pts - mean
    mean_dist = float(np.mean(np.linalg.norm(dif, axis=1)))
    s = np.sqrt(2.0) / max(mean_dist, 1e-12)
    T = np.array([[s, 0.0, -s * mean[0]], [0.0, s, -s * mean[1]], [0.0, 0.0, 1.0]])
    q = np.hstack([pts, np.ones((len(pts), 1))]) @ T.T
    return q[:, :2] / q[:, 2:3], T

def homography_dlt(plane_xy: np.ndarray, image_uv: np.ndarray) -> np.ndarray:
    """Normalized DLT homography mapping plane coords to pixels."""
    Xn, TX = _normalize_2d(np.asarray(plane_xy, float))
    xn, Tx = _normalize_2d(np.asarray(image_uv, float))
    n = len(Xn)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = -Xn
    A[0::2, 2] = -1.0
    A[0::2, 6:8] = xn[:, 0:1] * Xn
    A[0::2, 8] = xn[:, 0]
    A[1::2, 3:5] = -Xn
    A[1::2, 5] = -1.0
    A[1::2, 6:8] = xn[:, 1:2] * Xn
    A[1::2, 8] = xn[:, 1]
    _, _, Vt = np.linalg.svd(A)
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Tx) @ Hn @ TX
    if abs(H[2, 2]) > 1e-12:
        H = H / H[2, 2]
    return H

def _vij(H: np.ndarray, i: int, j: int) -> np.ndarray:
    return np.array(
        [
            H[0, i] * H[0, j],
            H[0, i] * H[1, j] + H[1, i] * H[0, j],
            H[1, i] * H[1, j],
            H[2, i] * H[0, j] + H[0, i] * H[2, j],
            H[2, i] * H[1, j] + H[1, i] * H[2, j],
            H[2, i] * H[2, j],
        ]
    )

def _intrinsics_from_homographies(Hs: list[np.ndarray], width: int, height: int) -> PinholeIntrinsics:
    V = np.zeros((2 * len(Hs), 6))
    for k, H in enumerate(Hs):
        V[2 * k] = _vij(H, 0, 1)
        V[2 * k + 1] = _vij(H, 0, 0) - _vij(H, 1, 1)
    _, _, Vt = np.linalg.svd(V)
    b = Vt[-1]
    B11, B12, B22, B13, B23, B33 = b
    denom = B11 * B22 - B12**2
    if abs(denom) < 1e-18 or abs(B11) < 1e-18:
        raise DegenerateViewsError("homography set does not constrain the intrinsics")
    v0 = (B12 * B13 - B11 * B23) / denom
    lam = B33 - (B13**2 + v0 * (B12 * B13 - B11 * B23)) / B11
    if lam / B11 <= 0 or lam * B11 / denom <= 0:
        raise DegenerateViewsError("closed-form intrinsics are not real; views degenerate")
    fx = float(np.sqrt(lam / B11))
    fy = float(np.sqrt(lam * B11 / denom))
    skew_g = -B12 * fx * fx * fy / lam
    u0 = float(skew_g * v0 / fy - B13 * fx * fx / lam)
    if not (np.isfinite(fx) and np.isfinite(fy) and np.isfinite(u0) and np.isfinite(v0)):
        raise DegenerateViewsError("closed-form intrinsics are not finite")
    u0 = min(max(u0, 1.0), width - 1.0)
    v0 = min(max(float(v0), 1.0), height - 1.0)
    return PinholeIntrinsics(fx=fx, fy=fy, cx=u0, cy=v0, width=width, height=height)

def _pose_from_homography(K: np.ndarray, H: np.ndarray) -> Pose:
    invK = np.linalg.inv(K)
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    r1 = invK @ h1
    r2 = invK @ h2
    s = 1.0 / max(0.5 * (np.linalg.norm(r1) + np.linalg.norm(r2)), 1e-12)
    r1, r2 = s * r1, s * r2
    r3 = np.cross(r1, r2)
    Rm = np.column_stack([r1, r2, r3])
    U, _, Vt = np.linalg.svd(Rm)
    Rm = U @ Vt
    if np.linalg.det(Rm) < 0:
        U[:, 2] *= -1.0
        Rm = U @ Vt
    t = s * (invK @ h3)
    if t[2] < 0:  # target must be in front of the camera
        Rm = Rm @ np.diag([-1.0, -1.0, 1.0])
        t = -t

    return Pose(matrix_to_quat(Rm), t)

def calibrate_intrinsics(
    views: list[PlanarView],
    width: int,
    height: int,
    estimate_distortion: bool = False,
) -> IntrinsicsEstimate:
    """Planar-target intrinsic calibration with closed-form init + refinement."""
    if len(views) < 3:
        raise DegenerateViewsError(f"need at least 3 views, have {len(views)}")
    for v in views:
        if len(v.object_xy) < 4:
            raise DegenerateViewsError("each view needs at least 4 corners")
        centered = v.object_xy - v.object_xy.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-9) < 2:
            raise DegenerateViewsError("corners are collinear")

    Hs = [homography_dlt(v.object_xy, v.image_uv) for v in views]
    intr0 = _intrinsics_from_homographies(Hs, width, height)
    poses0 = [_pose_from_homography(intr0.K, H) for H in Hs]

    n_dist = 4 if estimate_distortion else 0
    x0 = np.concatenate(
        [
            [intr0.fx, intr0.fy, intr0.cx, intr0.cy],
            np.zeros(n_dist),
        ]
        + [np.concatenate([p.rotvec(), p.t]) for p in poses0]
    )

    obj3 = [np.hstack([v.object_xy, np.zeros((len(v.object_xy), 1))]) for v in views]

    def residuals(x: np.ndarray) -> np.ndarray:
        fx, fy, cx, cy = x[:4]
        dist = tuple(x[4 : 4 + n_dist]) + (0.0,) * (4 - n_dist)
        out = []
        base = 4 + n_dist
        k1, k2, p1, p2 = dist
        for i, v in enumerate(views):
            rv = x[base + 6 * i : base + 6 * i + 3]
            tv = x[base + 6 * i + 3 : base + 6 * i + 6]
            pc = obj3[i] @ so3_exp(rv).T + tv
            z = np.maximum(pc[:, 2], 1e-9)
            xn = pc[:, 0] / z
            yn = pc[:, 1] / z
            r2 = xn * xn + yn * yn
            radial = 1.0 + k1 * r2 + k2 * r2 * r2
            xd = xn * radial + 2 * p1 * xn * yn + p2 * (r2 + 2 * xn * xn)
            yd = yn * radial + p1 * (r2 + 2 * yn * yn) + 2 * p2 * xn * yn
            u = fx * xd + cx
            vv = fy * yd + cy
            out.append(u - v.image_uv[:, 0])
            out.append(vv - v.image_uv[:, 1])
        return np.concatenate(out)

    sol = optimize.least_squares(residuals, x0, method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14)
    x = sol.x
    fx, fy, cx, cy = x[:4]
    dist = tuple(float(d) for d in x[4 : 4 + n_dist]) + (0.0,) * (4 - n_dist)
    intr = PinholeIntrinsics(
        fx=float(fx), fy=float(fy), cx=float(cx), cy=float(cy), width=width, height=height, distortion=dist
    )
    base = 4 + n_dist
    poses = []
    per_view = []
    r = sol.fun
    offset = 0
    for i, v in enumerate(views):
        rv = x[base + 6 * i : base + 6 * i + 3]
        tv = x[base + 6 * i + 3 : base + 6 * i + 6]

        poses.append(Pose(matrix_to_quat(so3_exp(rv)), tv))
        n = len(v.object_xy)
        du = r[offset : offset + n]
        dv = r[offset + n : offset + 2 * n]
        per_view.append(float(np.mean(np.hypot(du, dv))))
        offset += 2 * n
    mean_err = float(np.mean([e for e in per_view]))
    return IntrinsicsEstimate(
        intrinsics=intr,
        mean_reprojection_error=mean_err,
        per_view_errors=per_view,
        view_poses=poses,
    )
