"""Evaluation metrics for estimated bodies against reference point clouds.

The headline metric averages two directional nearest-neighbor errors
between a body surface sample set and a point cloud, after voxel
downsampling of the cloud, clipping both to the sensing area, dropping
surface points not visible from the camera, and weighting surface
points by local mesh density.  Nearest neighbors come from a uniform
spatial hash whose ring-expansion search is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import body as body_mod
from . import mat as mat_mod
from .body import BodyShape, BodyState, PoseState
from .errors import EmptyAfterClipping

DOWNSAMPLE_RESOLUTION = 0.01  # m


@dataclass
class SurfaceSampleSet:
    """Points on a body surface, optionally with triangle faces."""

    points: np.ndarray
    faces: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("sample set must not be empty")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("sample coordinates must be finite")
        if self.faces is not None:
            self.faces = np.asarray(self.faces, dtype=int).reshape(-1, 3)


def downsample(points: np.ndarray, resolution: float = DOWNSAMPLE_RESOLUTION) -> np.ndarray:
    """Voxel-grid downsample: one centroid per occupied cell."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return points
    keys = np.floor(points / resolution).astype(np.int64)
    _, inverse, counts = np.unique(
        keys, axis=0, return_inverse=True, return_counts=True
    )
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, points)
    return sums / counts[:, None]


def face_normals(points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a = points[faces[:, 0]]
    b = points[faces[:, 1]]
    c = points[faces[:, 2]]
    return np.cross(b - a, c - a)  # unnormalized; length = 2x area


def clip_and_visibility(
    samples: SurfaceSampleSet,
    mat_bounds: tuple,
    view: np.ndarray | None = None,
) -> np.ndarray:
    """Keep-mask over the sample points.

    Points outside the mat rectangle are dropped; with faces and a view
    direction, vertices whose adjacent faces all face away from the
    camera are dropped too.
    """
    pts = samples.points
    x0, x1, y0, y1 = mat_bounds
    keep = (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
    if samples.faces is not None and view is not None:
        view = np.asarray(view, dtype=float)
        normals = face_normals(pts, samples.faces)
        facing = normals @ view > 0.0
        visible = np.zeros(len(pts), dtype=bool)
        for k in range(3):
            np.logical_or.at(visible, samples.faces[:, k], facing)
        keep &= visible
    return keep


def density_weights(samples: SurfaceSampleSet) -> np.ndarray:
    """Per-vertex weight: mean area of the adjacent faces.  Isolated
    vertices weigh zero and drop out of weighted means."""
    if samples.faces is None:
        return np.ones(len(samples.points))
    normals = face_normals(samples.points, samples.faces)
    areas = 0.5 * np.linalg.norm(normals, axis=1)
    sums = np.zeros(len(samples.points))
    counts = np.zeros(len(samples.points))
    for k in range(3):
        np.add.at(sums, samples.faces[:, k], areas)
        np.add.at(counts, samples.faces[:, k], 1.0)
    with np.errstate(invalid="ignore"):
        w = np.where(counts > 0, sums / np.maximum(counts, 1.0), 0.0)
    return w


class GridIndex:
    """Uniform spatial hash over 3D cells with exact nearest-neighbor
    queries (ring expansion until no closer point can exist)."""

    def __init__(self, points: np.ndarray, cell: float | None = None):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("index needs at least one point")
        if cell is None:
            cell = 2.0 * self._median_nn_estimate()
        self.cell = max(float(cell), 1e-9)
        keys = np.floor(self.points / self.cell).astype(np.int64)
        self.table: dict = {}
        for i, k in enumerate(map(tuple, keys)):
            self.table.setdefault(k, []).append(i)

    def _median_nn_estimate(self) -> float:
        n = len(self.points)
        sample = self.points[:: max(1, n // 200)][:200]
        if len(sample) < 2:
            return 0.05
        d2 = np.sum((sample[:, None, :] - sample[None, :, :]) ** 2, axis=2)
        np.fill_diagonal(d2, np.inf)
        med = float(np.median(np.sqrt(d2.min(axis=1))))
        return med if med > 0 else 0.05

    def query(self, q: np.ndarray) -> tuple[float, int]:
        """Distance and index of the nearest point; ties break toward
        the smaller index, matching a stable brute-force argmin."""
        q = np.asarray(q, dtype=float)
        base = np.floor(q / self.cell).astype(np.int64)
        best_d2 = np.inf
        best_i = -1
        ring = 0
        while True:
            for key in self._ring_keys(base, ring):
                ids = self.table.get(key)
                if not ids:
                    continue
                pts = self.points[ids]
                d2 = np.sum((pts - q) ** 2, axis=1)
                # ids ascend, so argmin already breaks ties toward the
                # smallest index within a cell
                k = int(np.argmin(d2))
                cand_d2, cand_i = float(d2[k]), ids[k]
                if cand_d2 < best_d2 or (cand_d2 == best_d2 and cand_i < best_i):
                    best_d2 = cand_d2
                    best_i = cand_i
            # cells beyond this ring hold points at least ring*cell away
            if best_i >= 0 and best_d2 <= (ring * self.cell) ** 2:
                break
            ring += 1
            if ring > 10_000:
                break
        return float(np.sqrt(best_d2)), best_i

    def _ring_keys(self, base, ring):
        if ring == 0:
            yield tuple(base)
            return
        r = ring
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                for dz in range(-r, r + 1):
                    if max(abs(dx), abs(dy), abs(dz)) == r:
                        yield (base[0] + dx, base[1] + dy, base[2] + dz)

    def query_many(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        d = np.empty(len(queries))
        idx = np.empty(len(queries), dtype=int)
        for i, q in enumerate(queries):
            d[i], idx[i] = self.query(q)
        return d, idx


def nearest_brute_force(points: np.ndarray, queries: np.ndarray):
    """O(n*m) oracle returning the same (distance, index) convention."""
    points = np.asarray(points, dtype=float)
    queries = np.asarray(queries, dtype=float).reshape(-1, 3)
    d = np.empty(len(queries))
    idx = np.empty(len(queries), dtype=int)
    for i, q in enumerate(queries):
        d2 = np.sum((points - q) ** 2, axis=1)
        j = int(np.argmin(d2))
        d[i] = np.sqrt(d2[j])
        idx[i] = j
    return d, idx


DEFAULT_MAT_BOUNDS = (0.0, mat_mod.BED_WIDTH, 0.0, mat_mod.BED_LENGTH)
TOP_DOWN_VIEW = np.array([0.0, 0.0, 1.0])


def three_dvpe(
    surface: SurfaceSampleSet,
    cloud: np.ndarray,
    mat_bounds: tuple = DEFAULT_MAT_BOUNDS,
    view: np.ndarray | None = TOP_DOWN_VIEW,
) -> float:
    """Average of the two directional nearest-neighbor mean distances,
    in centimeters.

    The cloud is downsampled to 1 cm; both sets are clipped to the mat;
    surface points keep only camera-facing vertices and are weighted by
    adjacent-face area (uniform when no faces are given); the
    cloud-to-surface direction is unweighted.
    """
    cloud = downsample(np.asarray(cloud, dtype=float).reshape(-1, 3))
    weights = density_weights(surface)
    keep_s = clip_and_visibility(surface, mat_bounds, view)
    keep_s &= weights > 0
    verts = surface.points[keep_s]
    w = weights[keep_s]
    x0, x1, y0, y1 = mat_bounds
    keep_c = (
        (cloud[:, 0] >= x0) & (cloud[:, 0] <= x1)
        & (cloud[:, 1] >= y0) & (cloud[:, 1] <= y1)
    )
    cloud = cloud[keep_c]
    if len(verts) == 0 or len(cloud) == 0:
        raise EmptyAfterClipping("nothing left after clipping")

    d_sc, _ = GridIndex(cloud).query_many(verts)
    d_cs, _ = GridIndex(verts).query_many(cloud)
    mean_sc = float(np.sum(w * d_sc) / np.sum(w))
    mean_cs = float(np.mean(d_cs))
    return 100.0 * 0.5 * (mean_sc + mean_cs)


def mpjpe(joints: np.ndarray, joints_hat: np.ndarray) -> float:
    """Mean per-joint position error in centimeters over the 24 joints."""
    joints = np.asarray(joints, dtype=float)
    joints_hat = np.asarray(joints_hat, dtype=float)
    if joints.shape != joints_hat.shape or joints.shape[-1] != 3:
        raise ValueError("joint arrays must share an (N, 3) shape")
    return float(100.0 * np.mean(np.linalg.norm(joints - joints_hat, axis=-1)))


def v2v(points: np.ndarray, points_hat: np.ndarray) -> float:
    """Mean distance over corresponding surface points, in centimeters."""
    points = np.asarray(points, dtype=float)
    points_hat = np.asarray(points_hat, dtype=float)
    if points.shape != points_hat.shape or points.shape[-1] != 3:
        raise ValueError("point arrays must share an (N, 3) shape")
    return float(100.0 * np.mean(np.linalg.norm(points - points_hat, axis=-1)))


def baseline_pose(gender: str = "F") -> BodyState:
    """Mean shape, supine at the bed center, arms and legs straight."""
    shape = BodyShape(np.zeros(10), gender)
    pose = PoseState(
        body_mod.home_pose_angles(),
        np.zeros(3),
        np.array([mat_mod.BED_WIDTH / 2.0, mat_mod.BED_LENGTH / 2.0, 0.0]),
    )
    return BodyState(shape, pose)
