"""Small geometry kernel: rotations, segment distances, plane fits.

Everything here is pure numpy on float64 and safe to share across
threads; the heavier simulation modules build on these primitives.
"""

from __future__ import annotations

import numpy as np

from .errors import DegeneratePlane


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def root_rotation(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """World rotation of the body root.

    Roll turns the body about its long axis (supine -> lateral -> prone),
    yaw spins it in the bed plane, pitch is about the lateral axis.
    Composition order: yaw last-applied-first, i.e. R = Rz(yaw) Rx(pitch) Ry(roll).
    """
    return rot_z(yaw) @ rot_x(pitch) @ rot_y(roll)


def rotation_to_root_euler(R: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`root_rotation`, returning (roll, pitch, yaw)."""
    # R = Rz(c) Rx(b) Ry(a); row 2 equals (-cos b sin a, sin b, cos b cos a)
    pitch = float(np.arcsin(np.clip(R[2, 1], -1.0, 1.0)))
    roll = float(np.arctan2(-R[2, 0], R[2, 2]))
    yaw = float(np.arctan2(-R[0, 1], R[1, 1]))
    return roll, pitch, yaw


def joint_rotation(angles: np.ndarray) -> np.ndarray:
    """Intrinsic x-y-z rotation for one 3-DOF joint."""
    return rot_x(angles[0]) @ rot_y(angles[1]) @ rot_z(angles[2])


def joint_axes(angles: np.ndarray) -> np.ndarray:
    """Instantaneous rotation axes (columns) of the three joint angles,
    expressed in the joint's parent frame.  Column k maps d(angle_k)/dt
    to angular velocity."""
    rx = rot_x(angles[0])
    rxy = rx @ rot_y(angles[1])
    axes = np.empty((3, 3))
    axes[:, 0] = (1.0, 0.0, 0.0)
    axes[:, 1] = rx[:, 1]
    axes[:, 2] = rxy[:, 2]
    return axes


def exp_so3(w: np.ndarray) -> np.ndarray:
    """Rotation matrix for a rotation vector (Rodrigues)."""
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        K = skew(w)
        return np.eye(3) + K  # first-order; adequate below the cutoff
    axis = w / theta
    K = skew(axis)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Project a near-rotation back onto SO(3) (polar decomposition)."""
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] = -u[:, -1]
        out = u @ vt
    return out


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances from points (N,3) to the segment [a, b]."""
    points = np.atleast_2d(points)
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def closest_point_on_segment(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    points = np.atleast_2d(points)
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.broadcast_to(a, points.shape).copy()
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    return a + t[:, None] * ab


def segment_segment_distance(p0, p1, q0, q1) -> float:
    """Minimum distance between segments [p0,p1] and [q0,q1].

    Interior critical point plus the four edge projections; robust for
    parallel and degenerate segments.
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    u = p1 - p0
    v = q1 - q0
    w0 = p0 - q0
    a = float(u @ u)
    b = float(u @ v)
    c = float(v @ v)
    d = float(u @ w0)
    e = float(v @ w0)
    den = a * c - b * b

    best = np.inf
    if den > 1e-14:
        s = (b * e - c * d) / den
        t = (a * e - b * d) / den
        if 0.0 <= s <= 1.0 and 0.0 <= t <= 1.0:
            diff = (p0 + s * u) - (q0 + t * v)
            best = float(diff @ diff)

    for q in (q0, q1):
        t = 0.0 if a < 1e-18 else np.clip(float((q - p0) @ u) / a, 0.0, 1.0)
        diff = (p0 + t * u) - q
        best = min(best, float(diff @ diff))
    for p in (p0, p1):
        t = 0.0 if c < 1e-18 else np.clip(float((p - q0) @ v) / c, 0.0, 1.0)
        diff = p - (q0 + t * v)
        best = min(best, float(diff @ diff))
    return float(np.sqrt(best))


def fit_plane(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares plane through >= 3 points.

    Returns (centroid, unit normal with positive z).  Raises
    DegeneratePlane when the points are collinear (rank < 2).
    """
    pts = np.asarray(points, dtype=float)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s.size < 3 or s[1] <= max(1e-12, 1e-9 * s[0]):
        raise DegeneratePlane("base particles are collinear")
    normal = vt[2]
    if normal[2] < 0:
        normal = -normal
    if abs(normal[2]) < 1e-9:
        raise DegeneratePlane("base plane is vertical")
    return centroid, normal


def capsule_volume(radius: float, length: float) -> float:
    """Analytic volume of a capsule: cylinder plus two hemispherical caps."""
    return np.pi * radius * radius * length + (4.0 / 3.0) * np.pi * radius**3
