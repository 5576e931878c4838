"""Geometry-to-taxel map reconstruction and the training-loss math.

Body surface points project onto the sensing grid; each taxel's
reconstructed value is how far the lowest point in its cell sinks below
the undeformed bed surface, with a binary contact companion map.  The
module also prepares the pressure/edge/contact input channels, applies
the sensor noise model, and evaluates the two training losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import mat as mat_mod

NUM_JOINTS = 24
NUM_SHAPE = 10
NUM_TAXELS = mat_mod.SENSE_SHAPE[0] * mat_mod.SENSE_SHAPE[1]  # 1728

BLUR_SIGMA = 0.5  # taxels
NOISE_SIGMA = 0.2


@dataclass
class SpatialMaps:
    """Reconstructed sinking-depth map and its binary contact map."""

    depth: np.ndarray  # (64, 27) meters of sink below the bed surface
    contact: np.ndarray  # (64, 27) in {0, 1}

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        self.contact = np.asarray(self.contact, dtype=np.uint8)
        if self.depth.shape != mat_mod.SENSE_SHAPE:
            raise ValueError("maps must match the sensing window")
        if not np.array_equal(self.contact != 0, self.depth > 0):
            raise ValueError("contact must be exactly the support of depth")


@dataclass(frozen=True)
class LossNormalizers:
    """Dataset-level standard deviations that balance the loss terms."""

    sigma_joints: float = 1.0
    sigma_shape: float = 1.0
    sigma_depth: float = 1.0
    sigma_contact: float = 1.0

    def __post_init__(self):
        for name in ("sigma_joints", "sigma_shape", "sigma_depth", "sigma_contact"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def reconstruct_maps(points: np.ndarray, bed_height: float) -> SpatialMaps:
    """Project points onto taxels; per cell the lowest point wins.

    Depth is bed_height minus the lowest point height, clamped at zero;
    cells without points read zero.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    rows, cols = mat_mod.SENSE_SHAPE
    zmin = np.full(rows * cols, np.inf)
    if len(points):
        j = np.floor((points[:, 0] - mat_mod._X0) / mat_mod.PITCH).astype(int)
        i = np.floor((points[:, 1] - mat_mod._Y0) / mat_mod.PITCH).astype(int)
        r = i - mat_mod.SENSE_ROWS.start
        c = j - mat_mod.SENSE_COLS.start
        ok = (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
        if np.any(ok):
            np.minimum.at(zmin, r[ok] * cols + c[ok], points[ok, 2])
    depth = np.where(np.isfinite(zmin), bed_height - zmin, 0.0)
    depth = np.maximum(depth, 0.0).reshape(rows, cols)
    return SpatialMaps(depth, (depth > 0).astype(np.uint8))


@dataclass
class ChannelStack:
    """Input channels: normalized pressure, edges, binary contact."""

    pressure: np.ndarray
    edges: np.ndarray
    contact: np.ndarray
    all_zero: bool = False

    @property
    def stacked(self) -> np.ndarray:
        return np.stack([self.pressure, self.edges, self.contact.astype(float)])


def _blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur with a boundary-renormalized kernel so total mass
    is preserved up to kernel truncation."""
    if sigma <= 0:
        return image.copy()
    blurred = ndimage.gaussian_filter(image, sigma, mode="constant", truncate=4.0)
    weight = ndimage.gaussian_filter(
        np.ones_like(image), sigma, mode="constant", truncate=4.0
    )
    return blurred / weight


def prep_channels(pressure) -> ChannelStack:
    """Blur, contact support, Sobel edges, per-image sum normalization.

    An all-zero image cannot be normalized; the channels come back as
    zeros with the flag set.
    """
    P = pressure.values if isinstance(pressure, mat_mod.PressureImage) else np.asarray(pressure, dtype=float)
    if P.shape != mat_mod.SENSE_SHAPE:
        raise ValueError("pressure image must match the sensing window")
    contact = (P > 0).astype(np.uint8)
    blurred = _blur(P, BLUR_SIGMA)
    total = float(blurred.sum())
    if total <= 0:
        z = np.zeros_like(P)
        return ChannelStack(z, z.copy(), contact, all_zero=True)
    gx = ndimage.sobel(blurred, axis=0, mode="nearest")
    gy = ndimage.sobel(blurred, axis=1, mode="nearest")
    edges = np.hypot(gx, gy)
    return ChannelStack(blurred / total, edges / total, contact)


def apply_noise(
    pressure: np.ndarray,
    rng: np.random.Generator | None,
    sigma: float = NOISE_SIGMA,
    white: bool = True,
    additive: bool = True,
    multiplicative: bool = True,
    blur_variation: bool = True,
) -> np.ndarray:
    """Sensor noise model: per-taxel white noise, a global additive
    offset, multiplicative gain, then a blur of varying width.  All
    draws share one scale parameter; ``rng=None`` disables every draw
    and leaves the nominal blur.
    """
    P = np.asarray(pressure, dtype=float)
    nz = P[P > 0]
    scale = float(nz.mean()) if nz.size else 0.0

    w = np.zeros_like(P)
    eta = 0.0
    gamma = 0.0
    sigma_b = BLUR_SIGMA
    if rng is not None:
        if white:
            w = rng.normal(0.0, sigma * scale, size=P.shape) if scale > 0 else w
        if additive:
            eta = rng.normal(0.0, sigma * scale) if scale > 0 else 0.0
        if multiplicative:
            gamma = rng.normal(0.0, sigma)
        if blur_variation:
            sigma_b = max(0.0, rng.normal(BLUR_SIGMA, sigma))
    noisy = np.maximum((1.0 + gamma) * (P + eta + w), 0.0)
    return _blur(noisy, sigma_b)


def loss_l1(
    joints: np.ndarray,
    joints_hat: np.ndarray,
    shape: np.ndarray,
    shape_hat: np.ndarray,
    norm: LossNormalizers,
) -> float:
    """Mean joint-position error plus shape-coefficient error, each
    normalized by its dataset deviation."""
    joints = np.asarray(joints, dtype=float).reshape(NUM_JOINTS, 3)
    joints_hat = np.asarray(joints_hat, dtype=float).reshape(NUM_JOINTS, 3)
    shape = np.asarray(shape, dtype=float).reshape(NUM_SHAPE)
    shape_hat = np.asarray(shape_hat, dtype=float).reshape(NUM_SHAPE)
    term_j = np.linalg.norm(joints - joints_hat, axis=1).sum() / (
        NUM_JOINTS * norm.sigma_joints
    )
    term_s = np.abs(shape - shape_hat).sum() / (NUM_SHAPE * norm.sigma_shape)
    return float(term_j + term_s)


def loss_l2(
    joints,
    joints_hat,
    shape,
    shape_hat,
    depth: np.ndarray,
    depth_hat: np.ndarray,
    contact: np.ndarray,
    contact_hat: np.ndarray,
    norm: LossNormalizers,
) -> float:
    """The joint/shape loss plus reconstructed-map errors: squared L2 on
    the depth map, L1 on the contact map, both per-taxel normalized."""
    base = loss_l1(joints, joints_hat, shape, shape_hat, norm)
    depth = np.asarray(depth, dtype=float)
    depth_hat = np.asarray(depth_hat, dtype=float)
    contact = np.asarray(contact, dtype=float)
    contact_hat = np.asarray(contact_hat, dtype=float)
    term_q = float(np.sum((depth - depth_hat) ** 2)) / (NUM_TAXELS * norm.sigma_depth)
    term_c = float(np.sum(np.abs(contact - contact_hat))) / (
        NUM_TAXELS * norm.sigma_contact
    )
    return base + term_q + term_c
