"""Parametric capsulized body.

A 20-capsule articulated chain over a 24-joint skeleton.  Capsule radii
and lengths come from a fixed affine regressor (committed coefficient
tables keyed by gender), capsule masses from a voxelized volume split
combined with segment mass fractions, and joint stiffness from a small
per-group table scaled by body mass.

Conventions: the body frame has +x to the body's left, +y toward the
head, +z out of the chest.  The zero pose is a T-pose (arms along +-x);
the home pose folds the arms to the sides via a -+pi/2 rotation of the
shoulder's third angle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources

import numpy as np

from . import geom
from .errors import DegenerateCapsule, ShapeOutOfRange

GENDERS = ("F", "M")
NUM_JOINTS = 24
NUM_ANGLES = 69  # 23 non-root joints x 3

# Kinematic tree: parent of each of the 24 joints (root = -1).
JOINT_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
)

JOINT_NAMES = [
    "root", "hip_l", "hip_r", "spine_lower", "knee_l", "knee_r",
    "spine_mid", "ankle_l", "ankle_r", "spine_upper", "foot_l", "foot_r",
    "neck_base", "collar_l", "collar_r", "head_base", "shoulder_l",
    "shoulder_r", "elbow_l", "elbow_r", "wrist_l", "wrist_r",
    "hand_l", "hand_r",
]

CAPSULE_NAMES = [
    "pelvis", "abdomen", "thorax", "chest", "neck", "head",
    "collar_l", "collar_r", "upper_arm_l", "upper_arm_r",
    "forearm_l", "forearm_r", "hand_l", "hand_r",
    "thigh_l", "thigh_r", "shin_l", "shin_r", "foot_l", "foot_r",
]

# Joint each capsule is rigidly attached to.
CAPSULE_JOINT = np.array(
    [0, 3, 6, 9, 12, 15, 13, 14, 16, 17, 18, 19, 20, 21, 1, 2, 4, 5, 7, 8]
)

# Joint at the far end of the capsule axis, -1 when the far end is not a
# skeleton joint (pelvis spans the two hips; the head capsule ends at the
# crown).
CAPSULE_END_JOINT = np.array(
    [-1, 6, 9, 12, 15, -1, 16, 17, 18, 19, 20, 21, 22, 23, 4, 5, 7, 8, 10, 11]
)

SHOULDER_L, SHOULDER_R = 16, 17

# Indices into the 69-vector for the shoulders' third (abduction) angle.
SHOULDER_ABD_L = (SHOULDER_L - 1) * 3 + 2
SHOULDER_ABD_R = (SHOULDER_R - 1) * 3 + 2

VOXEL_RESOLUTION = 0.002  # m
GRAVITY = 9.81

_STIFFNESS_GROUPS = {
    "hip": (6.0, (1, 2)),
    "knee": (3.0, (4, 5)),
    "foot": (6.0, (7, 8, 10, 11)),
    "shoulder": (4.0, (16, 17)),
    "elbow": (2.0, (18, 19)),
    "hand": (4.0, (20, 21, 22, 23)),
    "torso_head": (200.0, (3, 6, 9, 12, 13, 14, 15)),
}
DAMPING_RATIO = 15.0  # joint damping = 15 x joint stiffness


@lru_cache(maxsize=1)
def _tables() -> dict:
    with resources.files("restforge.data").joinpath("body_tables.json").open() as fh:
        return json.load(fh)


@dataclass(frozen=True)
class BodyShape:
    """Ten shape coefficients plus a gender flag."""

    beta: np.ndarray
    gender: str = "F"

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).reshape(10)
        object.__setattr__(self, "beta", beta)
        if self.gender not in GENDERS:
            raise ValueError(f"gender must be one of {GENDERS}")
        if np.any(np.abs(beta) > 3.0):
            raise ShapeOutOfRange("shape coefficients must lie in [-3, 3]")


@dataclass
class PoseState:
    """Joint angles plus the global transform of the root."""

    theta: np.ndarray  # (69,) radians
    root_rot: np.ndarray  # (roll, pitch, yaw) radians
    root_pos: np.ndarray  # (3,) meters

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(NUM_ANGLES)
        self.root_rot = np.asarray(self.root_rot, dtype=float).reshape(3)
        self.root_pos = np.asarray(self.root_pos, dtype=float).reshape(3)

    def copy(self) -> "PoseState":
        return PoseState(self.theta.copy(), self.root_rot.copy(), self.root_pos.copy())


@dataclass(frozen=True)
class BodyState:
    shape: BodyShape
    pose: PoseState


@dataclass
class CapsuleChain:
    """Geometry, mass properties and joint parameters of the capsule body.

    ``joint_offsets[j]`` is joint j's rest position in its parent joint's
    frame; capsule axes are stored in the owning joint's frame so that
    adjacent capsules share joint anchor points exactly.
    """

    gender: str
    radii: np.ndarray  # (20,)
    lengths: np.ndarray  # (20,)
    joint_offsets: np.ndarray  # (24, 3)
    axis_start: np.ndarray  # (20, 3) local, in owning joint frame
    axis_end: np.ndarray  # (20, 3)
    masses: np.ndarray | None = None  # (20,)
    inertias: np.ndarray | None = None  # (20, 3, 3) local, about capsule center
    joint_stiffness: np.ndarray | None = None  # (69,)
    joint_damping: np.ndarray | None = None  # (69,)
    joint_eq: np.ndarray | None = None  # (69,)

    names: list = field(default_factory=lambda: list(CAPSULE_NAMES))
    capsule_joint: np.ndarray = field(default_factory=lambda: CAPSULE_JOINT.copy())
    joint_parents: np.ndarray = field(default_factory=lambda: JOINT_PARENTS.copy())

    @property
    def num_capsules(self) -> int:
        return len(self.radii)

    @property
    def num_joints(self) -> int:
        return len(self.joint_offsets)

    @property
    def total_mass(self) -> float:
        if self.masses is None:
            raise ValueError("masses not computed")
        return float(np.sum(self.masses))

    def validate(self) -> None:
        if np.any(self.radii <= 0) or np.any(self.lengths <= 0):
            raise DegenerateCapsule("non-positive capsule dimensions")
        if self.masses is not None and np.any(self.masses <= 0):
            raise DegenerateCapsule("non-positive capsule mass")
        if self.joint_stiffness is not None and self.joint_damping is not None:
            if not np.allclose(
                self.joint_damping, DAMPING_RATIO * self.joint_stiffness, rtol=1e-12
            ):
                raise ValueError("joint damping must equal 15 x stiffness")

    def with_params(self, **kw) -> "CapsuleChain":
        return replace(self, **kw)


@dataclass
class PosedCapsules:
    """World placement of every capsule plus the 24 joint positions."""

    seg_a: np.ndarray  # (20, 3) world axis start
    seg_b: np.ndarray  # (20, 3) world axis end
    radii: np.ndarray  # (20,)
    rotations: np.ndarray  # (20, 3, 3) world rotation of the owning joint frame
    joint_positions: np.ndarray  # (24, 3)
    joint_rotations: np.ndarray  # (24, 3, 3)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.seg_a + self.seg_b)

    def lowest_point(self) -> float:
        return float(np.min(np.minimum(self.seg_a[:, 2], self.seg_b[:, 2]) - self.radii))


def regress_capsules(shape: BodyShape) -> CapsuleChain:
    """Regress capsule geometry from the shape coefficients.

    Radii and lengths are affine in beta (base table + 10-column weight
    matrix per gender); the rest skeleton is derived from the regressed
    lengths so bones and capsules stay consistent.
    """
    tab = _tables()[shape.gender]
    base_r = np.array(tab["base_radius"])
    base_l = np.array(tab["base_length"])
    w_r = np.array(tab["w_radius"])
    w_l = np.array(tab["w_length"])
    radii = base_r + w_r @ shape.beta
    lengths = base_l + w_l @ shape.beta
    if np.any(radii <= 0) or np.any(lengths <= 0):
        raise DegenerateCapsule("regressed capsule with non-positive size")
    return _assemble_chain(shape.gender, radii, lengths, tab["aux"])


def _assemble_chain(gender, radii, lengths, aux) -> CapsuleChain:
    L = {name: lengths[i] for i, name in enumerate(CAPSULE_NAMES)}
    offsets = np.zeros((NUM_JOINTS, 3))
    half_pelvis = 0.5 * L["pelvis"]
    offsets[1] = (half_pelvis, 0.0, 0.0)
    offsets[2] = (-half_pelvis, 0.0, 0.0)
    offsets[3] = (0.0, aux["lumbar_offset"], 0.0)
    offsets[4] = (0.0, -L["thigh_l"], 0.0)
    offsets[5] = (0.0, -L["thigh_r"], 0.0)
    offsets[6] = (0.0, L["abdomen"], 0.0)
    offsets[7] = (0.0, -L["shin_l"], 0.0)
    offsets[8] = (0.0, -L["shin_r"], 0.0)
    offsets[9] = (0.0, L["thorax"], 0.0)
    offsets[10] = (0.0, 0.0, L["foot_l"])
    offsets[11] = (0.0, 0.0, L["foot_r"])
    offsets[12] = (0.0, L["chest"], 0.0)
    offsets[13] = (aux["collar_dx"], aux["collar_dy"], 0.0)
    offsets[14] = (-aux["collar_dx"], aux["collar_dy"], 0.0)
    offsets[15] = (0.0, L["neck"], 0.0)
    offsets[16] = (L["collar_l"], 0.0, 0.0)
    offsets[17] = (-L["collar_r"], 0.0, 0.0)
    offsets[18] = (L["upper_arm_l"], 0.0, 0.0)
    offsets[19] = (-L["upper_arm_r"], 0.0, 0.0)
    offsets[20] = (L["forearm_l"], 0.0, 0.0)
    offsets[21] = (-L["forearm_r"], 0.0, 0.0)
    offsets[22] = (L["hand_l"], 0.0, 0.0)
    offsets[23] = (-L["hand_r"], 0.0, 0.0)

    start = np.zeros((20, 3))
    end = np.zeros((20, 3))
    for c in range(20):
        j_end = CAPSULE_END_JOINT[c]
        if j_end >= 0:
            end[c] = offsets[j_end]
    # capsules whose far end is not a skeleton joint
    start[0] = (half_pelvis, 0.0, 0.0)
    end[0] = (-half_pelvis, 0.0, 0.0)
    end[5] = (0.0, L["head"], 0.0)

    return CapsuleChain(
        gender=gender,
        radii=np.asarray(radii, dtype=float),
        lengths=np.asarray(lengths, dtype=float),
        joint_offsets=offsets,
        axis_start=start,
        axis_end=end,
    )


def home_pose_angles() -> np.ndarray:
    """Arms at the sides, legs straight: all zeros except the shoulders."""
    theta = np.zeros(NUM_ANGLES)
    theta[SHOULDER_ABD_L] = -np.pi / 2.0
    theta[SHOULDER_ABD_R] = np.pi / 2.0
    return theta


def forward_kinematics(chain: CapsuleChain, pose: PoseState) -> PosedCapsules:
    """World transforms by recursive parent-child composition."""
    R_root = geom.root_rotation(*pose.root_rot)
    return fk_from_root(chain, pose.theta, R_root, pose.root_pos)


def fk_from_root(
    chain: CapsuleChain, theta: np.ndarray, R_root: np.ndarray, root_pos: np.ndarray
) -> PosedCapsules:
    nj = chain.num_joints
    rot = np.empty((nj, 3, 3))
    pos = np.empty((nj, 3))
    rot[0] = R_root
    pos[0] = root_pos
    parents = chain.joint_parents
    for j in range(1, nj):
        p = parents[j]
        ang = theta[3 * (j - 1): 3 * j]
        pos[j] = pos[p] + rot[p] @ chain.joint_offsets[j]
        rot[j] = rot[p] @ geom.joint_rotation(ang)

    own = chain.capsule_joint
    cap_rot = rot[own]
    base = pos[own]
    seg_a = base + np.einsum("cij,cj->ci", cap_rot, chain.axis_start)
    seg_b = base + np.einsum("cij,cj->ci", cap_rot, chain.axis_end)
    return PosedCapsules(
        seg_a=seg_a,
        seg_b=seg_b,
        radii=chain.radii.copy(),
        rotations=cap_rot,
        joint_positions=pos,
        joint_rotations=rot,
    )


# ---------------------------------------------------------------------------
# volume / mass / inertia


def _capsule_bbox(a, b, r, margin=0.0):
    lo = np.minimum(a, b) - r - margin
    hi = np.maximum(a, b) + r + margin
    return lo, hi


def _grid_inside_capsule(axes, a, b, r):
    """Boolean occupancy of a capsule on a 3D grid given per-axis center
    coordinates; separable broadcasting keeps this memory-bound."""
    ab = (b - a).astype(np.float32)
    ab2 = float(ab @ ab)
    dx = (axes[0] - a[0]).astype(np.float32)
    dy = (axes[1] - a[1]).astype(np.float32)
    dz = (axes[2] - a[2]).astype(np.float32)
    dot = (
        ab[0] * dx[:, None, None]
        + ab[1] * dy[None, :, None]
        + ab[2] * dz[None, None, :]
    )
    w2 = (
        (dx * dx)[:, None, None]
        + (dy * dy)[None, :, None]
        + (dz * dz)[None, None, :]
    )
    if ab2 < 1e-18:
        d2 = w2
    else:
        t = np.clip(dot * np.float32(1.0 / ab2), 0.0, 1.0)
        d2 = w2 - (2.0 * dot - ab2 * t) * t
    return d2 <= np.float32(r * r)


def _points_inside_capsule(pts, a, b, r):
    """Same decision as :func:`_grid_inside_capsule`, same arithmetic
    order, so boundary voxels classify identically in both passes."""
    ab = (b - a).astype(np.float32)
    ab2 = float(ab @ ab)
    dx = (pts[:, 0] - a[0]).astype(np.float32)
    dy = (pts[:, 1] - a[1]).astype(np.float32)
    dz = (pts[:, 2] - a[2]).astype(np.float32)
    dot = ab[0] * dx + ab[1] * dy + ab[2] * dz
    w2 = (dx * dx) + (dy * dy) + (dz * dz)
    if ab2 < 1e-18:
        d2 = w2
    else:
        t = np.clip(dot * np.float32(1.0 / ab2), 0.0, 1.0)
        d2 = w2 - (2.0 * dot - ab2 * t) * t
    return d2 <= np.float32(r * r)


def capsule_voxel_volumes(
    seg_a: np.ndarray,
    seg_b: np.ndarray,
    radii: np.ndarray,
    resolution: float = VOXEL_RESOLUTION,
) -> np.ndarray:
    """Voxelized capsule volumes with fractional sharing of overlap voxels.

    A voxel inside n capsules contributes 1/n of its volume to each, so
    the per-capsule volumes always sum to the volume of the occupied
    voxel set (partition of unity).
    """
    n = len(radii)
    h = float(resolution)
    all_lo = np.min(np.minimum(seg_a, seg_b) - radii[:, None], axis=0)
    origin = np.floor(all_lo / h - 1.0) * h  # one-voxel pad
    vol = np.zeros(n)
    voxel_vol = h**3

    bboxes = [_capsule_bbox(seg_a[c], seg_b[c], radii[c]) for c in range(n)]
    idx_ranges = []
    for lo, hi in bboxes:
        lo_idx = np.floor((lo - origin) / h).astype(int)
        hi_idx = np.ceil((hi - origin) / h).astype(int) + 1
        idx_ranges.append((lo_idx, hi_idx))

    for c in range(n):
        lo_idx, hi_idx = idx_ranges[c]
        axes = [
            (origin[k] + (np.arange(lo_idx[k], hi_idx[k]) + 0.5) * h).astype(np.float32)
            for k in range(3)
        ]
        inside = _grid_inside_capsule(axes, seg_a[c], seg_b[c], radii[c])
        if not np.any(inside):
            raise DegenerateCapsule(f"capsule {c} produced zero voxels")
        ii, jj, kk = np.nonzero(inside)
        pts = np.stack(
            [axes[0][ii], axes[1][jj], axes[2][kk]], axis=1
        ).astype(np.float32)
        counts = np.ones(len(pts), dtype=np.int16)
        lo1, hi1 = bboxes[c]
        for c2 in range(n):
            if c2 == c:
                continue
            lo2, hi2 = bboxes[c2]
            if np.any(lo1 > hi2) or np.any(hi1 < lo2):
                continue
            near = np.all((pts >= (lo2 - h).astype(np.float32)), axis=1) & np.all(
                (pts <= (hi2 + h).astype(np.float32)), axis=1
            )
            if not np.any(near):
                continue
            hit = _points_inside_capsule(pts[near], seg_a[c2], seg_b[c2], radii[c2])
            counts[near] += hit.astype(np.int16)
        hist = np.bincount(counts)[1:]  # sharing multiplicity histogram, n >= 1
        vol[c] = voxel_vol * float(np.sum(hist / np.arange(1, len(hist) + 1)))
    return vol


def _solid_capsule_inertia(mass: float, radius: float, length: float) -> np.ndarray:
    """Principal inertia of a solid capsule about its center; axis = local z."""
    r, L = radius, length
    v_cyl = np.pi * r * r * L
    v_hem = (2.0 / 3.0) * np.pi * r**3
    v_tot = v_cyl + 2.0 * v_hem
    m_cyl = mass * v_cyl / v_tot
    m_hem = mass * v_hem / v_tot
    # cylinder about its center
    i_ax = 0.5 * m_cyl * r * r
    i_perp = m_cyl * (L * L / 12.0 + r * r / 4.0)
    # two hemispheres, shifted to the capsule center (parallel axis)
    i_ax += 2.0 * (0.4 * m_hem * r * r)
    d = L / 2.0 + 3.0 * r / 8.0  # hemisphere COM offset from capsule center
    i_hem_com = 0.4 * m_hem * r * r - m_hem * (3.0 * r / 8.0) ** 2
    i_perp += 2.0 * (i_hem_com + m_hem * d * d)
    return np.diag([i_perp, i_perp, i_ax])


def capsule_inertia(mass: float, radius: float, length: float, axis=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Inertia tensor of a solid capsule about its center with the
    cylinder axis along ``axis``."""
    frame = _axis_frame(np.asarray(axis, dtype=float))
    return frame @ _solid_capsule_inertia(mass, radius, length) @ frame.T


def _axis_frame(axis: np.ndarray) -> np.ndarray:
    """Orthonormal frame whose third column is the given axis direction."""
    z = axis / np.linalg.norm(axis)
    pick = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(pick, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def compute_masses(chain: CapsuleChain, shape: BodyShape) -> CapsuleChain:
    """Assign per-capsule masses and inertia from voxelized volumes.

    Mean-body capsule masses follow the committed segment mass fractions
    scaled by the capsule's share of its segment's volume; other shapes
    scale each capsule by its volume ratio to the mean body.
    """
    vols = _chain_volumes(chain)
    mean_chain, mean_vols = _mean_body(shape.gender)
    mtab = _tables()["mass"][shape.gender]

    mean_masses = np.zeros(chain.num_capsules)
    name_idx = {n: i for i, n in enumerate(CAPSULE_NAMES)}
    for part in mtab["parts"].values():
        ids = [name_idx[n] for n in part["capsules"]]
        seg_vol = float(np.sum(mean_vols[ids]))
        for i in ids:
            mean_masses[i] = mtab["mean_body_mass_kg"] * part["fraction"] * mean_vols[i] / seg_vol

    masses = mean_masses * (vols / mean_vols)

    inertias = np.zeros((chain.num_capsules, 3, 3))
    for c in range(chain.num_capsules):
        axis = chain.axis_end[c] - chain.axis_start[c]
        frame = _axis_frame(axis)
        principal = _solid_capsule_inertia(masses[c], chain.radii[c], chain.lengths[c])
        inertias[c] = frame @ principal @ frame.T
    return chain.with_params(masses=masses, inertias=inertias)


def _zero_pose_segments(chain: CapsuleChain):
    pose = PoseState(np.zeros(NUM_ANGLES), np.zeros(3), np.zeros(3))
    posed = forward_kinematics(chain, pose)
    return posed.seg_a, posed.seg_b


_VOLUME_CACHE: dict = {}


def _chain_volumes(chain: CapsuleChain) -> np.ndarray:
    key = (chain.gender, chain.radii.tobytes(), chain.lengths.tobytes())
    if key not in _VOLUME_CACHE:
        if len(_VOLUME_CACHE) > 64:
            _VOLUME_CACHE.clear()
        seg_a, seg_b = _zero_pose_segments(chain)
        _VOLUME_CACHE[key] = capsule_voxel_volumes(seg_a, seg_b, chain.radii)
    return _VOLUME_CACHE[key]


@lru_cache(maxsize=2)
def _mean_body(gender: str):
    chain = regress_capsules(BodyShape(np.zeros(10), gender))
    return chain, _chain_volumes(chain)


def joint_params(chain: CapsuleChain, shape: BodyShape) -> CapsuleChain:
    """Joint stiffness scaled by body-mass ratio, damping at 15x, and the
    home-pose equilibrium."""
    if chain.masses is None:
        raise ValueError("compute_masses must run before joint_params")
    mean_mass = _tables()["mass"][shape.gender]["mean_body_mass_kg"]
    ratio = chain.total_mass / mean_mass

    k = np.zeros(NUM_ANGLES)
    for base, joints in _STIFFNESS_GROUPS.values():
        for j in joints:
            k[3 * (j - 1): 3 * j] = base * ratio
    b = DAMPING_RATIO * k
    eq = home_pose_angles()
    return chain.with_params(joint_stiffness=k, joint_damping=b, joint_eq=eq)


def build_body(shape: BodyShape) -> CapsuleChain:
    """Full chain: geometry, masses, inertia, joint parameters."""
    chain = regress_capsules(shape)
    chain = compute_masses(chain, shape)
    chain = joint_params(chain, shape)
    chain.validate()
    return chain


def surface_points(posed: PosedCapsules, spacing: float = 0.015) -> np.ndarray:
    """Points sampled on the capsule-union outer surface.

    Cylinder walls are sampled as rings along each axis, caps as polar
    rings; points that fall strictly inside another capsule are dropped
    so the result approximates the union surface.
    """
    pts = []
    n = len(posed.radii)
    for c in range(n):
        a, b, r = posed.seg_a[c], posed.seg_b[c], posed.radii[c]
        axis = b - a
        length = float(np.linalg.norm(axis))
        frame = _axis_frame(axis if length > 1e-9 else np.array([0.0, 0.0, 1.0]))
        u, v, w = frame[:, 0], frame[:, 1], frame[:, 2]
        n_ring = max(6, int(np.ceil(2 * np.pi * r / spacing)))
        ang = np.linspace(0.0, 2 * np.pi, n_ring, endpoint=False)
        circ = np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v
        if length > 1e-9:
            n_len = max(2, int(np.ceil(length / spacing)) + 1)
            ts = np.linspace(0.0, 1.0, n_len)
            centers = a + ts[:, None] * axis
            pts.append((centers[:, None, :] + r * circ[None, :, :]).reshape(-1, 3))
        # spherical caps
        n_lat = max(2, int(np.ceil((np.pi / 2) * r / spacing)))
        lats = np.linspace(0.0, np.pi / 2, n_lat + 1)[1:]
        for center, sign in ((b, 1.0), (a, -1.0)):
            for lat in lats:
                ring = center + r * np.cos(lat) * circ + sign * r * np.sin(lat) * w
                pts.append(ring)
    allpts = np.concatenate(pts, axis=0)

    keep = np.ones(len(allpts), dtype=bool)
    for c in range(n):
        d = geom.point_segment_distance(allpts, posed.seg_a[c], posed.seg_b[c])
        keep &= d >= posed.radii[c] - 1e-9
    return allpts[keep]
