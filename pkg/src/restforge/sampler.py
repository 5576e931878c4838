"""Initial pose and shape generation.

Shapes are uniform in [-3, 3]^10.  Poses are rejection-sampled per limb:
pick a target cuboid for the limb's distal joint uniformly from the
partition's cell set, then redraw that limb's joint angles from the
uniform joint-limit box until the distal joint lands inside the cell.
Posture partitions add roll/yaw rules and extra predicates (crossed
feet, straight elbows/knees, hands in a box behind the head).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import body as body_mod
from . import geom
from .body import BodyShape, CapsuleChain, PosedCapsules, PoseState
from .errors import SamplingBudgetExceeded

BED_WIDTH = 0.9652  # m, twin-XL
BED_LENGTH = 2.0  # m

DEFAULT_ATTEMPT_CAP = 10_000
Z_BAND = 0.10  # distal joint must start within +-10 cm of the proximal height


@dataclass(frozen=True)
class Cuboid:
    """Axis-aligned box in world coordinates."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float).reshape(3))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float).reshape(3))
        if not np.all(self.lo < self.hi):
            raise ValueError("cuboid must have lo < hi on every axis")

    def contains(self, p: np.ndarray) -> bool:
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))

    def clipped_xy(self, xlim, ylim) -> "Cuboid | None":
        lo = self.lo.copy()
        hi = self.hi.copy()
        lo[0], hi[0] = max(lo[0], xlim[0]), min(hi[0], xlim[1])
        lo[1], hi[1] = max(lo[1], ylim[0]), min(hi[1], ylim[1])
        if lo[0] >= hi[0] or lo[1] >= hi[1]:
            return None
        return Cuboid(lo, hi)


# Per-joint angle limits (radians), indexed by joint id; three (lo, hi)
# pairs for the joint's intrinsic x/y/z angles.  Wide intervals follow
# published range-of-motion data for hips, knees, shoulders and elbows;
# torso and head get narrow bands.
_SMALL = (-0.15, 0.15)
JOINT_LIMIT_TABLE: dict[int, tuple] = {
    1: ((-1.9, 0.35), (-0.7, 0.7), (-0.5, 1.0)),   # hip_l
    2: ((-1.9, 0.35), (-0.7, 0.7), (-1.0, 0.5)),   # hip_r
    3: (_SMALL, _SMALL, _SMALL),                   # spine_lower
    4: ((0.0, 2.2), (-0.05, 0.05), (-0.05, 0.05)),  # knee_l
    5: ((0.0, 2.2), (-0.05, 0.05), (-0.05, 0.05)),  # knee_r
    6: (_SMALL, _SMALL, _SMALL),                   # spine_mid
    7: ((-0.5, 0.5), (-0.25, 0.25), (-0.25, 0.25)),  # ankle_l
    8: ((-0.5, 0.5), (-0.25, 0.25), (-0.25, 0.25)),  # ankle_r
    9: (_SMALL, _SMALL, _SMALL),                   # spine_upper
    10: ((-0.3, 0.3), (-0.1, 0.1), (-0.1, 0.1)),   # foot_l
    11: ((-0.3, 0.3), (-0.1, 0.1), (-0.1, 0.1)),   # foot_r
    12: ((-0.4, 0.4), (-0.3, 0.3), (-0.3, 0.3)),   # neck_base
    13: ((-0.2, 0.2), (-0.2, 0.2), (-0.25, 0.25)),  # collar_l
    14: ((-0.2, 0.2), (-0.2, 0.2), (-0.25, 0.25)),  # collar_r
    15: ((-0.4, 0.4), (-0.3, 0.3), (-0.3, 0.3)),   # head_base
    16: ((-1.4, 1.4), (-1.2, 1.2), (-2.1, 1.75)),  # shoulder_l
    17: ((-1.4, 1.4), (-1.2, 1.2), (-1.75, 2.1)),  # shoulder_r
    18: ((-0.1, 0.1), (-1.0, 1.0), (0.0, 2.6)),    # elbow_l
    19: ((-0.1, 0.1), (-1.0, 1.0), (-2.6, 0.0)),   # elbow_r
    20: ((-0.4, 0.4), (-0.4, 0.4), (-0.4, 0.4)),   # wrist_l
    21: ((-0.4, 0.4), (-0.4, 0.4), (-0.4, 0.4)),   # wrist_r
    22: ((-0.1, 0.1), (-0.1, 0.1), (-0.1, 0.1)),   # hand_l
    23: ((-0.1, 0.1), (-0.1, 0.1), (-0.1, 0.1)),   # hand_r
}

STRAIGHT_LIMIT = np.deg2rad(5.0)


@dataclass(frozen=True)
class JointLimits:
    """(69, 2) table of per-angle lower/upper bounds."""

    bounds: np.ndarray

    @classmethod
    def default(cls) -> "JointLimits":
        b = np.zeros((body_mod.NUM_ANGLES, 2))
        for j, lims in JOINT_LIMIT_TABLE.items():
            for a in range(3):
                b[3 * (j - 1) + a] = lims[a]
        return cls(b)

    def __post_init__(self):
        bounds = np.asarray(self.bounds, dtype=float).reshape(body_mod.NUM_ANGLES, 2)
        object.__setattr__(self, "bounds", bounds)
        if not np.all(bounds[:, 0] < bounds[:, 1]):
            raise ValueError("every joint limit interval needs lower < upper")

    def narrowed(self, entries: dict[int, tuple[float, float]]) -> "JointLimits":
        b = self.bounds.copy()
        for idx, (lo, hi) in entries.items():
            b[idx] = (max(b[idx, 0], lo), min(b[idx, 1], hi))
        return JointLimits(b)

    def contains(self, theta: np.ndarray) -> bool:
        return bool(
            np.all(theta >= self.bounds[:, 0] - 1e-12)
            and np.all(theta <= self.bounds[:, 1] + 1e-12)
        )


# Limb definitions: sampled joints, proximal joint, distal joint.
LIMBS = {
    "leg_l": {"joints": (1, 4, 7, 10), "proximal": 1, "distal": 10},
    "leg_r": {"joints": (2, 5, 8, 11), "proximal": 2, "distal": 11},
    "arm_l": {"joints": (16, 18, 20, 22), "proximal": 16, "distal": 22},
    "arm_r": {"joints": (17, 19, 21, 23), "proximal": 17, "distal": 23},
}
TORSO_JOINTS = (3, 6, 9, 12, 13, 14, 15)

PARTITION_NAMES = (
    "general",
    "supine_general",
    "hands_behind_head",
    "prone_hands_up",
    "supine_crossed_legs",
    "supine_straight_limbs",
)


@dataclass(frozen=True)
class PartitionSpec:
    """Sampling rules for one posture partition."""

    name: str
    roll: tuple[float, float] | float
    yaw: tuple[float, float] = (-np.pi / 3.0, np.pi / 3.0)
    limbs_on_bed: bool = False
    arm_mode: str = "even"        # even | behind_head | above_shoulders
    crossed_feet: bool = False
    straight_limbs: bool = False
    root_x: tuple[float, float] = (0.35 * BED_WIDTH, 0.65 * BED_WIDTH)
    root_y: tuple[float, float] = (0.47 * BED_LENGTH, 0.58 * BED_LENGTH)

    def with_limbs_on_bed(self, flag: bool) -> "PartitionSpec":
        return replace(self, limbs_on_bed=flag)


PARTITIONS: dict[str, PartitionSpec] = {
    "general": PartitionSpec("general", roll=(-np.pi, np.pi)),
    "supine_general": PartitionSpec("supine_general", roll=0.0),
    "hands_behind_head": PartitionSpec(
        "hands_behind_head", roll=0.0, limbs_on_bed=True, arm_mode="behind_head"
    ),
    "prone_hands_up": PartitionSpec(
        "prone_hands_up", roll=np.pi, limbs_on_bed=True, arm_mode="above_shoulders"
    ),
    "supine_crossed_legs": PartitionSpec(
        "supine_crossed_legs", roll=0.0, crossed_feet=True
    ),
    "supine_straight_limbs": PartitionSpec(
        "supine_straight_limbs", roll=0.0, straight_limbs=True
    ),
}

# Table rows: (partition, gender, limbs_on_bed, weight).  Weights follow
# the committed generation plan; largest-remainder scaling keeps any
# requested total exact.
PLAN_ROWS: tuple = (
    ("general", "F", False, 26000),
    ("general", "M", False, 26000),
    ("general", "F", True, 26000),
    ("general", "M", True, 26000),
    ("supine_general", "F", False, 13000),
    ("supine_general", "M", False, 13000),
    ("supine_general", "F", True, 13000),
    ("supine_general", "M", True, 13000),
    ("hands_behind_head", "F", True, 2000),
    ("hands_behind_head", "M", True, 2000),
    ("prone_hands_up", "F", True, 4000),
    ("prone_hands_up", "M", True, 4000),
    ("supine_crossed_legs", "F", False, 2000),
    ("supine_crossed_legs", "M", False, 2000),
    ("supine_crossed_legs", "F", True, 2000),
    ("supine_crossed_legs", "M", True, 2000),
    ("supine_straight_limbs", "F", False, 2000),
    ("supine_straight_limbs", "M", False, 2000),
    ("supine_straight_limbs", "F", True, 2000),
    ("supine_straight_limbs", "M", True, 2000),
)


@dataclass
class PlanRow:
    partition: str
    gender: str
    limbs_on_bed: bool
    count: int


@dataclass
class SampleReport:
    """Rejection bookkeeping for one accepted pose."""

    limb_rejections: dict = field(default_factory=dict)
    collision_rejections: int = 0
    predicate_rejections: int = 0
    chosen_cells: dict = field(default_factory=dict)


def sample_shape(rng: np.random.Generator, gender: str | None = None) -> BodyShape:
    """Uniform shape coefficients; gender drawn 50/50 when not given."""
    if gender is None:
        gender = "F" if rng.random() < 0.5 else "M"
    beta = rng.uniform(-3.0, 3.0, size=10)
    return BodyShape(beta, gender)


def _limb_reach(chain: CapsuleChain, limb: str) -> float:
    L = {n: chain.lengths[i] for i, n in enumerate(body_mod.CAPSULE_NAMES)}
    if limb.startswith("leg"):
        side = limb[-1]
        return L[f"thigh_{side}"] + L[f"shin_{side}"] + L[f"foot_{side}"]
    side = limb[-1]
    return L[f"upper_arm_{side}"] + L[f"forearm_{side}"] + L[f"hand_{side}"]


def leg_cells(proximal: np.ndarray, reach: float) -> list[Cuboid]:
    """Four cells tiling the reachable half-space below the hip (toward
    the feet), split 2x2 in x and y, with the +-10 cm starting band in z."""
    px, py, pz = proximal
    cells = []
    for x0, x1 in ((-reach, 0.0), (0.0, reach)):
        for y0, y1 in ((-reach, -0.5 * reach), (-0.5 * reach, 0.0)):
            cells.append(
                Cuboid(
                    (px + x0, py + y0, pz - Z_BAND),
                    (px + x1, py + y1, pz + Z_BAND),
                )
            )
    return cells


def arm_cells(proximal: np.ndarray, reach: float) -> list[Cuboid]:
    """Eight cells: the leg construction mirrored plus four cells above
    the shoulder, since the hand may extend both below and above its
    root joint along the bed."""
    px, py, pz = proximal
    cells = []
    for x0, x1 in ((-reach, 0.0), (0.0, reach)):
        for y0, y1 in (
            (-reach, -0.5 * reach),
            (-0.5 * reach, 0.0),
            (0.0, 0.5 * reach),
            (0.5 * reach, reach),
        ):
            cells.append(
                Cuboid(
                    (px + x0, py + y0, pz - Z_BAND),
                    (px + x1, py + y1, pz + Z_BAND),
                )
            )
    return cells


HEAD_BOX_SIZE = np.array([0.25, 0.25, 0.20])
HEAD_BOX_AHEAD = 0.10  # box center sits beyond the head joint, toward the crown


def behind_head_cell(head_pos: np.ndarray, up_dir: np.ndarray, side: str) -> Cuboid:
    """Box behind/above the head where a hand rests in the
    hands-behind-head posture; slightly offset per side."""
    center = head_pos + up_dir * HEAD_BOX_AHEAD
    center = center + np.array([0.05 if side == "l" else -0.05, 0.0, 0.0])
    half = 0.5 * HEAD_BOX_SIZE
    return Cuboid(center - half, center + half)


def _draw_limb(theta, limb, limits, rng):
    for j in LIMBS[limb]["joints"]:
        sl = slice(3 * (j - 1), 3 * j)
        theta[sl] = rng.uniform(limits.bounds[sl, 0], limits.bounds[sl, 1])


def _partition_limits(spec: PartitionSpec, limits: JointLimits) -> JointLimits:
    if not spec.straight_limbs:
        return limits
    entries = {}
    for j in (4, 5):  # knees: flexion is the x angle
        entries[3 * (j - 1)] = (-STRAIGHT_LIMIT, STRAIGHT_LIMIT)
    for j in (18, 19):  # elbows: flexion is the z angle
        entries[3 * (j - 1) + 2] = (-STRAIGHT_LIMIT, STRAIGHT_LIMIT)
    return limits.narrowed(entries)


def sample_pose(
    partition: PartitionSpec,
    shape: BodyShape,
    rng: np.random.Generator,
    chain: CapsuleChain | None = None,
    limits: JointLimits | None = None,
    attempt_cap: int = DEFAULT_ATTEMPT_CAP,
) -> tuple[PoseState, SampleReport]:
    """Draw one accepted initial pose for the partition.

    Raises SamplingBudgetExceeded when any limb fails to land in its
    cell within ``attempt_cap`` attempts.
    """
    if chain is None:
        chain = body_mod.regress_capsules(shape)
    limits = _partition_limits(partition, limits or JointLimits.default())
    report = SampleReport()

    roll = (
        float(partition.roll)
        if np.isscalar(partition.roll)
        else rng.uniform(*partition.roll)
    )
    yaw = rng.uniform(*partition.yaw)
    root_pos = np.array(
        [rng.uniform(*partition.root_x), rng.uniform(*partition.root_y), 0.0]
    )
    root_rot = np.array([roll, 0.0, yaw])

    outer_cap = 200
    for _ in range(outer_cap):
        theta = np.zeros(body_mod.NUM_ANGLES)
        for j in TORSO_JOINTS:
            sl = slice(3 * (j - 1), 3 * j)
            theta[sl] = rng.uniform(limits.bounds[sl, 0], limits.bounds[sl, 1])

        pose = PoseState(theta, root_rot, root_pos)
        posed = body_mod.forward_kinematics(chain, pose)
        ok = True
        for limb in ("leg_l", "leg_r", "arm_l", "arm_r"):
            cell = _choose_cell(partition, limb, chain, posed, rng, report)
            if not _fill_limb(
                theta, pose, chain, limb, cell, limits, rng, report, attempt_cap
            ):
                ok = False
                break
        if not ok:
            raise SamplingBudgetExceeded(
                f"limb sampling exceeded {attempt_cap} attempts"
            )

        posed = body_mod.forward_kinematics(chain, pose)
        if partition.crossed_feet and not _feet_crossed(posed):
            report.predicate_rejections += 1
            continue
        accept, _pairs = check_self_collision(posed)
        if not accept:
            report.collision_rejections += 1
            continue
        return pose, report
    raise SamplingBudgetExceeded(
        f"no collision-free pose within {outer_cap} whole-pose redraws"
    )


def _choose_cell(partition, limb, chain, posed, rng, report) -> Cuboid:
    proximal = posed.joint_positions[LIMBS[limb]["proximal"]]
    reach = _limb_reach(chain, limb)
    is_arm = limb.startswith("arm")
    if is_arm and partition.arm_mode == "behind_head":
        up = posed.joint_rotations[15] @ np.array([0.0, 1.0, 0.0])
        cell = behind_head_cell(posed.joint_positions[15], up, limb[-1])
        cells = [cell]
        idx = 0
    else:
        cells = arm_cells(proximal, reach) if is_arm else leg_cells(proximal, reach)
        if is_arm and partition.arm_mode == "above_shoulders":
            cells = cells[2:4] + cells[6:8]  # the cells past the shoulder in +y
        if partition.limbs_on_bed:
            clipped = [c.clipped_xy((0.0, BED_WIDTH), (0.0, BED_LENGTH)) for c in cells]
            cells = [c if c is not None else cells[i] for i, c in enumerate(clipped)]
        idx = int(rng.integers(len(cells)))
    report.chosen_cells[limb] = idx
    return cells[idx]


def _fill_limb(theta, pose, chain, limb, cell, limits, rng, report, attempt_cap) -> bool:
    distal = LIMBS[limb]["distal"]
    tries = 0
    while tries < attempt_cap:
        tries += 1
        _draw_limb(theta, limb, limits, rng)
        posed = body_mod.forward_kinematics(chain, pose)
        if cell.contains(posed.joint_positions[distal]):
            report.limb_rejections[limb] = (
                report.limb_rejections.get(limb, 0) + tries - 1
            )
            return True
    report.limb_rejections[limb] = report.limb_rejections.get(limb, 0) + tries
    return False


def _feet_crossed(posed: PosedCapsules) -> bool:
    jp = posed.joint_positions
    hips = jp[1][0] - jp[2][0]
    feet = jp[10][0] - jp[11][0]
    return bool(np.sign(hips) != 0 and np.sign(feet) == -np.sign(hips))


# capsule indices checked for self-collision
_CHECKED = tuple(
    body_mod.CAPSULE_NAMES.index(n)
    for n in (
        "hand_l", "hand_r", "forearm_l", "forearm_r",
        "foot_l", "foot_r", "shin_l", "shin_r",
    )
)
_THIGHS = (
    body_mod.CAPSULE_NAMES.index("thigh_l"),
    body_mod.CAPSULE_NAMES.index("thigh_r"),
)


def _adjacent_pairs() -> set:
    """Capsule pairs sharing a joint anchor (never collision-checked)."""
    joint_of = body_mod.CAPSULE_JOINT
    end_of = body_mod.CAPSULE_END_JOINT
    pairs = set()
    n = len(joint_of)
    for i in range(n):
        ji = {int(joint_of[i])} | ({int(end_of[i])} if end_of[i] >= 0 else set())
        # the pelvis capsule spans both hips
        if i == 0:
            ji |= {1, 2}
        for j in range(i + 1, n):
            jj = {int(joint_of[j])} | ({int(end_of[j])} if end_of[j] >= 0 else set())
            if j == 0:
                jj |= {1, 2}
            if ji & jj:
                pairs.add((i, j))
    # chained neighbours that share a joint only through the skeleton
    parents = body_mod.JOINT_PARENTS
    for i in range(n):
        for j in range(i + 1, n):
            a, b = int(joint_of[i]), int(joint_of[j])
            if parents[a] == b or parents[b] == a or a == b:
                pairs.add((i, j))
    return pairs


_ADJACENT = _adjacent_pairs()


def check_self_collision(posed: PosedCapsules) -> tuple[bool, list]:
    """Accept/reject plus the offending capsule pairs.

    Hands, forearms, feet and shins are tested against every non-adjacent
    capsule; thigh capsules are exempt because they overlap in many
    valid poses.
    """
    offending = []
    n = len(posed.radii)
    seen = set()
    for i in _CHECKED:
        for j in range(n):
            if j == i or j in _THIGHS:
                continue
            key = (min(i, j), max(i, j))
            if key in _ADJACENT or key in seen:
                continue
            seen.add(key)
            d = geom.segment_segment_distance(
                posed.seg_a[i], posed.seg_b[i], posed.seg_a[j], posed.seg_b[j]
            )
            if d < posed.radii[i] + posed.radii[j]:
                offending.append(key)
    return (len(offending) == 0), offending


def plan_partitions(total: int) -> list[PlanRow]:
    """Scale the committed 20-row plan to ``total`` records using
    largest-remainder rounding so the counts sum exactly."""
    if total <= 0:
        raise ValueError("total must be positive")
    weights = np.array([r[3] for r in PLAN_ROWS], dtype=float)
    exact = total * weights / weights.sum()
    counts = np.floor(exact).astype(int)
    remainder = total - int(counts.sum())
    order = np.argsort(-(exact - counts), kind="stable")
    for i in order[:remainder]:
        counts[i] += 1
    return [
        PlanRow(p, g, lb, int(c))
        for (p, g, lb, _), c in zip(PLAN_ROWS, counts)
    ]
