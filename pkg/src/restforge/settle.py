"""Resting-pose simulation: capsule ragdoll coupled to the soft bed.

The articulated body integrates in reduced coordinates (6-DOF floating
root plus three angles per joint).  Each step builds the generalized
mass matrix from capsule Jacobians and solves one linear system with
joint spring-damper terms handled implicitly, which keeps the heavily
damped ragdoll stable at the fixed 0.0103 s timestep.  Contact forces
come from the mat's particle penetrations through a mass-spring-damper
law with Coulomb friction, are aggregated into per-capsule wrenches,
and feed back into the next rigid step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import body as body_mod
from . import geom
from . import mat as mat_mod
from .body import CapsuleChain, PosedCapsules, PoseState
from .errors import IntegrationDiverged, MatUnstable

GRAVITY = np.array([0.0, 0.0, -9.81])

V_SETTLED = 0.05  # m/s
A_SETTLED = 0.5  # m/s^2
MAX_ITERATIONS = 2000
ZERO_VELOCITY_INTERVAL = 4
DT_DEFAULT = 0.0103  # s
JOINT_SPEED_LIMIT = 50.0  # rad/s
TANGENTIAL_EPS = 1e-5  # m/s
FRICTION_REG = 0.01  # m/s, Coulomb regularization to stop stick-slip chatter

PELVIS_CAPSULE = 0


@dataclass
class SettleParams:
    spring_k: float = 200.0
    spring_b: float | None = None  # defaults to 4k
    mu_k: float = 0.5
    dt: float = DT_DEFAULT
    max_iterations: int = MAX_ITERATIONS
    mat_iterations: int = mat_mod.DEFAULT_ITERATIONS
    clearance: float = 0.01
    # small implicit stabilizer per contact (N s/m); keeps the explicit
    # contact spring stable at the fixed timestep without slaving the
    # approach to equilibrium
    contact_stab: float = 40.0
    # declare rest only once the normal forces also carry the body
    # weight to this relative tolerance (None disables the gate)
    balance_gate: float | None = 0.08

    def __post_init__(self):
        if self.spring_b is None:
            self.spring_b = 4.0 * self.spring_k


@dataclass
class ContactForce:
    """One particle contact: normal and tangential force on a capsule."""

    f_normal: np.ndarray
    f_tangent: np.ndarray
    capsule: int
    point: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.f_normal + self.f_tangent


class ContactSet:
    """Struct-of-arrays contact batch; iterates as ContactForce records.

    ``f_normal`` is the reported spring-damper force; ``spring_mag``
    holds just the elastic part, which the settle loop applies
    explicitly while the damper part enters the rigid solve implicitly.
    """

    def __init__(
        self, f_normal, f_tangent, capsule, point,
        normal=None, spring_mag=None, vref_n=None,
    ):
        self.f_normal = f_normal
        self.f_tangent = f_tangent
        self.capsule = capsule
        self.point = point
        self.normal = normal
        self.spring_mag = spring_mag
        self.vref_n = vref_n  # base-plane velocity along the normal

    def __len__(self):
        return len(self.capsule)

    def __iter__(self):
        for i in range(len(self)):
            yield ContactForce(
                self.f_normal[i], self.f_tangent[i], int(self.capsule[i]), self.point[i]
            )

    @property
    def total(self):
        return self.f_normal + self.f_tangent

    @classmethod
    def empty(cls):
        z = np.zeros((0, 3))
        return cls(
            z, z.copy(), np.zeros(0, dtype=int), z.copy(), z.copy(),
            np.zeros(0), np.zeros(0),
        )


@dataclass
class SettleReport:
    result: str  # Settled | RejectedTimeout | RejectedMatUnstable
    iterations: int
    v_max: float
    a_max: float
    theta: np.ndarray
    root_rot: np.ndarray
    root_pos: np.ndarray
    normal_force_sum: np.ndarray = field(default_factory=lambda: np.zeros(3))
    kinetic_energy: list = field(default_factory=list)
    buttocks_contact_iteration: int | None = None

    @property
    def settled(self) -> bool:
        return self.result == "Settled"

    @property
    def pose(self) -> PoseState:
        return PoseState(self.theta.copy(), self.root_rot.copy(), self.root_pos.copy())

    def to_json_dict(self) -> dict:
        return {
            "result": self.result,
            "iterations": self.iterations,
            "v_max": self.v_max,
            "a_max": self.a_max,
            "theta": self.theta.tolist(),
            "root_rot": self.root_rot.tolist(),
            "root_pos": self.root_pos.tolist(),
            "normal_force_sum": self.normal_force_sum.tolist(),
            "buttocks_contact_iteration": self.buttocks_contact_iteration,
        }


class RigidState:
    """Generalized coordinates and velocities of the articulated chain."""

    def __init__(self, chain: CapsuleChain, pose: PoseState):
        self.chain = chain
        self.theta = pose.theta.copy()
        self.R_root = geom.root_rotation(*pose.root_rot)
        self.root_pos = pose.root_pos.copy()
        self.ndof = 6 + len(self.theta)
        self.v = np.zeros(self.ndof)
        self._ancestors = _ancestor_table(chain)

    def zero_velocity(self):
        self.v[:] = 0.0

    def pose(self) -> PoseState:
        roll, pitch, yaw = geom.rotation_to_root_euler(self.R_root)
        return PoseState(self.theta.copy(), np.array([roll, pitch, yaw]), self.root_pos.copy())

    def fk(self) -> PosedCapsules:
        return body_mod.fk_from_root(self.chain, self.theta, self.R_root, self.root_pos)


def _ancestor_table(chain: CapsuleChain) -> np.ndarray:
    """(num_joints, num_capsules) mask: capsule c moves with joint j."""
    nj = chain.num_joints
    nc = chain.num_capsules
    parents = chain.joint_parents
    mask = np.zeros((nj, nc), dtype=bool)
    for c in range(nc):
        j = int(chain.capsule_joint[c])
        while j >= 0:
            mask[j, c] = True
            j = int(parents[j])
    return mask


def _cross_vec(w, rel):
    """w x rel for a single 3-vector against rows of rel, without the
    generic np.cross overhead."""
    out = np.empty_like(rel)
    out[:, 0] = w[1] * rel[:, 2] - w[2] * rel[:, 1]
    out[:, 1] = w[2] * rel[:, 0] - w[0] * rel[:, 2]
    out[:, 2] = w[0] * rel[:, 1] - w[1] * rel[:, 0]
    return out


def _jacobians(state: RigidState, posed: PosedCapsules):
    """Linear (about the capsule COM) and angular Jacobians, (C, 3, ndof)."""
    chain = state.chain
    nc = chain.num_capsules
    nd = state.ndof
    coms = posed.centers
    Jv = np.zeros((nc, 3, nd))
    Jw = np.zeros((nc, 3, nd))

    Jv[:, 0, 0] = 1.0
    Jv[:, 1, 1] = 1.0
    Jv[:, 2, 2] = 1.0
    rel_root = coms - state.root_pos
    eye = np.eye(3)
    for k in range(3):
        Jw[:, :, 3 + k] = eye[k]
        Jv[:, :, 3 + k] = _cross_vec(eye[k], rel_root)

    jrot = posed.joint_rotations
    jpos = posed.joint_positions
    parents = chain.joint_parents
    for j in range(1, chain.num_joints):
        subtree = state._ancestors[j]
        if not subtree.any():
            continue
        ang = state.theta[3 * (j - 1): 3 * j]
        axes_world = jrot[parents[j]] @ geom.joint_axes(ang)  # columns
        rel = coms[subtree] - jpos[j]
        base = 6 + 3 * (j - 1)
        for a in range(3):
            w = axes_world[:, a]
            Jw[subtree, :, base + a] = w
            Jv[subtree, :, base + a] = _cross_vec(w, rel)
    return Jv, Jw


def _mass_matrix(chain: CapsuleChain, posed: PosedCapsules, Jv, Jw) -> np.ndarray:
    m = chain.masses
    R = posed.rotations
    I_world = np.einsum("cab,cbd,ced->cae", R, chain.inertias, R)
    nc, _, nd = Jv.shape
    Jv2 = Jv.reshape(nc * 3, nd)
    weights = np.repeat(m, 3)[:, None]
    M = Jv2.T @ (Jv2 * weights)
    IJw = np.einsum("cab,cbk->cak", I_world, Jw).reshape(nc * 3, nd)
    M += Jw.reshape(nc * 3, nd).T @ IJw
    return M


def rigid_step(
    state: RigidState,
    forces: np.ndarray,
    moments: np.ndarray,
    dt: float,
    fixed_root: bool = False,
    contact_dampers: tuple | None = None,
) -> RigidState:
    """One implicit-PD articulated step with external per-capsule wrenches.

    ``forces`` must already include gravity when it applies.  Joint
    spring-dampers and the optional contact dampers (point, normal,
    capsule, coefficient) enter the system matrix implicitly, so stiff
    damping stays stable at the fixed timestep.  Raises
    IntegrationDiverged when any joint speed exceeds the safe bound.
    """
    chain = state.chain
    if chain.masses is None or chain.joint_stiffness is None:
        raise ValueError("chain needs masses and joint parameters")
    posed = state.fk()
    Jv, Jw = _jacobians(state, posed)
    M = _mass_matrix(chain, posed, Jv, Jw)

    Q = np.einsum("cak,ca->k", Jv, forces) + np.einsum("cak,ca->k", Jw, moments)
    k_th = chain.joint_stiffness
    b_th = chain.joint_damping
    Q_spring = np.zeros(state.ndof)
    Q_spring[6:] = -k_th * (state.theta - chain.joint_eq)

    A = M.copy()
    damp = np.zeros(state.ndof)
    damp[6:] = b_th + dt * k_th
    A[np.arange(state.ndof), np.arange(state.ndof)] += dt * damp
    rhs = M @ state.v + dt * (Q + Q_spring)
    if contact_dampers is not None:
        points, normals, capsule_idx, b_c, vref_n = contact_dampers
        if len(points):
            arms = points - posed.centers[capsule_idx]
            # velocity at the contact point: Jv - [arm]x Jw, projected on n;
            # the damper opposes motion relative to the base plane
            Jp = Jv[capsule_idx] - np.cross(
                arms[:, :, None], Jw[capsule_idx], axisa=1, axisb=1, axisc=1
            )
            G = np.einsum("pa,pak->pk", normals, Jp)
            A += (dt * b_c) * (G.T @ G)
            rhs += (dt * b_c) * (G.T @ vref_n)

    if fixed_root:
        free = np.arange(6, state.ndof)
        v_new = np.zeros(state.ndof)
        v_new[free] = np.linalg.solve(A[np.ix_(free, free)], rhs[free])
    else:
        v_new = np.linalg.solve(A, rhs)

    if not np.all(np.isfinite(v_new)) or np.max(np.abs(v_new[6:])) > JOINT_SPEED_LIMIT:
        raise IntegrationDiverged("joint speed beyond safe bound")

    state.v = v_new
    state.root_pos = state.root_pos + dt * v_new[:3]
    state.R_root = geom.exp_so3(dt * v_new[3:6]) @ state.R_root
    state.theta = state.theta + dt * v_new[6:]
    state._M_cache = M
    state._Jv_cache = Jv
    return state


def capsule_velocities(state: RigidState, posed: PosedCapsules | None = None) -> np.ndarray:
    """COM velocities of every capsule.  Reuses the Jacobians of the
    last rigid step when available (one-step-old configuration, which
    is accurate to O(dt) and avoids a second Jacobian build)."""
    Jv = getattr(state, "_Jv_cache", None)
    if Jv is None:
        if posed is None:
            posed = state.fk()
        Jv, _ = _jacobians(state, posed)
    return Jv @ state.v


def contact_forces(
    mat_state: mat_mod.MatState,
    posed: PosedCapsules,
    k: float,
    b: float,
    mu_k: float,
    capsule_velocity: np.ndarray | None = None,
    capsule_masses: np.ndarray | None = None,
) -> ContactSet:
    """Mass-spring-damper normal forces with Coulomb friction.

    Normal magnitude is k*s + b*ds/dt along the base-plane normal,
    clamped to push out of the bed; each contact is assigned to the
    nearest capsule and friction opposes that capsule's velocity
    component tangential to the normal.  When masses are given, each
    friction force is additionally capped so its one-step impulse can
    stop the capsule's slide but never reverse it.
    """
    s = mat_state.pen_last
    rows, cols = np.nonzero(s > mat_mod.CONTACT_THRESHOLD)
    if len(rows) == 0:
        return ContactSet.empty()
    zc, gx, gy, nz = mat_mod.base_plane_fields(mat_state)
    n = np.stack(
        [-gx[rows, cols] * nz[rows, cols], -gy[rows, cols] * nz[rows, cols], nz[rows, cols]],
        axis=1,
    )
    rate = mat_state.pen_rate[rows, cols]
    spring = k * s[rows, cols]
    # damper bounded by the elastic scale so contact onset cannot spike
    fmag = np.clip(spring + b * rate, 0.0, 2.0 * spring)
    f_normal = fmag[:, None] * n

    points = np.stack(
        [
            mat_state.top_x[cols],
            mat_state.top_y[rows],
            mat_state.top_z[rows, cols],
        ],
        axis=1,
    )
    nearest = _nearest_capsule(points, posed)

    f_tangent = np.zeros_like(f_normal)
    if capsule_velocity is not None and mu_k > 0.0:
        v = capsule_velocity[nearest]
        v_norm_comp = np.einsum("ia,ia->i", v, n)[:, None] * n
        tang = v - v_norm_comp
        speed = np.linalg.norm(tang, axis=1)
        sliding = speed > TANGENTIAL_EPS
        if np.any(sliding):
            direction = tang[sliding] / speed[sliding, None]
            scale = np.minimum(1.0, speed[sliding] / FRICTION_REG)
            mag = mu_k * fmag[sliding] * scale
            if capsule_masses is not None:
                caps = nearest[sliding]
                share = np.bincount(caps, minlength=len(capsule_masses))[caps]
                stop = capsule_masses[caps] * speed[sliding] / (DT_DEFAULT * share)
                mag = np.minimum(mag, stop)
            f_tangent[sliding] = -mag[:, None] * direction
    vref_n = mat_state.plane_rate[rows, cols] * nz[rows, cols]
    return ContactSet(f_normal, f_tangent, nearest, points, n, spring, vref_n)


def _nearest_capsule(points: np.ndarray, posed: PosedCapsules) -> np.ndarray:
    nc = len(posed.radii)
    dist = np.empty((len(points), nc))
    for c in range(nc):
        dist[:, c] = (
            geom.point_segment_distance(points, posed.seg_a[c], posed.seg_b[c])
            - posed.radii[c]
        )
    return np.argmin(dist, axis=1)


def _wrench_from(f, points, capsule_idx, posed, chain, with_gravity):
    nc = chain.num_capsules
    F = np.zeros((nc, 3))
    M = np.zeros((nc, 3))
    if len(f):
        np.add.at(F, capsule_idx, f)
        arms = points - posed.centers[capsule_idx]
        np.add.at(M, capsule_idx, np.cross(arms, f))
    if with_gravity:
        F += chain.masses[:, None] * GRAVITY
    return F, M


def aggregate(
    contacts: ContactSet,
    posed: PosedCapsules,
    chain: CapsuleChain,
    with_gravity: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-capsule resultant force and moment about the capsule center."""
    if len(contacts):
        return _wrench_from(
            contacts.total, contacts.point, contacts.capsule, posed, chain, with_gravity
        )
    return _wrench_from(
        np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=int), posed, chain, with_gravity
    )


def initial_pose_above_mat(
    chain: CapsuleChain,
    pose: PoseState,
    mat_state: mat_mod.MatState,
    clearance: float,
) -> PoseState:
    """Shift the root height so the lowest capsule surface point hovers
    ``clearance`` above the unloaded bed surface."""
    posed = body_mod.forward_kinematics(chain, pose)
    lowest = posed.lowest_point()
    target = mat_state.surface_height() + mat_state.params.r_m + clearance
    adjusted = pose.copy()
    adjusted.root_pos = pose.root_pos.copy()
    adjusted.root_pos[2] += target - lowest
    return adjusted


def settle(
    chain: CapsuleChain,
    pose: PoseState,
    mat_params: mat_mod.MatParams,
    params: SettleParams | None = None,
    mat_state: mat_mod.MatState | None = None,
) -> SettleReport:
    """Drop the ragdoll and iterate the coupled loop until rest.

    Velocities are zeroed every fourth iteration until the pelvis
    capsule first touches the bed, which stops the center of mass from
    building momentum during the drop.
    """
    params = params or SettleParams()
    chain.validate()
    if mat_state is None:
        mat_state = mat_mod.build_mat(mat_params)

    pose = initial_pose_above_mat(chain, pose, mat_state, params.clearance)
    rs = RigidState(chain, pose)
    forces = np.zeros((chain.num_capsules, 3)) + chain.masses[:, None] * GRAVITY
    moments = np.zeros((chain.num_capsules, 3))
    dampers = None

    prev_cap_v = np.zeros((chain.num_capsules, 3))
    buttocks_iter = None
    energy = []
    v_max = np.inf
    a_max = np.inf
    contacts = ContactSet.empty()

    for it in range(1, params.max_iterations + 1):
        rigid_step(rs, forces, moments, params.dt, contact_dampers=dampers)
        posed = rs.fk()
        colliders = [
            (posed.seg_a[c], posed.seg_b[c], posed.radii[c])
            for c in range(chain.num_capsules)
        ]
        try:
            mat_mod.mat_step(mat_state, colliders, params.dt, params.mat_iterations)
        except MatUnstable:
            return _report("RejectedMatUnstable", it, v_max, a_max, rs, contacts, energy, buttocks_iter)

        cap_v = capsule_velocities(rs, posed)
        contacts = contact_forces(
            mat_state, posed, params.spring_k, params.spring_b, params.mu_k,
            cap_v, chain.masses,
        )
        applied = contacts.spring_mag[:, None] * contacts.normal + contacts.f_tangent
        forces, moments = _wrench_from(
            applied, contacts.point, contacts.capsule, posed, chain, with_gravity=True
        )
        coeff = params.spring_b + params.dt * params.spring_k + params.contact_stab
        dampers = (
            contacts.point, contacts.normal, contacts.capsule, coeff, contacts.vref_n
        )

        if buttocks_iter is None and len(contacts) and np.any(contacts.capsule == PELVIS_CAPSULE):
            buttocks_iter = it

        speeds = np.linalg.norm(cap_v, axis=1)
        v_max = float(speeds.max())
        a_max = float(np.linalg.norm(cap_v - prev_cap_v, axis=1).max() / params.dt)
        prev_cap_v = cap_v
        energy.append(0.5 * float(rs.v @ (rs._M_cache @ rs.v)))

        if v_max < V_SETTLED and a_max < A_SETTLED:
            weight = chain.total_mass * 9.81
            supported = (
                params.balance_gate is None
                or abs(np.linalg.norm(contacts.f_normal.sum(axis=0)) - weight)
                <= params.balance_gate * weight
            )
            if supported:
                return _report("Settled", it, v_max, a_max, rs, contacts, energy, buttocks_iter)

        if buttocks_iter is None and it % ZERO_VELOCITY_INTERVAL == 0:
            rs.zero_velocity()
            prev_cap_v = np.zeros_like(prev_cap_v)

    return _report("RejectedTimeout", params.max_iterations, v_max, a_max, rs, contacts, energy, buttocks_iter)


def _report(result, it, v_max, a_max, rs, contacts, energy, buttocks_iter) -> SettleReport:
    pose = rs.pose()
    fsum = contacts.f_normal.sum(axis=0) if len(contacts) else np.zeros(3)
    return SettleReport(
        result=result,
        iterations=it,
        v_max=v_max,
        a_max=a_max,
        theta=pose.theta,
        root_rot=pose.root_rot,
        root_pos=pose.root_pos,
        normal_force_sum=fsum,
        kinetic_energy=energy,
        buttocks_contact_iteration=buttocks_iter,
    )
