"""Pressure-image synthesis from a particlized body.

The settled capsule body is converted into a grid of particles filling
the capsule union (no kinematics), dropped from just above the bed, and
co-simulated with the mat until the particles come to rest.  Particle
inverse mass follows the water convention: human particles are exactly
1; calibration objects get the water-density ratio of their known
weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import body as body_mod
from . import geom
from . import mat as mat_mod
from .body import BodyShape, CapsuleChain, PoseState
from .errors import EmptyBody

GRAVITY = 9.81
RHO_WATER = 1000.0  # kg/m^3

V_SETTLED = 0.05  # m/s
A_SETTLED = 0.5  # m/s^2
MIN_ITERATIONS = 200
MAX_ITERATIONS = 1500
DROP_CLEARANCE = 0.01  # m above the unloaded bed
BODY_STIFFNESS = 0.9  # internal lattice projection factor
DT_DEFAULT = 0.0103


@dataclass
class ParticleBody:
    """Particle fill of a body or object; inverse masses on the water scale."""

    positions: np.ndarray  # (N, 3)
    inv_mass: np.ndarray  # (N,)
    spacing: float
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.inv_mass = np.asarray(self.inv_mass, dtype=float).reshape(-1)
        if np.any(self.inv_mass <= 0):
            raise ValueError("inverse masses must be positive")

    def __len__(self):
        return len(self.positions)

    @classmethod
    def merge(cls, bodies) -> "ParticleBody":
        return cls(
            np.concatenate([b.positions for b in bodies]),
            np.concatenate([b.inv_mass for b in bodies]),
            bodies[0].spacing,
            {"merged": [b.source for b in bodies]},
        )


def _grid_fill(seg_a, seg_b, radii, spacing):
    """Grid points inside the union of capsules, each point kept once."""
    lo = np.min(np.minimum(seg_a, seg_b) - radii[:, None], axis=0)
    base = np.floor(lo / spacing) - 1

    idx_chunks = []
    for c in range(len(radii)):
        clo = np.minimum(seg_a[c], seg_b[c]) - radii[c]
        chi = np.maximum(seg_a[c], seg_b[c]) + radii[c]
        lo_i = np.floor(clo / spacing).astype(int)
        hi_i = np.ceil(chi / spacing).astype(int) + 1
        grids = np.meshgrid(
            *[np.arange(lo_i[k], hi_i[k]) for k in range(3)], indexing="ij"
        )
        idx_chunks.append(np.stack([g.ravel() for g in grids], axis=1))
    idx = np.unique(np.concatenate(idx_chunks, axis=0), axis=0)
    pts = (idx + 0.5) * spacing

    inside = np.zeros(len(pts), dtype=bool)
    for c in range(len(radii)):
        d = geom.point_segment_distance(pts, seg_a[c], seg_b[c])
        inside |= d <= radii[c]
    return pts[inside], idx[inside], base


def particlize(
    shape: BodyShape,
    pose: PoseState,
    chain: CapsuleChain | None = None,
    spacing: float = mat_mod.PITCH,
) -> ParticleBody:
    """Fill the posed capsule union with unit-inverse-mass particles."""
    if chain is None:
        chain = body_mod.regress_capsules(shape)
    posed = body_mod.forward_kinematics(chain, pose)
    pts, idx, _ = _grid_fill(posed.seg_a, posed.seg_b, posed.radii, spacing)
    if len(pts) == 0:
        raise EmptyBody("no particles inside the capsule union")
    return ParticleBody(
        pts,
        np.ones(len(pts)),
        spacing,
        {"kind": "human", "gender": shape.gender, "grid_index": idx},
    )


def object_particles(
    seg_a,
    seg_b,
    radius: float,
    weight_kg: float,
    spacing: float = mat_mod.PITCH,
) -> ParticleBody:
    """Particlize one rigid calibration capsule.

    Inverse mass is the water-density ratio: an object with the density
    of water gets exactly 1, denser objects proportionally less.
    """
    seg_a = np.asarray(seg_a, dtype=float)
    seg_b = np.asarray(seg_b, dtype=float)
    length = float(np.linalg.norm(seg_b - seg_a))
    volume = geom.capsule_volume(radius, length)
    inv_mass = RHO_WATER * volume / weight_kg
    pts, idx, _ = _grid_fill(
        seg_a[None, :], seg_b[None, :], np.array([radius]), spacing
    )
    if len(pts) == 0:
        raise EmptyBody("object too small for the particle spacing")
    return ParticleBody(
        pts,
        np.full(len(pts), inv_mass),
        spacing,
        {"kind": "object", "weight_kg": weight_kg, "grid_index": idx},
    )


def _lattice_pairs(idx: np.ndarray):
    """Neighbor pair groups (axis and face-diagonal offsets) over the
    particle grid indices."""
    lookup = {tuple(v): i for i, v in enumerate(idx)}
    offsets = [
        (1, 0, 0), (0, 1, 0), (0, 0, 1),
        (1, 1, 0), (1, 0, 1), (0, 1, 1),
        (1, -1, 0), (1, 0, -1), (0, 1, -1),
    ]
    groups = []
    for off in offsets:
        ia, ib = [], []
        for i, v in enumerate(idx):
            key = (v[0] + off[0], v[1] + off[1], v[2] + off[2])
            j = lookup.get(key)
            if j is not None:
                ia.append(i)
                ib.append(j)
        if ia:
            groups.append((np.array(ia), np.array(ib), float(np.linalg.norm(off))))
    return groups


class _BlobState:
    """PBD state of a free particle blob with an internal lattice."""

    def __init__(self, pbody: ParticleBody):
        self.p = pbody.positions.copy()
        self.v = np.zeros_like(self.p)
        self.w = pbody.inv_mass.copy()
        self.spacing = pbody.spacing
        idx = pbody.source.get("grid_index")
        if idx is None:
            idx = np.round(self.p / pbody.spacing - 0.5).astype(int)
        self.groups = _lattice_pairs(np.asarray(idx))

    def predict(self, dt):
        self._p0 = self.p.copy()
        self.v[:, 2] -= GRAVITY * dt
        self.p += self.v * dt

    def project_internal(self):
        n = len(self.p)
        for ia, ib, rest_units in self.groups:
            rest = rest_units * self.spacing
            d = self.p[ib] - self.p[ia]
            dist = np.linalg.norm(d, axis=1)
            np.maximum(dist, 1e-12, out=dist)
            f = (0.5 * BODY_STIFFNESS * (dist - rest) / dist)[:, None] * d
            for k in range(3):
                self.p[:, k] += 0.5 * (
                    np.bincount(ia, weights=f[:, k], minlength=n)
                    - np.bincount(ib, weights=f[:, k], minlength=n)
                )

    def finalize(self, dt):
        """Velocity recovery; rest is judged on the aggregate body, so
        single boundary particles flickering in and out of contact do
        not mask a settled state."""
        new_v = (self.p - self._p0) * (mat_mod.VELOCITY_DAMPING / dt)
        m = 1.0 / self.w
        com_v = (m[:, None] * new_v).sum(axis=0) / m.sum()
        prev = getattr(self, "_com_v", np.zeros(3))
        self.a_max = float(np.linalg.norm(com_v - prev) / dt)
        self._com_v = com_v
        self.v = new_v
        self.v_max = float(np.linalg.norm(com_v))


def _project_blob_mat_contacts(blob: _BlobState, state: mat_mod.MatState):
    """Particle-particle collision between the blob and the top layer,
    split by inverse mass; mat particles move vertically only."""
    r_contact = 2.0 * state.params.r_m
    p = blob.p
    jc = np.round((p[:, 0] - state.top_x[0]) / mat_mod.PITCH).astype(int)
    ic = np.round((p[:, 1] - state.top_y[0]) / mat_mod.PITCH).astype(int)
    offs = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)]
    w_m = state.params.m_l
    for di, dj in offs:
        ii = ic + di
        jj = jc + dj
        ok = (ii >= 0) & (ii < mat_mod.GRID_ROWS) & (jj >= 0) & (jj < mat_mod.GRID_COLS)
        if not np.any(ok):
            continue
        sel = np.nonzero(ok)[0]
        ti = ii[sel]
        tj = jj[sel]
        tx = state.top_x[tj]
        ty = state.top_y[ti]
        tz = state.top_z[ti, tj]
        d = p[sel] - np.stack([tx, ty, tz], axis=1)
        dist = np.linalg.norm(d, axis=1)
        hit = dist < r_contact
        if not np.any(hit):
            continue
        sel = sel[hit]
        ti, tj = ti[hit], tj[hit]
        n = d[hit] / np.maximum(dist[hit], 1e-12)[:, None]
        depth = r_contact - dist[hit]
        wb = blob.w[sel]
        share_b = wb / (wb + w_m)
        share_m = w_m / (wb + w_m)
        blob.p[sel] += (share_b * depth)[:, None] * n
        dz = -(share_m * depth) * n[:, 2]
        flat = ti * mat_mod.GRID_COLS + tj
        state.top_z += np.bincount(
            flat, weights=dz, minlength=state.top_z.size
        ).reshape(state.top_z.shape)


@dataclass
class DropReport:
    iterations: int
    v_max: float
    a_max: float
    settled: bool


def drop_and_image(
    pbody: ParticleBody,
    mat_state: mat_mod.MatState,
    params: mat_mod.MatParams | None = None,
    dt: float = DT_DEFAULT,
    min_iterations: int = MIN_ITERATIONS,
    max_iterations: int = MAX_ITERATIONS,
    mat_iterations: int = mat_mod.DEFAULT_ITERATIONS,
    clearance: float = DROP_CLEARANCE,
) -> tuple[mat_mod.PressureImage, float, DropReport]:
    """Rest the particle body on the bed and read the pressure image.

    Runs at least ``min_iterations`` steps and stops once particle
    velocity and acceleration fall under the rest thresholds.  Returns
    the sensing-window image, the peak mattress compression depth, and
    a small report.
    """
    params = params or mat_state.params
    if len(pbody) == 0:
        return mat_mod.read_image(mat_state, params), mat_state.compression_depth(), DropReport(0, 0.0, 0.0, True)

    blob = _BlobState(pbody)
    surface = mat_state.surface_height() + params.r_m
    lowest = float(blob.p[:, 2].min())
    blob.p[:, 2] += surface + clearance - lowest

    it = 0
    settled = False
    for it in range(1, max_iterations + 1):
        blob.predict(dt)
        mat_state.predict(dt)
        for _ in range(mat_iterations):
            mat_state.project()
            blob.project_internal()
            _project_blob_mat_contacts(blob, mat_state)
        blob.finalize(dt)
        mat_state.finalize(dt)
        if it >= min_iterations and blob.v_max < V_SETTLED and blob.a_max < A_SETTLED:
            settled = True
            break

    img = mat_mod.read_image(mat_state, params)
    depth = mat_state.compression_depth()
    return img, depth, DropReport(it, blob.v_max, blob.a_max, settled)
