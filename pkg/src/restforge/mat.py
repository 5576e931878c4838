"""Soft mattress plus two-layer pressure-sensing mat.

The sensing mat is a pair of staggered particle grids: a 69x34 base
layer resting on the mattress and a 68x33 top layer whose particles sit
over the center of each base quad, forming one square pyramid per
sensing cell.  Pressure at a cell is a quadratic function of how far
the apex particle has moved toward the least-squares plane of its four
base particles, relative to the rest separation.

Dynamics are position based: predict, project distance constraints
(stretch/bend/shear within each layer, compression between layers, the
mattress lattice, vertical ties from the base layer onto the mattress),
push particles out of colliders, then recover velocities from the
position deltas.  All mat and mattress particles are constrained to
vertical motion, which implements the horizontal anchoring of the real
mat and keeps the step unconditionally stable.  Mat and mattress
particles carry no self-weight: their mass is negligible against any
resting body, and a weightless lattice makes the unloaded bed an exact
fixed point of the step map, so rest images are exactly zero and
rollouts are reproducible bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DegeneratePlane, MatUnstable

PITCH = 1.0 / 35.0  # taxel pitch (m)
GRID_ROWS, GRID_COLS = 68, 33  # top layer (pyramid apices)
BASE_ROWS, BASE_COLS = 69, 34  # staggered base layer
SENSE_ROWS = slice(3, 67)  # 64 sensing rows
SENSE_COLS = slice(3, 30)  # 27 sensing columns
SENSE_SHAPE = (64, 27)

BED_WIDTH = 0.9652  # m
BED_LENGTH = 2.0  # m
BORDER_SIDE = 0.06  # m, nominal non-sensing border along the bed sides
BORDER_END = 0.09  # m, nominal non-sensing border at head/foot

GRAVITY = 9.81
VELOCITY_DAMPING = 0.97
STABILITY_RATIO = 3.0  # separation beyond 3x rest spacing = unstable
DEFAULT_ITERATIONS = 4

# Sensor dead band (m): micron-scale fabric drape around a contact must
# not register, mirroring the detection threshold of a real taxel.
CONTACT_THRESHOLD = 1e-4

_X0 = (BED_WIDTH - (BASE_COLS - 1) * PITCH) / 2.0
_Y0 = (BED_LENGTH - (BASE_ROWS - 1) * PITCH) / 2.0


@dataclass
class MatParams:
    """The sixteen deformable-bed and sensor parameters.

    Mattress: particle spacing ``d_m``, radius ``r_m``, lattice
    stiffness ``k_m``, inverse mass ``m_m``.  Sensing mat: per-layer
    stretch/bend/shear stiffness, inter-layer compression stiffness
    ``k_compress``, rest separation ``d0``, layer inverse mass ``m_l``.
    Taxel readout: quadratic force constants ``c2, c1, c0``.
    """

    d_m: float = 2.0 * PITCH
    r_m: float = 0.016
    k_m: float = 1.2
    m_m: float = 1.2
    d0: float = 0.02
    k_stretch_top: float = 1.5
    k_bend_top: float = 1.0
    k_shear_top: float = 1.2
    k_stretch_bot: float = 1.5
    k_bend_bot: float = 1.0
    k_shear_bot: float = 1.2
    k_compress: float = 1.5
    m_l: float = 0.6
    c2: float = 30000.0
    c1: float = 1000.0
    c0: float = 0.5

    FIELDS = (
        "d_m", "r_m", "k_m", "m_m", "d0",
        "k_stretch_top", "k_bend_top", "k_shear_top",
        "k_stretch_bot", "k_bend_bot", "k_shear_bot",
        "k_compress", "m_l", "c2", "c1", "c0",
    )
    CLOTH_FIELDS = (
        "k_stretch_top", "k_bend_top", "k_shear_top",
        "k_stretch_bot", "k_bend_bot", "k_shear_bot",
    )

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in self.FIELDS], dtype=float)

    @classmethod
    def from_vector(cls, vec) -> "MatParams":
        vec = np.asarray(vec, dtype=float).reshape(len(cls.FIELDS))
        return cls(**{f: float(v) for f, v in zip(cls.FIELDS, vec)})

    def to_json(self) -> str:
        return json.dumps({f: getattr(self, f) for f in self.FIELDS}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MatParams":
        doc = json.loads(text)
        return cls(**{f: float(doc[f]) for f in cls.FIELDS})

    def params_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def validate(self) -> None:
        vec = self.as_vector()
        if np.any(vec <= 0):
            raise ValueError("all mat parameters must be positive")


@dataclass
class PressureImage:
    """64x27 taxel readout plus optional derived channels."""

    values: np.ndarray
    edges: np.ndarray | None = None
    contact: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != SENSE_SHAPE:
            raise ValueError(f"pressure image must be {SENSE_SHAPE}")

    def to_pgm16(self, max_value: float | None = None) -> bytes:
        """16-bit binary PGM; values scaled to the full range."""
        vmax = float(self.values.max()) if max_value is None else float(max_value)
        scale = 65535.0 / vmax if vmax > 0 else 0.0
        pix = np.clip(self.values * scale, 0, 65535).astype(">u2")
        header = f"P5\n{SENSE_SHAPE[1]} {SENSE_SHAPE[0]}\n65535\n".encode()
        return header + pix.tobytes()

    def to_json(self) -> str:
        return json.dumps({"values": self.values.tolist()})


def _stiffness_factor(k: float) -> float:
    """Map a (possibly >1) stiffness weight to a per-iteration projection
    factor in (0, 1)."""
    return float(1.0 - 0.5 ** max(k, 1e-6))


class _PairGroup:
    """One vectorized batch of identical distance constraints.

    Groups project sequentially (Gauss-Seidel between groups); inside a
    group a particle joins at most two constraints, so corrections are
    halved for same-array groups and applied at full strength across
    arrays.
    """

    __slots__ = ("a", "sl_a", "b", "sl_b", "h", "rest", "s", "wa", "wb", "check", "div")

    def __init__(self, a, sl_a, b, sl_b, h, rest, s, wa, wb, check=False):
        self.a, self.sl_a = a, sl_a
        self.b, self.sl_b = b, sl_b
        self.h = h
        self.rest = rest
        self.s = s
        self.wa, self.wb = wa, wb
        self.check = check
        self.div = 2.0 if a == b else 1.0


def _layer_groups(name, rows, cols, params, top):
    ks = params.k_stretch_top if top else params.k_stretch_bot
    kb = params.k_bend_top if top else params.k_bend_bot
    kt = params.k_shear_top if top else params.k_shear_bot
    groups = []

    def add(dy, dx, rest, k, check=False):
        sl_a = (slice(0, rows - dy), slice(0, cols - dx) if dx >= 0 else slice(-dx, cols))
        sl_b = (slice(dy, rows), slice(dx, cols) if dx >= 0 else slice(0, cols + dx))
        h = PITCH * np.hypot(dy, dx)
        groups.append(
            _PairGroup(name, sl_a, name, sl_b, h, rest, _stiffness_factor(k), 0.5, 0.5, check)
        )

    add(0, 1, PITCH, ks, check=True)
    add(1, 0, PITCH, ks, check=True)
    add(0, 2, 2 * PITCH, kb)
    add(2, 0, 2 * PITCH, kb)
    add(1, 1, np.sqrt(2) * PITCH, kt)
    add(1, -1, np.sqrt(2) * PITCH, kt)
    return groups


class MatState:
    """Mutable particle state of the bed.  Single writer per rollout."""

    def __init__(self, params: MatParams):
        params.validate()
        self.params = params
        p = params

        # layers: z-only state; x/y are immutable coordinate vectors
        self.base_x = _X0 + PITCH * np.arange(BASE_COLS)
        self.base_y = _Y0 + PITCH * np.arange(BASE_ROWS)
        self.top_x = _X0 + PITCH * (np.arange(GRID_COLS) + 0.5)
        self.top_y = _Y0 + PITCH * (np.arange(GRID_ROWS) + 0.5)

        self.top_z = np.full((GRID_ROWS, GRID_COLS), p.d0)
        self.bot_z = np.zeros((BASE_ROWS, BASE_COLS))
        self.top_v = np.zeros_like(self.top_z)
        self.bot_v = np.zeros_like(self.bot_z)

        # mattress lattice: layer 0 at z=0 (under the mat), bottom pinned
        nx = int(np.floor(BED_WIDTH / p.d_m)) + 1
        ny = int(np.floor(BED_LENGTH / p.d_m)) + 1
        nz = max(3, int(np.ceil(0.17 / p.d_m)) + 1)
        self.matt_x = (BED_WIDTH - (nx - 1) * p.d_m) / 2.0 + p.d_m * np.arange(nx)
        self.matt_y = (BED_LENGTH - (ny - 1) * p.d_m) / 2.0 + p.d_m * np.arange(ny)
        self.matt_z = np.zeros((nz, ny, nx))
        for k in range(nz):
            self.matt_z[k] = -k * p.d_m
        self.matt_v = np.zeros_like(self.matt_z)

        self._build_groups()
        self._build_ties()

        self.rest_sep = np.full((GRID_ROWS, GRID_COLS), p.d0)
        self.pen_last = np.zeros((GRID_ROWS, GRID_COLS))
        self.pen_rate = np.zeros((GRID_ROWS, GRID_COLS))
        self.plane_rate = np.zeros((GRID_ROWS, GRID_COLS))
        self._zc_prev = None
        self.last_dt = 0.0
        self.rest_top_z = self.top_z.copy()
        self.rest_matt_top = self.matt_z[0].copy()

    # -- construction ---------------------------------------------------

    def _build_groups(self):
        p = self.params
        pre = []

        # pyramid compression: apex (i, j) to its four base corners
        h = PITCH / np.sqrt(2.0)
        rest = float(np.hypot(p.d0, h))
        s = _stiffness_factor(p.k_compress)
        for dy, dx in ((0, 0), (1, 0), (0, 1), (1, 1)):
            sl_b = (slice(dy, dy + GRID_ROWS), slice(dx, dx + GRID_COLS))
            pre.append(
                _PairGroup("top", (slice(None), slice(None)), "bot", sl_b,
                           h, rest, s, 0.5, 0.5, check=True)
            )

        # mattress lattice, verticals and vertical diagonals before the
        # horizontals so compression reaches the pinned floor quickly
        post = []
        nz, ny, nx = self.matt_z.shape
        sm = _stiffness_factor(p.k_m)
        w = np.full((nz, ny, nx), p.m_m)
        w[-1] = 0.0  # pinned floor layer
        self._matt_w = w

        def madd(dk, dy, dx, rest, check=False):
            sl_a = (
                slice(0, nz - dk),
                slice(0, ny - dy),
                slice(0, nx - dx) if dx >= 0 else slice(-dx, nx),
            )
            sl_b = (
                slice(dk, nz),
                slice(dy, ny),
                slice(dx, nx) if dx >= 0 else slice(0, nx + dx),
            )
            wa = w[sl_a]
            wb = w[sl_b]
            tot = wa + wb
            tot[tot == 0] = 1.0
            h = p.d_m * np.hypot(dy, dx)
            post.append(
                _PairGroup("matt", sl_a, "matt", sl_b, h, rest, sm,
                           wa / tot, wb / tot, check)
            )

        madd(1, 0, 0, p.d_m, check=True)
        madd(1, 0, 1, np.sqrt(2) * p.d_m)
        madd(1, 0, -1, np.sqrt(2) * p.d_m)
        madd(1, 1, 0, np.sqrt(2) * p.d_m)
        madd(0, 0, 1, p.d_m)
        madd(0, 1, 0, p.d_m)
        post += _layer_groups("top", GRID_ROWS, GRID_COLS, p, top=True)
        post += _layer_groups("bot", BASE_ROWS, BASE_COLS, p, top=False)
        self.pre_tie_groups = pre
        self.post_tie_groups = post
        self.groups = pre + post

    def _build_ties(self):
        """Base layer rides vertically on the nearest mattress top node."""
        p = self.params
        nz, ny, nx = self.matt_z.shape
        bx = np.clip(np.round((self.base_x - self.matt_x[0]) / p.d_m), 0, nx - 1)
        by = np.clip(np.round((self.base_y - self.matt_y[0]) / p.d_m), 0, ny - 1)
        jx = np.broadcast_to(bx.astype(int), (BASE_ROWS, BASE_COLS))
        iy = np.broadcast_to(by.astype(int)[:, None], (BASE_ROWS, BASE_COLS))
        self._tie_flat = (iy * nx + jx).ravel()
        self._tie_s = _stiffness_factor(p.k_m)
        wa, wb = p.m_l, p.m_m
        self._tie_wa = wa / (wa + wb)
        self._tie_wb = wb / (wa + wb)
        self._tie_nodes = ny * nx
        self._tie_counts = np.maximum(
            np.bincount(self._tie_flat, minlength=self._tie_nodes), 1.0
        )

    # -- helpers --------------------------------------------------------

    def arrays(self):
        return {"top": self.top_z, "bot": self.bot_z, "matt": self.matt_z}

    def copy(self) -> "MatState":
        import copy as _copy

        dup = object.__new__(MatState)
        dup.__dict__ = {
            k: (v.copy() if isinstance(v, np.ndarray) else v)
            for k, v in self.__dict__.items()
        }
        # groups / ties are immutable structure; share them
        dup.groups = self.groups
        return dup

    def surface_height(self) -> float:
        """Unloaded sensing surface height (max rest apex height)."""
        return float(self.rest_top_z.max())

    def compression_depth(self) -> float:
        """Peak vertical compression of the mattress top (>= 0)."""
        return float(np.maximum(self.rest_matt_top - self.matt_z[0], 0.0).max())

    # -- dynamics -------------------------------------------------------

    def predict(self, dt: float):
        self._top_z0 = self.top_z.copy()
        self._bot_z0 = self.bot_z.copy()
        self._matt_z0 = self.matt_z.copy()
        self.top_z += self.top_v * dt
        self.bot_z += self.bot_v * dt
        self.matt_z[:-1] += self.matt_v[:-1] * dt

    def project(self):
        """One constraint sweep ordered along the load path: pyramid
        compression, base-to-mattress ties, the mattress lattice, then
        the in-layer cloth constraints."""
        arrays = self.arrays()
        for g in self.pre_tie_groups:
            self._project_group(g, arrays)
        self._project_ties()
        for g in self.post_tie_groups:
            self._project_group(g, arrays)
        self.matt_z[-1] = -(self.matt_z.shape[0] - 1) * self.params.d_m  # pinned

    @staticmethod
    def _project_group(g, arrays):
        A = arrays[g.a][g.sl_a]
        B = arrays[g.b][g.sl_b]
        dz = B - A
        dist = np.hypot(g.h, dz)
        np.maximum(dist, 1e-12, out=dist)
        f = ((g.s / g.div) * (dist - g.rest) / dist) * dz
        if g.a == g.b:
            corr = np.zeros_like(arrays[g.a])
            corr[g.sl_a] += g.wa * f
            corr[g.sl_b] -= g.wb * f
            arrays[g.a] += corr
        else:
            arrays[g.a][g.sl_a] += g.wa * f
            arrays[g.b][g.sl_b] -= g.wb * f

    def _project_ties(self):
        """Base particles ride vertically on their mattress nodes."""
        node_z = self.matt_z[0].ravel()[self._tie_flat].reshape(self.bot_z.shape)
        c = self.bot_z - node_z
        f = self._tie_s * c
        self.bot_z -= self._tie_wa * f
        scatter = np.bincount(
            self._tie_flat, weights=(self._tie_wb * f).ravel(),
            minlength=self._tie_nodes,
        )
        self.matt_z[0] += (scatter / self._tie_counts).reshape(self.matt_z.shape[1:])

    def clamp_colliders(self, colliders):
        if not colliders:
            return
        if len(colliders) == 1:
            _clamp_capsule(self, *colliders[0])
            return
        _clamp_batch(self, colliders)

    def finalize(self, dt: float):
        inv = VELOCITY_DAMPING / dt
        self.top_v = (self.top_z - self._top_z0) * inv
        self.bot_v = (self.bot_z - self._bot_z0) * inv
        self.matt_v = (self.matt_z - self._matt_z0) * inv
        self.last_dt = dt
        self._stability_check()
        zc, _gx, _gy, nz = base_plane_fields(self)
        d = (self.top_z - zc) * nz
        new_pen = np.maximum(self.rest_sep - d, 0.0)
        self.pen_rate = (new_pen - self.pen_last) / dt
        self.pen_last = new_pen
        if self._zc_prev is not None:
            self.plane_rate = (zc - self._zc_prev) / dt
        self._zc_prev = zc

    def _stability_check(self):
        arrays = self.arrays()
        for g in self.groups:
            if not g.check:
                continue
            dz = arrays[g.b][g.sl_b] - arrays[g.a][g.sl_a]
            worst = float(np.max(np.hypot(g.h, dz)))
            if worst > STABILITY_RATIO * g.rest:
                raise MatUnstable(
                    f"separation {worst:.3f} m exceeds {STABILITY_RATIO}x rest {g.rest:.3f} m"
                )

    def constraint_violation(self) -> float:
        """Sum of absolute distance-constraint violations (diagnostic)."""
        arrays = self.arrays()
        total = 0.0
        for g in self.groups:
            dz = arrays[g.b][g.sl_b] - arrays[g.a][g.sl_a]
            total += float(np.sum(np.abs(np.hypot(g.h, dz) - g.rest)))
        node_z = self.matt_z[0].ravel()[self._tie_flat].reshape(self.bot_z.shape)
        total += float(np.sum(np.abs(self.bot_z - node_z)))
        return total


def _clamp_capsule(state: MatState, a, b, radius):
    """Push top-layer particles below the capsule surface (vertical only)."""
    p = state.params
    r_eff = radius + p.r_m
    lo = np.minimum(a, b) - r_eff
    hi = np.maximum(a, b) + r_eff
    j0 = int(np.searchsorted(state.top_x, lo[0]))
    j1 = int(np.searchsorted(state.top_x, hi[0]))
    i0 = int(np.searchsorted(state.top_y, lo[1]))
    i1 = int(np.searchsorted(state.top_y, hi[1]))
    if j0 >= j1 or i0 >= i1:
        return
    xs = state.top_x[j0:j1][None, :]
    ys = state.top_y[i0:i1][:, None]
    zs = state.top_z[i0:i1, j0:j1]

    ab = b - a
    ab2 = float(ab @ ab)
    for _ in range(2):
        if ab2 < 1e-18:
            t = np.zeros_like(zs)
        else:
            t = ((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1] + (zs - a[2]) * ab[2]) / ab2
            t = np.clip(t, 0.0, 1.0)
        cx = a[0] + t * ab[0]
        cy = a[1] + t * ab[1]
        cz = a[2] + t * ab[2]
        dxy2 = (xs - cx) ** 2 + (ys - cy) ** 2
        inside = dxy2 < r_eff * r_eff
        if not np.any(inside):
            return
        surf = cz - np.sqrt(np.maximum(r_eff * r_eff - dxy2, 0.0))
        zs = np.where(inside, np.minimum(zs, surf), zs)
    state.top_z[i0:i1, j0:j1] = zs


def _clamp_batch(state: MatState, colliders):
    """Vertical push-out of the top layer below every capsule surface,
    batched over the union of the colliders' horizontal bounding boxes."""
    p = state.params
    A = np.array([c[0] for c in colliders])
    B = np.array([c[1] for c in colliders])
    R = np.array([c[2] for c in colliders]) + p.r_m
    lo = np.minimum(A, B) - R[:, None]
    hi = np.maximum(A, B) + R[:, None]
    j0 = int(np.searchsorted(state.top_x, lo[:, 0].min()))
    j1 = int(np.searchsorted(state.top_x, hi[:, 0].max()))
    i0 = int(np.searchsorted(state.top_y, lo[:, 1].min()))
    i1 = int(np.searchsorted(state.top_y, hi[:, 1].max()))
    if j0 >= j1 or i0 >= i1:
        return
    xs = np.broadcast_to(state.top_x[j0:j1][None, :, None], (i1 - i0, j1 - j0, 1))
    ys = np.broadcast_to(state.top_y[i0:i1][:, None, None], (i1 - i0, j1 - j0, 1))
    zs = state.top_z[i0:i1, j0:j1]

    ab = B - A
    ab2 = np.maximum(np.einsum("ca,ca->c", ab, ab), 1e-18)
    z = zs[:, :, None]
    for _ in range(2):
        t = (
            (xs - A[:, 0]) * ab[:, 0]
            + (ys - A[:, 1]) * ab[:, 1]
            + (z - A[:, 2]) * ab[:, 2]
        ) / ab2
        np.clip(t, 0.0, 1.0, out=t)
        cx = A[:, 0] + t * ab[:, 0]
        cy = A[:, 1] + t * ab[:, 1]
        cz = A[:, 2] + t * ab[:, 2]
        dxy2 = (xs - cx) ** 2 + (ys - cy) ** 2
        gap2 = R * R - dxy2
        inside = gap2 > 0.0
        if not inside.any():
            return
        surf = np.where(inside, cz - np.sqrt(np.maximum(gap2, 0.0)), np.inf)
        z = np.minimum(z, surf.min(axis=2, keepdims=True))
    state.top_z[i0:i1, j0:j1] = z[:, :, 0]


def mat_step(
    state: MatState,
    colliders,
    dt: float,
    iterations: int = DEFAULT_ITERATIONS,
) -> MatState:
    """One position-based step.  ``colliders`` is a sequence of
    (segment_start, segment_end, radius) capsules; a zero-length segment
    is a sphere.  Mutates and returns ``state``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    state.predict(dt)
    for _ in range(iterations):
        state.project()
        state.clamp_colliders(colliders)
    state.finalize(dt)
    return state


# ---------------------------------------------------------------------------
# sensing


def base_plane_fields(state: MatState):
    """Least-squares plane per pyramid: center height, slopes, unit normal."""
    z = state.bot_z
    z00 = z[:-1, :-1]
    z10 = z[:-1, 1:]
    z01 = z[1:, :-1]
    z11 = z[1:, 1:]
    zc = 0.25 * (z00 + z10 + z01 + z11)
    gx = (z10 + z11 - z00 - z01) / (2.0 * PITCH)
    gy = (z01 + z11 - z00 - z10) / (2.0 * PITCH)
    nz = 1.0 / np.sqrt(1.0 + gx * gx + gy * gy)
    if np.any(nz < 1e-6):
        raise DegeneratePlane("base quad degenerated to a vertical plane")
    return zc, gx, gy, nz


def penetration_depths(state: MatState) -> np.ndarray:
    """Scalar penetration of every apex toward its base plane (>= 0)."""
    zc, _gx, _gy, nz = base_plane_fields(state)
    d = (state.top_z - zc) * nz
    return np.maximum(state.rest_sep - d, 0.0)


def penetration(i: int, j: int, state: MatState) -> np.ndarray:
    """Penetration vector of apex (i, j): magnitude along the base-plane
    upward normal, zero when the apex is at or beyond rest separation."""
    zc, gx, gy, nz = base_plane_fields(state)
    d = (state.top_z[i, j] - zc[i, j]) * nz[i, j]
    s = state.rest_sep[i, j] - d
    if s <= 0.0:
        return np.zeros(3)
    n = np.array([-gx[i, j] * nz[i, j], -gy[i, j] * nz[i, j], nz[i, j]])
    return s * n


def taxel_pressure(x, params: MatParams) -> float:
    """Quadratic readout of the penetration magnitude; zero without contact."""
    mag = float(np.linalg.norm(x))
    if mag <= 0.0:
        return 0.0
    return params.c2 * mag * mag + params.c1 * mag + params.c0


def read_image(state: MatState, params: MatParams | None = None) -> PressureImage:
    """Evaluate the sensing window.  Border pyramids carry force in the
    dynamics but are not part of the image; penetrations inside the
    sensor dead band read zero."""
    params = params or state.params
    s = penetration_depths(state)[SENSE_ROWS, SENSE_COLS]
    u = np.where(s > CONTACT_THRESHOLD, (params.c2 * s + params.c1) * s + params.c0, 0.0)
    return PressureImage(u)


def build_mat(params: MatParams) -> MatState:
    """An unloaded bed at its rest fixed point, ready for a rollout."""
    return MatState(params)
