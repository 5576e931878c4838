"""Calibration of the bed model against reference measurements.

Reference observations are pressure images and mattress compression
depths of rigid capsule objects resting on the bed.  A CMA-ES search
over the sixteen bed/sensor parameters minimizes a three-term loss
(per-taxel force error, contact-location error, compression-depth
error), with penalty costs for parameter regions known to destabilize
the simulation.  A separate least-squares pass fits the contact spring
constant used by the coupled rigid-body loop from displacement records.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import imager, mat as mat_mod
from .cmaes import CmaConfig, CmaResult, cmaes_minimize
from .errors import MatUnstable

PENALTY_HIGH = 1e6
CLOTH_RANGE = (0.5, 2.5)
CLOTH_PENALTY_SCALE = 10.0
GRAVITY = 9.81

# calibration object set: two short and two long capsules with five
# weights each (kg)
SHORT_LENGTH = 0.20
LONG_LENGTH = 0.40
OBJECT_RADIUS = 0.05
SHORT_WEIGHTS = (1.3, 2.3, 4.5, 9.1, 14.0)
LONG_WEIGHTS = (1.3, 4.5, 9.1, 14.0, 18.0)


@dataclass
class CalibObject:
    """One rigid capsule with its drop site on the bed."""

    object_id: str
    length: float
    radius: float
    center_xy: tuple
    region: tuple  # (row0, row1, col0, col1) exclusive sensing-window crop

    def segment(self) -> tuple[np.ndarray, np.ndarray]:
        cx, cy = self.center_xy
        half = self.length / 2.0
        a = np.array([cx, cy - half, 0.0])
        b = np.array([cx, cy + half, 0.0])
        return a, b


def default_objects() -> list[CalibObject]:
    """Four capsules parked over the quadrants of the sensing area."""
    qx = (0.3 * mat_mod.BED_WIDTH, 0.7 * mat_mod.BED_WIDTH)
    qy = (0.3 * mat_mod.BED_LENGTH, 0.7 * mat_mod.BED_LENGTH)
    rows, cols = mat_mod.SENSE_SHAPE
    return [
        CalibObject("short_a", SHORT_LENGTH, OBJECT_RADIUS, (qx[0], qy[0]),
                    (0, rows // 2, 0, cols // 2)),
        CalibObject("short_b", SHORT_LENGTH, OBJECT_RADIUS, (qx[1], qy[0]),
                    (0, rows // 2, cols // 2, cols)),
        CalibObject("long_a", LONG_LENGTH, OBJECT_RADIUS, (qx[0], qy[1]),
                    (rows // 2, rows, 0, cols // 2)),
        CalibObject("long_b", LONG_LENGTH, OBJECT_RADIUS, (qx[1], qy[1]),
                    (rows // 2, rows, cols // 2, cols)),
    ]


def default_weights(obj: CalibObject):
    return SHORT_WEIGHTS if obj.length <= 0.3 else LONG_WEIGHTS


@dataclass
class CalibObservation:
    """Reference measurement of one object at one weight."""

    scene_id: int
    obj: CalibObject
    weight_kg: float
    image: np.ndarray  # (64, 27), zero outside the object's region
    depth: float  # m, peak mattress compression inside the region

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=float)
        if self.image.shape != mat_mod.SENSE_SHAPE:
            raise ValueError("observation image must match the sensing window")
        if self.weight_kg <= 0:
            raise ValueError("weight must be positive")
        if np.any(self.image < 0):
            raise ValueError("reference image must be nonnegative")

    def to_json_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "object": {
                "object_id": self.obj.object_id,
                "length": self.obj.length,
                "radius": self.obj.radius,
                "center_xy": list(self.obj.center_xy),
                "region": list(self.obj.region),
            },
            "weight_kg": self.weight_kg,
            "depth": self.depth,
            "image": self.image.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "CalibObservation":
        o = doc["object"]
        obj = CalibObject(
            o["object_id"], o["length"], o["radius"],
            tuple(o["center_xy"]), tuple(o["region"]),
        )
        return cls(doc["scene_id"], obj, doc["weight_kg"],
                   np.array(doc["image"]), doc["depth"])


# ---------------------------------------------------------------------------
# loss terms


def loss_force(sim: np.ndarray, ref: np.ndarray) -> float:
    """Per-taxel absolute error plus total-force error, both normalized
    by the combined taxel sum; zero when both images are all-zero."""
    sim = np.asarray(sim, dtype=float)
    ref = np.asarray(ref, dtype=float)
    denom = float(np.sum(sim + ref))
    if denom == 0.0:
        return 0.0
    term_taxel = 0.5 * float(np.sum(np.abs(sim - ref))) / denom
    term_total = 0.5 * abs(float(np.sum(sim - ref))) / denom
    return term_taxel + term_total


def loss_contact(sim: np.ndarray, ref: np.ndarray) -> float:
    """Same structure as the force loss on binary contact maps."""
    return loss_force(
        (np.asarray(sim) != 0).astype(float), (np.asarray(ref) != 0).astype(float)
    )


def loss_depth(sim: float, ref: float) -> float:
    """Normalized compression-depth error; the denominator uses absolute
    values because the depths are signed measurements."""
    if sim == 0.0 and ref == 0.0:
        return 0.0
    return abs(sim - ref) / (abs(sim) + abs(ref))


# ---------------------------------------------------------------------------
# scene simulation


@dataclass
class SimOptions:
    dt: float = imager.DT_DEFAULT
    min_iterations: int = 100
    max_iterations: int = 700
    mat_iterations: int = mat_mod.DEFAULT_ITERATIONS
    spacing: float = mat_mod.PITCH
    scene_time_limit: float = 60.0  # wall-clock seconds per scene


def _region_mask(region):
    m = np.zeros(mat_mod.SENSE_SHAPE, dtype=bool)
    r0, r1, c0, c1 = region
    m[r0:r1, c0:c1] = True
    return m


def simulate_scene(
    params: mat_mod.MatParams,
    scene: list[tuple[CalibObject, float]],
    options: SimOptions | None = None,
):
    """Drop every (object, weight) of one scene together; returns the
    full image, per-region images and per-region depths."""
    options = options or SimOptions()
    state = mat_mod.build_mat(params)
    blobs = [
        imager.object_particles(*obj.segment(), obj.radius, w, options.spacing)
        for obj, w in scene
    ]
    merged = imager.ParticleBody.merge(blobs)
    img, _depth, report = imager.drop_and_image(
        merged,
        state,
        params,
        dt=options.dt,
        min_iterations=options.min_iterations,
        max_iterations=options.max_iterations,
        mat_iterations=options.mat_iterations,
    )
    compression = np.maximum(state.rest_matt_top - state.matt_z[0], 0.0)
    results = []
    for obj, w in scene:
        mask = _region_mask(obj.region)
        sub = np.where(mask, img.values, 0.0)
        depth = _region_depth(state, compression, obj)
        results.append((sub, depth))
    return img, results, report


def _region_depth(state: mat_mod.MatState, compression: np.ndarray, obj: CalibObject):
    """Peak mattress compression under the object's drop site."""
    cx, cy = obj.center_xy
    half = obj.length / 2.0 + obj.radius + 0.05
    jx = np.nonzero(np.abs(state.matt_x - cx) <= half)[0]
    iy = np.nonzero(np.abs(state.matt_y - cy) <= half)[0]
    if len(jx) == 0 or len(iy) == 0:
        return 0.0
    return float(compression[np.ix_(iy, jx)].max())


def make_reference_observations(
    params: mat_mod.MatParams,
    objects: list[CalibObject] | None = None,
    weight_levels: int = 5,
    options: SimOptions | None = None,
) -> list[CalibObservation]:
    """Synthesize the reference set from a known parameter vector by
    running the same drop protocol the objective uses."""
    objects = objects or default_objects()
    options = options or SimOptions()
    observations = []
    for scene_id in range(weight_levels):
        scene = [
            (obj, default_weights(obj)[scene_id % len(default_weights(obj))])
            for obj in objects
        ]
        _img, results, _report = simulate_scene(params, scene, options)
        for (obj, w), (sub, depth) in zip(scene, results):
            observations.append(CalibObservation(scene_id, obj, w, sub, depth))
    return observations


def save_observations(observations, path):
    with open(path, "w") as fh:
        json.dump([o.to_json_dict() for o in observations], fh)


def load_observations(path) -> list[CalibObservation]:
    with open(path) as fh:
        docs = json.load(fh)
    return [CalibObservation.from_json_dict(d) for d in docs]


# ---------------------------------------------------------------------------
# objective


def cloth_range_penalty(params: mat_mod.MatParams) -> float:
    """10x the deviation of any stretch/bend/shear stiffness outside the
    stable range."""
    pen = 0.0
    lo, hi = CLOTH_RANGE
    for name in mat_mod.MatParams.CLOTH_FIELDS:
        v = getattr(params, name)
        pen += CLOTH_PENALTY_SCALE * (max(0.0, lo - v) + max(0.0, v - hi))
    return pen


def objective(
    params_vec,
    observations: list[CalibObservation],
    options: SimOptions | None = None,
) -> float:
    """Total calibration cost of one parameter candidate.

    Penalty branches: any negative parameter and any simulation fault
    (instability, a drop that will not settle, a scene running past its
    wall-clock limit) cost 1e6; stretch/bend/shear outside the stable
    range add ten times the deviation.
    """
    if not observations:
        raise ValueError("observation set must not be empty")
    options = options or SimOptions()
    vec = np.asarray(params_vec, dtype=float).reshape(-1)
    if np.any(vec < 0.0):
        return PENALTY_HIGH
    if np.any(vec == 0.0):
        return PENALTY_HIGH
    params = mat_mod.MatParams.from_vector(vec)
    total = cloth_range_penalty(params)

    scenes: dict[int, list[CalibObservation]] = {}
    for obs in observations:
        scenes.setdefault(obs.scene_id, []).append(obs)

    for scene_id in sorted(scenes):
        group = scenes[scene_id]
        scene = [(o.obj, o.weight_kg) for o in group]
        started = time.perf_counter()
        try:
            _img, results, report = simulate_scene(params, scene, options)
        except (MatUnstable, ValueError):
            return PENALTY_HIGH
        if time.perf_counter() - started > options.scene_time_limit:
            return PENALTY_HIGH
        if not report.settled:
            return PENALTY_HIGH
        for obs, (sub, depth) in zip(group, results):
            total += loss_force(sub, obs.image)
            total += loss_contact(sub, obs.image)
            total += loss_depth(depth, obs.depth)
    return total


# ---------------------------------------------------------------------------
# calibration driver


@dataclass
class CalibrationResult:
    params: mat_mod.MatParams
    objective_value: float
    cma: CmaResult
    scale: np.ndarray


def calibrate(
    observations: list[CalibObservation],
    init: mat_mod.MatParams | None = None,
    sigma0: float = 0.25,
    config: CmaConfig | None = None,
    seed: int = 0,
    options: SimOptions | None = None,
    map_fn=None,
) -> CalibrationResult:
    """Fit the sixteen bed/sensor parameters to the observations.

    The search runs in units of the initial parameter magnitudes so one
    step size serves scales from millimeters to thousands of sensor
    units.
    """
    init = init or mat_mod.MatParams()
    options = options or SimOptions()
    scale = init.as_vector()
    if np.any(scale <= 0):
        raise ValueError("initial parameters must be positive")

    def scaled_objective(x):
        return objective(np.asarray(x) * scale, observations, options)

    result = cmaes_minimize(
        scaled_objective,
        np.ones(len(scale)),
        sigma0,
        config or CmaConfig(),
        np.random.default_rng(seed),
        map_fn=map_fn,
    )
    best = mat_mod.MatParams.from_vector(result.best_x * scale)
    return CalibrationResult(best, result.best_f, result, scale)


# ---------------------------------------------------------------------------
# spring-constant fit for the coupled loop


def fit_spring_k(records) -> tuple[float, float]:
    """Average spring constant over displacement records.

    Each record is (weight_force_N, total_penetration_m); the spring
    constant is the mean force-per-total-penetration, and the damper is
    pinned at four times the spring constant.
    """
    records = list(records)
    if not records:
        raise ValueError("need at least one displacement record")
    ks = []
    for w_force, sum_x in records:
        if sum_x == 0.0:
            raise ZeroDivisionError("zero total penetration in a record")
        ks.append(w_force / sum_x)
    k = float(np.mean(ks))
    return k, 4.0 * k


def displacement_record(
    params: mat_mod.MatParams,
    obj: CalibObject,
    weight_kg: float,
    depth: float,
    steps: int = 120,
    dt: float = imager.DT_DEFAULT,
) -> tuple[float, float]:
    """Press the object's collision geometry to the reference depth and
    record (weight_force, total penetration)."""
    state = mat_mod.build_mat(params)
    a, b = obj.segment()
    z = state.surface_height() + params.r_m + obj.radius - depth
    a = a + np.array([0.0, 0.0, z])
    b = b + np.array([0.0, 0.0, z])
    for _ in range(steps):
        mat_mod.mat_step(state, [(a, b, obj.radius)], dt)
    s = state.pen_last
    total = float(np.sum(s[s > mat_mod.CONTACT_THRESHOLD]))
    return weight_kg * GRAVITY, total


def displacement_records_from_observations(
    params: mat_mod.MatParams, observations: list[CalibObservation]
) -> list[tuple[float, float]]:
    return [
        displacement_record(params, o.obj, o.weight_kg, o.depth)
        for o in observations
        if o.depth > 0
    ]
