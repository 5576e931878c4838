"""Dataset container and reproducible batch generation.

One container file per partition row: a small binary header, an
embedded JSON manifest, then fixed-size records.  Generation derives an
independent seed per record from the global seed, so results are
bit-identical regardless of worker scheduling, and rejected rollouts
resample deterministically.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import body as body_mod
from . import imager, mat as mat_mod, pmr, sampler, settle as settle_mod
from .body import BodyShape, PoseState
from .errors import (
    CorruptOffset,
    EmptyBody,
    HashMismatch,
    IntegrationDiverged,
    MatUnstable,
    RestforgeError,
    SamplingBudgetExceeded,
    VersionMismatch,
)

MAGIC = b"RFSET\x00"
FORMAT_VERSION = 1

GENDER_CODE = {"F": 0, "M": 1}
GENDER_NAME = {v: k for k, v in GENDER_CODE.items()}
PARTITION_CODE = {name: i for i, name in enumerate(sampler.PARTITION_NAMES)}
PARTITION_NAME = {v: k for k, v in PARTITION_CODE.items()}

_IMG = mat_mod.SENSE_SHAPE[0] * mat_mod.SENSE_SHAPE[1]
# beta, theta, root_rot, root_pos, P, Q, C_O, gender, partition, flags, seed, iterations
_RECORD_STRUCT = struct.Struct(f"<10d 69d 3d 3d {_IMG}f {_IMG}f {_IMG}B 4B Q I 2x")
RECORD_SIZE = _RECORD_STRUCT.size
MAX_OVERSAMPLING = 10


@dataclass
class SampleRecord:
    """One dataset row: settled pose, shape, images and provenance."""

    beta: np.ndarray
    theta: np.ndarray
    root_rot: np.ndarray
    root_pos: np.ndarray
    pressure: np.ndarray  # (64, 27) float32
    depth_map: np.ndarray  # (64, 27) float32
    contact: np.ndarray  # (64, 27) uint8
    gender: str
    partition: str
    seed: int
    settle_iterations: int
    rejected: bool = False

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(10)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(69)
        self.root_rot = np.asarray(self.root_rot, dtype=np.float64).reshape(3)
        self.root_pos = np.asarray(self.root_pos, dtype=np.float64).reshape(3)
        self.pressure = np.asarray(self.pressure, dtype=np.float32).reshape(mat_mod.SENSE_SHAPE)
        self.depth_map = np.asarray(self.depth_map, dtype=np.float32).reshape(mat_mod.SENSE_SHAPE)
        self.contact = np.asarray(self.contact, dtype=np.uint8).reshape(mat_mod.SENSE_SHAPE)
        if not np.isin(self.contact, (0, 1)).all():
            raise ValueError("contact map must be binary")

    def pack(self) -> bytes:
        return _RECORD_STRUCT.pack(
            *self.beta,
            *self.theta,
            *self.root_rot,
            *self.root_pos,
            *self.pressure.ravel(),
            *self.depth_map.ravel(),
            *self.contact.ravel(),
            GENDER_CODE[self.gender],
            PARTITION_CODE[self.partition],
            1 if self.rejected else 0,
            0,
            self.seed,
            self.settle_iterations,
        )

    @classmethod
    def unpack(cls, blob: bytes) -> "SampleRecord":
        vals = _RECORD_STRUCT.unpack(blob)
        off = 0

        def take(n):
            nonlocal off
            out = vals[off:off + n]
            off += n
            return np.array(out)

        beta = take(10)
        theta = take(69)
        root_rot = take(3)
        root_pos = take(3)
        pressure = take(_IMG).reshape(mat_mod.SENSE_SHAPE)
        depth = take(_IMG).reshape(mat_mod.SENSE_SHAPE)
        contact = take(_IMG).reshape(mat_mod.SENSE_SHAPE)
        gender, partition, rejected, _pad, seed, iterations = vals[off:off + 6]
        return cls(
            beta, theta, root_rot, root_pos, pressure, depth, contact,
            GENDER_NAME[gender], PARTITION_NAME[partition],
            int(seed), int(iterations), bool(rejected),
        )


@dataclass
class Manifest:
    format_version: int
    params_hash: str
    count: int
    offsets: list
    seeds: list
    partition: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": self.format_version,
                "params_hash": self.params_hash,
                "count": self.count,
                "offsets": self.offsets,
                "seeds": self.seeds,
                "partition": self.partition,
                "extra": self.extra,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        doc = json.loads(text)
        return cls(
            doc["format_version"], doc["params_hash"], doc["count"],
            doc["offsets"], doc["seeds"], doc.get("partition"),
            doc.get("extra", {}),
        )


def write_dataset(
    records: list,
    path,
    params_hash: str = "",
    partition: str | None = None,
    extra: dict | None = None,
) -> Manifest:
    """Write one container file and return its manifest."""
    blobs = [r.pack() for r in records]
    manifest = Manifest(
        FORMAT_VERSION, params_hash, len(records), [], [r.seed for r in records],
        partition, extra or {},
    )
    # absolute offsets depend on the manifest's own encoded length, so
    # iterate to the fixed point (stable within a few rounds)
    mbytes = manifest.to_json().encode()
    while True:
        data_start = len(MAGIC) + 8 + len(mbytes)
        offsets = [data_start + i * RECORD_SIZE for i in range(len(records))]
        if offsets == manifest.offsets:
            break
        manifest.offsets = offsets
        mbytes = manifest.to_json().encode()

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(mbytes)))
        fh.write(mbytes)
        for blob in blobs:
            fh.write(blob)
    return manifest


def read_dataset(path, expect_params_hash: str | None = None):
    """Read a container; raises on version, offset or hash faults."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise CorruptOffset("bad container magic")
    version, mlen = struct.unpack_from("<II", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"container version {version} != {FORMAT_VERSION}")
    mstart = len(MAGIC) + 8
    if mstart + mlen > len(raw):
        raise CorruptOffset("manifest extends past end of file")
    manifest = Manifest.from_json(raw[mstart:mstart + mlen].decode())
    if expect_params_hash is not None and manifest.params_hash != expect_params_hash:
        raise HashMismatch("dataset was generated with different parameters")
    offsets = manifest.offsets
    if any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise CorruptOffset("record offsets must increase strictly")
    records = []
    for off in offsets:
        if off + RECORD_SIZE > len(raw):
            raise CorruptOffset("record extends past end of file")
        records.append(SampleRecord.unpack(raw[off:off + RECORD_SIZE]))
    return records, manifest


# ---------------------------------------------------------------------------
# generation


@dataclass
class GenerateOptions:
    settle: settle_mod.SettleParams = field(default_factory=settle_mod.SettleParams)
    drop_min_iterations: int = imager.MIN_ITERATIONS
    drop_max_iterations: int = imager.MAX_ITERATIONS
    surface_spacing: float = 0.015


def _row_seed(global_seed: int, row_index: int, attempt: int) -> int:
    ss = np.random.SeedSequence([global_seed, row_index, attempt])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate_record(
    partition_name: str,
    gender: str,
    limbs_on_bed: bool,
    seed: int,
    mat_params: mat_mod.MatParams,
    options: GenerateOptions | None = None,
):
    """One full rollout: sample, settle, synthesize, reconstruct.

    Returns (record, report) where the record is None when the rollout
    was rejected.
    """
    options = options or GenerateOptions()
    rng = np.random.default_rng(seed)
    spec = sampler.PARTITIONS[partition_name].with_limbs_on_bed(limbs_on_bed)
    shape = sampler.sample_shape(rng, gender)
    chain = body_mod.build_body(shape)
    pose, _sample_report = sampler.sample_pose(spec, shape, rng, chain)

    try:
        report = settle_mod.settle(chain, pose, mat_params, options.settle)
    except IntegrationDiverged:
        return None, "IntegrationDiverged"
    if not report.settled:
        return None, report.result

    settled_pose = report.pose
    pbody = imager.particlize(shape, settled_pose, chain)
    state = mat_mod.build_mat(mat_params)
    image, _q, _drop = imager.drop_and_image(
        pbody, state, mat_params,
        min_iterations=options.drop_min_iterations,
        max_iterations=options.drop_max_iterations,
    )

    posed = body_mod.forward_kinematics(chain, settled_pose)
    surface = body_mod.surface_points(posed, options.surface_spacing)
    bed_height = mat_mod.MatState(mat_params).surface_height() + mat_params.r_m
    maps = pmr.reconstruct_maps(surface, bed_height)

    record = SampleRecord(
        beta=shape.beta,
        theta=settled_pose.theta,
        root_rot=settled_pose.root_rot,
        root_pos=settled_pose.root_pos,
        pressure=image.values,
        depth_map=maps.depth,
        contact=maps.contact,
        gender=gender,
        partition=partition_name,
        seed=seed,
        settle_iterations=report.iterations,
        rejected=False,
    )
    return record, "Settled"


def _worker_task(args):
    (row_index, partition, gender, limbs_on_bed, global_seed, params_json, opt) = args
    mat_params = mat_mod.MatParams.from_json(params_json)
    rejections = []
    for attempt in range(MAX_OVERSAMPLING):
        seed = _row_seed(global_seed, row_index, attempt)
        try:
            record, status = generate_record(
                partition, gender, limbs_on_bed, seed, mat_params, opt
            )
        except (SamplingBudgetExceeded, EmptyBody, MatUnstable) as exc:
            record, status = None, type(exc).__name__
        if record is not None:
            return row_index, record, rejections
        rejections.append(status)
    raise RestforgeError(
        f"row {row_index}: no settled rollout within {MAX_OVERSAMPLING} attempts"
    )


def generate(
    plan: list,
    mat_params: mat_mod.MatParams,
    seed: int,
    workers: int = 1,
    out_dir=None,
    options: GenerateOptions | None = None,
):
    """Generate every planned row and optionally write one container per
    partition row plus an aggregate manifest.

    Returns (records, rejection_log, manifests).
    """
    options = options or GenerateOptions()
    tasks = []
    row_index = 0
    for row in plan:
        for _ in range(row.count):
            tasks.append(
                (
                    row_index, row.partition, row.gender, row.limbs_on_bed,
                    seed, mat_params.to_json(), options,
                )
            )
            row_index += 1

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_worker_task, tasks, chunksize=1))
    else:
        results = [_worker_task(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    records = [r[1] for r in results]
    rejection_log = {i: rej for i, _rec, rej in results if rej}

    manifests = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        start = 0
        agg = {
            "global_seed": seed,
            "params_hash": mat_params.params_hash(),
            "files": [],
            "rejections": {str(k): v for k, v in rejection_log.items()},
        }
        for i, row in enumerate(plan):
            chunk = records[start:start + row.count]
            start += row.count
            name = f"part_{i:02d}_{row.partition}_{row.gender}_{int(row.limbs_on_bed)}.rfset"
            path = os.path.join(out_dir, name)
            manifest = write_dataset(
                chunk, path, mat_params.params_hash(), row.partition,
                {"gender": row.gender, "limbs_on_bed": row.limbs_on_bed},
            )
            manifests.append(manifest)
            agg["files"].append({"file": name, "count": row.count})
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(agg, fh, sort_keys=True, indent=1)
    return records, rejection_log, manifests
