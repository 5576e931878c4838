"""restforge: synthetic pressure-image data generation for bodies at rest.

Pipeline: sample a pose/shape, settle a capsule ragdoll on a simulated
soft bed, drop a particlized body to synthesize the pressure image,
reconstruct contact maps from geometry, and score estimates.
"""

from .body import (
    BodyShape,
    BodyState,
    CapsuleChain,
    PosedCapsules,
    PoseState,
    build_body,
    compute_masses,
    forward_kinematics,
    home_pose_angles,
    joint_params,
    regress_capsules,
)
from .errors import (
    CorruptOffset,
    DegenerateCapsule,
    DegeneratePlane,
    EmptyAfterClipping,
    EmptyBody,
    HashMismatch,
    IntegrationDiverged,
    MatUnstable,
    RestforgeError,
    SamplingBudgetExceeded,
    ShapeOutOfRange,
    VersionMismatch,
)

__version__ = "0.1.0"
