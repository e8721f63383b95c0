"""Pose-conditioned neural signed distance fields for articulated bodies.

Pipeline: generate exact synthetic scan data from an articulated capsule body,
train the factorized implicit model (canonical mapping, displacement field,
canonical SDF, normals), reconstruct posed meshes by marching cubes, and
evaluate with point-to-surface / IoU / F-score.
"""

__version__ = "0.1.0"

from .skeleton import Pose, Skeleton  # noqa: F401
from .fields import ModelConfig, PosedSdfModel  # noqa: F401
from .body import BodyConfig, CapsuleBody, make_synthetic_body  # noqa: F401
