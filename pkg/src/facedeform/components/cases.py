"""Paired surgical case record shared by training, prediction and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidParameterError
from .geometry import LabeledCloud, SourceLabel, TriMesh

LANDMARK_REGIONS = ("periorbital", "midface", "lip_chin")


@dataclass(frozen=True)
class SurgicalCase:
    """Pre-op bone B, planned/post-op bone B', pre-op face F and (optionally) true post-op F'.

    Bone clouds correspond pointwise by index, as do the two face clouds. ``face_mesh``
    triangulates the face vertices and is shared by pre- and post-op faces.
    """

    case_id: str
    bone_pre: LabeledCloud
    bone_post: LabeledCloud
    face_pre: LabeledCloud
    face_post: LabeledCloud | None = None
    face_mesh: TriMesh | None = None
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    landmark_regions: tuple[str, ...] = ()
    stable_landmarks: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.bone_pre) != len(self.bone_post):
            raise InvalidParameterError(
                f"bone clouds differ in size: {len(self.bone_pre)} vs {len(self.bone_post)}"
            )
        if self.face_post is not None and len(self.face_post) != len(self.face_pre):
            raise InvalidParameterError(
                f"face clouds differ in size: {len(self.face_pre)} vs {len(self.face_post)}"
            )
        if self.face_mesh is not None and len(self.face_mesh.vertices) != len(self.face_pre):
            raise InvalidParameterError("face mesh vertex count differs from the face cloud")
        landmarks = np.asarray(self.landmarks, dtype=np.int64).reshape(-1)
        if landmarks.size and (landmarks.min() < 0 or landmarks.max() >= len(self.face_pre)):
            raise InvalidParameterError("landmark index outside the face cloud")
        if self.landmark_regions and len(self.landmark_regions) != landmarks.size:
            raise InvalidParameterError("one region tag is needed per landmark")
        object.__setattr__(self, "landmarks", landmarks)

    @classmethod
    def from_arrays(
        cls,
        case_id: str,
        bone_pre: np.ndarray,
        bone_post: np.ndarray,
        face_pre: np.ndarray,
        face_post: np.ndarray | None = None,
        **kwargs,
    ) -> SurgicalCase:
        """Build a case from raw (N, 3) arrays, assigning the source labels."""
        return cls(
            case_id,
            LabeledCloud.uniform(bone_pre, SourceLabel.BONE_PRE),
            LabeledCloud.uniform(bone_post, SourceLabel.BONE_POST),
            LabeledCloud.uniform(face_pre, SourceLabel.FACE_PRE),
            None if face_post is None else LabeledCloud.uniform(face_post, SourceLabel.FACE_PRE),
            **kwargs,
        )

    @property
    def bone_displacement(self) -> np.ndarray:
        return self.bone_post.points - self.bone_pre.points

    @property
    def face_displacement(self) -> np.ndarray:
        if self.face_post is None:
            raise InvalidParameterError(f"case {self.case_id} has no post-op face")
        return self.face_post.points - self.face_pre.points
