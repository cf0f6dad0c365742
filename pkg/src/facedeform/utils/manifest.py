"""Case directories: the PLY/OBJ files of one case plus a JSON manifest."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from ..components.cases import SurgicalCase
from ..components.geometry import SourceLabel
from ..errors import ParseError
from .mesh_io import read_obj, read_ply, write_obj, write_ply

if TYPE_CHECKING:
    from ..components.synthetic import SyntheticCase

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
CASE_FILES = {
    "bone_pre": "bone_pre.ply",
    "bone_post": "bone_post.ply",
    "face_pre": "face_pre.ply",
    "face_post": "face_post.ply",
    "face_mesh": "face_mesh.obj",
}


@dataclass
class CaseManifest:
    """Contents of ``manifest.json``; file paths are relative to the case directory."""

    case_id: str
    files: dict[str, str] = field(default_factory=lambda: dict(CASE_FILES))
    landmarks: list[int] = field(default_factory=list)
    landmark_regions: list[str] = field(default_factory=list)
    stable_landmarks: dict[str, list[int]] = field(default_factory=dict)
    plan: list[dict[str, Any]] = field(default_factory=list)
    seed: int | None = None
    flagged_points: int = 0
    registration: dict[str, Any] = field(default_factory=dict)

    def write(self, directory: str | Path) -> Path:
        path = Path(directory) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, directory: str | Path) -> CaseManifest:
        """Load and validate a manifest.

        Raises:
            ParseError: If the file is not valid JSON or lacks required keys
        """
        path = Path(directory) / MANIFEST_NAME
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", path=path, line=e.lineno) from e
        if not isinstance(data, dict) or "case_id" not in data:
            raise ParseError("manifest needs a case_id", path=path)
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ParseError(f"unknown manifest keys {sorted(unknown)}", path=path)
        return cls(**data)


def write_case(case: SyntheticCase, directory: str | Path) -> CaseManifest:
    """Write a generated case as PLY/OBJ files plus its manifest."""
    directory = Path(directory)
    write_ply(case.bone_pre, directory / CASE_FILES["bone_pre"])
    write_ply(case.bone_post, directory / CASE_FILES["bone_post"])
    write_ply(case.face_pre, directory / CASE_FILES["face_pre"])
    write_ply(case.face_post, directory / CASE_FILES["face_post"])
    write_obj(case.face_mesh, directory / CASE_FILES["face_mesh"])
    manifest = CaseManifest(
        case_id=case.case_id,
        landmarks=[int(i) for i in case.landmarks],
        landmark_regions=list(case.landmark_regions),
        stable_landmarks={
            "bone": [int(i) for i in case.stable_bone],
            "face": [int(i) for i in case.stable_face],
        },
        plan=[move.describe() for move in case.plan],
        seed=case.seed,
        flagged_points=case.flagged,
    )
    manifest.write(directory)
    logger.debug("Wrote case %s to %s", case.case_id, directory)
    return manifest


def load_case(directory: str | Path) -> SurgicalCase:
    """Read a case directory; a missing post-op face leaves ``face_post`` unset."""
    directory = Path(directory)
    manifest = CaseManifest.read(directory)
    files = {**CASE_FILES, **manifest.files}

    def optional(key: str) -> Path | None:
        path = directory / files[key]
        return path if path.exists() else None

    face_post = optional("face_post")
    mesh = optional("face_mesh")
    return SurgicalCase(
        case_id=manifest.case_id,
        bone_pre=read_ply(directory / files["bone_pre"], SourceLabel.BONE_PRE).relabeled(
            SourceLabel.BONE_PRE
        ),
        bone_post=read_ply(directory / files["bone_post"], SourceLabel.BONE_POST).relabeled(
            SourceLabel.BONE_POST
        ),
        face_pre=read_ply(directory / files["face_pre"]).relabeled(SourceLabel.FACE_PRE),
        face_post=None
        if face_post is None
        else read_ply(face_post).relabeled(SourceLabel.FACE_PRE),
        face_mesh=None if mesh is None else read_obj(mesh),
        landmarks=np.asarray(manifest.landmarks, dtype=np.int64),
        landmark_regions=tuple(manifest.landmark_regions),
        stable_landmarks={
            k: np.asarray(v, dtype=np.int64) for k, v in manifest.stable_landmarks.items()
        },
    )


def write_surgical_case(
    case: SurgicalCase,
    directory: str | Path,
    *,
    registration: dict[str, Any] | None = None,
) -> CaseManifest:
    """Write a (possibly registered) case back out in the same layout.

    ``registration`` records which structures were aligned and by what transform.
    """
    directory = Path(directory)
    write_ply(case.bone_pre, directory / CASE_FILES["bone_pre"])
    write_ply(case.bone_post, directory / CASE_FILES["bone_post"])
    write_ply(case.face_pre, directory / CASE_FILES["face_pre"])
    files = {k: v for k, v in CASE_FILES.items() if k in ("bone_pre", "bone_post", "face_pre")}
    if case.face_post is not None:
        write_ply(case.face_post, directory / CASE_FILES["face_post"])
        files["face_post"] = CASE_FILES["face_post"]
    if case.face_mesh is not None:
        write_obj(case.face_mesh, directory / CASE_FILES["face_mesh"])
        files["face_mesh"] = CASE_FILES["face_mesh"]
    manifest = CaseManifest(
        case_id=case.case_id,
        files=files,
        landmarks=[int(i) for i in case.landmarks],
        landmark_regions=list(case.landmark_regions),
        stable_landmarks={k: [int(i) for i in v] for k, v in case.stable_landmarks.items()},
        registration=dict(registration or {}),
    )
    manifest.write(directory)
    return manifest


def find_cases(root: str | Path) -> list[Path]:
    """Case directories directly below ``root`` (or ``root`` itself), sorted by name."""
    root = Path(root)
    if (root / MANIFEST_NAME).exists():
        return [root]
    return sorted(p.parent for p in root.glob(f"*/{MANIFEST_NAME}"))
