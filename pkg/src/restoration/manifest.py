"""Manifest records and JSON-lines storage"""

from pathlib import Path
from typing import Any, Iterable, List, Optional, Tuple, Type, TypeVar, Union

from pydantic import (
    BaseModel,
    ConfigDict,
    ValidationError,
    field_serializer,
    field_validator,
    model_validator,
)

from .geometry import Landmarks5
from .types import ManifestError

SOURCES = ("portrait", "face", "scene")
SPLITS = ("train", "test")

Row = TypeVar("Row", bound=BaseModel)


def read_landmarks(v: Any) -> Any:
    """Manifests store landmarks as x1, y1, ..., x5, y5"""
    if isinstance(v, (list, tuple)) and len(v) > 0 and not isinstance(v[0], (list, tuple)):
        return Landmarks5.from_flat(v)
    return v


def write_landmarks(lm: Optional[Landmarks5]) -> Optional[List[float]]:
    return lm.to_flat() if lm is not None else None


class PortraitRecord(BaseModel):
    """A curated (or candidate) HQ portrait"""

    model_config = ConfigDict(extra="forbid")

    id: str
    image: str
    width: int
    height: int
    landmarks: Optional[Landmarks5] = None
    identity_seed: Optional[int] = None
    scene_seed: Optional[int] = None
    eye_distance: float = 0.0
    source: str = "portrait"
    split: str = "train"

    @field_validator("landmarks", mode="before")
    @classmethod
    def _read_landmarks(cls, v: Any) -> Any:
        return read_landmarks(v)

    @field_serializer("landmarks")
    def _write_landmarks(self, lm: Optional[Landmarks5]) -> Optional[List[float]]:
        return write_landmarks(lm)

    @model_validator(mode="after")
    def _check_record(self) -> "PortraitRecord":
        if self.source not in SOURCES:
            raise ValueError(f"Unknown source {self.source!r}")
        if self.split not in SPLITS:
            raise ValueError(f"Unknown split {self.split!r}")
        expected = self.landmarks.eye_distance if self.landmarks is not None else 0.0
        if abs(self.eye_distance - expected) > 1e-6:
            raise ValueError(
                f"eye_distance {self.eye_distance} disagrees with landmarks ({expected})"
            )
        return self

    @classmethod
    def create(cls, **kwargs) -> "PortraitRecord":
        lm = kwargs.get("landmarks")
        kwargs.setdefault("eye_distance", lm.eye_distance if lm is not None else 0.0)
        return cls(**kwargs)


class FaceTriplet(BaseModel):
    """(LQ portrait, HQ portrait, optional reference face) with its face geometry"""

    model_config = ConfigDict(extra="forbid")

    id: str
    portrait_id: str
    lq: str
    hq: str
    ref: Optional[str] = None
    ref_id: Optional[str] = None
    mask_box: Optional[Tuple[int, int, int, int]] = None
    landmarks: Optional[Landmarks5] = None
    degrade_seed: int
    factor: int = 4
    source: str = "portrait"
    split: str = "train"

    @field_validator("landmarks", mode="before")
    @classmethod
    def _read_landmarks(cls, v: Any) -> Any:
        return read_landmarks(v)

    @field_serializer("landmarks")
    def _write_landmarks(self, lm: Optional[Landmarks5]) -> Optional[List[float]]:
        return write_landmarks(lm)

    @model_validator(mode="after")
    def _check_reference(self) -> "FaceTriplet":
        if (self.ref is None) != (self.mask_box is None):
            raise ValueError("A reference face and a mask box must be given together")
        if self.ref is not None and self.landmarks is None:
            raise ValueError("Referenced triplets need landmarks")
        if self.source not in SOURCES:
            raise ValueError(f"Unknown source {self.source!r}")
        if self.split not in SPLITS:
            raise ValueError(f"Unknown split {self.split!r}")
        return self

    def without_reference(self) -> "FaceTriplet":
        return self.model_copy(update={"ref": None, "ref_id": None, "mask_box": None})


def write_manifest(path: Union[str, Path], rows: Iterable[BaseModel]) -> Path:
    """One JSON object per line, sorted by id"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(rows, key=lambda r: getattr(r, "id"))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in ordered:
            f.write(row.model_dump_json() + "\n")
    return path


def read_manifest(path: Union[str, Path], row_type: Type[Row]) -> List[Row]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"Manifest not found: {path}")
    rows: List[Row] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rows.append(row_type.model_validate_json(line))
            except ValidationError as e:
                raise ManifestError(f"{path}:{lineno}: invalid {row_type.__name__}: {e}") from e
    return rows
