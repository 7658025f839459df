"""Landmark similarity transforms and the differentiable face alignment projection"""

from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, field_validator, model_validator

from .imaging import as_batch, unbatch
from .types import DegenerateLandmarks, ShapeError

# 5-point ArcFace template on a 112x112 canvas:
# left eye, right eye, nose tip, left mouth corner, right mouth corner
ARCFACE_112 = np.array(
    [
        [38.2946, 51.6963],
        [73.5318, 51.5014],
        [56.0252, 71.7366],
        [41.5493, 92.3655],
        [70.7299, 92.2041],
    ],
    dtype=np.float64,
)

DEGENERATE_VARIANCE = 1e-12
FORM_TOLERANCE = 1e-9


def _centered_variance(points: np.ndarray) -> float:
    centered = points - points.mean(axis=0)
    return float(np.square(centered).sum(axis=1).mean())


class Landmarks5(BaseModel):
    points: List[Tuple[float, float]]

    @field_validator("points")
    @classmethod
    def _check_points(cls, v: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
        arr = np.asarray(v, dtype=np.float64)
        if arr.shape != (5, 2):
            raise ValueError(f"Expected 5 (x, y) points, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Landmark coordinates must be finite")
        if _centered_variance(arr) <= DEGENERATE_VARIANCE:
            raise ValueError("All five landmarks coincide")
        return [(float(x), float(y)) for x, y in arr]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=np.float64)

    def to_flat(self) -> List[float]:
        """Serialize as x1, y1, ..., x5, y5"""
        return [c for p in self.points for c in p]

    @classmethod
    def from_flat(cls, values: Sequence[float]) -> "Landmarks5":
        if len(values) != 10:
            raise ValueError(f"Expected 10 floats, got {len(values)}")
        return cls(points=[(values[2 * i], values[2 * i + 1]) for i in range(5)])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Landmarks5":
        return cls(points=[(float(x), float(y)) for x, y in np.asarray(arr)])

    @property
    def eye_distance(self) -> float:
        arr = self.as_array()
        return float(np.linalg.norm(arr[1] - arr[0]))


class SimilarityTransform(BaseModel):
    """[[s cos t, -s sin t, tx], [s sin t, s cos t, ty]]"""

    matrix: List[List[float]]

    @field_validator("matrix")
    @classmethod
    def _check_form(cls, v: List[List[float]]) -> List[List[float]]:
        m = np.asarray(v, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"Expected a 2x3 matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("Transform entries must be finite")
        if abs(m[0, 0] - m[1, 1]) > FORM_TOLERANCE or abs(m[0, 1] + m[1, 0]) > FORM_TOLERANCE:
            raise ValueError("Linear block is not a scaled rotation")
        if m[0, 0] ** 2 + m[1, 0] ** 2 <= 0.0:
            raise ValueError("Scale must be positive")
        return m.tolist()

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.matrix, dtype=np.float64)

    @property
    def scale(self) -> float:
        m = self.array
        return float(np.hypot(m[0, 0], m[1, 0]))

    @property
    def angle(self) -> float:
        m = self.array
        return float(np.arctan2(m[1, 0], m[0, 0]))

    @property
    def translation(self) -> Tuple[float, float]:
        m = self.array
        return float(m[0, 2]), float(m[1, 2])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) points"""
        m = self.array
        pts = np.asarray(points, dtype=np.float64)
        return pts @ m[:, :2].T + m[:, 2]

    def compose(self, inner: "SimilarityTransform") -> "SimilarityTransform":
        """self after inner"""
        a, b = self.array, inner.array
        lin = a[:, :2] @ b[:, :2]
        t = a[:, :2] @ b[:, 2] + a[:, 2]
        return SimilarityTransform(matrix=np.hstack([lin, t[:, None]]).tolist())

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(matrix=[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

    @classmethod
    def from_params(
        cls, scale: float, angle: float, tx: float = 0.0, ty: float = 0.0
    ) -> "SimilarityTransform":
        c, s = scale * np.cos(angle), scale * np.sin(angle)
        return cls(matrix=[[c, -s, tx], [s, c, ty]])


class FaceTemplate(BaseModel):
    points: Landmarks5
    side: int

    @model_validator(mode="after")
    def _check_inside(self) -> "FaceTemplate":
        arr = self.points.as_array()
        if self.side < 2:
            raise ValueError("Template side must be at least 2")
        if np.any(arr < 0) or np.any(arr >= self.side):
            raise ValueError("Template points must lie inside [0, side)^2")
        if arr[0, 0] >= arr[1, 0]:
            raise ValueError("Left eye must be left of the right eye")
        return self

    @classmethod
    def arcface(cls, side: int = 128) -> "FaceTemplate":
        """The ArcFace 5-point template rescaled to `side` pixels"""
        return cls(points=Landmarks5.from_array(ARCFACE_112 * (side / 112.0)), side=side)


PointsLike = Union[Landmarks5, np.ndarray, Sequence[Sequence[float]]]


def _as_points(p: PointsLike) -> np.ndarray:
    if isinstance(p, Landmarks5):
        return p.as_array()
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ShapeError(f"Expected (N, 2) points, got shape {arr.shape}")
    return arr


def estimate_similarity(src: PointsLike, dst: PointsLike) -> SimilarityTransform:
    """Least-squares 4-DOF similarity with T(src) ~ dst (Umeyama, no reflection)"""
    x = _as_points(src)
    y = _as_points(dst)
    if x.shape != y.shape:
        raise ShapeError(f"Point sets differ in shape: {x.shape} vs {y.shape}")

    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    var_x = _centered_variance(x)
    if var_x < DEGENERATE_VARIANCE:
        raise DegenerateLandmarks("Source landmarks have zero spread")

    cov = (y - mu_y).T @ (x - mu_x) / x.shape[0]
    a = (cov[0, 0] + cov[1, 1]) / var_x
    b = (cov[1, 0] - cov[0, 1]) / var_x
    if a * a + b * b < DEGENERATE_VARIANCE:
        raise DegenerateLandmarks("Destination landmarks have zero spread")

    lin = np.array([[a, -b], [b, a]])
    t = mu_y - lin @ mu_x
    return SimilarityTransform(matrix=np.hstack([lin, t[:, None]]).tolist())


def invert_transform(t: SimilarityTransform) -> SimilarityTransform:
    m = t.array
    a, b = m[0, 0], m[1, 0]
    s2 = a * a + b * b
    inv = np.array([[a, b], [-b, a]]) / s2
    shift = -inv @ m[:, 2]
    return SimilarityTransform(matrix=np.hstack([inv, shift[:, None]]).tolist())


TransformLike = Union[SimilarityTransform, torch.Tensor, Sequence[SimilarityTransform]]


def _as_theta(t: TransformLike, batch: torch.Tensor) -> torch.Tensor:
    b = batch.shape[0]
    if isinstance(t, SimilarityTransform):
        theta = torch.as_tensor(t.array, dtype=batch.dtype, device=batch.device)
    elif isinstance(t, torch.Tensor):
        theta = t.to(dtype=batch.dtype, device=batch.device)
    else:
        theta = torch.as_tensor(
            np.stack([tr.array for tr in t]), dtype=batch.dtype, device=batch.device
        )
    if theta.dim() == 2:
        theta = theta.unsqueeze(0).expand(b, 2, 3)
    if theta.shape != (b, 2, 3):
        raise ShapeError(f"Expected (B, 2, 3) transforms, got {tuple(theta.shape)}")
    return theta


def warp_bilinear(
    img: torch.Tensor, t: TransformLike, out_h: int, out_w: int
) -> torch.Tensor:
    """Sample img at t(x, y) for every output pixel (x, y), clamping to the border.

    `t` maps output pixel coordinates to source pixel coordinates. Gradients
    flow to `img` and, when `t` is a tensor, to the transform.
    """
    batch, single = as_batch(img)
    if out_h < 2 or out_w < 2:
        raise ShapeError("Output size must be at least 2x2")
    _, _, h, w = batch.shape
    if h < 2 or w < 2:
        raise ShapeError("Source image must be at least 2x2")
    theta = _as_theta(t, batch)

    ys, xs = torch.meshgrid(
        torch.arange(out_h, dtype=batch.dtype, device=batch.device),
        torch.arange(out_w, dtype=batch.dtype, device=batch.device),
        indexing="ij",
    )
    coords = torch.stack([xs, ys, torch.ones_like(xs)], dim=-1)
    src = torch.einsum("bij,hwj->bhwi", theta, coords)

    # align_corners=True: -1 and 1 are the centers of the corner pixels
    gx = src[..., 0] * (2.0 / (w - 1)) - 1.0
    gy = src[..., 1] * (2.0 / (h - 1)) - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    out = F.grid_sample(
        batch, grid, mode="bilinear", padding_mode="border", align_corners=True
    )
    return unbatch(out, single)


def alignment_transforms(
    landmarks: Sequence[Landmarks5], template: FaceTemplate
) -> List[SimilarityTransform]:
    """Output-to-input (template -> portrait) transforms for each face"""
    return [invert_transform(estimate_similarity(lm, template.points)) for lm in landmarks]


def align_face(
    portrait: torch.Tensor,
    lm: Union[Landmarks5, Sequence[Landmarks5]],
    template: FaceTemplate,
) -> torch.Tensor:
    """The alignment projection: crop and warp each portrait onto the template"""
    batch, single = as_batch(portrait)
    lms = [lm] if isinstance(lm, Landmarks5) else list(lm)
    if len(lms) != batch.shape[0]:
        raise ShapeError(f"{len(lms)} landmark sets for {batch.shape[0]} images")
    inverse = alignment_transforms(lms, template)
    out = warp_bilinear(batch, inverse, template.side, template.side)
    return unbatch(out, single)


def landmark_box(
    lm: Landmarks5,
    dilation: float,
    width: int,
    height: int,
    scale: float = 1.0,
) -> Optional[Tuple[int, int, int, int]]:
    """Landmark bounding box dilated by `dilation` of its size, in a grid `scale` times
    the landmark grid, clipped to (width, height); half-open (x0, y0, x1, y1)"""
    arr = lm.as_array() * scale
    lo = arr.min(axis=0)
    hi = arr.max(axis=0)
    pad = (hi - lo) * dilation
    x0 = int(np.floor(lo[0] - pad[0]))
    y0 = int(np.floor(lo[1] - pad[1]))
    x1 = int(np.ceil(hi[0] + pad[0])) + 1
    y1 = int(np.ceil(hi[1] + pad[1])) + 1
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(width, x1), min(height, y1)
    if x1 <= x0 or y1 <= y0:
        return None
    return x0, y0, x1, y1
