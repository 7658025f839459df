"""Deterministic synthetic portraits with exact landmarks and seeded identities"""

from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
from loguru import logger
from tqdm import tqdm

from .curation import DataConfig, derive_seed
from .geometry import (
    ARCFACE_112,
    FaceTemplate,
    Landmarks5,
    SimilarityTransform,
    align_face,
    invert_transform,
    warp_bilinear,
)
from .imaging import resize, save_image
from .manifest import PortraitRecord

CANONICAL_SIDE = 112.0
FACE_CENTER = (56.0, 58.0)
FACE_AXES = (50.0, 62.0)
TORSO_CENTER = (56.0, 185.0)
TORSO_AXES = (95.0, 60.0)
MARKER_RADII = (5.0, 5.0, 3.0, 2.5, 2.5)
MARKER_DEPTH = 0.6
LANDMARK_JITTER = 1.5

SCALE_RANGE = (0.2, 0.6)
ANGLE_RANGE = (-20.0, 20.0)

IDENTITY_STREAM = 0x1D
SCENE_STREAM = 0x5C


def _identity_rng(identity_seed: int) -> np.random.Generator:
    return np.random.default_rng([identity_seed & 0xFFFFFFFFFFFFFFFF, IDENTITY_STREAM])


def _scene_rng(scene_seed: int) -> np.random.Generator:
    return np.random.default_rng([scene_seed & 0xFFFFFFFFFFFFFFFF, SCENE_STREAM])


def _smooth_field(grid: np.ndarray, side: int) -> torch.Tensor:
    """Bicubic upsampling of a (C, g, g) control grid to (C, side, side)"""
    t = torch.as_tensor(grid, dtype=torch.float64)[None]
    return resize(t, (side, side), "bicubic")[0]


def face_texture(identity_seed: int, side: int) -> torch.Tensor:
    """(3, side, side) face albedo over the canonical 112 canvas, a function of the identity"""
    rng = _identity_rng(identity_seed)
    coarse = rng.uniform(-1.0, 1.0, size=(1, 6, 6))
    fine = rng.uniform(-1.0, 1.0, size=(1, 24, 24))
    tint = rng.uniform(0.85, 1.15, size=3)
    tint = tint / tint.mean()
    pattern = 0.5 + 0.3 * _smooth_field(coarse, side) + 0.05 * _smooth_field(fine, side)
    tint_t = torch.as_tensor(tint, dtype=torch.float64).view(3, 1, 1)
    return (pattern * tint_t).clamp(0.05, 0.95)


def _background(rng: np.random.Generator, size: int) -> torch.Tensor:
    base = rng.uniform(0.35, 0.65, size=(3, 1, 1))
    field = _smooth_field(rng.uniform(-1.0, 1.0, size=(3, 4, 4)), size)
    gx, gy = rng.uniform(-0.1, 0.1, size=2)
    ramp = torch.linspace(-1.0, 1.0, size, dtype=torch.float64)
    gradient = gx * ramp[None, None, :] + gy * ramp[None, :, None]
    return torch.as_tensor(base, dtype=torch.float64) + 0.06 * field + gradient


def _soft_ellipse(u: torch.Tensor, v: torch.Tensor, center, axes, edge: float) -> torch.Tensor:
    r = torch.sqrt(((u - center[0]) / axes[0]) ** 2 + ((v - center[1]) / axes[1]) ** 2)
    return ((1.0 - r) / edge + 0.5).clamp(0.0, 1.0)


def _placement(
    rng: np.random.Generator, size: int, face_scale: Optional[float]
) -> SimilarityTransform:
    """Canonical 112 canvas -> portrait pixels"""
    scale = float(rng.uniform(*SCALE_RANGE))
    if face_scale is not None:
        scale = float(face_scale)
    angle = float(np.deg2rad(rng.uniform(*ANGLE_RANGE)))
    k = scale * size / CANONICAL_SIDE
    half = 0.5 * scale * size * (abs(np.cos(angle)) + abs(np.sin(angle)))
    lo, hi = half, size - 1 - half
    u, w = rng.uniform(0.0, 1.0, size=2)
    cx = lo + u * (hi - lo) if hi > lo else (size - 1) / 2.0
    cy = lo + w * (hi - lo) if hi > lo else (size - 1) / 2.0
    c, s = k * np.cos(angle), k * np.sin(angle)
    mx, my = CANONICAL_SIDE / 2.0, CANONICAL_SIDE / 2.0
    tx = cx - (c * mx - s * my)
    ty = cy - (s * mx + c * my)
    return SimilarityTransform.from_params(k, angle, tx, ty)


def synth_portrait(
    identity_seed: int,
    scene_seed: int,
    size: int = 128,
    face_scale: Optional[float] = None,
) -> Tuple[torch.Tensor, Landmarks5]:
    """Render a portrait and its exact 5-point landmarks.

    The face albedo depends only on `identity_seed`; background, lighting,
    placement and the landmark jitter depend only on `scene_seed`.
    `face_scale` (fraction of the image side) overrides the drawn scale.
    """
    if size < 64:
        raise ValueError(f"Portrait size must be >= 64, got {size}")
    rng = _scene_rng(scene_seed)
    background = _background(rng, size)
    place = _placement(rng, size, face_scale)
    jitter = rng.uniform(-LANDMARK_JITTER, LANDMARK_JITTER, size=(5, 2))
    gain = float(rng.uniform(0.85, 1.15))
    offset = float(rng.uniform(-0.06, 0.06))
    torso_color = torch.as_tensor(rng.uniform(0.3, 0.7, size=(3, 1, 1)), dtype=torch.float64)

    to_canonical = invert_transform(place)
    ys, xs = torch.meshgrid(
        torch.arange(size, dtype=torch.float64),
        torch.arange(size, dtype=torch.float64),
        indexing="ij",
    )
    m = torch.as_tensor(to_canonical.array)
    u = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    v = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]

    # canvas resolution follows the face's pixel size
    face_px = max(16, int(round(place.scale * CANONICAL_SIDE)))
    canvas_scale = (face_px - 1) / CANONICAL_SIDE
    texture = face_texture(identity_seed, face_px)
    to_canvas = SimilarityTransform.from_params(canvas_scale, 0.0).compose(to_canonical)
    albedo = warp_bilinear(texture, to_canvas, size, size)

    edge = 2.0 / max(place.scale, 1e-6) / FACE_AXES[0]
    face_alpha = _soft_ellipse(u, v, FACE_CENTER, FACE_AXES, edge)
    torso_alpha = _soft_ellipse(u, v, TORSO_CENTER, TORSO_AXES, edge) * (1.0 - face_alpha)

    img = background * (1.0 - face_alpha - torso_alpha) + torso_color * torso_alpha
    img = img + albedo * face_alpha

    canonical_lm = ARCFACE_112 + jitter
    shade = torch.zeros_like(u)
    px = 1.0 / max(place.scale, 1e-6)
    for (lx, ly), radius in zip(canonical_lm, MARKER_RADII):
        d = torch.sqrt((u - lx) ** 2 + (v - ly) ** 2)
        shade = torch.maximum(shade, ((radius - d) / px + 0.5).clamp(0.0, 1.0))
    img = img * (1.0 - MARKER_DEPTH * shade)

    img = (gain * img + offset).clamp(0.0, 1.0).to(torch.float32)
    landmarks = Landmarks5.from_array(place.apply(canonical_lm))
    return img, landmarks


def synth_scene(scene_seed: int, size: int = 128) -> torch.Tensor:
    """A face-free image drawn from the same background model"""
    if size < 64:
        raise ValueError(f"Scene size must be >= 64, got {size}")
    rng = _scene_rng(scene_seed)
    img = _background(rng, size)
    blobs = rng.integers(2, 5)
    ys, xs = torch.meshgrid(
        torch.arange(size, dtype=torch.float64),
        torch.arange(size, dtype=torch.float64),
        indexing="ij",
    )
    for _ in range(int(blobs)):
        cx, cy = rng.uniform(0, size, size=2)
        ax, ay = rng.uniform(0.1 * size, 0.35 * size, size=2)
        color = torch.as_tensor(rng.uniform(0.1, 0.9, size=(3, 1, 1)), dtype=torch.float64)
        alpha = _soft_ellipse(xs, ys, (cx, cy), (ax, ay), 2.0 / min(ax, ay))
        img = img * (1.0 - alpha) + color * alpha
    return img.clamp(0.0, 1.0).to(torch.float32)


def synth_face(
    identity_seed: int, scene_seed: int, size: int = 128
) -> Tuple[torch.Tensor, Landmarks5]:
    """An aligned face crop (template geometry) of a synthetic portrait"""
    template = FaceTemplate.arcface(size)
    portrait, lm = synth_portrait(identity_seed, scene_seed, max(size, 128))
    face = align_face(portrait.double(), lm, template).to(torch.float32)
    return face.clamp(0.0, 1.0), template.points


def generate_dataset(
    root: Path, cfg: DataConfig, seed: int, count: Optional[int] = None
) -> List[PortraitRecord]:
    """Render portraits, aligned faces and scenes under `root` and describe them.

    Portraits cycle through `count // scenes_per_identity` identities so every
    identity appears in several scenes.
    """
    root = Path(root)
    count = cfg.num_portraits if count is None else count
    identities = max(1, count // max(1, cfg.scenes_per_identity))
    records: List[PortraitRecord] = []

    for i in tqdm(range(count), desc="portraits", leave=False):
        identity_seed = derive_seed(seed, "identity", i % identities)
        scene_seed = derive_seed(seed, "scene", i)
        img, lm = synth_portrait(identity_seed, scene_seed, cfg.size)
        rid = f"portrait-{i:05d}"
        path = f"hq/{rid}.png"
        save_image(img, root / path)
        records.append(
            PortraitRecord.create(
                id=rid,
                image=path,
                width=cfg.size,
                height=cfg.size,
                landmarks=lm,
                identity_seed=identity_seed,
                scene_seed=scene_seed,
            )
        )

    for i in tqdm(range(cfg.num_faces), desc="faces", leave=False):
        identity_seed = derive_seed(seed, "face-identity", i)
        scene_seed = derive_seed(seed, "face-scene", i)
        img, lm = synth_face(identity_seed, scene_seed, cfg.size)
        rid = f"face-{i:05d}"
        path = f"hq/{rid}.png"
        save_image(img, root / path)
        records.append(
            PortraitRecord.create(
                id=rid,
                image=path,
                width=cfg.size,
                height=cfg.size,
                landmarks=lm,
                identity_seed=identity_seed,
                scene_seed=scene_seed,
                source="face",
            )
        )

    for i in tqdm(range(cfg.num_scenes), desc="scenes", leave=False):
        scene_seed = derive_seed(seed, "scene-only", i)
        rid = f"scene-{i:05d}"
        path = f"hq/{rid}.png"
        save_image(synth_scene(scene_seed, cfg.size), root / path)
        records.append(
            PortraitRecord.create(
                id=rid,
                image=path,
                width=cfg.size,
                height=cfg.size,
                scene_seed=scene_seed,
                source="scene",
            )
        )

    logger.info(
        f"Rendered {count} portraits ({identities} identities), "
        f"{cfg.num_faces} faces and {cfg.num_scenes} scenes under {root}"
    )
    return records
