"""Shared fixtures for the portrait restoration tests"""

from typing import Any, Callable, Dict, List

import numpy as np
import pytest
import torch

from src.restoration.curation import DataConfig
from src.restoration.geometry import FaceTemplate, Landmarks5
from src.restoration.identity import ToyEmbedder
from src.restoration.model import ModelConfig
from src.restoration.types import Embedder

FD_STEP = 1e-5


def directional_fd_check(
    fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    directions: int = 3,
    coords: int = 3,
    seed: int = 0,
    h: float = FD_STEP,
) -> float:
    """Largest relative error between autograd and central differences.

    Checks `directions` random unit directions and `coords` single coordinates
    of `x` (float64). A small absolute floor keeps near-zero derivatives from
    dominating the ratio.
    """
    x = x.detach().double().clone().requires_grad_(True)
    grad = torch.autograd.grad(fn(x), x)[0]
    gen = torch.Generator().manual_seed(seed)
    dirs = []
    for _ in range(directions):
        d = torch.randn(x.shape, generator=gen, dtype=torch.float64)
        dirs.append(d / d.norm())
    flat = torch.randperm(x.numel(), generator=gen)[:coords]
    for i in flat.tolist():
        d = torch.zeros(x.numel(), dtype=torch.float64)
        d[i] = 1.0
        dirs.append(d.view_as(x))

    worst = 0.0
    with torch.no_grad():
        for d in dirs:
            fd = (float(fn(x + h * d)) - float(fn(x - h * d))) / (2.0 * h)
            an = float((grad * d).sum())
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, err)
    return worst


class FixedEmbedder(Embedder):
    """Returns a preset vector per image, chosen by the image's mean intensity bucket"""

    def __init__(self, table: Dict[int, List[float]], buckets: int = 10):
        self.table = {k: torch.tensor(v, dtype=torch.float64) for k, v in table.items()}
        self.buckets = buckets

    def embed(self, faces: torch.Tensor) -> torch.Tensor:
        if faces.dim() == 3:
            faces = faces[None]
        rows = []
        for face in faces:
            key = int(round(float(face.double().mean()) * self.buckets))
            rows.append(self.table[key])
        return torch.stack(rows).to(faces.dtype)

    @classmethod
    def get_backend_info(cls) -> Dict[str, Any]:
        return {"type": "fixed", "name": "Fixed test embedder"}


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def template() -> FaceTemplate:
    return FaceTemplate.arcface(64)


@pytest.fixture
def embedder() -> ToyEmbedder:
    return ToyEmbedder()


@pytest.fixture
def tiny_model_cfg() -> ModelConfig:
    return ModelConfig(
        encoder_width=8,
        unet_widths=[8, 16],
        context_dim=4,
        disc_width=8,
        ae_steps=0,
        prior_steps=0,
    )


@pytest.fixture
def tiny_data_cfg() -> DataConfig:
    return DataConfig(
        size=64,
        num_portraits=6,
        scenes_per_identity=2,
        num_faces=2,
        num_scenes=2,
        face_side=64,
        test_fraction=0.3,
    )


def template_landmarks(side: int, shift: float = 0.0) -> Landmarks5:
    t = FaceTemplate.arcface(side).points.as_array()
    return Landmarks5.from_array(t + shift)


def random_image(
    seed: int, size: int = 64, channels: int = 3, dtype: torch.dtype = torch.float64
) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(channels, size, size, generator=gen, dtype=dtype)


def smooth_image(seed: int, size: int = 64, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Low-frequency random image (bicubic upsampling of an 8x8 grid)"""
    gen = torch.Generator().manual_seed(seed)
    grid = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64)
    img = torch.nn.functional.interpolate(
        grid, size=(size, size), mode="bicubic", align_corners=False
    )
    return img[0].clamp(0.0, 1.0).to(dtype)
