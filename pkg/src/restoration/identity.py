"""Face recognition embedders and the pairwise identity criterion"""

import json
import shlex
import subprocess
import tempfile
import threading
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, field_validator

from .imaging import as_batch, rgb_to_gray, save_image
from .types import Embedder, ExternalProcessError, ShapeError, ZeroEmbedding

PROJECTION_SEED = 20240613
POOL_SIDE = 16
ZERO_NORM = 1e-12


class IdentityEmbedding(BaseModel):
    vector: List[float]

    @field_validator("vector")
    @classmethod
    def _check_vector(cls, v: List[float]) -> List[float]:
        arr = np.asarray(v, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("Embedding must be a non-empty vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Embedding must be finite")
        if np.linalg.norm(arr) < ZERO_NORM:
            raise ValueError("Embedding has zero norm")
        return v

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vector, dtype=np.float64)


def _check_faces(faces: torch.Tensor) -> torch.Tensor:
    batch, _ = as_batch(faces)
    if batch.shape[-1] != batch.shape[-2]:
        raise ShapeError(f"Aligned faces must be square, got {tuple(batch.shape[-2:])}")
    return batch


class ToyEmbedder(Embedder):
    """Deterministic random-projection embedder built from differentiable ops.

    gray -> 16x16 area pooling -> mean removal -> fixed (d x 256) projection
    """

    differentiable = True

    def __init__(self, dim: int = 128):
        self.dim = dim
        gen = torch.Generator().manual_seed(PROJECTION_SEED)
        self._projection = torch.randn(
            dim, POOL_SIDE * POOL_SIDE, generator=gen, dtype=torch.float64
        ) / np.sqrt(POOL_SIDE * POOL_SIDE)

    def embed(self, faces: torch.Tensor) -> torch.Tensor:
        batch = _check_faces(faces)
        gray = rgb_to_gray(batch)
        pooled = F.adaptive_avg_pool2d(gray, (POOL_SIDE, POOL_SIDE)).flatten(1)
        pooled = pooled - pooled.mean(dim=1, keepdim=True)
        proj = self._projection.to(dtype=pooled.dtype, device=pooled.device)
        return pooled @ proj.T

    @classmethod
    def get_backend_info(cls) -> Dict[str, Any]:
        return {
            "type": "toy",
            "name": "Random projection embedder",
            "description": "Grayscale 16x16 area pooling, mean removal and a fixed seeded projection",
            "differentiable": True,
        }


class ExternalEmbedder(Embedder):
    """Shells out to `<cmd> <image-path>`, which prints a JSON array of floats"""

    differentiable = False

    def __init__(self, command: str, dim: int = 128, timeout: float = 120.0):
        if not command:
            raise ExternalProcessError("External embedder needs a command")
        self.command = command
        self.dim = dim
        self.timeout = timeout
        self._lock = threading.Lock()

    def _embed_one(self, face: torch.Tensor) -> List[float]:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "face.png"
            save_image(face, path)
            argv = shlex.split(self.command) + [str(path)]
            try:
                proc = subprocess.run(
                    argv, capture_output=True, text=True, timeout=self.timeout, check=True
                )
            except (OSError, subprocess.SubprocessError) as e:
                raise ExternalProcessError(f"Embedder command failed: {e}") from e
        try:
            values = json.loads(proc.stdout)
        except json.JSONDecodeError as e:
            raise ExternalProcessError(f"Embedder output is not JSON: {proc.stdout[:80]!r}") from e
        if not isinstance(values, list) or len(values) != self.dim:
            raise ExternalProcessError(f"Embedder must print a JSON array of {self.dim} floats")
        return [float(v) for v in values]

    def embed(self, faces: torch.Tensor) -> torch.Tensor:
        batch = _check_faces(faces)
        with self._lock:
            rows = [self._embed_one(face) for face in batch.detach().cpu()]
        return torch.tensor(rows, dtype=batch.dtype, device=batch.device)

    @classmethod
    def get_backend_info(cls) -> Dict[str, Any]:
        return {
            "type": "external",
            "name": "External process embedder",
            "description": "Runs `<cmd> <image-path>` and reads a JSON vector from stdout",
            "differentiable": False,
        }


def cosine(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine of (B, d) embeddings, in [-1, 1]"""
    nu = u.norm(dim=-1)
    nv = v.norm(dim=-1)
    if bool((nu < ZERO_NORM).any()) or bool((nv < ZERO_NORM).any()):
        raise ZeroEmbedding("Cannot take the cosine of a zero-norm embedding")
    return ((u * v).sum(dim=-1) / (nu * nv)).clamp(-1.0, 1.0)


def pairwise_similarity(
    x: torch.Tensor,
    y: Optional[torch.Tensor],
    embedder: Embedder,
    present: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Batched identity criterion; rows where `y` is absent score exactly 0"""
    ex = embedder.embed(x)
    if y is None:
        return torch.zeros(ex.shape[0], dtype=ex.dtype, device=ex.device)
    if present is None:
        return cosine(ex, embedder.embed(y))
    present = present.to(device=ex.device, dtype=torch.bool)
    out = torch.zeros(ex.shape[0], dtype=ex.dtype, device=ex.device)
    if bool(present.any()):
        ey = embedder.embed(y[present])
        out = out.masked_scatter(present, cosine(ex[present], ey))
    return out


def similarity(
    x: Optional[torch.Tensor], y: Optional[torch.Tensor], embedder: Embedder
) -> float:
    """Identity similarity of two aligned faces; ABSENT (None) on either side gives 0"""
    if x is None or y is None:
        return 0.0
    ex = embedder.embed(x)
    ey = embedder.embed(y)
    return float(cosine(ex, ey)[0])


def embed_identities(faces: torch.Tensor, embedder: Embedder) -> List[IdentityEmbedding]:
    """Embed a batch of aligned faces without gradients; zero-norm rows are rejected"""
    with torch.no_grad():
        vectors = embedder.embed(faces).double().cpu()
    norms = vectors.norm(dim=-1)
    if bool((norms < ZERO_NORM).any()):
        bad = torch.nonzero(norms < ZERO_NORM).flatten().tolist()
        raise ZeroEmbedding(f"Faces {bad} have zero-norm embeddings")
    return [IdentityEmbedding(vector=v.tolist()) for v in vectors]
