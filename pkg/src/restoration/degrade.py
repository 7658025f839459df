"""Seeded degradation: blur, resample, noise and block-DCT compression"""

from typing import List, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .imaging import RESAMPLE_MODES, as_batch, gaussian_blur, resize, unbatch
from .types import ShapeError

# Standard JPEG luminance quantization table (quality 50)
LUMA_Q50 = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

STAGE_BLUR, STAGE_RESIZE, STAGE_NOISE, STAGE_JPEG = range(4)
STAGES_PER_PASS = 4
MAX_QUALITY = 95


class DegradeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    blur_sigma_range: Tuple[float, float] = (0.2, 1.5)
    downscale_factor: int = 4
    noise_sigma_range: Tuple[float, float] = (0.0, 0.03)
    jpeg_quality_range: Tuple[int, int] = (50, 95)
    jpeg: bool = True
    second_order: bool = True
    resample_modes: List[str] = ["bilinear", "bicubic", "area"]

    @field_validator("blur_sigma_range", "noise_sigma_range")
    @classmethod
    def _check_sigma(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        if v[0] > v[1]:
            raise ValueError(f"Range lower bound exceeds upper bound: {v}")
        if v[0] < 0:
            raise ValueError(f"Sigma must be non-negative: {v}")
        return v

    @field_validator("jpeg_quality_range")
    @classmethod
    def _check_quality(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        if v[0] > v[1]:
            raise ValueError(f"Range lower bound exceeds upper bound: {v}")
        if v[0] < 10 or v[1] > MAX_QUALITY:
            raise ValueError(f"JPEG quality must lie in [10, {MAX_QUALITY}]: {v}")
        return v

    @field_validator("resample_modes")
    @classmethod
    def _check_modes(cls, v: List[str]) -> List[str]:
        if not v:
            raise ValueError("At least one resample mode is required")
        unknown = [m for m in v if m not in RESAMPLE_MODES]
        if unknown:
            raise ValueError(f"Unknown resample modes: {unknown}")
        return v

    @model_validator(mode="after")
    def _check_factor(self) -> "DegradeConfig":
        if self.downscale_factor < 1:
            raise ValueError("downscale_factor must be >= 1")
        return self

    def milder(self) -> "DegradeConfig":
        """Second-order pass: halved sigmas, quality half-way to the maximum, no resize"""
        lo_q, hi_q = self.jpeg_quality_range
        return self.model_copy(
            update={
                "blur_sigma_range": tuple(v / 2 for v in self.blur_sigma_range),
                "noise_sigma_range": tuple(v / 2 for v in self.noise_sigma_range),
                "jpeg_quality_range": (
                    int(round(lo_q + (MAX_QUALITY - lo_q) / 2)),
                    int(round(hi_q + (MAX_QUALITY - hi_q) / 2)),
                ),
                "downscale_factor": 1,
                "second_order": False,
            }
        )


def stage_rng(seed: int, stage: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, stage index)"""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stage], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def quality_table(quality: int) -> np.ndarray:
    """Luminance table scaled by quality (IJG convention)"""
    quality = int(np.clip(quality, 1, 100))
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((LUMA_Q50 * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def _dct_matrix(dtype: torch.dtype) -> torch.Tensor:
    k = np.arange(8)[:, None]
    n = np.arange(8)[None, :]
    d = np.cos(np.pi * (2 * n + 1) * k / 16.0) * np.sqrt(2.0 / 8.0)
    d[0, :] = np.sqrt(1.0 / 8.0)
    return torch.as_tensor(d, dtype=dtype)


def jpeg_compress(img: torch.Tensor, quality: int) -> torch.Tensor:
    """8x8 block-DCT quantization per channel, no chroma subsampling"""
    batch, single = as_batch(img)
    b, c, h, w = batch.shape
    pad_h, pad_w = (-h) % 8, (-w) % 8
    x = batch * 255.0 - 128.0
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    hp, wp = x.shape[-2:]

    blocks = x.reshape(b, c, hp // 8, 8, wp // 8, 8).permute(0, 1, 2, 4, 3, 5)
    d = _dct_matrix(x.dtype).to(x.device)
    q = torch.as_tensor(quality_table(quality), dtype=x.dtype, device=x.device)

    coef = d @ blocks @ d.T
    coef = torch.round(coef / q) * q
    rec = d.T @ coef @ d

    rec = rec.permute(0, 1, 2, 4, 3, 5).reshape(b, c, hp, wp)[..., :h, :w]
    out = ((rec + 128.0) / 255.0).clamp(0.0, 1.0)
    return unbatch(out, single)


def bicubic_downsample(hq: torch.Tensor, factor: int) -> torch.Tensor:
    batch, single = as_batch(hq)
    h, w = batch.shape[-2:]
    out = resize(batch, (h // factor, w // factor), "bicubic").clamp(0.0, 1.0)
    return unbatch(out, single)


def _run_pass(x: torch.Tensor, cfg: DegradeConfig, seed: int, first: int) -> torch.Tensor:
    rng = stage_rng(seed, first + STAGE_BLUR)
    sigma = float(rng.uniform(*cfg.blur_sigma_range))
    x = gaussian_blur(x, sigma).clamp(0.0, 1.0)

    rng = stage_rng(seed, first + STAGE_RESIZE)
    mode = cfg.resample_modes[int(rng.integers(len(cfg.resample_modes)))]
    if cfg.downscale_factor > 1:
        h, w = x.shape[-2:]
        size = (h // cfg.downscale_factor, w // cfg.downscale_factor)
        x = resize(x, size, mode).clamp(0.0, 1.0)

    rng = stage_rng(seed, first + STAGE_NOISE)
    sigma = float(rng.uniform(*cfg.noise_sigma_range))
    noise = rng.standard_normal(size=tuple(x.shape))
    if sigma > 0:
        x = (x + sigma * torch.as_tensor(noise, dtype=x.dtype, device=x.device)).clamp(0.0, 1.0)

    rng = stage_rng(seed, first + STAGE_JPEG)
    quality = int(rng.integers(cfg.jpeg_quality_range[0], cfg.jpeg_quality_range[1] + 1))
    if cfg.jpeg:
        x = jpeg_compress(x, quality)
    return x


def degrade(hq: torch.Tensor, cfg: DegradeConfig, seed: int) -> torch.Tensor:
    """Produce the LQ image for `hq`; a pure function of (hq, cfg, seed)"""
    batch, single = as_batch(hq)
    if batch.shape[0] != 1:
        raise ShapeError("degrade takes a single image; call it per image")
    h, w = batch.shape[-2:]
    f = cfg.downscale_factor
    if h % f or w % f:
        raise ShapeError(f"Image size {h}x{w} is not divisible by factor {f}")

    x = _run_pass(batch, cfg, seed, first=0)
    if cfg.second_order:
        x = _run_pass(x, cfg.milder(), seed, first=STAGES_PER_PASS)
    return unbatch(x.clamp(0.0, 1.0), single)
