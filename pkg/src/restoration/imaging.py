"""Image tensor helpers shared by degradation, losses and metrics, plus PNG I/O"""

import math
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .types import ShapeError

RESAMPLE_MODES = ("nearest", "bilinear", "bicubic", "area")

# ITU-R BT.601 luma weights
_GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def as_batch(img: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    """Return a (B, 3, H, W) view and whether the input was a single image"""
    if img.dim() == 3:
        img = img.unsqueeze(0)
        single = True
    elif img.dim() == 4:
        single = False
    else:
        raise ShapeError(f"Expected (3, H, W) or (B, 3, H, W), got {tuple(img.shape)}")
    if img.shape[1] != 3:
        raise ShapeError(f"Expected 3 channels, got {img.shape[1]}")
    return img, single


def unbatch(img: torch.Tensor, single: bool) -> torch.Tensor:
    return img[0] if single else img


def check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"Shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def rgb_to_gray(x: torch.Tensor) -> torch.Tensor:
    """(B, 3, H, W) -> (B, 1, H, W)"""
    w = torch.tensor(_GRAY_WEIGHTS, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return (x * w).sum(dim=1, keepdim=True)


def gaussian_kernel1d(
    sigma: float, radius: Optional[int] = None, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    if radius is None:
        radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-(xs**2) / (2.0 * sigma * sigma))
    return (k / k.sum()).to(dtype)


def gaussian_window(size: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    """Normalized 2D Gaussian window of odd side `size`"""
    k = gaussian_kernel1d(sigma, radius=size // 2, dtype=torch.float64)
    return torch.outer(k, k).to(dtype)


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with reflect padding; sigma <= 0 is a no-op"""
    if sigma <= 0:
        return x
    k = gaussian_kernel1d(sigma, dtype=x.dtype).to(x.device)
    radius = k.numel() // 2
    c = x.shape[1]
    # reflect padding needs radius < size
    radius_h = min(radius, x.shape[-2] - 1)
    radius_w = min(radius, x.shape[-1] - 1)
    kh = k[radius - radius_h : radius + radius_h + 1]
    kw = k[radius - radius_w : radius + radius_w + 1]
    kh = (kh / kh.sum()).view(1, 1, -1, 1).repeat(c, 1, 1, 1)
    kw = (kw / kw.sum()).view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    x = F.pad(x, (radius_w, radius_w, radius_h, radius_h), mode="reflect")
    x = F.conv2d(x, kh, groups=c)
    return F.conv2d(x, kw, groups=c)


def resize(x: torch.Tensor, size: Tuple[int, int], mode: str) -> torch.Tensor:
    """Resize a (B, C, H, W) batch; bilinear/bicubic antialias when shrinking"""
    if mode not in RESAMPLE_MODES:
        raise ValueError(f"Unknown resample mode: {mode}")
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    if mode in ("nearest", "area"):
        return F.interpolate(x, size=size, mode=mode)
    shrinking = size[0] < x.shape[-2] or size[1] < x.shape[-1]
    return F.interpolate(
        x, size=size, mode=mode, align_corners=False, antialias=shrinking
    )


def bicubic_upsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Bicubic upscaling by an integer factor, clamped to [0, 1]"""
    batch, single = as_batch(x)
    if factor == 1:
        return x
    h, w = batch.shape[-2:]
    out = resize(batch, (h * factor, w * factor), "bicubic").clamp(0.0, 1.0)
    return unbatch(out, single)


def ssim_map(
    a: torch.Tensor,
    b: torch.Tensor,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 1.0,
) -> torch.Tensor:
    """Per-channel SSIM map over valid window positions of (B, C, H, W) inputs"""
    check_same_shape(a, b)
    size = min(window_size, a.shape[-2], a.shape[-1])
    if size % 2 == 0:
        size -= 1
    c = a.shape[1]
    win = gaussian_window(size, sigma, a.dtype).to(a.device)
    win = win.view(1, 1, size, size).repeat(c, 1, 1, 1)

    def filt(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, win, groups=c)

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def box_mask(
    h: int, w: int, box: Optional[Sequence[int]], dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Binary (h, w) mask with ones inside the half-open box (x0, y0, x1, y1)"""
    mask = torch.zeros(h, w, dtype=dtype)
    if box is not None:
        x0, y0, x1, y1 = (int(v) for v in box)
        mask[max(0, y0) : min(h, y1), max(0, x0) : min(w, x1)] = 1.0
    return mask


def load_image(path: Union[str, Path]) -> torch.Tensor:
    """Load an 8-bit PNG as a (3, H, W) float32 tensor in [0, 1]"""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).float() / 255.0


def save_image(img: torch.Tensor, path: Union[str, Path]) -> None:
    """Store a (3, H, W) [0, 1] tensor as an 8-bit PNG"""
    batch, _ = as_batch(img.detach())
    arr = (batch[0].clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.permute(1, 2, 0).cpu().numpy()).save(path, format="PNG")
