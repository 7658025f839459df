"""Toy autoencoder, conditional U-Net denoiser and patch discriminator"""

import math
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

LATENT_CHANNELS = 4
DOWNSCALE = 8


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)"""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / half
    )
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class ToyEncoder(nn.Module):
    """Three stride-2 stages down to a 4-channel latent at 1/8 resolution"""

    def __init__(self, width: int = 64, latent_channels: int = LATENT_CHANNELS):
        super().__init__()
        self.conv_in = nn.Conv2d(3, width // 2, 3, padding=1)
        self.down1 = nn.Conv2d(width // 2, width, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(width, width, 3, stride=2, padding=1)
        self.down3 = nn.Conv2d(width, width, 3, stride=2, padding=1)
        self.conv_out = nn.Conv2d(width, latent_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv_in(x * 2.0 - 1.0))
        h = F.silu(self.down1(h))
        h = F.silu(self.down2(h))
        h = F.silu(self.down3(h))
        return self.conv_out(h)


class ToyDecoder(nn.Module):
    def __init__(self, width: int = 64, latent_channels: int = LATENT_CHANNELS):
        super().__init__()
        self.conv_in = nn.Conv2d(latent_channels, width, 3, padding=1)
        self.up1 = nn.ConvTranspose2d(width, width, 4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(width, width, 4, stride=2, padding=1)
        self.up3 = nn.ConvTranspose2d(width, width // 2, 4, stride=2, padding=1)
        self.conv_out = nn.Conv2d(width // 2, 3, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv_in(z))
        h = F.silu(self.up1(h))
        h = F.silu(self.up2(h))
        h = F.silu(self.up3(h))
        return ((self.conv_out(h) + 1.0) / 2.0).clamp(0.0, 1.0)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(groups, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip: nn.Module = (
            nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        )

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class DenoiserUNet(nn.Module):
    """Three-scale U-Net; the timestep (plus an optional context vector) is added in every block.

    `conv_in` is the layer widened for reference/mask conditioning.
    """

    def __init__(
        self,
        in_channels: int = LATENT_CHANNELS,
        out_channels: int = LATENT_CHANNELS,
        widths: Sequence[int] = (32, 64, 128),
        context_dim: int = 16,
    ):
        super().__init__()
        widths = list(widths)
        self.widths = widths
        self.context_dim = context_dim
        temb_dim = widths[0] * 4

        self.conv_in = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        self.time_mlp = nn.Sequential(
            nn.Linear(widths[0], temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.context_proj = nn.Linear(context_dim, temb_dim)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.down_blocks.append(ResBlock(prev, w, temb_dim))
            prev = w
            if i < len(widths) - 1:
                self.downsamples.append(nn.Conv2d(w, w, 3, stride=2, padding=1))

        self.mid = ResBlock(prev, prev, temb_dim)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(widths))):
            w = widths[i]
            self.up_blocks.append(ResBlock(prev + w, w, temb_dim))
            prev = w
            if i > 0:
                self.upsamples.append(nn.Conv2d(w, widths[i - 1], 3, padding=1))
                prev = widths[i - 1]

        self.norm_out = nn.GroupNorm(min(8, widths[0]), widths[0])
        self.conv_out = nn.Conv2d(widths[0], out_channels, 3, padding=1)

    def forward(
        self, x: torch.Tensor, t: torch.Tensor, context: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        dtype = self.conv_out.weight.dtype
        temb = self.time_mlp(timestep_embedding(t, self.widths[0]).to(dtype))
        if context is None:
            context = x.new_zeros((x.shape[0], self.context_dim))
        temb = temb + self.context_proj(context.to(dtype))

        h = self.conv_in(x)
        skips: List[torch.Tensor] = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, temb)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)

        h = self.mid(h, temb)

        for i, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            if i < len(self.upsamples):
                h = F.interpolate(h, scale_factor=2.0, mode="nearest")
                h = self.upsamples[i](h)

        return self.conv_out(F.silu(self.norm_out(h)))


class PatchDiscriminator(nn.Module):
    """Four strided convolutions producing a map of real/fake logits over face patches"""

    def __init__(self, width: int = 32):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width * 2, width * 4, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width * 4, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x * 2.0 - 1.0)
