"""Low-rank adapters and zero-initialized input channel extension"""

import math
from typing import List, Optional, Union

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, field_validator

from .types import ShapeError


class LoRAConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rank: int = 4
    scale: float = 1.0

    @field_validator("rank")
    @classmethod
    def _check_rank(cls, v: int) -> int:
        if v < 1:
            raise ValueError("LoRA rank must be >= 1")
        return v


def _is_conv_like(layer: nn.Module) -> bool:
    return all(
        hasattr(layer, a)
        for a in ("in_channels", "out_channels", "kernel_size", "stride", "padding")
    )


class LoRALayer(nn.Module):
    """base(x) + (scale / rank) * B(A(x)) with a frozen base.

    A is Kaiming-initialized, B starts at zero so the wrapped layer initially
    reproduces the base output exactly.
    """

    def __init__(self, base: nn.Module, cfg: LoRAConfig):
        super().__init__()
        self.base = base
        self.rank = cfg.rank
        self.scaling = cfg.scale / cfg.rank

        if isinstance(base, nn.Linear):
            self.in_features = base.in_features
            self.out_features = base.out_features
            self.lora_A: nn.Module = nn.Linear(base.in_features, cfg.rank, bias=False)
            self.lora_B: nn.Module = nn.Linear(cfg.rank, base.out_features, bias=False)
        elif _is_conv_like(base):
            self.in_channels = base.in_channels
            self.out_channels = base.out_channels
            self.kernel_size = base.kernel_size
            self.stride = base.stride
            self.padding = base.padding
            self.lora_A = nn.Conv2d(
                base.in_channels,
                cfg.rank,
                base.kernel_size,
                stride=base.stride,
                padding=base.padding,
                bias=False,
            )
            self.lora_B = nn.Conv2d(cfg.rank, base.out_channels, 1, bias=False)
        else:
            raise TypeError(f"Cannot adapt layer of type {type(base).__name__}")

        nn.init.kaiming_uniform_(self.lora_A.weight, a=math.sqrt(5))
        nn.init.zeros_(self.lora_B.weight)
        ref = self._base_parameter()
        if ref is not None:
            self.lora_A.to(dtype=ref.dtype, device=ref.device)
            self.lora_B.to(dtype=ref.dtype, device=ref.device)

        for p in self.base.parameters():
            p.requires_grad_(False)

    def _base_parameter(self) -> Optional[torch.Tensor]:
        for p in self.base.parameters():
            return p
        return None

    @property
    def weight(self) -> torch.Tensor:
        return self.base.weight

    @property
    def bias(self) -> torch.Tensor:
        return self.base.bias

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * self.lora_B(self.lora_A(x))


def lora_wrap(layer: nn.Module, cfg: LoRAConfig) -> LoRALayer:
    return LoRALayer(layer, cfg)


def inject_lora(module: nn.Module, cfg: LoRAConfig) -> int:
    """Wrap every Linear/Conv2d below `module` in place; returns the count"""
    count = 0
    for name, child in list(module.named_children()):
        if isinstance(child, (LoRALayer, ExtendedInputConv)):
            continue
        if isinstance(child, (nn.Linear, nn.Conv2d)):
            setattr(module, name, LoRALayer(child, cfg))
            count += 1
        else:
            count += inject_lora(child, cfg)
    return count


class ExtendedInputConv(nn.Module):
    """A convolution widened with extra input channels whose filters start at zero.

    Computes base(x[:, :n]) + extra(x[:, n:]), which equals one convolution
    over all channels with the base filters in the first n slices.
    """

    def __init__(self, base: nn.Module, extra_channels: int):
        super().__init__()
        if not _is_conv_like(base):
            raise TypeError(f"Cannot extend layer of type {type(base).__name__}")
        self.base = base
        self.base_channels = base.in_channels
        self.in_channels = base.in_channels + extra_channels
        self.out_channels = base.out_channels
        self.kernel_size = base.kernel_size
        self.stride = base.stride
        self.padding = base.padding

        base_weight = base.weight
        self.extra = nn.Conv2d(
            extra_channels,
            base.out_channels,
            base.kernel_size,
            stride=base.stride,
            padding=base.padding,
            bias=False,
        ).to(dtype=base_weight.dtype, device=base_weight.device)
        nn.init.zeros_(self.extra.weight)

        if isinstance(base, nn.Conv2d):
            for p in base.parameters():
                p.requires_grad_(False)

    @property
    def weight(self) -> torch.Tensor:
        return torch.cat([self.base.weight, self.extra.weight], dim=1)

    @property
    def bias(self) -> torch.Tensor:
        return self.base.bias

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"Expected {self.in_channels} input channels, got {x.shape[1]}")
        n = self.base_channels
        return self.base(x[:, :n]) + self.extra(x[:, n:])


def extend_input_conv(
    conv: Union[nn.Conv2d, LoRALayer], extra_channels: int = 5
) -> ExtendedInputConv:
    """Widen a 4-channel input convolution with zero-initialized filters"""
    if getattr(conv, "in_channels", None) != 4:
        raise ShapeError(
            f"Expected a 4-input-channel convolution, got {getattr(conv, 'in_channels', None)}"
        )
    return ExtendedInputConv(conv, extra_channels)


def trainable_parameter_names(module: nn.Module) -> List[str]:
    return [n for n, p in module.named_parameters() if p.requires_grad]
