"""One-step latent restoration model, diffusion schedule and checkpoint archive"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger
from pydantic import BaseModel, ConfigDict, model_validator
from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file

from .adapters import LoRAConfig, extend_input_conv, inject_lora
from .imaging import as_batch, bicubic_upsample, resize, unbatch
from .networks import (
    DOWNSCALE,
    LATENT_CHANNELS,
    DenoiserUNet,
    PatchDiscriminator,
    ToyDecoder,
    ToyEncoder,
)
from .types import CheckpointError, ContractViolation, RangeError, ShapeError

CHECKPOINT_FORMAT = "headsup-ckpt-v1"
SCALAR_TOLERANCE = 1e-9
EXTRA_CHANNELS = LATENT_CHANNELS + 1

# (z_in, t_star) -> predicted noise with the latent's channel count
NoisePredictor = Callable[[torch.Tensor, int], torch.Tensor]


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    encoder_width: int = 64
    unet_widths: List[int] = [32, 64, 128]
    context_dim: int = 16
    disc_width: int = 32
    lora: LoRAConfig = LoRAConfig()
    num_timesteps: int = 1000
    beta_lo: float = 1e-4
    beta_hi: float = 2e-2
    t_star: int = 999
    ae_steps: int = 300
    ae_lr: float = 1e-3
    prior_steps: int = 300
    prior_lr: float = 5e-4

    @model_validator(mode="after")
    def _check_timestep(self) -> "ModelConfig":
        if not 1 <= self.t_star <= self.num_timesteps:
            raise ValueError(f"t_star must lie in [1, {self.num_timesteps}]")
        if len(self.unet_widths) < 1:
            raise ValueError("unet_widths must not be empty")
        return self


def make_schedule(T: int, beta_lo: float, beta_hi: float) -> torch.Tensor:
    """Cumulative alpha-bar table for t = 0..T (alpha-bar_0 = 1), linear betas"""
    if T < 1:
        raise RangeError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_lo <= beta_hi < 1.0):
        raise RangeError(f"Need 0 < beta_lo <= beta_hi < 1, got ({beta_lo}, {beta_hi})")
    betas = torch.linspace(beta_lo, beta_hi, T, dtype=torch.float64)
    return torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - betas, dim=0)])


class DiffusionScalars(BaseModel):
    t_star: int
    alpha: float
    beta: float

    @model_validator(mode="after")
    def _check_unit(self) -> "DiffusionScalars":
        if abs(self.alpha**2 + self.beta**2 - 1.0) > SCALAR_TOLERANCE:
            raise ValueError("alpha^2 + beta^2 must equal 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        return self

    @classmethod
    def from_schedule(cls, alphas_cumprod: torch.Tensor, t_star: int) -> "DiffusionScalars":
        if not 1 <= t_star < len(alphas_cumprod):
            steps = len(alphas_cumprod) - 1
            raise RangeError(f"t_star {t_star} outside schedule of length {steps}")
        abar = float(alphas_cumprod[t_star])
        return cls(t_star=t_star, alpha=abar**0.5, beta=(1.0 - abar) ** 0.5)


def mask_batch(mask: torch.Tensor, batch: int) -> torch.Tensor:
    """Normalize a face mask to (B, h, w)"""
    if mask.dim() == 4 and mask.shape[1] == 1:
        mask = mask[:, 0]
    if mask.dim() == 2:
        mask = mask.unsqueeze(0).expand(batch, -1, -1)
    if mask.dim() != 3 or mask.shape[0] != batch:
        raise ShapeError(f"Mask shape {tuple(mask.shape)} does not match batch {batch}")
    return mask


def mask_to_latent(mask: torch.Tensor, size: Tuple[int, int], dtype: torch.dtype) -> torch.Tensor:
    """(B, h, w) binary mask -> (B, 1, lh, lw) by nearest-neighbour resize"""
    return F.interpolate(mask[:, None].to(dtype), size=size, mode="nearest")


def denoise_one_step(
    z_L: torch.Tensor,
    z_r: Optional[torch.Tensor],
    mask: torch.Tensor,
    s: DiffusionScalars,
    predictor: NoisePredictor,
) -> torch.Tensor:
    """(z_L - beta * eps) / alpha, eps predicted from [z_L; z_r; mask] at t_star"""
    if z_L.dim() == 3:
        return denoise_one_step(
            z_L[None], None if z_r is None else z_r[None], mask, s, predictor
        )[0]
    if z_r is None:
        z_r = torch.zeros_like(z_L)
    if z_r.shape != z_L.shape:
        raise ShapeError(
            f"Reference latent {tuple(z_r.shape)} does not match LQ latent {tuple(z_L.shape)}"
        )
    m = mask_to_latent(mask_batch(mask, z_L.shape[0]), tuple(z_L.shape[-2:]), z_L.dtype)
    eps = predictor(torch.cat([z_L, z_r, m], dim=1), s.t_star)
    return (z_L - s.beta * eps) / s.alpha


def mask_bbox(mask: torch.Tensor) -> Optional[Tuple[int, int, int, int]]:
    """Half-open (x0, y0, x1, y1) extent of the ones in an (h, w) mask"""
    ys, xs = torch.nonzero(mask > 0, as_tuple=True)
    if ys.numel() == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def paste_reference(
    ref: torch.Tensor, mask: torch.Tensor, factor: int, height: int, width: int
) -> torch.Tensor:
    """Black portrait-size canvas with each aligned reference resized into its mask box"""
    canvas = ref.new_zeros((ref.shape[0], 3, height, width))
    for i in range(ref.shape[0]):
        box = mask_bbox(mask[i])
        if box is None:
            continue
        x0, y0, x1, y1 = (v * factor for v in box)
        x1, y1 = min(x1, width), min(y1, height)
        canvas[i, :, y0:y1, x0:x1] = resize(ref[i : i + 1], (y1 - y0, x1 - x0), "bilinear")[0]
    return canvas.clamp(0.0, 1.0)


class RestorationModel(nn.Module):
    """Encoder, conditional one-step denoiser and frozen decoder.

    Before `adapt()` the denoiser sees the LQ latent only; afterwards every
    encoder/denoiser layer carries a low-rank adapter and the first denoiser
    convolution accepts the reference latent and face mask.
    """

    def __init__(self, cfg: Optional[ModelConfig] = None, factor: int = 4):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.factor = factor
        self.encoder = ToyEncoder(self.cfg.encoder_width)
        self.decoder = ToyDecoder(self.cfg.encoder_width)
        self.unet = DenoiserUNet(widths=self.cfg.unet_widths, context_dim=self.cfg.context_dim)
        self.adapted = False
        table = make_schedule(self.cfg.num_timesteps, self.cfg.beta_lo, self.cfg.beta_hi)
        self.scalars = DiffusionScalars.from_schedule(table, self.cfg.t_star)

    def adapt(self) -> None:
        """Freeze the base model and attach adapters plus the conditioning channels"""
        if self.adapted:
            return
        n_enc = inject_lora(self.encoder, self.cfg.lora)
        n_unet = inject_lora(self.unet, self.cfg.lora)
        self.unet.conv_in = extend_input_conv(self.unet.conv_in, EXTRA_CHANNELS)
        for name, p in self.named_parameters():
            p.requires_grad_(is_adapter_parameter(name))
        self.adapted = True
        logger.debug(f"Attached {n_enc} encoder and {n_unet} denoiser adapters")

    def freeze_decoder(self) -> None:
        for p in self.decoder.parameters():
            p.requires_grad_(False)

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        batch, single = as_batch(img)
        h, w = batch.shape[-2:]
        if h % DOWNSCALE or w % DOWNSCALE:
            raise ShapeError(f"Image size {h}x{w} is not divisible by {DOWNSCALE}")
        z = self.encoder(batch)
        return z[0] if single else z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        single = z.dim() == 3
        if single:
            z = z[None]
        if z.shape[1] != LATENT_CHANNELS:
            raise ShapeError(f"Expected {LATENT_CHANNELS} latent channels, got {z.shape[1]}")
        out = self.decoder(z)
        return out[0] if single else out

    def predict_noise(self, z_in: torch.Tensor, t_star: int) -> torch.Tensor:
        """x0-parameterized denoiser read out as noise: (z_t - alpha * F) / beta"""
        t = torch.full((z_in.shape[0],), t_star, dtype=torch.long, device=z_in.device)
        x0 = self.unet(z_in, t)
        z_t = z_in[:, :LATENT_CHANNELS]
        return (z_t - self.scalars.alpha * x0) / self.scalars.beta

    def denoise(
        self, z_L: torch.Tensor, z_r: Optional[torch.Tensor], mask: torch.Tensor
    ) -> torch.Tensor:
        if self.adapted:
            return denoise_one_step(z_L, z_r, mask, self.scalars, self.predict_noise)
        s = self.scalars
        return (z_L - s.beta * self.predict_noise(z_L, s.t_star)) / s.alpha

    def upsample(self, x_L: torch.Tensor) -> torch.Tensor:
        return bicubic_upsample(x_L, self.factor) if self.factor > 1 else x_L

    def restore(
        self,
        x_L: torch.Tensor,
        x_r: Optional[torch.Tensor] = None,
        mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """LQ portrait (plus optional aligned reference face and LQ-grid mask) -> HQ portrait"""
        lq, single = as_batch(x_L)
        out, _ = self.restore_batch(lq, x_r, mask)
        return unbatch(out, single)

    def restore_batch(
        self,
        lq: torch.Tensor,
        x_r: Optional[torch.Tensor] = None,
        mask: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Batched restore returning (portraits, restored latents)"""
        lq, _ = as_batch(lq)
        b, _, h, w = lq.shape
        mask = lq.new_zeros((b, h, w)) if mask is None else mask_batch(mask.to(lq.device), b)
        if tuple(mask.shape[-2:]) != (h, w):
            raise ShapeError(f"Mask {tuple(mask.shape[-2:])} does not match LQ grid {(h, w)}")
        if x_r is None and bool((mask != 0).any()):
            raise ContractViolation("Face mask is set but no reference face was given")

        up = self.upsample(lq)
        z_L = self.encode(up)
        if x_r is None:
            z_r = torch.zeros_like(z_L)
        else:
            ref, _ = as_batch(x_r)
            if ref.shape[0] != b:
                ref = ref.expand(b, -1, -1, -1)
            canvas = paste_reference(ref.to(up.dtype), mask, self.factor, *up.shape[-2:])
            present = (mask != 0).flatten(1).any(dim=1)[:, None, None, None]
            z_r = torch.where(present, self.encode(canvas), torch.zeros_like(z_L))
        z_hat = self.denoise(z_L, z_r, mask)
        return self.decode(z_hat), z_hat


def is_adapter_parameter(name: str) -> bool:
    return ".lora_A." in name or ".lora_B." in name or name.startswith("unet.conv_in.extra.")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: RestorationModel
    step: int = 0
    disc_state: Optional[Dict[str, torch.Tensor]] = None
    optimizer_states: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)


def _flatten_optimizer(
    prefix: str, state: Dict[str, Any]
) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    tensors: Dict[str, torch.Tensor] = {}
    scalars: Dict[str, Dict[str, Any]] = {}
    for idx, entry in state["state"].items():
        for key, value in entry.items():
            if torch.is_tensor(value):
                tensors[f"{prefix}.state.{idx}.{key}"] = value.detach().cpu().contiguous()
            else:
                scalars.setdefault(str(idx), {})[key] = value
    return tensors, {"param_groups": state["param_groups"], "scalars": scalars}


def _unflatten_optimizer(
    prefix: str, tensors: Dict[str, torch.Tensor], meta: Dict[str, Any]
) -> Dict[str, Any]:
    state: Dict[int, Dict[str, Any]] = {}
    head = f"{prefix}.state."
    for name, value in tensors.items():
        if name.startswith(head):
            idx, key = name[len(head) :].split(".", 1)
            state.setdefault(int(idx), {})[key] = value
    for idx, entry in meta.get("scalars", {}).items():
        state.setdefault(int(idx), {}).update(entry)
    return {"state": state, "param_groups": meta["param_groups"]}


def save_checkpoint(
    path: Union[str, Path],
    model: RestorationModel,
    step: int = 0,
    disc: Optional[PatchDiscriminator] = None,
    optimizers: Optional[Dict[str, torch.optim.Optimizer]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write a flat tensor archive with a JSON metadata record"""
    path = Path(path)
    tensors = {f"model.{k}": v.detach().cpu().contiguous() for k, v in model.state_dict().items()}
    if disc is not None:
        tensors.update(
            {f"disc.{k}": v.detach().cpu().contiguous() for k, v in disc.state_dict().items()}
        )
    optim_meta: Dict[str, Any] = {}
    for name, opt in (optimizers or {}).items():
        flat, meta = _flatten_optimizer(f"optim.{name}", opt.state_dict())
        tensors.update(flat)
        optim_meta[name] = meta

    s = model.scalars
    metadata = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.cfg.model_dump_json(),
        "factor": str(model.factor),
        "adapted": json.dumps(model.adapted),
        "step": str(step),
        "schedule": json.dumps(
            {
                "num_timesteps": model.cfg.num_timesteps,
                "beta_lo": model.cfg.beta_lo,
                "beta_hi": model.cfg.beta_hi,
                "t_star": s.t_star,
                "alpha": s.alpha,
                "beta": s.beta,
            }
        ),
        "lora": model.cfg.lora.model_dump_json(),
        "has_disc": json.dumps(disc is not None),
        "optimizers": json.dumps(optim_meta),
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(path), metadata=metadata)
    logger.debug(f"Saved checkpoint at step {step} to {path}")
    return path


def read_metadata(path: Union[str, Path]) -> Dict[str, str]:
    try:
        with safe_open(str(path), framework="pt") as f:
            meta = f.metadata() or {}
    except (OSError, SafetensorError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    return meta


def load_checkpoint(path: Union[str, Path], device: str = "cpu") -> Checkpoint:
    meta = read_metadata(path)
    try:
        tensors = load_file(str(path), device=device)
    except (OSError, SafetensorError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    cfg = ModelConfig.model_validate_json(meta["model_config"])
    model = RestorationModel(cfg, factor=int(meta["factor"]))
    if json.loads(meta["adapted"]):
        model.adapt()
    model.freeze_decoder()
    model_state = {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
    try:
        model.load_state_dict(model_state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint {path} does not match the model layout: {e}") from e
    model.to(device)

    disc_state = None
    if json.loads(meta.get("has_disc", "false")):
        disc_state = {k[len("disc.") :]: v for k, v in tensors.items() if k.startswith("disc.")}

    optimizer_states = {
        name: _unflatten_optimizer(f"optim.{name}", tensors, om)
        for name, om in json.loads(meta.get("optimizers", "{}")).items()
    }
    return Checkpoint(
        model=model,
        step=int(meta["step"]),
        disc_state=disc_state,
        optimizer_states=optimizer_states,
        metadata={k: v for k, v in meta.items()},
    )
