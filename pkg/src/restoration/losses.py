"""Training objectives: portrait loss, face losses and the total objective"""

import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, field_validator

from .geometry import FaceTemplate, Landmarks5, align_face
from .identity import pairwise_similarity
from .imaging import check_same_shape, ssim_map
from .types import Embedder, PerceptualMetric, Regularizer, ShapeError

LOG_FLOOR = 1e-6
PERCEPTUAL_SCALES = 3

Discriminator = Callable[[torch.Tensor], torch.Tensor]


class FaceLossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambda_fid: float = 1.0
    lambda_lpips: float = 0.8
    lambda_id: float = 4.0
    lambda_adv: float = 0.05

    @field_validator("*")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("Loss weights must be non-negative")
        return v


class ObjectiveWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambda_P: float = 1.0
    lambda_F: float = 1.0
    lambda_reg: float = 0.0

    @field_validator("*")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("Loss weights must be non-negative")
        return v


class LossReport(BaseModel):
    total: float
    portrait_mse: float
    portrait_perceptual: float
    face_fid: float
    face_id: float
    face_adv_g: float
    face_adv_d: float
    reg: float

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.model_dump().values())

    def recombine(
        self, ow: ObjectiveWeights, fw: FaceLossWeights, lambda_lpips_portrait: float
    ) -> float:
        """Weighted sum of the components; equals `total`"""
        portrait = self.portrait_mse
        if lambda_lpips_portrait:
            portrait += lambda_lpips_portrait * self.portrait_perceptual
        face = 0.0
        for weight, value in (
            (fw.lambda_fid, self.face_fid),
            (fw.lambda_id, self.face_id),
            (fw.lambda_adv, self.face_adv_g),
        ):
            if weight:
                face += weight * value
        total = 0.0
        for weight, value in (
            (ow.lambda_P, portrait),
            (ow.lambda_F, face),
            (ow.lambda_reg, self.reg),
        ):
            if weight:
                total += weight * value
        return total


class ToyPerceptual(PerceptualMetric):
    """Mean over three dyadic scales of (1 - SSIM), plus mean absolute gradient difference"""

    def __init__(self, scales: int = PERCEPTUAL_SCALES):
        self.scales = scales

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        check_same_shape(a, b)
        if a.dim() == 3:
            a, b = a.unsqueeze(0), b.unsqueeze(0)
        structural = a.new_zeros(())
        xa, xb = a, b
        for k in range(self.scales):
            if k:
                xa = F.avg_pool2d(xa, 2)
                xb = F.avg_pool2d(xb, 2)
            structural = structural + (1.0 - ssim_map(xa, xb).mean())
        structural = structural / self.scales

        gx = (a[..., :, 1:] - a[..., :, :-1]) - (b[..., :, 1:] - b[..., :, :-1])
        gy = (a[..., 1:, :] - a[..., :-1, :]) - (b[..., 1:, :] - b[..., :-1, :])
        gradient = 0.5 * (gx.abs().mean() + gy.abs().mean())
        return structural + gradient

    @classmethod
    def get_backend_info(cls) -> Dict[str, Any]:
        return {
            "type": "toy",
            "name": "Multi-scale SSIM + gradient distance",
            "description": "Differentiable stand-in for a learned perceptual metric",
        }


class NoRegularizer(Regularizer):
    def __call__(self, latent: Optional[torch.Tensor]) -> torch.Tensor:
        if latent is None:
            return torch.zeros(())
        return latent.new_zeros(())

    @classmethod
    def get_backend_info(cls) -> Dict[str, Any]:
        return {"type": "none", "name": "No regularizer", "description": "L_reg = 0"}


class LatentL2Regularizer(Regularizer):
    def __call__(self, latent: Optional[torch.Tensor]) -> torch.Tensor:
        if latent is None:
            return torch.zeros(())
        return latent.pow(2).mean()

    @classmethod
    def get_backend_info(cls) -> Dict[str, Any]:
        return {
            "type": "latent_l2",
            "name": "Latent magnitude penalty",
            "description": "Mean squared magnitude of the restored latent",
        }


_DEFAULT_PERCEPTUAL = ToyPerceptual()


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    check_same_shape(a, b)
    return (a - b).pow(2).mean()


def perceptual_distance(
    a: torch.Tensor, b: torch.Tensor, backend: Optional[PerceptualMetric] = None
) -> torch.Tensor:
    check_same_shape(a, b)
    return (backend or _DEFAULT_PERCEPTUAL).distance(a, b)


def face_fidelity(
    gt_face: torch.Tensor,
    pred_face: torch.Tensor,
    w: FaceLossWeights,
    perceptual: Optional[PerceptualMetric] = None,
) -> torch.Tensor:
    """Mean squared error plus weighted perceptual distance on aligned crops"""
    loss = mse(gt_face, pred_face)
    if w.lambda_lpips:
        loss = loss + w.lambda_lpips * perceptual_distance(gt_face, pred_face, perceptual)
    return loss


def identity_loss(
    gt_face: torch.Tensor,
    pred_face: torch.Tensor,
    ref: Optional[torch.Tensor],
    embedder: Embedder,
    ref_present: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """GT term plus reference term weighted by the GT/reference similarity.

    `ref=None` (or rows where `ref_present` is False) means no reference: the
    reference similarity is defined as 0 and only the GT term remains.
    """
    check_same_shape(gt_face, pred_face)
    phi_pred_gt = pairwise_similarity(pred_face, gt_face, embedder)
    loss = -torch.log(((phi_pred_gt + 1.0) / 2.0).clamp(LOG_FLOOR, 1.0))
    if ref is not None:
        if ref.shape[-3:] != gt_face.shape[-3:]:
            raise ShapeError(f"Reference shape {tuple(ref.shape)} does not match faces")
        with torch.no_grad():
            phi_gt_ref = pairwise_similarity(gt_face, ref, embedder, ref_present)
        phi_pred_ref = pairwise_similarity(pred_face, ref, embedder, ref_present)
        ref_term = -torch.log(((phi_pred_ref + 1.0) / 2.0).clamp(LOG_FLOOR, 1.0))
        loss = loss + ref_term * phi_gt_ref.to(ref_term.dtype)
    return loss.mean()


def adversarial_losses(
    disc_logit_real: torch.Tensor, disc_logit_fake: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Non-saturating logistic GAN losses: (generator, discriminator)"""
    g_loss = F.softplus(-disc_logit_fake).mean()
    d_loss = F.softplus(-disc_logit_real).mean() + F.softplus(disc_logit_fake).mean()
    return g_loss, d_loss


@dataclass
class FaceTerms:
    fid: torch.Tensor
    id: torch.Tensor
    adv_g: torch.Tensor
    adv_d: Optional[torch.Tensor]
    total: torch.Tensor


def face_loss(
    gt_face: torch.Tensor,
    pred_face: torch.Tensor,
    ref: Optional[torch.Tensor],
    disc: Optional[Discriminator],
    w: FaceLossWeights,
    embedder: Embedder,
    ref_present: Optional[torch.Tensor] = None,
    perceptual: Optional[PerceptualMetric] = None,
) -> FaceTerms:
    """Weighted fidelity + identity + adversarial face loss; the discriminator
    loss is returned separately and sees detached predictions"""
    fid = face_fidelity(gt_face, pred_face, w, perceptual)
    ident = identity_loss(gt_face, pred_face, ref, embedder, ref_present)

    zero = pred_face.new_zeros(())
    adv_g, adv_d = zero, None
    if disc is not None:
        real_logits = disc(gt_face)
        adv_g, _ = adversarial_losses(real_logits.detach(), disc(pred_face))
        _, adv_d = adversarial_losses(real_logits, disc(pred_face.detach()))

    total = zero
    for weight, term in ((w.lambda_fid, fid), (w.lambda_id, ident), (w.lambda_adv, adv_g)):
        if weight:
            total = total + weight * term
    return FaceTerms(fid=fid, id=ident, adv_g=adv_g, adv_d=adv_d, total=total)


def portrait_terms(
    x_H: torch.Tensor,
    x_hat: torch.Tensor,
    lambda_lpips_portrait: float = 2.0,
    perceptual: Optional[PerceptualMetric] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """(mse, perceptual); perceptual is 0 when its weight is 0"""
    err = mse(x_H, x_hat)
    if lambda_lpips_portrait:
        perc = perceptual_distance(x_H, x_hat, perceptual)
    else:
        perc = err.new_zeros(())
    return err, perc


def portrait_loss(
    x_H: torch.Tensor,
    x_hat: torch.Tensor,
    lambda_lpips_portrait: float = 2.0,
    perceptual: Optional[PerceptualMetric] = None,
) -> torch.Tensor:
    err, perc = portrait_terms(x_H, x_hat, lambda_lpips_portrait, perceptual)
    if lambda_lpips_portrait:
        return err + lambda_lpips_portrait * perc
    return err


@dataclass
class ObjectiveTerms:
    total: torch.Tensor
    d_loss: Optional[torch.Tensor]
    report: LossReport


def total_objective(
    x_H: torch.Tensor,
    x_hat: torch.Tensor,
    landmarks: Sequence[Optional[Landmarks5]],
    ref: Optional[torch.Tensor],
    disc: Optional[Discriminator],
    ow: ObjectiveWeights,
    fw: FaceLossWeights,
    template: FaceTemplate,
    embedder: Embedder,
    ref_present: Optional[torch.Tensor] = None,
    lambda_lpips_portrait: float = 2.0,
    perceptual: Optional[PerceptualMetric] = None,
    regularizer: Optional[Regularizer] = None,
    latent: Optional[torch.Tensor] = None,
) -> ObjectiveTerms:
    """lambda_P * portrait loss + lambda_F * face loss on aligned crops + lambda_reg * reg.

    Rows without landmarks (face-free images) contribute to the portrait term only.
    """
    if x_H.dim() == 3:
        x_H, x_hat = x_H.unsqueeze(0), x_hat.unsqueeze(0)
        if ref is not None and ref.dim() == 3:
            ref = ref.unsqueeze(0)
    check_same_shape(x_H, x_hat)
    if len(landmarks) != x_H.shape[0]:
        raise ShapeError(f"{len(landmarks)} landmark entries for batch of {x_H.shape[0]}")

    p_mse, p_perc = portrait_terms(x_H, x_hat, lambda_lpips_portrait, perceptual)
    portrait = p_mse + lambda_lpips_portrait * p_perc if lambda_lpips_portrait else p_mse

    zero = x_hat.new_zeros(())
    rows = [i for i, lm in enumerate(landmarks) if lm is not None]
    if rows and ow.lambda_F:
        idx = torch.tensor(rows, device=x_H.device)
        lms = [landmarks[i] for i in rows]
        gt_face = align_face(x_H[idx], lms, template)
        pred_face = align_face(x_hat[idx], lms, template)
        face_ref = ref[idx] if ref is not None else None
        present = ref_present[idx] if ref_present is not None else None
        face = face_loss(gt_face, pred_face, face_ref, disc, fw, embedder, present, perceptual)
    else:
        face = FaceTerms(fid=zero, id=zero, adv_g=zero, adv_d=None, total=zero)

    reg = (regularizer or NoRegularizer())(latent) if ow.lambda_reg else zero

    total = None
    for weight, term in ((ow.lambda_P, portrait), (ow.lambda_F, face.total), (ow.lambda_reg, reg)):
        if weight:
            total = weight * term if total is None else total + weight * term
    if total is None:
        total = zero.detach()

    report = LossReport(
        total=float(total.detach()),
        portrait_mse=float(p_mse.detach()),
        portrait_perceptual=float(p_perc.detach()),
        face_fid=float(face.fid.detach()),
        face_id=float(face.id.detach()),
        face_adv_g=float(face.adv_g.detach()),
        face_adv_d=float(face.adv_d.detach()) if face.adv_d is not None else 0.0,
        reg=float(reg.detach()),
    )
    return ObjectiveTerms(total=total, d_loss=face.adv_d, report=report)
