"""Two-stage adapter training with face supervision and discriminator alternation"""

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn
from loguru import logger
from pydantic import BaseModel, ConfigDict, model_validator
from tqdm import tqdm

from .curation import derive_seed
from .geometry import FaceTemplate
from .losses import (
    FaceLossWeights,
    LossReport,
    ObjectiveWeights,
    mse,
    total_objective,
)
from .manifest import FaceTriplet
from .model import (
    Checkpoint,
    ModelConfig,
    RestorationModel,
    load_checkpoint,
    save_checkpoint,
)
from .networks import PatchDiscriminator
from .sampling import (
    BatchStream,
    ImageCache,
    TripletBatch,
    batch_rng,
    normalize_ratios,
    sample_batch,
    source_counts,
)
from .types import (
    ContractViolation,
    Embedder,
    NonFiniteLoss,
    PerceptualMetric,
    Regularizer,
)

DETERMINISTIC_ENV = "HEADSUP_DETERMINISTIC"


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = 5e-5
    weight_decay: float = 1e-2
    disc_lr: Optional[float] = None
    total_steps: int = 3000
    stage1_steps: int = 800
    batch_size: int = 4
    seed: int = 0
    source_names: List[str] = ["portrait", "face", "scene"]
    stage1_ratios: List[float] = [0.15, 0.05, 2.0]
    stage2_ratios: List[float] = [1.5, 0.5, 2.0]
    ref_drop_prob: float = 0.2
    face_weights: FaceLossWeights = FaceLossWeights()
    objective: ObjectiveWeights = ObjectiveWeights()
    lambda_lpips_portrait: float = 2.0
    adversarial: bool = True
    perceptual: str = "toy"
    regularizer: str = "none"
    checkpoint_every: int = 500
    workers: int = 0
    deterministic: bool = False
    device: str = "cpu"

    @model_validator(mode="after")
    def _check_schedule(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.stage1_steps <= self.total_steps:
            raise ValueError("stage1_steps must lie in [0, total_steps]")
        for ratios in (self.stage1_ratios, self.stage2_ratios):
            if len(ratios) != len(self.source_names):
                raise ValueError("Each stage needs one ratio per source")
            normalize_ratios(ratios)
        if not 0.0 <= self.ref_drop_prob <= 1.0:
            raise ValueError("ref_drop_prob must lie in [0, 1]")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size and checkpoint_every must be >= 1")
        return self

    def stage_at(self, step: int) -> int:
        return 1 if step < self.stage1_steps else 2

    def ratios_at(self, step: int) -> List[float]:
        return self.stage1_ratios if self.stage_at(step) == 1 else self.stage2_ratios

    def is_deterministic(self) -> bool:
        return self.deterministic or os.environ.get(DETERMINISTIC_ENV) == "1"

    def uses_identity_loss(self) -> bool:
        return self.objective.lambda_F > 0 and self.face_weights.lambda_id > 0


def check_embedder(embedder: Embedder, cfg: TrainConfig) -> None:
    """The identity term needs gradients through the embedder"""
    if cfg.uses_identity_loss() and not getattr(embedder, "differentiable", False):
        info = type(embedder).get_backend_info()
        raise ContractViolation(
            f"Embedder {info.get('type', type(embedder).__name__)!r} is not differentiable; "
            "training with an identity loss needs a differentiable embedder "
            "(set train.face_weights.lambda_id = 0 to train without it)"
        )


def set_determinism(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


class Trainer:
    """Owns the adapted model, the face discriminator and both optimizers"""

    def __init__(
        self,
        model: RestorationModel,
        cfg: TrainConfig,
        embedder: Embedder,
        template: FaceTemplate,
        perceptual: Optional[PerceptualMetric] = None,
        regularizer: Optional[Regularizer] = None,
        disc: Optional[nn.Module] = None,
    ):
        check_embedder(embedder, cfg)
        self.cfg = cfg
        self.model = model
        self.model.adapt()
        self.model.freeze_decoder()
        self.embedder = embedder
        self.template = template
        self.perceptual = perceptual
        self.regularizer = regularizer
        self.step = 0

        use_disc = cfg.adversarial and cfg.face_weights.lambda_adv > 0
        if disc is None and use_disc:
            disc = PatchDiscriminator(model.cfg.disc_width)
        self.disc = disc.to(cfg.device) if disc is not None else None

        self.g_opt = torch.optim.AdamW(
            self.trainable_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
        )
        self.d_opt = (
            torch.optim.AdamW(
                self.disc.parameters(),
                lr=cfg.disc_lr or cfg.lr,
                weight_decay=cfg.weight_decay,
            )
            if self.disc is not None
            else None
        )

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.model.parameters() if p.requires_grad]

    def trainable_names(self) -> List[str]:
        names = [f"model.{n}" for n, p in self.model.named_parameters() if p.requires_grad]
        if self.disc is not None:
            names += [f"disc.{n}" for n, p in self.disc.named_parameters() if p.requires_grad]
        return names

    def optimizers(self) -> Dict[str, torch.optim.Optimizer]:
        opts: Dict[str, torch.optim.Optimizer] = {"generator": self.g_opt}
        if self.d_opt is not None:
            opts["discriminator"] = self.d_opt
        return opts

    def load_state(self, ckpt: Checkpoint) -> None:
        if self.disc is not None and ckpt.disc_state is not None:
            self.disc.load_state_dict(ckpt.disc_state)
        for name, opt in self.optimizers().items():
            if name in ckpt.optimizer_states:
                opt.load_state_dict(ckpt.optimizer_states[name])
        self.step = ckpt.step

    def train_step(self, batch: TripletBatch) -> LossReport:
        """One generator update followed by one discriminator update"""
        cfg = self.cfg
        batch = batch.to(cfg.device)
        self.model.train()

        x_hat, z_hat = self.model.restore_batch(batch.lq, batch.ref, batch.mask)
        terms = total_objective(
            batch.hq,
            x_hat,
            batch.landmarks,
            batch.ref,
            self.disc,
            cfg.objective,
            cfg.face_weights,
            self.template,
            self.embedder,
            ref_present=batch.ref_present,
            lambda_lpips_portrait=cfg.lambda_lpips_portrait,
            perceptual=self.perceptual,
            regularizer=self.regularizer,
            latent=z_hat,
        )
        if not terms.report.is_finite():
            raise NonFiniteLoss(terms.report, self.step)

        if terms.total.requires_grad:
            self.g_opt.zero_grad(set_to_none=True)
            terms.total.backward()
            self.g_opt.step()

        if self.d_opt is not None and terms.d_loss is not None and terms.d_loss.requires_grad:
            self.d_opt.zero_grad(set_to_none=True)
            terms.d_loss.backward()
            self.d_opt.step()

        self.step += 1
        return terms.report


# ---------------------------------------------------------------------------
# Pretraining stages standing in for pretrained weights
# ---------------------------------------------------------------------------


def _hq_stack(rows: Sequence[FaceTriplet], cache: ImageCache, idx: Sequence[int]) -> torch.Tensor:
    return torch.stack([cache.get(rows[i].hq) for i in idx])


def pretrain_autoencoder(
    model: RestorationModel,
    rows: Sequence[FaceTriplet],
    cache: ImageCache,
    steps: int,
    lr: float,
    batch_size: int,
    seed: int,
    device: str = "cpu",
) -> Optional[float]:
    """Fit encoder and decoder as a plain autoencoder on HQ images"""
    if steps <= 0 or not rows:
        return None
    params = list(model.encoder.parameters()) + list(model.decoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    loss = None
    for step in tqdm(range(steps), desc="autoencoder", leave=False):
        idx = batch_rng(derive_seed(seed, "ae"), step).integers(len(rows), size=batch_size)
        x = _hq_stack(rows, cache, idx).to(device)
        recon = model.decode(model.encode(x))
        loss = mse(recon, x)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    logger.info(f"Autoencoder pretraining done, final MSE {float(loss.detach()):.5f}")
    return float(loss.detach())


def pretrain_prior(
    model: RestorationModel,
    rows: Sequence[FaceTriplet],
    cache: ImageCache,
    steps: int,
    lr: float,
    batch_size: int,
    seed: int,
    device: str = "cpu",
) -> Optional[float]:
    """Fit the base denoiser to generic one-step restoration (no references, no face terms)"""
    if steps <= 0 or not rows:
        return None
    for p in list(model.encoder.parameters()) + list(model.decoder.parameters()):
        p.requires_grad_(False)
    opt = torch.optim.Adam(model.unet.parameters(), lr=lr)
    loss = None
    for step in tqdm(range(steps), desc="prior", leave=False):
        idx = batch_rng(derive_seed(seed, "prior"), step).integers(len(rows), size=batch_size)
        x_h = _hq_stack(rows, cache, idx).to(device)
        x_l = torch.stack([cache.get(rows[i].lq) for i in idx]).to(device)
        with torch.no_grad():
            z_h = model.encode(x_h)
            z_l = model.encode(model.upsample(x_l))
        z_hat = model.denoise(z_l, None, x_l.new_zeros(x_l.shape[0], *x_l.shape[-2:]))
        loss = mse(z_hat, z_h) + mse(model.decode(z_hat), x_h)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    logger.info(f"Denoiser prior pretraining done, final loss {float(loss.detach()):.5f}")
    return float(loss.detach())


# ---------------------------------------------------------------------------
# Training run
# ---------------------------------------------------------------------------


@dataclass
class TrainingSummary:
    steps: int
    checkpoints: List[Path]
    log_path: Path
    last_report: Optional[LossReport]


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / f"ckpt-{step:06d}.safetensors"


def _trim_log(log_path: Path, start: int) -> None:
    """Drop log lines at or after `start` so a resumed run appends cleanly"""
    if not log_path.exists():
        return
    kept = []
    for line in log_path.read_text(encoding="utf-8").splitlines():
        if line.strip() and json.loads(line)["step"] < start:
            kept.append(line + "\n")
    log_path.write_text("".join(kept), encoding="utf-8")


def group_sources(
    rows: Sequence[FaceTriplet], names: Sequence[str]
) -> Dict[str, List[FaceTriplet]]:
    grouped: Dict[str, List[FaceTriplet]] = {n: [] for n in names}
    for row in rows:
        if row.source in grouped:
            grouped[row.source].append(row)
    return grouped


def run_training(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    rows: Sequence[FaceTriplet],
    data_root: Path,
    out_dir: Path,
    embedder: Embedder,
    face_side: int = 128,
    factor: int = 4,
    perceptual: Optional[PerceptualMetric] = None,
    regularizer: Optional[Regularizer] = None,
    resume: Optional[Path] = None,
) -> TrainingSummary:
    """Pretrain (fresh runs only), then train adapters over the two mixing stages"""
    check_embedder(embedder, cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    deterministic = cfg.is_deterministic()
    set_determinism(cfg.seed, deterministic)
    workers = 0 if deterministic else cfg.workers
    template = FaceTemplate.arcface(face_side)
    cache = ImageCache(data_root)
    sources = group_sources(rows, cfg.source_names)
    for name in cfg.source_names:
        logger.info(f"Source {name}: {len(sources[name])} rows")

    ckpt: Optional[Checkpoint] = None
    if resume is not None:
        ckpt = load_checkpoint(resume, device=cfg.device)
        model = ckpt.model
        logger.info(f"Resuming from {resume} at step {ckpt.step}")
    else:
        model = RestorationModel(model_cfg, factor=factor).to(cfg.device)
        pretrain_autoencoder(
            model,
            rows,
            cache,
            model_cfg.ae_steps,
            model_cfg.ae_lr,
            cfg.batch_size,
            cfg.seed,
            cfg.device,
        )
        model.freeze_decoder()
        pretrain_prior(
            model,
            rows,
            cache,
            model_cfg.prior_steps,
            model_cfg.prior_lr,
            cfg.batch_size,
            cfg.seed,
            cfg.device,
        )

    trainer = Trainer(model, cfg, embedder, template, perceptual, regularizer)
    if ckpt is not None:
        trainer.load_state(ckpt)
    logger.info(f"{len(trainer.trainable_names())} trainable tensors")

    def sample(step: int) -> List[FaceTriplet]:
        return sample_batch(
            sources, cfg.ratios_at(step), cfg.ref_drop_prob, cfg.batch_size, cfg.seed, step
        )

    log_path = out_dir / "train_log.jsonl"
    _trim_log(log_path, trainer.step)
    checkpoints: List[Path] = []
    report: Optional[LossReport] = None
    stream = BatchStream(sample, cache, face_side, workers=workers)

    if trainer.step == 0:
        checkpoints.append(save_checkpoint(checkpoint_path(out_dir, 0), model, 0, trainer.disc))

    with open(log_path, "a", encoding="utf-8") as log_file:
        progress = tqdm(total=cfg.total_steps, initial=trainer.step, desc="train", leave=False)
        for batch in stream.iterate(trainer.step, cfg.total_steps):
            step = trainer.step
            report = trainer.train_step(batch)
            record = {
                "step": step,
                "stage": cfg.stage_at(step),
                "losses": report.model_dump(),
                "lr": trainer.g_opt.param_groups[0]["lr"],
                "sources": source_counts(batch.rows, cfg.source_names),
                "references": int(batch.ref_present.sum()),
            }
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()
            progress.update(1)
            done = trainer.step
            if done % cfg.checkpoint_every == 0 or done == cfg.total_steps:
                path = save_checkpoint(
                    checkpoint_path(out_dir, done),
                    model,
                    done,
                    trainer.disc,
                    trainer.optimizers(),
                    extra={"seed": cfg.seed},
                )
                checkpoints.append(path)
                logger.info(f"step {done}: total {report.total:.5f}, saved {path.name}")
        progress.close()

    return TrainingSummary(
        steps=trainer.step, checkpoints=checkpoints, log_path=log_path, last_report=report
    )

