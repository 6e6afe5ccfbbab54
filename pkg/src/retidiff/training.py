"""Losses and the two training phases.

Phase I fits the GT-aware prior extractor and the restorer on
``L_rec + lambda1 * L_retinex``. Phase II adds the conditioning extractor and
the two latent diffusion branches, sampling priors through the full reverse
chain every iteration and optimizing
``L_dif + lambda2 * L_rec + lambda3 * L_retinex``.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig
from .data import PairSampler
from .model import RetiDiff
from .priors import RetinexPriors
from .retinex import RetinexPair, decompose

log = logging.getLogger(__name__)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_rec(hq: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _same_shape(hq, gt, "loss_rec")
    return F.l1_loss(hq, gt)


def loss_retinex(aux_first: RetinexPair, aux_last: RetinexPair, lq_pair: RetinexPair,
                 gt_pair: RetinexPair) -> torch.Tensor:
    """First-encoder reconstructions target the LQ components, last-decoder ones the GT."""
    terms = [
        (lq_pair.reflectance, aux_first.reflectance),
        (lq_pair.illumination, aux_first.illumination),
        (gt_pair.reflectance, aux_last.reflectance),
        (gt_pair.illumination, aux_last.illumination),
    ]
    for target, pred in terms:
        _same_shape(target, pred, "loss_retinex")
    return sum(F.l1_loss(pred, target) for target, pred in terms)


def loss_dif(z: RetinexPriors, z_hat: RetinexPriors) -> torch.Tensor:
    _same_shape(z.reflectance, z_hat[0], "loss_dif")
    _same_shape(z.illumination, z_hat[1], "loss_dif")
    return F.l1_loss(z_hat[0], z.reflectance) + F.l1_loss(z_hat[1], z.illumination)


@dataclass
class LossReport:
    iteration: int
    components: dict
    weights: dict
    objective: float = float("nan")

    @property
    def total(self) -> float:
        return sum(self.weights[k] * v for k, v in self.components.items())

    def row(self, lr: float | None = None) -> dict:
        out = {"iteration": self.iteration, "total": self.total, **self.components}
        if lr is not None:
            out["lr"] = lr
        return out


def cosine_lr(step: int, total: int, start: float, end: float) -> float:
    """Cosine annealing from ``start`` at step 0 to ``end`` at step ``total - 1``."""
    if total <= 1:
        return start
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * step / (total - 1)))


@dataclass
class TrainResult:
    model: RetiDiff
    history: list = field(default_factory=list)
    checkpoint: Path | None = None


def phase1_losses(model: RetiDiff, lq, gt, cfg: TrainConfig):
    lq_pair, gt_pair = decompose(lq), decompose(gt)
    z = model.encode(lq_pair, gt_pair)
    hq, taps = model.restore(lq, z)
    parts = {"rec": loss_rec(hq, gt)}
    weights = {"rec": 1.0}
    if model.aux is not None and cfg.lambda1 > 0:
        parts["retinex"] = loss_retinex(*model.aux_decode(taps), lq_pair, gt_pair)
        weights["retinex"] = cfg.lambda1
    return parts, weights


def phase2_losses(model: RetiDiff, lq, gt, cfg: TrainConfig, generator: torch.Generator | None = None):
    lq_pair, gt_pair = decompose(lq), decompose(gt)
    cond = model.condition(lq_pair)
    z_hat = model.sample_priors(cond, generator)
    parts, weights = {}, {}
    if model.rldm_r is not None:
        z = model.encode(lq_pair, gt_pair)
        parts["dif_R"] = F.l1_loss(z_hat.reflectance, z.reflectance)
        parts["dif_L"] = F.l1_loss(z_hat.illumination, z.illumination)
        weights["dif_R"] = weights["dif_L"] = 1.0
    needs_restorer = cfg.lambda2 > 0 or (cfg.lambda3 > 0 and model.aux is not None)
    if needs_restorer:
        hq, taps = model.restore(lq, z_hat)
        if cfg.lambda2 > 0:
            parts["rec"] = loss_rec(hq, gt)
            weights["rec"] = cfg.lambda2
        if cfg.lambda3 > 0 and model.aux is not None:
            parts["retinex"] = loss_retinex(*model.aux_decode(taps), lq_pair, gt_pair)
            weights["retinex"] = cfg.lambda3
    return parts, weights


def _run(model: RetiDiff, params, cfg: TrainConfig, sampler: PairSampler, loss_fn):
    if not params:
        raise ValueError("no trainable parameters")
    opt = torch.optim.Adam(params, lr=cfg.lr_start, betas=tuple(cfg.betas))
    history = []
    model.train()
    for it in range(cfg.iterations):
        lr = cosine_lr(it, cfg.iterations, cfg.lr_start, cfg.lr_end)
        for group in opt.param_groups:
            group["lr"] = lr
        lq, gt = next(sampler)
        parts, weights = loss_fn(lq, gt)
        loss = sum(weights[k] * v for k, v in parts.items())
        report = LossReport(it + 1, {k: v.item() for k, v in parts.items()}, weights, loss.item())
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at iteration {it + 1}: {report.components}")
        model.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if (it + 1) % cfg.log_every == 0 or it == 0 or it + 1 == cfg.iterations:
            history.append(report.row(lr))
            log.info("phase %d it %d loss %.5f", cfg.phase, it + 1, report.total)
    model.eval()
    return opt, history


def train_phase1(model_cfg: ModelConfig, cfg: TrainConfig, lq: torch.Tensor, gt: torch.Tensor,
                 out_dir=None, model: RetiDiff | None = None) -> TrainResult:
    """Pretrain the GT-aware prior extractor, RGformer and auxiliary decoder."""
    if cfg.phase != 1:
        raise ValueError("train_phase1 needs a phase-1 TrainConfig")
    torch.manual_seed(cfg.seed)
    model = model or RetiDiff(model_cfg)
    sampler = PairSampler(lq, gt, cfg.batch_size, cfg.patch_size, cfg.augment, cfg.seed)
    opt, history = _run(model, model.phase1_parameters(), cfg, sampler,
                        lambda a, b: phase1_losses(model, a, b, cfg))
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(out_dir, model, cfg, cfg.iterations, history, opt,
                               {"sampler": sampler.state_dict()})
    return TrainResult(model, history, ckpt)


def train_phase2(cfg: TrainConfig, lq: torch.Tensor, gt: torch.Tensor, phase1, out_dir=None,
                 model_cfg: ModelConfig | None = None) -> TrainResult:
    """Train the latent diffusion branches, jointly with the rest unless ``cfg.joint`` is off.

    ``phase1`` is a phase-1 checkpoint directory or a trained :class:`RetiDiff`.
    The optimizer starts fresh.
    """
    if cfg.phase != 2:
        raise ValueError("train_phase2 needs a phase-2 TrainConfig")
    if isinstance(phase1, RetiDiff):
        model = RetiDiff(model_cfg or phase1.cfg)
        model.load_state_dict(phase1.state_dict(), strict=model_cfg is None)
    else:
        model, manifest, _ = load_checkpoint(phase1, model_cfg)
        if manifest["phase"] != 1:
            raise ValueError(f"{phase1} is a phase-{manifest['phase']} checkpoint, expected phase 1")
    torch.manual_seed(cfg.seed)
    sampler = PairSampler(lq, gt, cfg.batch_size, cfg.patch_size, cfg.augment, cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    frozen = [] if cfg.joint else model.restorer_parameters()
    for p in frozen:
        p.requires_grad_(False)
    try:
        opt, history = _run(model, model.phase2_parameters(cfg.joint), cfg, sampler,
                            lambda a, b: phase2_losses(model, a, b, cfg, gen))
    finally:
        for p in frozen:
            p.requires_grad_(True)
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(out_dir, model, cfg, cfg.iterations, history, opt,
                               {"sampler": sampler.state_dict(), "prior_generator": gen.get_state()})
    return TrainResult(model, history, ckpt)
