"""Inference: LQ image -> condition vectors -> sampled priors -> restored image."""

import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint
from .model import RetiDiff
from .retinex import decompose


def pad_to_multiple(x: torch.Tensor, multiple: int):
    """Reflect-pad bottom/right so H and W are multiples of ``multiple``."""
    h, w = x.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return x
    if ph >= h or pw >= w:
        raise ValueError(f"image {h}x{w} is too small to reflect-pad to a multiple of {multiple}")
    return F.pad(x, (0, pw, 0, ph), mode="reflect")


@torch.no_grad()
def infer(model: RetiDiff, lq: torch.Tensor, seed: int = 0) -> torch.Tensor:
    """Restore ``lq`` (``(3, H, W)`` or ``(B, 3, H, W)``) using generated priors."""
    if lq.dim() == 3:
        return infer(model, lq[None], seed)[0]
    model.eval()
    h, w = lq.shape[-2:]
    x = pad_to_multiple(lq, model.rgformer.multiple)
    gen = torch.Generator().manual_seed(seed)
    priors = model.sample_priors(model.condition(decompose(x)), gen)
    hq, _ = model.restore(x, priors)
    return hq[..., :h, :w].clamp(0.0, 1.0)


@torch.no_grad()
def restore_with_reference(model: RetiDiff, lq: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Phase-I style restoration with priors extracted from the (lq, gt) pair."""
    model.eval()
    hq, _ = model.restore(lq, model.encode(decompose(lq), decompose(gt)))
    return hq


@torch.no_grad()
def restore_with_random_priors(model: RetiDiff, lq: torch.Tensor, seed: int = 0) -> torch.Tensor:
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    hq, _ = model.restore(lq, model.random_priors(lq.shape[0], gen, lq.dtype))
    return hq


def infer_from_checkpoint(path, lq: torch.Tensor, seed: int = 0) -> torch.Tensor:
    model, _, _ = load_checkpoint(path)
    return infer(model, lq, seed)
