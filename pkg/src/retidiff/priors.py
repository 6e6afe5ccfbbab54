"""Retinex prior extraction (RPE) encoders.

Two flavours share one architecture:

* the training-time extractor sees ``concat(GT, LQ)`` components and yields the
  priors ``Z_R`` (length ``3C'``) and ``Z_L`` (length ``C'``);
* the conditioning extractor sees the LQ components only and yields the
  condition vectors ``V_R`` and ``V_L`` consumed by the latent diffusion model.
"""

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .retinex import RetinexPair

UNSHUFFLE_FACTOR = 8


class RetinexPriors(NamedTuple):
    reflectance: torch.Tensor  # (B, 3C')
    illumination: torch.Tensor  # (B, C')

    def cat(self) -> torch.Tensor:
        return torch.cat([self.reflectance, self.illumination], dim=-1)


# Same layout as the priors; kept as a separate name so call sites read clearly.
ConditionVectors = RetinexPriors


def pixel_unshuffle(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Space-to-depth: ``(B, C, H, W) -> (B, C*f*f, H/f, W/f)``.

    Output channel ``c*f*f + i*f + j`` holds source channel ``c`` at offset
    ``(i, j)`` inside each ``f x f`` cell (row-major within the cell, cells
    grouped per source channel).
    """
    h, w = x.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"spatial dims {h}x{w} not divisible by factor {factor}")
    return F.pixel_unshuffle(x, factor)


def pixel_shuffle(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Inverse of :func:`pixel_unshuffle`."""
    if x.shape[-3] % (factor * factor):
        raise ValueError(f"channel count {x.shape[-3]} not divisible by {factor * factor}")
    return F.pixel_shuffle(x, factor)


class PriorEncoder(nn.Module):
    """pixel_unshuffle -> conv stem -> global average pool -> linear head -> standardize.

    The output is standardized per vector (zero mean, unit variance, no affine
    parameters) so the priors live at the unit scale the diffusion model assumes.
    """

    def __init__(self, in_channels: int, out_len: int, depth: int = 3, factor: int = UNSHUFFLE_FACTOR):
        super().__init__()
        self.factor = factor
        self.in_channels = in_channels
        self.out_len = out_len
        width = out_len
        layers = []
        c = in_channels * factor * factor
        for _ in range(depth):
            layers += [nn.Conv2d(c, width, 3, padding=1), nn.GELU()]
            c = width
        self.stem = nn.Sequential(*layers)
        self.head = nn.Linear(width, out_len)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[-3]}")
        h = self.stem(pixel_unshuffle(x, self.factor))
        return F.layer_norm(self.head(h.mean(dim=(-2, -1))), (self.out_len,))


class RetinexPriorExtractor(nn.Module):
    """Reflectance and illumination branches with separate weights.

    With ``paired=True`` each branch takes the GT and LQ components stacked
    along channels (6 and 2 input channels); otherwise only the LQ component
    (3 and 1 channels).
    """

    def __init__(self, prior_channels: int = 64, paired: bool = True, depth: int = 3):
        super().__init__()
        self.prior_channels = prior_channels
        self.paired = paired
        k = 2 if paired else 1
        self.reflectance = PriorEncoder(3 * k, 3 * prior_channels, depth)
        self.illumination = PriorEncoder(1 * k, prior_channels, depth)

    def forward(self, lq: RetinexPair, gt: RetinexPair | None = None) -> RetinexPriors:
        if self.paired:
            if gt is None:
                raise ValueError("paired extractor needs the GT Retinex pair")
            if gt.reflectance.shape != lq.reflectance.shape or gt.illumination.shape != lq.illumination.shape:
                raise ValueError("GT and LQ components must share shape")
            r_in = torch.cat([gt.reflectance, lq.reflectance], dim=-3)
            l_in = torch.cat([gt.illumination, lq.illumination], dim=-3)
        else:
            r_in, l_in = lq.reflectance, lq.illumination
        return RetinexPriors(self.reflectance(r_in), self.illumination(l_in))


def rpe_encode(gt_pair: RetinexPair, lq_pair: RetinexPair, encoder: RetinexPriorExtractor) -> RetinexPriors:
    if not encoder.paired:
        raise ValueError("rpe_encode needs a paired (GT+LQ) extractor")
    return encoder(lq_pair, gt_pair)


def rpe_condition(lq_pair: RetinexPair, encoder: RetinexPriorExtractor) -> ConditionVectors:
    if encoder.paired:
        raise ValueError("rpe_condition needs an LQ-only extractor")
    return encoder(lq_pair)
