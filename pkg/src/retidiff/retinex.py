"""Max-channel Retinex decomposition.

Images are torch tensors with the channel axis at position -3, i.e. either
``(3, H, W)`` or ``(B, 3, H, W)``. Illumination keeps a singleton channel axis
(``(..., 1, H, W)``) and is broadcast explicitly when recomposing.
"""

from typing import NamedTuple

import torch

ILLUMINATION_FLOOR = 1e-4


class RetinexPair(NamedTuple):
    reflectance: torch.Tensor
    illumination: torch.Tensor


def decompose(image: torch.Tensor, eps: float = ILLUMINATION_FLOOR) -> RetinexPair:
    """Split ``image`` into reflectance and illumination.

    Illumination is the per-pixel channel maximum floored at ``eps``;
    reflectance is the image divided by it. Both are clamped to ``[0, 1]``.
    """
    if image.dim() < 3 or image.shape[-3] != 3:
        raise ValueError(f"expected a 3-channel image with channels at dim -3, got {tuple(image.shape)}")
    if not torch.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    illumination = image.amax(dim=-3, keepdim=True).clamp(eps, 1.0)
    reflectance = (image / illumination).clamp(0.0, 1.0)
    return RetinexPair(reflectance, illumination)


def recompose(pair: RetinexPair) -> torch.Tensor:
    reflectance, illumination = pair
    if illumination.shape[-3] != 1 or reflectance.shape[-3] != 3:
        raise ValueError("reflectance must have 3 channels and illumination 1")
    if reflectance.shape[:-3] != illumination.shape[:-3] or reflectance.shape[-2:] != illumination.shape[-2:]:
        raise ValueError(
            f"shape mismatch: reflectance {tuple(reflectance.shape)} vs illumination {tuple(illumination.shape)}"
        )
    return (reflectance * illumination.expand_as(reflectance)).clamp(0.0, 1.0)
