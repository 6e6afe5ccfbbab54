"""Full-reference metrics on ``[0, 1]`` images shaped ``(3, H, W)``.

No GT-mean brightness alignment is applied.
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

K1, K2 = 0.01, 0.03
WINDOW, SIGMA = 11, 1.5


def _as_f64(x, y):
    x = torch.as_tensor(x, dtype=torch.float64)
    y = torch.as_tensor(y, dtype=torch.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    return x, y


def psnr(x, y, peak: float = 1.0) -> float:
    """PSNR in dB; identical images give ``math.inf``."""
    x, y = _as_f64(x, y)
    mse = torch.mean((x - y) ** 2).item()
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(ax ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(x, y, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    x, y = _as_f64(x, y)
    if x.dim() == 2:
        x, y = x[None], y[None]
    if min(x.shape[-2:]) < WINDOW:
        raise ValueError(f"image {tuple(x.shape[-2:])} smaller than the {WINDOW}x{WINDOW} window")
    c = x.shape[-3]
    x, y = x.reshape(-1, c, *x.shape[-2:]), y.reshape(-1, c, *y.shape[-2:])
    w = gaussian_window().expand(c, 1, WINDOW, WINDOW)

    def blur(t):
        return F.conv2d(t, w, groups=c)

    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x ** 2
    syy = blur(y * y) - mu_y ** 2
    sxy = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return (num / den).mean().item()


@dataclass
class MetricReport:
    names: list = field(default_factory=list)
    psnr_db: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def add(self, name: str, pred, target):
        self.names.append(name)
        self.psnr_db.append(psnr(pred, target))
        self.ssim.append(ssim(pred, target))

    @property
    def mean_psnr(self) -> float:
        # summed in list order so results do not depend on evaluation order
        return math.fsum(self.psnr_db) / len(self.psnr_db) if self.psnr_db else math.nan

    @property
    def mean_ssim(self) -> float:
        return math.fsum(self.ssim) / len(self.ssim) if self.ssim else math.nan
