"""Latent diffusion over compact prior vectors.

A DDPM with a short linear schedule whose state is a prior vector rather
than an image. ``RLDM`` bundles one conditional denoiser and the sampling
loop; the full model instantiates two of them (reflectance and illumination)
with independent weights.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tensors indexed by ``t - 1`` for ``t = 1..T`` (float64)."""

    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor

    @property
    def T(self) -> int:
        return self.beta.numel()

    def table(self):
        return [(t + 1, self.beta[t].item(), self.alpha[t].item(), self.alpha_bar[t].item()) for t in range(self.T)]


def make_schedule(T: int = 4, beta_start: float = 0.1, beta_end: float = 0.99) -> NoiseSchedule:
    """Linear beta schedule, endpoints inclusive."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        beta = torch.tensor([beta_start], dtype=torch.float64)
    else:
        beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, torch.cumprod(alpha, dim=0))


def _check_t(t: int, schedule: NoiseSchedule):
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step {t} outside [1, {schedule.T}]")


def diffuse_forward(z0: torch.Tensor, t: int, schedule: NoiseSchedule, noise: torch.Tensor) -> torch.Tensor:
    """Closed-form marginal ``q(z_t | z_0)`` evaluated with the given noise."""
    _check_t(t, schedule)
    if noise.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(z0.shape)}")
    ab = schedule.alpha_bar[t - 1].item()
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise


def timestep_embedding(t: torch.Tensor, dim: int = 32, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class Denoiser(nn.Module):
    """Noise predictor ``eps(z_t, v, t)`` built on a 3-layer MLP over ``[z_t, v, emb(t)]``.

    Without ``alpha_bar`` the MLP output is the noise estimate. With it, the MLP
    estimates the clean latent ``f`` and the noise follows from the forward
    marginal, ``eps = (z_t - sqrt(alpha_bar_t) * f) / sqrt(1 - alpha_bar_t)``, so
    the ``t = 1`` reverse step returns ``f`` exactly. The last layer starts at
    zero: an untrained model predicts a zero clean latent.
    """

    def __init__(self, latent_len: int, cond_len: int | None = None, embed_len: int = 32, width_mult: int = 4,
                 alpha_bar: torch.Tensor | None = None):
        super().__init__()
        cond_len = latent_len if cond_len is None else cond_len
        hidden = width_mult * latent_len
        self.latent_len = latent_len
        self.cond_len = cond_len
        self.embed_len = embed_len
        self.net = nn.Sequential(
            nn.Linear(latent_len + cond_len + embed_len, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, latent_len),
        )
        if alpha_bar is None:
            self.skip = None  # alpha_bar table when estimating the clean latent
        else:
            self.register_buffer("skip", alpha_bar.clone(), persistent=False)
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def forward(self, zt: torch.Tensor, v: torch.Tensor, t) -> torch.Tensor:
        if zt.shape[-1] != self.latent_len or v.shape[-1] != self.cond_len:
            raise ValueError("latent/condition length mismatch")
        if not torch.is_tensor(t):
            t = torch.full((zt.shape[0],), t)
        emb = timestep_embedding(t, self.embed_len).to(zt)
        out = self.net(torch.cat([zt, v, emb], dim=-1))
        if self.skip is None:
            return out
        ab = self.skip.to(zt)[t.long() - 1, None]
        return (zt - ab.sqrt() * out) / (1.0 - ab).sqrt()


def denoise_step(zt, v, t: int, schedule: NoiseSchedule, eps_model, injected_noise=None):
    """One reverse step ``z_t -> z_{t-1}`` with posterior std ``sqrt(1 - alpha_t)``.

    ``eps_model`` is any callable ``(z_t, v, t) -> eps``. ``injected_noise``
    of ``None`` means no noise is added.
    """
    _check_t(t, schedule)
    a = schedule.alpha[t - 1].item()
    ab = schedule.alpha_bar[t - 1].item()
    eps = eps_model(zt, v, t)
    if eps.shape != zt.shape:
        raise ValueError("noise prediction has the wrong shape")
    z = (zt - (1.0 - a) / math.sqrt(1.0 - ab) * eps) / math.sqrt(a)
    if injected_noise is not None:
        if injected_noise.shape != zt.shape:
            raise ValueError("injected noise has the wrong shape")
        z = z + math.sqrt(1.0 - a) * injected_noise
    return z


def sample_prior(v, schedule: NoiseSchedule, eps_model, generator: torch.Generator | None = None,
                 final_step_noise: bool = True, truncate_grad: bool = False, latent_len: int | None = None):
    """Run the full ``T``-step reverse chain from ``z_T ~ N(0, I)``.

    With ``final_step_noise=False`` the ``t = 1`` step adds no noise.
    ``truncate_grad`` detaches the state entering the last step, so only that
    step's noise prediction receives gradient.
    """
    n = latent_len or getattr(eps_model, "latent_len", v.shape[-1])
    shape = (v.shape[0], n)
    z = torch.randn(shape, generator=generator, dtype=v.dtype, device=v.device)
    for t in range(schedule.T, 0, -1):
        if truncate_grad and t == 1:
            z = z.detach()
        noise = None
        if t > 1 or final_step_noise:
            noise = torch.randn(shape, generator=generator, dtype=v.dtype, device=v.device)
        z = denoise_step(z, v, t, schedule, eps_model, noise)
    return z


class RLDM(nn.Module):
    """One branch of the Siamese latent diffusion model."""

    def __init__(self, latent_len: int, schedule: NoiseSchedule, final_step_noise: bool = True,
                 truncate_grad: bool = False):
        super().__init__()
        self.denoiser = Denoiser(latent_len, alpha_bar=schedule.alpha_bar)
        self.schedule = schedule
        self.final_step_noise = final_step_noise
        self.truncate_grad = truncate_grad

    def forward(self, v: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        return sample_prior(v, self.schedule, self.denoiser, generator,
                            final_step_noise=self.final_step_noise, truncate_grad=self.truncate_grad)
