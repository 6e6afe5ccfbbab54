"""Retinex-guided transformer (RGformer).

Every block runs a Retinex-guided multi-head cross attention (``RGMCA``)
followed by a dynamic feature aggregation (``DFA``) step, both modulated by
the Retinex priors. Blocks are stacked into a 4-level U-shaped
encoder-decoder. An auxiliary decoder maps attention outputs back to
reflectance/illumination maps for the Retinex loss.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .priors import RetinexPriors, pixel_shuffle, pixel_unshuffle
from .retinex import RetinexPair


class LayerNorm2d(nn.Module):
    """Layer norm over channels at every spatial position."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class Modulation(nn.Module):
    """``Li1(z) * x + Li2(z)`` with per-channel scale and shift."""

    def __init__(self, prior_len: int, channels: int):
        super().__init__()
        self.scale = nn.Linear(prior_len, channels)
        self.shift = nn.Linear(prior_len, channels)
        with torch.no_grad():
            self.scale.bias.add_(1.0)

    def forward(self, x, z):
        return self.scale(z)[:, :, None, None] * x + self.shift(z)[:, :, None, None]


class PointDepthConv(nn.Sequential):
    """1x1 point-wise conv followed by a 3x3 depth-wise conv."""

    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 1, bias=False),
            nn.Conv2d(cout, cout, 3, padding=1, groups=cout, bias=False),
        )


class RGMCA(nn.Module):
    """Retinex-guided multi-head cross attention over spatial tokens.

    The input is split 3:1 along channels. The larger part is modulated by the
    reflectance prior and becomes the query; the smaller part is modulated by
    the illumination prior and provides key and value. The attended result is
    projected back to ``channels`` and added to the input.
    """

    def __init__(
        self,
        channels: int,
        heads: int,
        prior_channels: int,
        attn_dim: int | None = None,
        scale_mode: str = "head",
    ):
        super().__init__()
        if channels % 4:
            raise ValueError(f"channel count {channels} must be divisible by 4")
        self.channels = channels
        self.split = 3 * channels // 4
        self.heads = heads
        self.attn_dim = attn_dim or channels // 4
        if self.attn_dim % heads:
            raise ValueError(f"attention width {self.attn_dim} not divisible by {heads} heads")
        if scale_mode == "head":
            self.scale = 1.0 / math.sqrt(self.attn_dim // heads)
        elif scale_mode == "channels":
            self.scale = 1.0 / math.sqrt(channels)
        else:
            raise ValueError(f"unknown scale_mode {scale_mode!r}")
        c1, c2 = self.split, channels - self.split
        self.norm_r = LayerNorm2d(c1)
        self.norm_l = LayerNorm2d(c2)
        self.mod_r = Modulation(3 * prior_channels, c1)
        self.mod_l = Modulation(prior_channels, c2)
        self.to_q = PointDepthConv(c1, self.attn_dim)
        self.to_k = PointDepthConv(c2, self.attn_dim)
        self.to_v = PointDepthConv(c2, self.attn_dim)
        self.project_out = nn.Conv2d(self.attn_dim, channels, 1, bias=False)

    def _check(self, f, priors):
        if f.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {f.shape[1]}")
        if priors.reflectance.shape[-1] != self.mod_r.scale.in_features or (
            priors.illumination.shape[-1] != self.mod_l.scale.in_features
        ):
            raise ValueError("prior length does not match block configuration")

    def qkv(self, f: torch.Tensor, priors: RetinexPriors):
        self._check(f, priors)
        f1, f2 = f[:, : self.split], f[:, self.split :]
        f_r = self.mod_r(self.norm_r(f1), priors.reflectance)
        f_l = self.mod_l(self.norm_l(f2), priors.illumination)
        q, k, v = self.to_q(f_r), self.to_k(f_l), self.to_v(f_l)
        return [rearrange(t, "b (h c) x y -> b h (x y) c", h=self.heads) for t in (q, k, v)]

    def attention_map(self, f: torch.Tensor, priors: RetinexPriors) -> torch.Tensor:
        """Row-stochastic attention weights, shape ``(B, heads, HW, HW)``."""
        q, k, _ = self.qkv(f, priors)
        return torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)

    def forward(self, f: torch.Tensor, priors: RetinexPriors) -> torch.Tensor:
        q, k, v = self.qkv(f, priors)
        out = F.scaled_dot_product_attention(q, k, v, scale=self.scale)
        out = rearrange(out, "b h (x y) c -> b (h c) x y", x=f.shape[-2], y=f.shape[-1])
        return f + self.project_out(out)


class DFA(nn.Module):
    """Prior-modulated, GELU-gated local feature aggregation."""

    def __init__(self, channels: int, prior_channels: int, expansion: float = 2.0):
        super().__init__()
        hidden = int(channels * expansion)
        self.channels = channels
        self.norm = LayerNorm2d(channels)
        self.mod = Modulation(4 * prior_channels, channels)
        self.w1 = PointDepthConv(channels, hidden)
        self.w2 = PointDepthConv(channels, hidden)
        self.project_out = nn.Conv2d(hidden, channels, 1, bias=False)

    def forward(self, f: torch.Tensor, priors: RetinexPriors) -> torch.Tensor:
        if f.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {f.shape[1]}")
        z = priors.cat()
        if z.shape[-1] != self.mod.scale.in_features:
            raise ValueError("prior length does not match block configuration")
        g = self.mod(self.norm(f), z)
        return f + self.project_out(F.gelu(self.w1(g)) * self.w2(g))


class RGBlock(nn.Module):
    """RG-MCA then DFA. Returns the block output and the RG-MCA output."""

    def __init__(self, channels, heads, prior_channels, expansion=2.0, use_rgmca=True, use_dfa=True,
                 scale_mode="head"):
        super().__init__()
        self.attn = RGMCA(channels, heads, prior_channels, scale_mode=scale_mode) if use_rgmca else None
        self.dfa = DFA(channels, prior_channels, expansion) if use_dfa else None

    def forward(self, f, priors):
        tap = self.attn(f, priors) if self.attn is not None else f
        out = self.dfa(tap, priors) if self.dfa is not None else tap
        return out, tap


class Downsample(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.proj = nn.Conv2d(4 * cin, cout, 1, bias=False)

    def forward(self, x):
        return self.proj(pixel_unshuffle(x, 2))


class Upsample(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.proj = nn.Conv2d(cin, 4 * cout, 1, bias=False)

    def forward(self, x):
        return pixel_shuffle(self.proj(x), 2)


class RGformer(nn.Module):
    def __init__(
        self,
        channels=(64, 128, 256, 512),
        blocks=(3, 3, 3, 3),
        heads=(1, 2, 4, 8),
        prior_channels: int = 64,
        expansion: float = 2.0,
        use_rgmca: bool = True,
        use_dfa: bool = True,
        scale_mode: str = "head",
    ):
        super().__init__()
        if not len(channels) == len(blocks) == len(heads):
            raise ValueError("channels, blocks and heads need one entry per level")
        self.levels = len(channels)
        self.multiple = 2 ** (self.levels - 1)

        def stage(i):
            return nn.ModuleList(
                RGBlock(channels[i], heads[i], prior_channels, expansion, use_rgmca, use_dfa, scale_mode)
                for _ in range(blocks[i])
            )

        self.embed = nn.Conv2d(3, channels[0], 3, padding=1)
        self.encoders = nn.ModuleList(stage(i) for i in range(self.levels - 1))
        self.downs = nn.ModuleList(Downsample(channels[i], channels[i + 1]) for i in range(self.levels - 1))
        self.latent = stage(self.levels - 1)
        self.ups = nn.ModuleList(Upsample(channels[i + 1], channels[i]) for i in range(self.levels - 1))
        self.fuse = nn.ModuleList(nn.Conv2d(2 * channels[i], channels[i], 1, bias=False)
                                  for i in range(self.levels - 1))
        self.decoders = nn.ModuleList(stage(i) for i in range(self.levels - 1))
        self.output = nn.Conv2d(channels[0], 3, 3, padding=1)

    def forward(self, lq: torch.Tensor, priors: RetinexPriors):
        """Restore ``lq`` (B, 3, H, W); returns ``(hq, (first_tap, last_tap))``.

        The taps are the RG-MCA outputs of the first encoder block and of the
        last decoder block.
        """
        h, w = lq.shape[-2:]
        if h % self.multiple or w % self.multiple:
            raise ValueError(f"image dims {h}x{w} must be divisible by {self.multiple}")
        taps = []
        x = self.embed(lq)
        skips = []
        for blocks, down in zip(self.encoders, self.downs):
            for blk in blocks:
                x, tap = blk(x, priors)
                taps.append(tap)
            skips.append(x)
            x = down(x)
        for blk in self.latent:
            x, tap = blk(x, priors)
            taps.append(tap)
        for i in reversed(range(self.levels - 1)):
            x = self.fuse[i](torch.cat([self.ups[i](x), skips[i]], dim=1))
            for blk in self.decoders[i]:
                x, tap = blk(x, priors)
                taps.append(tap)
        hq = (lq + self.output(x)).clamp(0.0, 1.0)
        return hq, (taps[0], taps[-1])


class AuxDecoder(nn.Module):
    """Three conv blocks and two sigmoid heads: tap -> (reflectance, illumination)."""

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or channels
        self.channels = channels
        self.body = nn.Sequential(
            nn.Conv2d(channels, hidden, 3, padding=1), nn.GELU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.GELU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.GELU(),
        )
        self.to_reflectance = nn.Conv2d(hidden, 3, 1)
        self.to_illumination = nn.Conv2d(hidden, 1, 1)

    def forward(self, tap: torch.Tensor) -> RetinexPair:
        if tap.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {tap.shape[1]}")
        h = self.body(tap)
        return RetinexPair(torch.sigmoid(self.to_reflectance(h)), torch.sigmoid(self.to_illumination(h)))
