"""The full restorer: prior extractors, RGformer, auxiliary decoder, RLDMs."""

import hashlib

import torch
import torch.nn as nn

from .config import ModelConfig
from .priors import RetinexPriorExtractor, RetinexPriors
from .retinex import RetinexPair
from .rgformer import AuxDecoder, RGformer
from .rldm import RLDM, make_schedule


class RetiDiff(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.prior_channels
        self.rpe = RetinexPriorExtractor(c, paired=True, depth=cfg.rpe_depth)
        self.rpe_cond = RetinexPriorExtractor(c, paired=False, depth=cfg.rpe_depth)
        self.rgformer = RGformer(cfg.channels, cfg.blocks, cfg.heads, c, cfg.expansion,
                                 cfg.use_rgmca, cfg.use_dfa, cfg.scale_mode)
        self.aux = AuxDecoder(cfg.channels[0], cfg.aux_hidden) if cfg.use_aux else None
        self.schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        if cfg.use_rldm:
            kw = dict(final_step_noise=cfg.final_step_noise, truncate_grad=cfg.truncate_grad)
            self.rldm_r = RLDM(3 * c, self.schedule, **kw)
            self.rldm_l = RLDM(c, self.schedule, **kw)
        else:
            self.rldm_r = self.rldm_l = None

    def encode(self, lq_pair: RetinexPair, gt_pair: RetinexPair) -> RetinexPriors:
        return self.rpe(lq_pair, gt_pair)

    def condition(self, lq_pair: RetinexPair) -> RetinexPriors:
        return self.rpe_cond(lq_pair)

    def sample_priors(self, cond: RetinexPriors, generator: torch.Generator | None = None) -> RetinexPriors:
        """Generate priors from condition vectors; without RLDM they pass through."""
        if self.rldm_r is None:
            return cond
        return RetinexPriors(self.rldm_r(cond.reflectance, generator), self.rldm_l(cond.illumination, generator))

    def random_priors(self, batch: int, generator: torch.Generator | None = None, dtype=torch.float32):
        c = self.cfg.prior_channels
        return RetinexPriors(torch.randn(batch, 3 * c, generator=generator, dtype=dtype),
                             torch.randn(batch, c, generator=generator, dtype=dtype))

    def restore(self, lq: torch.Tensor, priors: RetinexPriors):
        return self.rgformer(lq, priors)

    def aux_decode(self, taps):
        if self.aux is None:
            return None
        return self.aux(taps[0]), self.aux(taps[1])

    def restorer_parameters(self):
        mods = [self.rgformer] + ([self.aux] if self.aux is not None else [])
        return [p for m in mods for p in m.parameters()]

    def phase1_parameters(self):
        return list(self.rpe.parameters()) + self.restorer_parameters()

    def phase2_parameters(self, joint: bool = True):
        params = list(self.rpe.parameters()) + list(self.rpe_cond.parameters())
        if self.rldm_r is not None:
            params += list(self.rldm_r.parameters()) + list(self.rldm_l.parameters())
        if joint:
            params += self.restorer_parameters()
        return params


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def state_hash(module: nn.Module) -> str:
    """SHA-256 over parameter names, shapes and bytes in sorted key order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        t = t.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
