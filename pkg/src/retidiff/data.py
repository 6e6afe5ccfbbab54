"""Synthetic paired corpora, PNG I/O and batch sampling.

Images on disk are 8-bit RGB PNGs. In memory they are float tensors in
``[0, 1]`` shaped ``(3, H, W)``; generation helpers work on ``(H, W, 3)``
numpy arrays.
"""

import json
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import DegradationSpec

DATA_ROOT_ENV = "RETIDIFF_DATA_ROOT"

TOY_DEGRADATION = DegradationSpec(gamma=(1.2, 2.0), scale=(0.4, 0.7), noise_sigma=(0.0, 0.005))


def default_data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


def quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def load_image(path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(img, path) -> None:
    if torch.is_tensor(img):
        img = img.detach().cpu().permute(1, 2, 0).numpy()
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def synth_clean(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """A smooth, colourful scene: gradient background, a few shapes, mild texture."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    c0, cx, cy = rng.uniform(0.3, 0.8, 3), rng.uniform(-0.3, 0.3, 3), rng.uniform(-0.3, 0.3, 3)
    img = c0 + cx * xx[..., None] + cy * yy[..., None]
    for _ in range(rng.integers(2, 5)):
        colour = rng.uniform(0.2, 0.95, 3)
        mx, my = rng.uniform(0.15, 0.85, 2)
        rx, ry = rng.uniform(0.08, 0.3, 2)
        if rng.random() < 0.5:
            mask = ((xx - mx) / rx) ** 2 + ((yy - my) / ry) ** 2 <= 1.0
        else:
            mask = (np.abs(xx - mx) <= rx) & (np.abs(yy - my) <= ry)
        img[mask] = colour
    freq, phase = rng.uniform(2, 6), rng.uniform(0, 2 * np.pi)
    img = img + 0.03 * np.sin(2 * np.pi * freq * (xx + yy) + phase)[..., None]
    return np.clip(img, 0.2, 0.95)


def synth_degrade(gt: np.ndarray, spec: DegradationSpec, seed: int):
    """Darken and corrupt ``gt``: ``clamp(gt**gamma * scale + noise, 0, 1)``.

    Returns ``(lq, record)`` where ``record`` holds the sampled parameters.
    """
    rng = np.random.default_rng(seed)
    gamma = float(rng.uniform(*spec.gamma))
    scale = float(rng.uniform(*spec.scale))
    sigma = float(rng.uniform(*spec.noise_sigma))
    noise = rng.normal(0.0, sigma, gt.shape) if sigma > 0 else 0.0
    lq = np.clip(np.power(gt, gamma) * scale + noise, 0.0, 1.0)
    return lq, {"seed": seed, "gamma": gamma, "scale": scale, "noise_sigma": sigma}


def make_pairs(n: int, size: int = 64, spec: DegradationSpec = TOY_DEGRADATION, seed: int = 0):
    """``n`` quantized (lq, gt) tensor pairs plus their degradation records."""
    rng = np.random.default_rng(seed)
    lqs, gts, records = [], [], []
    for i in range(n):
        gt = quantize(synth_clean(rng, size))
        lq, rec = synth_degrade(gt, spec, seed=int(rng.integers(2**31)))
        rec["index"] = i
        lqs.append(torch.from_numpy(quantize(lq)).float().permute(2, 0, 1).contiguous())
        gts.append(torch.from_numpy(gt).float().permute(2, 0, 1).contiguous())
        records.append(rec)
    return torch.stack(lqs), torch.stack(gts), records


def write_corpus(root, n: int, size: int = 64, spec: DegradationSpec = TOY_DEGRADATION, seed: int = 0) -> Path:
    """Write ``root/lq/*.png``, ``root/gt/*.png`` and ``root/records.json``."""
    root = Path(root)
    lq, gt, records = make_pairs(n, size, spec, seed)
    for i in range(n):
        save_image(lq[i], root / "lq" / f"{i:04d}.png")
        save_image(gt[i], root / "gt" / f"{i:04d}.png")
    meta = {"spec": asdict(spec), "seed": seed, "size": size, "records": records}
    (root / "records.json").write_text(json.dumps(meta, indent=2))
    return root


def list_images(folder) -> list[Path]:
    return sorted(p for p in Path(folder).iterdir() if p.suffix.lower() == ".png")


def load_corpus(root):
    """Load a paired corpus as stacked ``(N, 3, H, W)`` tensors ``(lq, gt, names)``."""
    root = Path(root)
    lq_files = list_images(root / "lq")
    if not lq_files:
        raise FileNotFoundError(f"no PNG images under {root / 'lq'}")
    names = [p.name for p in lq_files]
    lq = torch.stack([load_image(p) for p in lq_files])
    gt = torch.stack([load_image(root / "gt" / n) for n in names])
    return lq, gt, names


def augment_pair(lq: torch.Tensor, gt: torch.Tensor, code: int):
    """Apply one of the 8 dihedral transforms identically to both images."""
    k, flip = code % 4, code >= 4
    lq, gt = torch.rot90(lq, k, dims=(-2, -1)), torch.rot90(gt, k, dims=(-2, -1))
    if flip:
        lq, gt = lq.flip(-1), gt.flip(-1)
    return lq, gt


class PairSampler:
    """Deterministic random batches of (lq, gt) crops from in-memory tensors."""

    def __init__(self, lq: torch.Tensor, gt: torch.Tensor, batch_size: int, patch_size: int,
                 augment: bool = True, seed: int = 0):
        if len(lq) == 0:
            raise ValueError("empty dataset")
        if lq.shape != gt.shape:
            raise ValueError("lq and gt tensors must share shape")
        h, w = lq.shape[-2:]
        if patch_size > min(h, w):
            raise ValueError(f"patch size {patch_size} exceeds image size {h}x{w}")
        self.lq, self.gt = lq, gt
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.augment = augment
        self.generator = torch.Generator().manual_seed(seed)
        self._order: list[int] = []

    def _next_index(self) -> int:
        if not self._order:
            self._order = torch.randperm(len(self.lq), generator=self.generator).tolist()
        return self._order.pop()

    def __next__(self):
        h, w = self.lq.shape[-2:]
        p = self.patch_size
        lqs, gts = [], []
        for _ in range(self.batch_size):
            i = self._next_index()
            y = int(torch.randint(0, h - p + 1, (1,), generator=self.generator))
            x = int(torch.randint(0, w - p + 1, (1,), generator=self.generator))
            a, b = self.lq[i, :, y:y + p, x:x + p], self.gt[i, :, y:y + p, x:x + p]
            if self.augment:
                a, b = augment_pair(a, b, int(torch.randint(0, 8, (1,), generator=self.generator)))
            lqs.append(a)
            gts.append(b)
        return torch.stack(lqs), torch.stack(gts)

    def __iter__(self):
        return self

    def state_dict(self):
        return {"generator": self.generator.get_state(), "order": list(self._order)}

    def load_state_dict(self, state):
        self.generator.set_state(state["generator"])
        self._order = list(state["order"])
