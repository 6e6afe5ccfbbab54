"""Model/training configuration, named profiles and ablation presets.

Config files are YAML mappings with optional ``model`` and ``train``
sections. Resolution order (later wins): profile defaults, config file,
ablation preset, command-line overrides.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 64, 128)
    blocks: tuple = (1, 1, 1, 1)
    heads: tuple = (1, 2, 4, 8)
    prior_channels: int = 64
    expansion: float = 2.0
    rpe_depth: int = 3
    aux_hidden: int | None = None
    scale_mode: str = "head"
    T: int = 4
    beta_start: float = 0.1
    beta_end: float = 0.99
    final_step_noise: bool = False
    truncate_grad: bool = False
    use_rldm: bool = True
    use_rgmca: bool = True
    use_dfa: bool = True
    use_aux: bool = True


@dataclass
class TrainConfig:
    phase: int = 1
    iterations: int = 2000
    lr_start: float = 2e-4
    lr_end: float = 1e-6
    betas: tuple = (0.9, 0.999)
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    patch_size: int = 64
    batch_size: int = 4
    augment: bool = True
    joint: bool = True
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.phase not in (1, 2):
            raise ValueError(f"phase must be 1 or 2, got {self.phase}")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lr_end > self.lr_start:
            raise ValueError("lr_end must not exceed lr_start")


PROFILES = {
    "desk": {"model": {}, "train": {}},
    "paper": {
        "model": {
            "channels": (64, 128, 256, 512),
            "blocks": (3, 3, 3, 3),
            "heads": (1, 2, 4, 8),
            "expansion": 2.66,
            "final_step_noise": True,
        },
        "train": {"iterations": 300_000, "patch_size": 128, "batch_size": 8},
    },
}

ABLATIONS = {
    "full": {"model": {}, "train": {}},
    "w/o RLDM": {"model": {"use_rldm": False}, "train": {}},
    "w/o RG-MCA": {"model": {"use_rgmca": False}, "train": {}},
    "w/o DFA": {"model": {"use_dfa": False}, "train": {}},
    "w/o D_a": {"model": {"use_aux": False}, "train": {}},
    "w/o joint": {"model": {}, "train": {"joint": False}},
}


def _coerce(cls, values: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for k, v in values.items():
        k = k.replace("-", "_")
        if k not in names:
            raise KeyError(f"unknown {cls.__name__} key {k!r}")
        if isinstance(v, list):
            v = tuple(v)
        elif isinstance(v, str) and isinstance(names[k].default, float):
            v = float(v)  # YAML 1.1 leaves "1e-3" as a string
        out[k] = v
    return out


def build_config(profile: str = "desk", file: str | Path | None = None, ablation: str | None = None,
                 model_overrides: dict | None = None, train_overrides: dict | None = None,
                 base_model: dict | None = None):
    """Resolve ``(ModelConfig, TrainConfig)``.

    ``base_model`` replaces the profile's model section; phase II uses it to
    start from the model config stored in the phase-I checkpoint.
    """
    if profile not in PROFILES:
        raise KeyError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    model = dict(PROFILES[profile]["model"] if base_model is None else base_model)
    train = dict(PROFILES[profile]["train"])
    layers = []
    if file is not None:
        data = yaml.safe_load(Path(file).read_text()) or {}
        layers.append(data)
    if ablation is not None:
        if ablation not in ABLATIONS:
            raise KeyError(f"unknown ablation {ablation!r}; choose from {sorted(ABLATIONS)}")
        layers.append(ABLATIONS[ablation])
    layers.append({"model": model_overrides or {}, "train": train_overrides or {}})
    for layer in layers:
        model.update(layer.get("model") or {})
        train.update(layer.get("train") or {})
    return ModelConfig(**_coerce(ModelConfig, model)), TrainConfig(**_coerce(TrainConfig, train))


def to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**_coerce(ModelConfig, d))


def train_config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(**_coerce(TrainConfig, d))


def config_hash(*cfgs) -> str:
    blob = json.dumps([to_dict(c) for c in cfgs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_sidecar(path: Path, **sections) -> Path:
    """Dump a fully resolved config next to an artifact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = {k: (to_dict(v) if dataclasses.is_dataclass(v) else v) for k, v in sections.items()}
    path.write_text(yaml.safe_dump(out, sort_keys=True))
    return path


@dataclass
class DegradationSpec:
    """Ranges sampled per image: ``lq = clamp(gt**gamma * scale + noise, 0, 1)``."""

    gamma: tuple = (1.5, 2.5)
    scale: tuple = (0.3, 0.7)
    noise_sigma: tuple = (0.0, 0.02)

    def __post_init__(self):
        for name in ("gamma", "scale", "noise_sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"empty range for {name}: ({lo}, {hi})")
        if self.gamma[0] <= 0 or self.scale[0] < 0 or self.noise_sigma[0] < 0:
            raise ValueError("gamma must be positive; scale and noise_sigma nonnegative")
