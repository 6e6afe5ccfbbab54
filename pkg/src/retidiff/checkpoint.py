"""Checkpoint directories.

Layout::

    <dir>/manifest.json   plain-text JSON: format, semver, phase, iteration,
                          resolved configs, config hash, parameter hash,
                          pointers to the files below
    <dir>/state.pt        torch archive: model / optimizer state dicts,
                          global and sampler RNG states
    <dir>/losses.csv      one row per logged iteration

Readers accept any ``1.x`` version.
"""

import csv
import json
from pathlib import Path

import torch

from .config import ModelConfig, TrainConfig, config_hash, model_config_from_dict, to_dict, train_config_from_dict
from .model import RetiDiff, state_hash

FORMAT = "retidiff-checkpoint"
VERSION = "1.0.0"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model: RetiDiff, train_cfg: TrainConfig, iteration: int, history: list[dict],
                    optimizer=None, extra_state: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = {
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "torch_rng": torch.get_rng_state(),
        **(extra_state or {}),
    }
    torch.save(state, path / "state.pt")
    fields = sorted({k for row in history for k in row}, key=lambda k: (k != "iteration", k))
    with open(path / "losses.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields or ["iteration"])
        writer.writeheader()
        writer.writerows(history)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "phase": train_cfg.phase,
        "iteration": iteration,
        "model_config": to_dict(model.cfg),
        "train_config": to_dict(train_cfg),
        "config_hash": config_hash(model.cfg, train_cfg),
        "param_hash": state_hash(model),
        "tensors": "state.pt",
        "loss_history": "losses.csv",
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise CheckpointError(f"no checkpoint manifest at {mf}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest {mf}: {exc}") from None
    if manifest.get("format") != FORMAT or not str(manifest.get("version", "")).startswith("1."):
        raise CheckpointError(f"unsupported checkpoint format in {mf}")
    return manifest


def load_checkpoint(path, model_cfg: ModelConfig | None = None):
    """Rebuild the model from a checkpoint.

    Returns ``(model, manifest, state)``. ``model_cfg`` overrides the stored
    model config (used to switch ablations between phases); tensors are then
    loaded for the matching subset of modules.
    """
    path = Path(path)
    manifest = read_manifest(path)
    try:
        state = torch.load(path / manifest["tensors"], map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read tensors from {path}: {exc}") from None
    cfg = model_cfg or model_config_from_dict(manifest["model_config"])
    model = RetiDiff(cfg)
    missing, unexpected = model.load_state_dict(state["model"], strict=False)
    if model_cfg is None and (missing or unexpected):
        raise CheckpointError(f"checkpoint tensors do not match its config: {missing[:3]} {unexpected[:3]}")
    return model, manifest, state


def stored_train_config(manifest: dict) -> TrainConfig:
    return train_config_from_dict(manifest["train_config"])
