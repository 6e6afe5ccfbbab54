import csv
import json

import numpy as np
import pytest
import torch
import yaml

from retidiff.cli import main
from retidiff.config import DegradationSpec, TrainConfig
from retidiff.data import DATA_ROOT_ENV, load_corpus, load_image, make_pairs, synth_degrade
from retidiff.infer import infer, pad_to_multiple
from retidiff.model import RetiDiff

from test_training import TINY

TINY_SETS = ["--set", "model.channels=[8,16,32,64]", "--set", "model.prior_channels=4"]


def test_synth_degrade_identity_spec():
    gt = np.random.default_rng(0).uniform(0, 1, (8, 8, 3))
    lq, rec = synth_degrade(gt, DegradationSpec((1, 1), (1, 1), (0, 0)), seed=1)
    assert np.array_equal(lq, gt)
    assert rec == {"seed": 1, "gamma": 1.0, "scale": 1.0, "noise_sigma": 0.0}


def test_synth_degrade_gamma2_half():
    lq, _ = synth_degrade(np.full((4, 4, 3), 0.8), DegradationSpec((2, 2), (0.5, 0.5), (0, 0)), seed=0)
    assert np.allclose(lq, 0.32, atol=1e-12)


def test_synth_degrade_stays_in_range():
    gt = np.random.default_rng(0).uniform(0, 1, (16, 16, 3))
    lq, rec = synth_degrade(gt, DegradationSpec((0.5, 1.0), (1.0, 1.0), (0.5, 0.5)), seed=2)
    assert lq.min() >= 0.0 and lq.max() <= 1.0 and rec["noise_sigma"] == 0.5


def test_degradation_spec_rejects_empty_ranges():
    with pytest.raises(ValueError):
        DegradationSpec(gamma=(2.0, 1.0))


def test_make_pairs_deterministic():
    a, b = make_pairs(2, 16, seed=4), make_pairs(2, 16, seed=4)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1]) and a[2] == b[2]
    assert not torch.equal(a[0], make_pairs(2, 16, seed=5)[0])


def test_pad_to_multiple():
    x = torch.rand(1, 3, 13, 20)
    y = pad_to_multiple(x, 8)
    assert y.shape == (1, 3, 16, 24)
    assert torch.equal(y[..., :13, :20], x)
    assert torch.equal(y[..., 13, :20], x[..., 11, :])  # reflection about the last row
    with pytest.raises(ValueError):
        pad_to_multiple(torch.rand(1, 3, 3, 8), 8)


@pytest.mark.parametrize("size", [(64, 64), (21, 30)])
def test_infer_shape_range_determinism(size):
    model = RetiDiff(TINY)
    lq = torch.rand(3, *size)
    a, b = infer(model, lq, seed=3), infer(model, lq, seed=3)
    assert a.shape == lq.shape
    assert a.min() >= 0 and a.max() <= 1
    assert torch.equal(a, b)


# CLI

def test_inspect_schedule(capsys):
    assert main(["inspect-schedule", "--T", "4", "--beta-start", "0.1", "--beta-end", "0.99"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 5
    assert out[-1].split()[-1] == "0.0016652"


def test_unknown_command_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_phase2_without_checkpoint_fails(tmp_path, capsys):
    code = main(["train", "--phase", "2", "--out", str(tmp_path / "o"), "--data", str(tmp_path)])
    assert code != 0
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1
    assert "phase1" in json.loads(err)["error"]


def test_infer_missing_checkpoint(tmp_path, capsys):
    code = main(["infer", "--checkpoint", str(tmp_path / "none"), "--input", str(tmp_path), "--out",
                 str(tmp_path / "o")])
    assert code == 1
    assert "checkpoint" in json.loads(capsys.readouterr().err)["error"]


def test_eval_identical_corpus(tmp_path, capsys):
    assert main(["make-data", "--out", str(tmp_path / "d"), "--n", "2", "--size", "16"]) == 0
    d = tmp_path / "d"
    assert main(["eval", "--pred", str(d / "gt"), "--gt", str(d / "gt"), "--csv", str(tmp_path / "m.csv")]) == 0
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["image", "psnr_db", "ssim"]
    assert [r[0] for r in rows[1:]] == ["0000.png", "0001.png", "mean"]
    for r in rows[1:]:
        assert r[1] == "inf" and float(r[2]) == pytest.approx(1.0, abs=1e-9)
    assert "inf" in capsys.readouterr().out


def test_make_data_uses_env_root_and_sidecar_reproduces(tmp_path, monkeypatch):
    monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path / "root"))
    assert main(["make-data", "--n", "2", "--size", "16", "--seed", "7", "--gamma", "1.5", "1.6"]) == 0
    first = tmp_path / "root" / "toy"
    side = yaml.safe_load((first / "resolved_config.yaml").read_text())
    assert side["data"]["seed"] == 7 and side["data"]["spec"]["gamma"] == [1.5, 1.6]
    assert main(["make-data", "--out", str(tmp_path / "again"), "--config", str(first / "resolved_config.yaml")]) == 0
    for sub in ("lq", "gt"):
        for p in sorted((first / sub).iterdir()):
            assert p.read_bytes() == (tmp_path / "again" / sub / p.name).read_bytes()


def test_decompose_command(tmp_path):
    main(["make-data", "--out", str(tmp_path / "d"), "--n", "1", "--size", "16"])
    assert main(["decompose", "--input", str(tmp_path / "d" / "lq"), "--out", str(tmp_path / "rl")]) == 0
    r, l = load_image(tmp_path / "rl" / "0000_R.png"), load_image(tmp_path / "rl" / "0000_L.png")
    lq = load_image(tmp_path / "d" / "lq" / "0000.png")
    assert torch.allclose(r * l[:1], lq, atol=3 / 255)
    assert (tmp_path / "rl" / "resolved_config.yaml").is_file()


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["make-data", "--out", str(data), "--n", "2", "--size", "16"]) == 0
    common = ["--data", str(data), "--iterations", "2", "--batch-size", "1", "--patch-size", "16", *TINY_SETS]
    assert main(["train", "--phase", "1", "--out", str(root / "p1"), *common]) == 0
    assert main(["train", "--phase", "2", "--out", str(root / "p2"), "--phase1", str(root / "p1"),
                 "--iterations", "2", "--data", str(data), "--batch-size", "1", "--patch-size", "16"]) == 0
    assert main(["infer", "--checkpoint", str(root / "p2"), "--input", str(data / "lq"), "--out",
                 str(root / "pred"), "--seed", "1"]) == 0
    return root


def test_cli_pipeline_artifacts(cli_run, capsys):
    root = cli_run
    side = yaml.safe_load((root / "p2" / "resolved_config.yaml").read_text())
    # phase 2 inherits the phase-1 model config
    assert side["model"]["channels"] == [8, 16, 32, 64] and side["train"]["phase"] == 2
    preds = sorted((root / "pred").glob("*.png"))
    assert len(preds) == 2 and load_image(preds[0]).shape == (3, 16, 16)
    assert main(["eval", "--pred", str(root / "pred"), "--gt", str(root / "data" / "gt")]) == 0
    assert "mean" in capsys.readouterr().out


def test_cli_train_sidecar_reproduces_bit_exact(cli_run):
    root = cli_run
    side = root / "p1" / "resolved_config.yaml"
    assert main(["train", "--phase", "1", "--out", str(root / "p1b"), "--data", str(root / "data"),
                 "--config", str(side)]) == 0
    assert (root / "p1" / "state.pt").is_file()
    m1 = json.loads((root / "p1" / "manifest.json").read_text())
    m2 = json.loads((root / "p1b" / "manifest.json").read_text())
    assert m1["param_hash"] == m2["param_hash"] and m1["config_hash"] == m2["config_hash"]


def test_cli_infer_reproducible(cli_run):
    root = cli_run
    assert main(["infer", "--checkpoint", str(root / "p2"), "--input", str(root / "data" / "lq"), "--out",
                 str(root / "pred2"), "--seed", "1"]) == 0
    for p in sorted((root / "pred").glob("*.png")):
        assert p.read_bytes() == (root / "pred2" / p.name).read_bytes()


def test_load_corpus_roundtrip(cli_run):
    lq, gt, names = load_corpus(cli_run / "data")
    ref_lq, ref_gt, _ = make_pairs(2, 16)
    assert names == ["0000.png", "0001.png"]
    assert torch.allclose(lq, ref_lq, atol=1e-6) and torch.allclose(gt, ref_gt, atol=1e-6)


def test_set_parsing():
    from retidiff.cli import _parse_sets
    model, train = _parse_sets(["train.lr_start=1e-3", "model.channels=[8,16,32,64]", "train.augment=false"])
    assert train == {"lr_start": 1e-3, "augment": False}
    assert model == {"channels": [8, 16, 32, 64]}
    with pytest.raises(Exception):
        _parse_sets(["lr_start=1"])
