"""Command-line interface.

Subcommands: ``make-data``, ``decompose``, ``train``, ``infer``, ``eval`` and
``inspect-schedule``. Failures print one JSON line ``{"error": ..., "type": ...}``
on stderr and exit with status 1; usage errors exit with status 2.
"""

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import yaml

from . import __version__
from .checkpoint import load_checkpoint, read_manifest
from .config import ABLATIONS, PROFILES, DegradationSpec, build_config, write_sidecar
from .data import (TOY_DEGRADATION, default_data_root, list_images, load_corpus, load_image, save_image,
                   write_corpus)
from .infer import infer
from .metrics import MetricReport
from .retinex import decompose
from .rldm import make_schedule
from .training import train_phase1, train_phase2

SIDECAR = "resolved_config.yaml"


class CLIError(Exception):
    pass


def _parse_sets(items):
    """``model.key=value`` / ``train.key=value`` pairs with YAML-typed values."""
    model, train = {}, {}
    for item in items or []:
        key, sep, value = item.partition("=")
        section, _, name = key.partition(".")
        if not sep or section not in ("model", "train") or not name:
            raise CLIError(f"bad --set {item!r}; expected model.KEY=VALUE or train.KEY=VALUE")
        (model if section == "model" else train)[name] = _scalar(value)
    return model, train


def _scalar(text: str):
    value = yaml.safe_load(text)
    if isinstance(value, str):
        # YAML 1.1 reads exponent floats without a dot ("1e-3") as strings
        try:
            return float(value)
        except ValueError:
            pass
    return value


def _inputs(path: Path):
    if path.is_dir():
        files = list_images(path)
        if not files:
            raise CLIError(f"no PNG images in {path}")
        return files
    if not path.is_file():
        raise CLIError(f"input {path} does not exist")
    return [path]


def _load_section(file, name):
    if file is None:
        return {}
    return (yaml.safe_load(Path(file).read_text()) or {}).get(name) or {}


def cmd_make_data(args):
    run = _load_section(args.config, "data")
    spec_d = {k: tuple(v) for k, v in (run.get("spec") or {}).items()}
    spec = DegradationSpec(**{**TOY_DEGRADATION.__dict__, **spec_d})
    for name in ("gamma", "scale", "noise_sigma"):
        value = getattr(args, name)
        if value is not None:
            spec = DegradationSpec(**{**spec.__dict__, name: tuple(value)})
    n = args.n if args.n is not None else run.get("n", 8)
    size = args.size if args.size is not None else run.get("size", 64)
    seed = args.seed if args.seed is not None else run.get("seed", 0)
    out = Path(args.out or default_data_root() / "toy")
    write_corpus(out, n, size, spec, seed)
    write_sidecar(out / SIDECAR, data={"n": n, "size": size, "seed": seed,
                                       "spec": {k: list(v) for k, v in spec.__dict__.items()}})
    print(f"wrote {n} pairs to {out}")


def cmd_decompose(args):
    out = Path(args.out)
    for path in _inputs(Path(args.input)):
        r, l = decompose(load_image(path))
        save_image(r, out / f"{path.stem}_R.png")
        save_image(l.expand(3, -1, -1), out / f"{path.stem}_L.png")
    write_sidecar(out / SIDECAR, decompose={"input": str(args.input)})
    print(f"wrote reflectance/illumination maps to {out}")


def cmd_train(args):
    model_over, train_over = _parse_sets(args.set)
    for key in ("iterations", "batch_size", "patch_size", "seed"):
        if getattr(args, key) is not None:
            train_over[key] = getattr(args, key)
    train_over["phase"] = args.phase
    base_model = None
    if args.phase == 2:
        if not args.phase1:
            raise CLIError("train --phase 2 requires --phase1 <phase-1 checkpoint dir>")
        manifest = read_manifest(args.phase1)
        if manifest["phase"] != 1:
            raise CLIError(f"{args.phase1} is not a phase-1 checkpoint")
        base_model = manifest["model_config"]
    model_cfg, train_cfg = build_config(args.profile, args.config, args.ablation, model_over, train_over,
                                        base_model=base_model)
    data = Path(args.data or default_data_root() / "toy")
    lq, gt, _ = load_corpus(data)
    out = Path(args.out)
    if args.phase == 1:
        result = train_phase1(model_cfg, train_cfg, lq, gt, out_dir=out)
    else:
        result = train_phase2(train_cfg, lq, gt, args.phase1, out_dir=out, model_cfg=model_cfg)
    write_sidecar(out / SIDECAR, model=model_cfg, train=train_cfg,
                  run={"data": str(data), "phase1": args.phase1, "profile": args.profile})
    last = result.history[-1] if result.history else {}
    print(f"phase {args.phase} done: {train_cfg.iterations} iterations, final loss {last.get('total', float('nan')):.6f}")
    print(f"checkpoint: {result.checkpoint}")


def cmd_infer(args):
    try:
        model, _, _ = load_checkpoint(args.checkpoint)
    except Exception as exc:
        raise CLIError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    out = Path(args.out)
    for path in _inputs(Path(args.input)):
        save_image(infer(model, load_image(path), seed=args.seed), out / path.name)
    write_sidecar(out / SIDECAR, infer={"checkpoint": str(args.checkpoint), "input": str(args.input),
                                        "seed": args.seed})
    print(f"wrote restored images to {out}")


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.6f}"


def cmd_eval(args):
    pred_files = _inputs(Path(args.pred))
    gt_dir = Path(args.gt)
    report = MetricReport()
    for path in pred_files:
        target = gt_dir / path.name
        if not target.is_file():
            raise CLIError(f"missing ground truth for {path.name} in {gt_dir}")
        report.add(path.name, load_image(path), load_image(target))
    rows = [(n, _fmt(p), _fmt(s)) for n, p, s in zip(report.names, report.psnr_db, report.ssim)]
    rows.append(("mean", _fmt(report.mean_psnr), _fmt(report.mean_ssim)))
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image", "psnr_db", "ssim"])
            writer.writerows(rows)
    width = max(len(r[0]) for r in rows)
    print(f"{'image':<{width}}  {'psnr_db':>10}  {'ssim':>8}")
    for name, p, s in rows:
        print(f"{name:<{width}}  {p:>10}  {s:>8}")


def cmd_inspect_schedule(args):
    sched = make_schedule(args.T, args.beta_start, args.beta_end)
    print(f"{'t':>3}  {'beta':>12}  {'alpha':>12}  {'alpha_bar':>12}")
    for t, b, a, ab in sched.table():
        print(f"{t:>3}  {b:>12.6g}  {a:>12.6g}  {ab:>12.6g}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="retidiff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("make-data", help="write a synthetic paired corpus")
    s.add_argument("--out")
    s.add_argument("--n", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--config", help="YAML file with a 'data' section (e.g. a resolved sidecar)")
    for name in ("gamma", "scale", "noise-sigma"):
        s.add_argument(f"--{name}", type=float, nargs=2, metavar=("LO", "HI"))
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("decompose", help="write reflectance/illumination maps")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decompose)

    s = sub.add_parser("train", help="run training phase 1 or 2")
    s.add_argument("--phase", type=int, choices=(1, 2), required=True)
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--phase1", help="phase-1 checkpoint directory (phase 2 only)")
    s.add_argument("--profile", default="desk", choices=sorted(PROFILES))
    s.add_argument("--config")
    s.add_argument("--ablation", choices=sorted(ABLATIONS))
    s.add_argument("--iterations", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--patch-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="restore images with a trained checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="PSNR/SSIM of predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect-schedule", help="print the beta/alpha/alpha_bar table")
    s.add_argument("--T", type=int, default=4)
    s.add_argument("--beta-start", type=float, default=0.1)
    s.add_argument("--beta-end", type=float, default=0.99)
    s.set_defaults(func=cmd_inspect_schedule)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (CLIError, ValueError, KeyError, OSError, RuntimeError) as exc:
        msg = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
        print(json.dumps({"error": " ".join(msg.split()), "type": type(exc).__name__}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
