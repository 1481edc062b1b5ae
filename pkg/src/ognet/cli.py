"""Command-line interface: synth, train-stage1, gen-diffmaps, train-stage2,
infer, eval, ablate.

Every command exits nonzero with a one-line diagnostic on failure and removes
whatever partial outputs it created.  A shared `--config` file (key = value
lines) supplies network and training settings; command-line flags override it.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, read_checkpoint_header, save_checkpoint
from .data import (
    load_dataset, load_image_rgb01, load_manifest, synth_dataset, write_image_u8,
)
from .evaluation import evaluate_dataset, write_curves_csv, write_eval_csv
from .losses import LossWeights
from .network import NetworkConfig, build_network, parse_kv
from .pipeline import (
    TrainConfig, generate_difference_maps, infer_probs, train_model,
)

DEFAULT_IAF_WEIGHT = 25.0


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_kv(p.read_text())


def _net_config(kv: dict, args) -> NetworkConfig:
    cfg = NetworkConfig.from_kv(kv)
    changes = {}
    if getattr(args, "attention", None):
        changes["attention"] = args.attention
    if getattr(args, "no_residual", False):
        changes["residual"] = False
    if getattr(args, "conv_e_size", None):
        changes["conv_e_size"] = int(args.conv_e_size)
    if changes:
        from dataclasses import replace

        cfg = replace(cfg, **changes)
    return cfg


def _train_config(kv: dict, args, stage: int) -> TrainConfig:
    return TrainConfig.from_kv(
        kv, stage=stage,
        seed=getattr(args, "seed", None),
        size=getattr(args, "size", None),
        max_iter=getattr(args, "iters", None))


def _build_from_checkpoint(path):
    config_text, stage, seed = read_checkpoint_header(path)
    config = NetworkConfig.from_kv(parse_kv(config_text))
    model = build_network(config, seed=seed, dtype=np.float32)
    load_checkpoint(model, path)
    return model, stage


def _write_maps(model, manifest, size: int, out_dir: Path) -> None:
    for entry in manifest.entries:
        pred = infer_probs(model, load_image_rgb01(entry.image_path), size, layers=(1,))[1]
        u8 = np.round(np.clip(pred, 0.0, 1.0) * 255.0).astype(np.uint8)
        write_image_u8(out_dir / f"{entry.name}.png", u8)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> None:
    manifest = synth_dataset(args.count, args.size or 96, args.seed or 0, args.out)
    print(manifest)


def _cmd_train(args, stage: int) -> None:
    kv = _load_config_file(args.config)
    net_config = _net_config(kv, args)
    train_cfg = _train_config(kv, args, stage)
    manifest = load_manifest(args.manifest)
    dataset = load_dataset(manifest, train_cfg.size, dtype=train_cfg.dtype)
    beta_w = 0.0 if stage == 1 else float(kv.get("iaf_weight", DEFAULT_IAF_WEIGHT))
    weights = LossWeights.for_outputs(net_config.m, beta_w)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_network(net_config, seed=train_cfg.seed, dtype=train_cfg.dtype)
    log = out / f"stage{stage}_log.csv"
    train_model(model, dataset, train_cfg, weights, log_path=log)
    ckpt = out / ("stage1.ckpt" if stage == 1 else "final.ckpt")
    save_checkpoint(model, ckpt, stage=stage, seed=train_cfg.seed)
    print(ckpt)


def cmd_train_stage1(args) -> None:
    _cmd_train(args, stage=1)


def cmd_train_stage2(args) -> None:
    _cmd_train(args, stage=2)


def cmd_gen_diffmaps(args) -> None:
    model, _ = _build_from_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    size = args.size or TrainConfig(max_iter=1, seed=0).size
    path = generate_difference_maps(model, manifest, size, args.out)
    print(path)


def cmd_infer(args) -> None:
    model, _ = _build_from_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = args.size or TrainConfig(max_iter=1, seed=0).size
    _write_maps(model, manifest, size, out)
    print(out)


def cmd_eval(args) -> None:
    manifest = load_manifest(args.manifest)
    size = args.size or TrainConfig(max_iter=1, seed=0).size
    if (args.checkpoint is None) == (args.maps is None):
        raise ValueError("eval needs exactly one of --checkpoint or --maps")
    if args.checkpoint is not None:
        model, _ = _build_from_checkpoint(args.checkpoint)
        report = evaluate_dataset(model, manifest, size=size)
    else:
        report = evaluate_dataset(args.maps, manifest, size=size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_eval_csv(report, out / "eval.csv")
    write_curves_csv(report, out / "curves.csv")
    print(out / "eval.csv")


def cmd_ablate(args) -> None:
    kv = _load_config_file(args.config)
    kinds = [k.strip() for k in (args.attention or "none,se,cbam,ogam").split(",") if k.strip()]
    sizes = [int(s) for s in (args.conv_e_size or "3").split(",")]
    manifest = load_manifest(args.manifest)
    train_cfg = _train_config(kv, args, stage=1)
    dataset = load_dataset(manifest, train_cfg.size, dtype=train_cfg.dtype)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    from dataclasses import replace

    rows = []
    for kind in kinds:
        for conv_e in sizes:
            base = NetworkConfig.from_kv(kv)
            net_config = replace(base, attention=kind, conv_e_size=conv_e,
                                 residual=base.residual and not args.no_residual)
            variant = f"{kind}-e{conv_e}"
            model = build_network(net_config, seed=train_cfg.seed, dtype=train_cfg.dtype)
            weights = LossWeights.for_outputs(net_config.m, 0.0)
            train_model(model, dataset, train_cfg, weights,
                        log_path=out / f"train_{variant}.csv")
            save_checkpoint(model, out / f"{variant}.ckpt", stage=1, seed=train_cfg.seed)
            report = evaluate_dataset(model, manifest, size=train_cfg.size)
            rows.append([variant, manifest.name, f"{report.mean_mae:.17g}",
                         f"{report.mean_f:.17g}", f"{report.mean_s:.17g}"])
            print(f"{variant}: mae={report.mean_mae:.4f} f={report.mean_f:.4f} "
                  f"s={report.mean_s:.4f}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "dataset", "mae", "f", "s"])
        writer.writerows(rows)
    print(out / "ablation.csv")


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def _add_common(sub, *, manifest=False, checkpoint=False, out=True, arch=False):
    if manifest:
        sub.add_argument("--manifest", required=True, help="dataset manifest path")
    if checkpoint:
        sub.add_argument("--checkpoint", required=True, help="checkpoint path")
    if out:
        sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--config", help="key = value config file")
    sub.add_argument("--seed", type=int, help="override the seed")
    sub.add_argument("--size", type=int, help="square training/inference size")
    if arch:
        sub.add_argument("--iters", type=int, help="override max iterations")
        sub.add_argument("--attention", help="attention kind (none|se|cbam|ogam)")
        sub.add_argument("--no-residual", action="store_true",
                         help="disable the decoder residual projection")
        sub.add_argument("--conv-e-size", dest="conv_e_size",
                         help="encoder-branch conv size (1|3|5|7)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ognet",
        description="Output-guided saliency network: data synthesis, two-stage "
                    "training, inference, evaluation, ablation")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate a synthetic shape dataset")
    synth.add_argument("--count", type=int, default=32, help="number of images")
    _add_common(synth)
    synth.set_defaults(func=cmd_synth)

    s1 = commands.add_parser("train-stage1", help="rough training for mask generation")
    _add_common(s1, manifest=True, arch=True)
    s1.set_defaults(func=cmd_train_stage1)

    dm = commands.add_parser("gen-diffmaps", help="write per-image difference masks")
    _add_common(dm, manifest=True, checkpoint=True)
    dm.set_defaults(func=cmd_gen_diffmaps)

    s2 = commands.add_parser("train-stage2", help="final training with the masked F term")
    _add_common(s2, manifest=True, arch=True)
    s2.set_defaults(func=cmd_train_stage2)

    infer = commands.add_parser("infer", help="write 8-bit saliency maps")
    _add_common(infer, manifest=True, checkpoint=True)
    infer.set_defaults(func=cmd_infer)

    ev = commands.add_parser("eval", help="evaluate a checkpoint or saved maps")
    _add_common(ev, manifest=True)
    ev.add_argument("--checkpoint", help="checkpoint to run inference with")
    ev.add_argument("--maps", help="directory of saved prediction maps")
    ev.set_defaults(func=cmd_eval)

    ab = commands.add_parser("ablate", help="train and score a grid of variants")
    _add_common(ab, manifest=True, arch=True)
    ab.set_defaults(func=cmd_ablate)

    return parser


def _snapshot(out_dir: Path) -> set:
    if not out_dir.exists():
        return set()
    return {p for p in out_dir.rglob("*")}


def _cleanup_new(out_dir: Path, before: set, existed: bool) -> None:
    if not out_dir.exists():
        return
    new_paths = sorted((p for p in out_dir.rglob("*") if p not in before),
                       key=lambda p: len(p.parts), reverse=True)
    for p in new_paths:
        try:
            p.unlink() if p.is_file() else p.rmdir()
        except OSError:
            pass
    if not existed:
        try:
            out_dir.rmdir()
        except OSError:
            pass


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out) if getattr(args, "out", None) else None
    existed = out_dir.exists() if out_dir else True
    before = _snapshot(out_dir) if out_dir else set()
    try:
        args.func(args)
    except Exception as exc:  # single-line diagnostic, partial outputs removed
        if out_dir is not None:
            _cleanup_new(out_dir, before, existed)
        detail = " ".join(str(exc).split()) or type(exc).__name__
        print(f"ognet: error: {detail}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
