"""Command line: ``staticsplat {synth,init,train,render,propagate,eval}``.

Failures print one line to stderr, ``error: <code>: <message>``, and exit
with status 2 (1 for unexpected internal errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io
from .exceptions import ConfigError, DatasetError, SplatError

log = logging.getLogger("staticsplat")


def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = io.parse_value(value.strip())
    return out


def _train_config(args):
    from .optim import TrainConfig

    file_values = io.read_config(args.config) if args.config else {}
    overrides = _parse_sets(args.set)
    if args.iterations is not None:
        overrides["total_iterations"] = args.iterations
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mask_mode is not None:
        overrides["mask_mode"] = args.mask_mode
    if args.no_masks:
        overrides["use_masks"] = False
    return io.resolve_config(TrainConfig(), file_values, overrides)


def cmd_synth(args) -> int:
    from .synth import generate, standard_scene

    scene = standard_scene(
        n_frames=args.frames, mover_frames=args.mover_frames, width=args.width, height=args.height,
        n_heldout=args.heldout, seed=args.seed, with_mover=not args.no_mover,
    )
    with io.OutputLock(args.out):
        ds = generate(scene)
        io.save_dataset(args.out, ds)
    print(f"wrote {len(ds.frames)} frames and {len(ds.test_frames)} held-out views to {args.out}")
    return 0


def cmd_init(args) -> int:
    from .synth import SyntheticScene, surrogate_sfm

    ds = io.load_dataset(args.data, load_cloud_file=False)
    if not ds.scene:
        raise DatasetError("init needs a synthetic scene description in the manifest")
    scene = SyntheticScene.from_dict(ds.scene)
    cloud = surrogate_sfm(scene, args.points, args.noise, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.save_cloud(out, cloud)
    print(f"wrote {len(cloud)} points to {out}")
    return 0


def cmd_train(args) -> int:
    from .optim import train

    cfg = _train_config(args)
    out = Path(args.out)
    with io.OutputLock(out):
        ds = io.load_dataset(args.data, require_masks=cfg.use_masks, load_cloud_file=args.cloud is None)
        if args.cloud:
            ds.initial_cloud = io.load_cloud(args.cloud)
        if ds.initial_cloud is None:
            raise DatasetError("no initial cloud: pass --cloud or run init first")
        ckpt_dir = out / "checkpoints"
        if cfg.checkpoint_interval:
            from dataclasses import replace

            cfg = replace(cfg, checkpoint_dir=str(ckpt_dir))
        resume = None
        if args.resume is not None:
            where = Path(args.resume) if args.resume else io.latest_checkpoint(ckpt_dir)
            if where is None:
                raise DatasetError(f"no checkpoint to resume under {ckpt_dir}")
            resume = io.load_checkpoint(where)
        (out / "config.txt").write_text(io.format_config(cfg.flat()))
        result = train(ds, cfg, resume=resume)
        io.save_cloud(out / "cloud.ply", result.cloud)
        io.write_loss_log(out / "loss_log.csv", result.log)
    last = result.log[-1][1] if result.log else float("nan")
    print(f"trained {len(result.log)} iterations, {len(result.cloud)} Gaussians, final loss {last:.6f}")
    return 0


def _render_cameras(args):
    if args.cameras:
        return io.load_cameras(args.cameras)
    ds = io.load_dataset(args.data, load_cloud_file=False)
    frames = ds.test_frames if args.split == "test" else ds.frames
    return [(f.name, f.camera) for f in frames]


def cmd_render(args) -> int:
    from .rasterizer import render

    cloud = io.load_cloud(args.cloud)
    cams = _render_cameras(args)
    out = Path(args.out)
    with io.OutputLock(out):
        for name, cam in cams:
            io.save_image(out / f"{name}.png", render(cloud, cam, tuple(args.background)).color)
    print(f"rendered {len(cams)} views to {out}")
    return 0


def cmd_propagate(args) -> int:
    from .propagation import PropagationConfig, propagate_stage

    cfg = PropagationConfig()
    overrides = _parse_sets(args.set)
    out = Path(args.out)
    with io.OutputLock(out):
        if args.debug:
            overrides["debug_dir"] = str(out / "debug")
        cfg = io.apply_config(cfg, overrides) if overrides else cfg
        ds = io.load_dataset(args.data, load_cloud_file=False)
        cloud = io.load_cloud(args.cloud)
        result = propagate_stage(cloud, ds, cfg)
        io.save_cloud(out / "cloud.ply", result.cloud)
        summary = {name: int(len(v.spawned)) for name, v in result.views.items()}
        (out / "spawned.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"spawned {len(result.cloud) - len(cloud)} Gaussians")
    return 0


def cmd_eval(args) -> int:
    rendered = io.image_dir(args.rendered)
    reference = io.image_dir(args.reference)
    names = sorted(set(rendered) & set(reference))
    if not names:
        raise DatasetError("no common image names between the two directories")
    masks = {}
    if args.masks:
        for p in sorted(Path(args.masks).glob("*_mask.png")):
            masks[p.stem[: -len("_mask")]] = io.load_mask(p)
    pairs = [(n, io.load_image(rendered[n]), io.load_image(reference[n])) for n in names]
    report = io.evaluate_images(pairs, masks)
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        report.to_csv(args.csv)
    if args.json:
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        report.to_json(args.json)
    agg = report.aggregate()
    print(f"{len(names)} frames  PSNR {agg['psnr']:.3f} dB  SSIM {agg['ssim']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="staticsplat", description="Static-scene Gaussian splatting with moving-object masks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic fixture dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=24)
    s.add_argument("--mover-frames", type=int, default=12)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=48)
    s.add_argument("--heldout", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-mover", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("init", help="surrogate sparse point cloud for a synthetic dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="output PLY path")
    s.add_argument("--points", type=int, default=3000)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("train", help="optimize a cloud against a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--cloud", help="initial cloud PLY (default: the manifest's initial cloud)")
    s.add_argument("--config", help="flat key = value config file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--mask-mode", choices=["exclude", "replace", "both"])
    s.add_argument("--no-masks", action="store_true", help="ignore masks (baseline)")
    s.add_argument("--resume", nargs="?", const="", help="resume from a checkpoint (default: latest)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render a cloud along a camera path")
    s.add_argument("--cloud", required=True)
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--cameras", help="JSON camera list or id -> camera mapping")
    g.add_argument("--data", help="dataset directory")
    s.add_argument("--split", choices=["train", "test"], default="test")
    s.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("propagate", help="run one offline propagation stage")
    s.add_argument("--data", required=True)
    s.add_argument("--cloud", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--debug", action="store_true", help="dump depth, normal and validity images")
    s.set_defaults(func=cmd_propagate)

    s = sub.add_parser("eval", help="compare two image directories")
    s.add_argument("--rendered", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--masks", help="directory of <stem>_mask.png for background-only metrics")
    s.add_argument("--csv")
    s.add_argument("--json")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SplatError as exc:
        print(f"error: {exc.code}: {_one_line(exc)}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        print(f"error: internal: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
