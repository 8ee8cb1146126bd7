"""Command-line entry point: generate / train-static / train-dynamic /
render / eval / ablate, with machine-readable JSON outputs.

Exit codes: 0 success, 1 input/config error, 2 numerical failure. Errors
print one machine-parsable line to stderr: `error: <CODE>: <message>`.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from . import fileio, scenegen, tensorcore, trainer
from .config import ABLATION_FLAGS, TrainConfig, load_config
from .errors import ConfigurationError, InputError, TrainingError
from .geometry import Camera
from .rendering import encode_stage_frames, render_image
from .scenegen import SceneDataset, SceneSpec, generate_dataset


def _parse_res(text):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as e:
        raise ConfigurationError(f"bad --res {text!r}, expected WxH") from e


def _build_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        names = {f.name: f for f in dc_fields(TrainConfig)}
        if key not in names:
            raise ConfigurationError(f"unknown config key {key!r}")
        ftype = {"int": int, "float": float, "bool": bool, "str": str}.get(
            names[key].type, str) if isinstance(names[key].type, str) else names[key].type
        if ftype is bool:
            overrides[key] = val.lower() in ("true", "1", "yes", "on")
        else:
            overrides[key] = ftype(val)
    return cfg.replace(**overrides) if overrides else cfg


def _write_json(path, payload):
    if path:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
    else:
        print(json.dumps(payload, sort_keys=True))


def cmd_generate(args):
    kw = {"seed": args.seed if args.seed is not None else 0}
    if args.frames:
        kw["n_frames"] = args.frames
    if args.res:
        kw["width"], kw["height"] = _parse_res(args.res)
    spec = SceneSpec(**kw)
    ds = generate_dataset(spec, args.out)
    _write_json(args.json, {"command": "generate", "out": str(args.out),
                            "frames": ds.n_frames, "width": ds.width,
                            "height": ds.height, "seed": kw["seed"]})
    return 0


def cmd_train_static(args):
    cfg = _build_config(args)
    ds = SceneDataset.from_dir(args.data)
    store = trainer.train_static(ds, cfg, out_dir=args.out)
    ckpt = str(Path(args.out) / "static.dynrad") if args.out else None
    _write_json(args.json, {"command": "train-static", "checkpoint": ckpt,
                            "steps": cfg.steps_static, "seed": cfg.seed})
    return 0


def cmd_train_dynamic(args):
    cfg = _build_config(args)
    ds = SceneDataset.from_dir(args.data)
    store = trainer.train_dynamic(ds, args.ckpt, cfg, out_dir=args.out)
    ckpt = str(Path(args.out) / "full.dynrad") if args.out else None
    _write_json(args.json, {"command": "train-dynamic", "checkpoint": ckpt,
                            "steps": cfg.steps_dynamic, "seed": cfg.seed})
    return 0


def cmd_render(args):
    cfg = _build_config(args)
    tensorcore.set_default_dtype(cfg.dtype)
    ds = SceneDataset.from_dir(args.data)
    store = tensorcore.ParameterStore.load(args.ckpt, dtype=cfg.dtype)
    t = int(round(args.time))  # fractional time snaps to the nearest frame
    t = max(0, min(ds.n_frames - 1, t))
    if args.pose:
        with open(args.pose) as fh:
            pose = np.asarray(json.load(fh))
        intr = ds.manifest["intrinsics"]
        camera = Camera(intr["fx"], intr["fy"], intr["cx"], intr["cy"],
                        ds.width, ds.height, pose, ds.manifest["near"],
                        ds.manifest["far"])
    else:
        camera = ds.cameras[args.camera]
    half = ds.manifest["scene_spec"]["room_half"]
    if np.abs(camera.center).max() >= half:
        print(f"warning: camera center {camera.center.tolist()} outside "
              f"scene bounds (+/-{half})", file=sys.stderr)
    frames = list(range(ds.n_frames))
    with tensorcore.no_grad():
        maps = encode_stage_frames(ds.images, store, cfg, "static", frames)
        maps.update(encode_stage_frames(ds.images, store, cfg, "dynamic", frames))
    ctx = trainer._context(ds, store, cfg, maps)
    out = render_image(ctx, camera, t, mode=args.mode)
    fileio.write_image(args.out, out["rgb"])
    if args.depth_out:
        fileio.write_map(args.depth_out, out["depth"])
    _write_json(args.json, {"command": "render", "image": str(args.out),
                            "time": t, "mode": args.mode,
                            "mean_rgb": [float(x) for x in out["rgb"].mean(axis=(0, 1))]})
    return 0


def cmd_eval(args):
    cfg = _build_config(args)
    ds = SceneDataset.from_dir(args.data)
    report = trainer.evaluate(ds, args.ckpt, cfg, protocol=args.protocol)
    payload = {"command": "eval", "checkpoint": str(args.ckpt)}
    payload.update(report.to_json())
    _write_json(args.json, payload)
    return 0


def cmd_ablate(args):
    cfg = _build_config(args)
    ds = SceneDataset.from_dir(args.data)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v != "full" and v not in ABLATION_FLAGS:
            raise ConfigurationError(f"unknown variant {v!r}; pick from "
                                     f"full,{','.join(ABLATION_FLAGS)}")
    rows = []
    for variant in variants:
        for s in range(args.seeds):
            vcfg = cfg.replace(seed=cfg.seed + s,
                               **({variant: True} if variant != "full" else {}))
            out_dir = Path(args.out) / f"{variant}_seed{vcfg.seed}" if args.out else None
            store = trainer.train_full(ds, vcfg, out_dir)
            report = trainer.evaluate(ds, store, vcfg, protocol=args.protocol)
            rows.append({"variant": variant, "seed": vcfg.seed,
                         "mean_psnr": report.mean_psnr,
                         "mean_ssim": report.mean_ssim,
                         "mean_psnr_dynamic": report.mean_psnr_dynamic,
                         "mean_ssim_dynamic": report.mean_ssim_dynamic})
            print(f"ablate: {variant} seed {vcfg.seed}: "
                  f"psnr {report.mean_psnr:.2f}", file=sys.stderr)
    _write_json(args.json, {"command": "ablate", "rows": rows})
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="dynrad",
                                description="desk-scale dynamic radiance fields")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, ckpt=False, out=False, json_out=True):
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        if ckpt:
            sp.add_argument("--ckpt", required=True, help="checkpoint file")
        if out:
            sp.add_argument("--out", default=None, help="output directory")
        if json_out:
            sp.add_argument("--json", default=None, help="write JSON report here")
        sp.add_argument("--config", default=None, help="flat key=value config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, default=None)
    g.add_argument("--res", default=None, help="WxH, e.g. 48x27")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--json", default=None)
    g.set_defaults(fn=cmd_generate)

    ts = sub.add_parser("train-static", help="stage 1: static model")
    common(ts, out=True)
    ts.set_defaults(fn=cmd_train_static)

    td = sub.add_parser("train-dynamic", help="stage 2: dynamic model")
    common(td, ckpt=True, out=True)
    td.set_defaults(fn=cmd_train_dynamic)

    r = sub.add_parser("render", help="render one view from a checkpoint")
    common(r, ckpt=True)
    r.add_argument("--time", type=float, required=True,
                   help="frame time (fractional values snap to nearest frame)")
    r.add_argument("--camera", type=int, default=0, help="dataset camera index")
    r.add_argument("--pose", default=None, help="JSON file with a 3x4 pose")
    r.add_argument("--mode", default="blended",
                   choices=["static", "dynamic", "blended"])
    r.add_argument("--out", required=True, help="output image (.img or .png)")
    r.add_argument("--depth-out", default=None, help="optional depth map path")
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a protocol")
    common(e, ckpt=True)
    e.add_argument("--protocol", default="fix-cam-vary-time",
                   choices=["fix-cam-vary-time", "fix-time-vary-cam"])
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train + evaluate a list of variants")
    common(a, out=True)
    a.add_argument("--variants", required=True,
                   help="comma list: full plus ablation flag names")
    a.add_argument("--seeds", type=int, default=1, help="seeds per variant")
    a.add_argument("--protocol", default="fix-cam-vary-time",
                   choices=["fix-cam-vary-time", "fix-time-vary-cam"])
    a.set_defaults(fn=cmd_ablate)
    return p


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ConfigurationError, InputError, FileNotFoundError, ValueError) as e:
        print(f"error: E_INPUT: {e}", file=sys.stderr)
        return 1
    except TrainingError as e:
        print(f"error: E_NUMERIC: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
