"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure. Every
failure prints one line ``error: <ErrorClass>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import cv2
import numpy as np
import tomli

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import load_dataset, make_synthetic_scene, read_image, split_train_eval, write_image
from .errors import DataError, MsplatError, NumericError
from .metrics import evaluate, format_report, write_report
from .raster import render_view
from .scene import CameraView, Intrinsics, SpectralBandSet, payload_floats_per_primitive
from .trainer import TrainConfig, train
from .vi import colorize_vi, mi_register, render_vegetation_index, vi_to_uint16

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# flag dest -> TrainConfig field
_TRAIN_FLAGS = {
    "iters": "iterations", "seed": "seed", "color_model": "color_model", "feature_dim": "feature_dim",
    "hidden": "hidden_width", "layers": "hidden_layers", "sh_degree": "sh_degree", "lr": "lr_feature",
    "lr_mlp": "lr_mlp", "warmup": "warmup_iters", "rgb_weight": "rgb_sampling_weight",
    "sampling": "sampling", "densify_interval": "densify_interval", "tau_grad": "tau_grad",
    "densify_start": "densify_start", "densify_stop": "densify_stop", "threads": "threads",
    "eval_interval": "eval_interval", "background": "background", "lambda_dssim": "dssim_weight",
    "lambda_norm": "norm_weight", "lambda_smooth": "smooth_weight", "lambda_cos": "cos_weight",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    # accept either a flat table or a [train] section, with flag or field names
    doc = doc.get("train", doc)
    return {k.replace("-", "_"): v for k, v in doc.items()}


def _threads(args) -> int:
    return args.threads if args.threads else (os.cpu_count() or 1)


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = {}
    for key, value in _load_config(args.config).items():
        cfg[_TRAIN_FLAGS.get(key, key)] = value
    for flag, fld in _TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[fld] = value
    cfg["threads"] = cfg.get("threads") or _threads(args)
    unknown = set(cfg) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        config = TrainConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    dataset = load_dataset(args.data)
    if args.bands:
        keep = [dataset.band_set.index_of(b) for b in args.bands.split(",")]
        dataset.views = [v for v in dataset.views if v.band_index in keep]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = args.log or str(out.with_suffix(".log.jsonl"))
    ckpt = train(dataset, config, log_path=log_path)
    save_checkpoint(ckpt, out)
    print(f"wrote {out} ({ckpt.cloud.count} primitives, {ckpt.iteration} iterations); log {log_path}")
    return EXIT_OK


def _resolve_view(args, band_set: SpectralBandSet) -> CameraView:
    spec = str(args.view)
    if spec.lstrip("-").isdigit():
        if not args.data:
            raise UsageError("--view <index> needs --data")
        ds = load_dataset(args.data, load_images=False)
        idx = int(spec)
        if not 0 <= idx < len(ds.views):
            raise DataError(f"view index {idx} outside [0, {len(ds.views)})")
        return ds.views[idx]
    try:
        doc = json.loads(Path(spec).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read pose file {spec}: {exc}") from None
    k = doc["intrinsics"]
    intr = Intrinsics(k["fx"], k["fy"], k["cx"], k["cy"], int(k["width"]), int(k["height"]))
    return CameraView(0, 0, intr, np.array(doc["rotation"]), np.array(doc["translation"]), name=Path(spec).stem)


def cmd_render(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    band = ckpt.band_set.index_of(args.band)
    view = _resolve_view(args, ckpt.band_set)
    img = render_view(ckpt.cloud, ckpt.model, view, band, ckpt.band_set, args.background, _threads(args))
    write_image(args.out, img, bits=args.bits)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    if ds.band_set.names != ckpt.band_set.names:
        raise DataError(f"dataset bands {ds.band_set.names} differ from checkpoint bands {ckpt.band_set.names}")
    views = ds.views if args.all else split_train_eval(ds.views)[1]
    report = evaluate(ckpt, views, background=args.background, threads=_threads(args))
    print(format_report(report))
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(".report.txt")
    write_report(report, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_ndvi(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    view = _resolve_view(args, ckpt.band_set)
    vi, valid = render_vegetation_index(ckpt, view, args.index, args.lsoil, threads=_threads(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(out), vi_to_uint16(vi))
    col = colorize_vi(vi)
    color_path = out.with_name(out.stem + "_color.png")
    cv2.imwrite(str(color_path), np.ascontiguousarray(col.image[..., ::-1]))
    print(f"wrote {out} and {color_path}; valid pixels {int(valid.sum())}/{valid.size}; "
          f"mean {args.index.upper()} {float(vi[valid].mean()) if valid.any() else 0.0:.4f}")
    return EXIT_OK


def _gray(path) -> np.ndarray:
    img = read_image(path)
    return img.mean(axis=2) if img.shape[2] > 1 else img[..., 0]


def cmd_register(args) -> int:
    ref, moving = _gray(args.ref), _gray(args.moving)
    reg = mi_register(ref, moving, max_shift=args.max_shift, max_angle=args.max_angle, bins=args.bins,
                      seed=args.seed)
    t = reg.transform
    print(f"tx={t.tx:.4f} ty={t.ty:.4f} angle_deg={t.angle_deg:.4f} mi={reg.mi:.6f} identity_mi={reg.identity_mi:.6f}")
    if args.error_map:
        emap = reg.error_map
        write_image(args.error_map, emap / emap.max() if emap.max() > 0 else emap, bits=16)
        print(f"wrote {args.error_map}")
    return EXIT_OK


def cmd_synth(args) -> int:
    scene = make_synthetic_scene(args.out, seed=args.seed, n_gaussians=args.gaussians,
                                 n_views_per_band=args.views, image_size=args.size,
                                 nir_texture=args.nir_texture, interleave=args.interleave)
    print(f"wrote {scene.root}: {len(scene.dataset.views)} images, bands {','.join(scene.dataset.band_set.names)}")
    return EXIT_OK


def cmd_payload(args) -> int:
    band_set = SpectralBandSet.default()
    neural = payload_floats_per_primitive("neural", args.feature_dim)
    sh = payload_floats_per_primitive("sh", sh_degree=args.sh_degree, band_set=band_set)
    dims = [args.feature_dim + 2] + [args.hidden] * (args.layers + 1) + [band_set.total_channels]
    mlp = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    chosen = neural if args.color_model == "neural" else sh
    print(f"color_model={args.color_model}")
    print(f"floats_per_primitive={chosen}")
    print(f"neural_floats_per_primitive={neural}")
    print(f"sh_floats_per_primitive={sh}")
    print(f"per_primitive_reduction={100.0 * (1.0 - neural / sh):.2f}%")
    print(f"decoder_params={mlp}")
    if args.primitives:
        n = args.primitives
        model_neural = 4 * (n * neural + mlp)
        model_sh = 4 * n * sh
        print(f"model_bytes_neural={model_neural}")
        print(f"model_bytes_sh={model_sh}")
        print(f"model_reduction={100.0 * (1.0 - model_neural / model_sh):.2f}%")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msplat", description="Multi-spectral Gaussian splatting with a shared neural color decoder.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--threads", type=int, default=None, help="worker threads (default: logical cores)")

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="TOML file with training options; flags override it")
    t.add_argument("--log", help="per-iteration JSON-lines log (default: next to --out)")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--bands", help="comma-separated subset of bands to train on")
    t.add_argument("--color-model", choices=("neural", "sh"))
    t.add_argument("--feature-dim", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--sh-degree", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-mlp", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--rgb-weight", type=float)
    t.add_argument("--sampling", choices=("weighted", "interleave"))
    t.add_argument("--densify-interval", type=int)
    t.add_argument("--tau-grad", type=float)
    t.add_argument("--densify-start", type=int)
    t.add_argument("--densify-stop", type=int)
    t.add_argument("--eval-interval", type=int)
    t.add_argument("--background", type=float)
    t.add_argument("--lambda-dssim", type=float)
    t.add_argument("--lambda-norm", type=float)
    t.add_argument("--lambda-smooth", type=float)
    t.add_argument("--lambda-cos", type=float)
    common(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render one band of one view")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--view", required=True, help="view index (with --data) or a JSON pose file")
    r.add_argument("--data")
    r.add_argument("--band", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--bits", type=int, choices=(8, 16), default=16)
    r.add_argument("--background", type=float, default=0.0)
    common(r)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="per-band and spectral metrics on held-out views")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="key=value report path (default: next to the checkpoint)")
    e.add_argument("--all", action="store_true", help="evaluate every view, not only held-out ones")
    e.add_argument("--background", type=float, default=0.0)
    common(e)
    e.set_defaults(func=cmd_eval)

    n = sub.add_parser("ndvi", help="render a vegetation index")
    n.add_argument("--ckpt", required=True)
    n.add_argument("--view", required=True)
    n.add_argument("--data")
    n.add_argument("--out", required=True)
    n.add_argument("--index", choices=("ndvi", "gndvi", "savi"), default="ndvi")
    n.add_argument("--lsoil", type=float, default=0.5)
    common(n)
    n.set_defaults(func=cmd_ndvi)

    g = sub.add_parser("register", help="rigid mutual-information registration of two images")
    g.add_argument("--ref", required=True)
    g.add_argument("--moving", required=True)
    g.add_argument("--bins", type=int, default=32)
    g.add_argument("--max-shift", type=float, default=10.0)
    g.add_argument("--max-angle", type=float, default=5.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--error-map")
    g.set_defaults(func=cmd_register)

    s = sub.add_parser("synth", help="generate a synthetic multi-spectral dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--gaussians", type=int, default=100)
    s.add_argument("--views", type=int, default=16, help="views per band")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--nir-texture", type=float, default=0.0)
    s.add_argument("--interleave", action="store_true")
    s.set_defaults(func=cmd_synth)

    y = sub.add_parser("payload", help="per-primitive storage of the color models")
    y.add_argument("--color-model", choices=("neural", "sh"), default="neural")
    y.add_argument("--feature-dim", type=int, default=8)
    y.add_argument("--hidden", type=int, default=32)
    y.add_argument("--layers", type=int, default=1)
    y.add_argument("--sh-degree", type=int, default=3)
    y.add_argument("--primitives", type=int, default=1_000_000)
    y.set_defaults(func=cmd_payload)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MsplatError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
