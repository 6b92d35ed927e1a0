"""Command-line surface: synth, train, stitch, eval.

Exit codes: 0 success, 2 bad inputs (empty corpus, unreadable images,
mismatched sizes, empty dataset), 3 incompatible checkpoint, 4 degenerate
homography.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import torch

from . import images
from .deformation import StitchInputs, stitch
from .errors import (
    CheckpointIncompatible,
    CorruptManifest,
    DatasetEmpty,
    DegenerateCorners,
    MissingImage,
    StitchForgeError,
)
from .evaluation import evaluate_model, overlap_curve, overlap_rate, render_report, save_report
from .geometry import canvas_for_pair, warp_image
from .homography import infer_homography
from .synthesis import SynthesisConfig, read_dataset, synthesize_dataset, write_dataset
from .training import TrainConfig, load_checkpoint, load_config, model_from_checkpoint, train_stage

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


def _config_path(explicit):
    if explicit:
        return explicit
    return os.environ.get("STITCHFORGE_CONFIG") or None


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_synth(args) -> int:
    cfg_path = _config_path(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mode == "warped":
        overrides["translation_enabled"] = False
    try:
        if cfg_path:
            cfg = load_config(cfg_path, SynthesisConfig, **overrides)
        else:
            cfg = SynthesisConfig(**overrides)
    except (OSError, ValueError) as exc:
        return _fail(f"bad config: {exc}", 2)

    if args.count == 0:
        write_dataset([], args.out_dir)
        print(f"wrote empty dataset to {args.out_dir}")
        return 0
    paths = sorted(
        os.path.join(args.corpus_dir, f)
        for f in os.listdir(args.corpus_dir)
        if f.lower().endswith(IMAGE_EXTENSIONS)
    ) if os.path.isdir(args.corpus_dir) else []
    if not paths:
        return _fail(f"no corpus images in {args.corpus_dir}", 2)
    try:
        sources = [images.load_image(p) for p in paths]
        manifest = synthesize_dataset(sources, args.count, cfg, args.out_dir)
    except StitchForgeError as exc:
        return _fail(str(exc), 2)

    quads = list(read_dataset(args.out_dir))
    offs = np.stack([q.offsets for q in quads])
    rates = [overlap_rate(q.offsets, *q.reference.shape[1::-1]) for q in quads]
    hist, _ = np.histogram(rates, bins=5, range=(0.0, 1.0))
    print(f"wrote {len(quads)} quadruples to {manifest}")
    print(f"offset bounds: |du| <= {np.abs(offs[..., 0]).max():.2f}, "
          f"|dv| <= {np.abs(offs[..., 1]).max():.2f}")
    print("overlap-rate histogram (0..1 in 5 bins): " + " ".join(str(int(c)) for c in hist))
    return 0


def cmd_train(args) -> int:
    cfg_path = _config_path(args.config)
    overrides = {"stage": args.stage}
    if args.ablate_pyramid is not None:
        overrides["pyramid_levels"] = args.ablate_pyramid
    if args.no_correlation:
        overrides["use_correlation"] = False
    if args.no_edge_branch:
        overrides["use_edge_branch"] = False
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        if cfg_path:
            cfg = load_config(cfg_path, TrainConfig, **overrides)
        else:
            cfg = TrainConfig(**overrides)
    except (OSError, ValueError) as exc:
        return _fail(f"bad config: {exc}", 2)

    out_dir = args.out_dir or os.path.join("runs", args.stage)
    try:
        _, records = train_stage(
            args.dataset_dir,
            cfg,
            out_dir,
            homography=args.homography_ckpt,
            resume=args.resume,
        )
    except CheckpointIncompatible as exc:
        return _fail(str(exc), 3)
    except (DatasetEmpty, CorruptManifest, MissingImage) as exc:
        return _fail(str(exc), 2)
    final = records[-1]["loss"] if records else float("nan")
    print(f"trained {len(records)} steps; final loss {final:.6f}")
    print(f"checkpoint: {os.path.join(out_dir, 'checkpoint.pt')}")
    return 0


def cmd_stitch(args) -> int:
    try:
        ref = images.load_image(args.ref)
        tgt = images.load_image(args.tgt)
    except FileNotFoundError as exc:
        return _fail(str(exc), 2)
    if ref.shape[:2] != tgt.shape[:2]:
        return _fail(f"input sizes differ: {ref.shape[:2]} vs {tgt.shape[:2]}", 2)
    h_img, w_img = ref.shape[:2]
    if max(h_img, w_img) > args.max_side:
        scale = args.max_side / max(h_img, w_img)
        w_img, h_img = max(32, round(w_img * scale)), max(32, round(h_img * scale))
        ref = images.resize(ref, w_img, h_img)
        tgt = images.resize(tgt, w_img, h_img)

    try:
        hnet = model_from_checkpoint(load_checkpoint(args.homography_ckpt, "homography"))
        dnet = model_from_checkpoint(load_checkpoint(args.deformation_ckpt, "deformation"))
    except CheckpointIncompatible as exc:
        return _fail(str(exc), 3)

    try:
        offsets, hom = infer_homography(ref, tgt, hnet)
    except DegenerateCorners as exc:
        return _fail(f"degenerate homography: {exc}", 4)
    canvas = canvas_for_pair(hom, w_img, h_img, w_img, h_img)
    iaw = warp_image(images.to_tensor(ref), torch.eye(3), canvas)
    ibw = warp_image(images.to_tensor(tgt), torch.as_tensor(hom, dtype=torch.float32), canvas)
    result = stitch(
        StitchInputs(images.from_tensor(iaw), images.from_tensor(ibw), canvas), dnet
    )
    images.save_image(args.out, result)
    if args.debug:
        stem, ext = os.path.splitext(args.out)
        images.save_image(f"{stem}_iaw{ext or '.png'}", images.from_tensor(iaw))
        images.save_image(f"{stem}_ibw{ext or '.png'}", images.from_tensor(ibw))
    print(f"offsets (full-res): {np.round(offsets, 3).tolist()}")
    print(f"canvas {canvas.width}x{canvas.height}, origin {canvas.origin}")
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    try:
        model = model_from_checkpoint(load_checkpoint(args.ckpt, "homography"))
    except CheckpointIncompatible as exc:
        return _fail(str(exc), 3)
    try:
        report = evaluate_model(model, args.dataset_dir)
    except (DatasetEmpty, CorruptManifest, MissingImage) as exc:
        return _fail(str(exc), 2)
    save_report(report, args.report_path)
    print(render_report(report, include_splits=args.splits))
    if args.overlap_curve:
        path = overlap_curve(report, args.overlap_curve)
        print(f"wrote {path}")
    print(f"report: {args.report_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stitchforge",
        description="Learned two-stage image stitching: synthesis, training, inference, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic quadruple dataset")
    p.add_argument("corpus_dir", help="directory of source images")
    p.add_argument("out_dir", help="output dataset directory")
    p.add_argument("--config", default=None, help="key=value config file (or $STITCHFORGE_CONFIG)")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--mode", choices=("stitched", "warped"), default="stitched",
                   help="warped disables the translation component")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("stage", choices=("homography", "deformation"))
    p.add_argument("dataset_dir")
    p.add_argument("--config", default=None, help="key=value config file (or $STITCHFORGE_CONFIG)")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--ablate-pyramid", type=int, default=None, metavar="N",
                   help="train with only the N coarsest pyramid levels")
    p.add_argument("--no-correlation", action="store_true",
                   help="replace correlation volumes with feature concatenation")
    p.add_argument("--no-edge-branch", action="store_true",
                   help="drop the edge branch and its guidance")
    p.add_argument("--homography-ckpt", default=None,
                   help="frozen stage-1 checkpoint (deformation stage)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stitch", help="stitch two images end to end")
    p.add_argument("ref")
    p.add_argument("tgt")
    p.add_argument("homography_ckpt")
    p.add_argument("deformation_ckpt")
    p.add_argument("out")
    p.add_argument("--max-side", type=int, default=512)
    p.add_argument("--debug", action="store_true", help="also write I_AW / I_BW")
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("eval", help="evaluate a homography checkpoint on a dataset")
    p.add_argument("dataset_dir")
    p.add_argument("ckpt")
    p.add_argument("report_path")
    p.add_argument("--splits", action="store_true", help="print the percentile split table")
    p.add_argument("--overlap-curve", default=None, metavar="PNG",
                   help="write an overlap-rate curve plot")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
