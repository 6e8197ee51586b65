"""Command-line entry point: ``butterfly {encode,decode,roundtrip,eval,synth,bench}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from .core import DecoderConfig
from .decoder import decode, decode_no_voting
from .encoder import EncodeMode, encode
from .evaluation import EvalConfig, evaluate, evaluate_groups
from .formats import (group_records, load_fields, parse_uavdt, parse_visdrone, read_detections,
                      read_groups, save_fields, write_annotations_uavdt, write_detections)
from .synthetic import NoiseSpec, SceneSpec, format_table, generate_scene, make_scenes, run_ablation

logger = logging.getLogger("butterfly_fields")


class CLIError(Exception):
    pass


def _chi_arg(text: str):
    if text == "box_area":
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--chi takes a positive number or 'box_area', got {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError("--chi must be positive")
    return value


def _add_decoder_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("decoder")
    g.add_argument("--rho", type=float, nargs="+", default=[10.0],
                   help="sigma divisor; one value or one per class (default 10)")
    g.add_argument("--accum-threshold", type=float, default=0.1)
    g.add_argument("--select-threshold", type=float, default=0.05)
    g.add_argument("--sigma-min", type=float, default=2.0)
    g.add_argument("--chi", type=_chi_arg, default=None,
                   help="vote normaliser: number or 'box_area' (default follows --mode when known, else 16)")
    g.add_argument("--peak-window", type=int, default=3)
    g.add_argument("--no-subpixel", action="store_true")
    g.add_argument("--subpixel-mode", choices=("mean", "best"), default="mean")
    g.add_argument("--softnms-sigma", type=float, default=0.5)
    g.add_argument("--softnms-min-score", type=float, default=0.001)
    g.add_argument("--no-voting", action="store_true", help="per-cell baseline decoder")


def _add_encoder_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("encoder")
    g.add_argument("--stride", type=int, default=4)
    g.add_argument("--mode", choices=("center1", "window", "full"), default="window")
    g.add_argument("--window", type=int, default=4, help="block side for --mode window")
    g.add_argument("--num-classes", type=int, default=None)


def _decoder_config(args, mode: Optional[EncodeMode] = None) -> DecoderConfig:
    chi = args.chi
    if chi is None:
        chi = mode.default_chi() if mode is not None else 16.0
    rho = args.rho[0] if len(args.rho) == 1 else tuple(args.rho)
    return DecoderConfig(rho=rho, accum_threshold=args.accum_threshold,
                         select_threshold=args.select_threshold, sigma_min=args.sigma_min, chi=chi,
                         peak_window=args.peak_window, subpixel=not args.no_subpixel,
                         subpixel_mode=args.subpixel_mode, softnms_sigma=args.softnms_sigma,
                         softnms_min_score=args.softnms_min_score)


def _read_annotations(paths: List[str], fmt: str):
    records = []
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            if fmt == "uavdt":
                records.extend(parse_uavdt(fh))
            else:
                records.extend(parse_visdrone(fh, image_id=Path(path).stem))
    return group_records(records)


def _decode_fn(args):
    return decode_no_voting if args.no_voting else decode


def cmd_encode(args) -> int:
    boxes, _ = _read_annotations([args.annotations], args.format)
    if args.image_id is not None:
        if args.image_id not in boxes:
            raise CLIError(f"image {args.image_id!r} not found in {args.annotations}")
        image_id = args.image_id
    elif len(boxes) == 1:
        image_id = next(iter(boxes))
    elif not boxes:
        image_id = None
    else:
        raise CLIError(f"{len(boxes)} images in {args.annotations}; pick one with --image-id")
    mode = EncodeMode.parse(args.mode, args.window)
    grid = encode(boxes.get(image_id, []), args.image_size[0], args.image_size[1], args.stride, mode,
                  args.num_classes)
    save_fields(grid, args.output)
    print(f"wrote {args.output}: {grid.num_classes} classes, {grid.grid_h}x{grid.grid_w} cells, "
          f"{int((grid.p > 0).sum())} positive cells")
    return 0


def _render_overlay(path: Path, dets, size, background: Optional[str]) -> None:
    from PIL import Image, ImageDraw

    if background:
        img = Image.open(background).convert("RGB")
    else:
        img = Image.new("RGB", (int(size[0]), int(size[1])), (0, 0, 0))
    draw = ImageDraw.Draw(img)
    palette = [(255, 128, 0), (0, 200, 255), (255, 0, 160), (120, 255, 0), (255, 255, 0)]
    for d in dets:
        b = d.box
        color = palette[b.class_id % len(palette)]
        draw.rectangle([b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2], outline=color)
        draw.ellipse([b.cx - 1.5, b.cy - 1.5, b.cx + 1.5, b.cy + 1.5], fill=color)
    img.save(path)


def cmd_decode(args) -> int:
    cfg = _decoder_config(args)
    fn = _decode_fn(args)
    if args.image_id is not None and len(args.fields) != 1:
        raise CLIError("--image-id needs exactly one fields file")
    results = {}
    for path in args.fields:
        grid = load_fields(path)
        image_size = tuple(args.image_size) if args.image_size else None
        dets = fn(grid, cfg, image_size=image_size)
        image_id = args.image_id if args.image_id is not None else Path(path).stem
        results[image_id] = dets
        if args.overlay_dir:
            os.makedirs(args.overlay_dir, exist_ok=True)
            _render_overlay(Path(args.overlay_dir) / f"{image_id}.png", dets,
                            image_size or grid.image_size, args.overlay_background)
    with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
        write_detections(results, fh)
    print(f"wrote {args.output}: {sum(len(d) for d in results.values())} detections")
    return 0


def cmd_roundtrip(args) -> int:
    mode = EncodeMode.parse(args.mode, args.window)
    if args.annotations:
        boxes, ignore = _read_annotations([args.annotations], args.format)
        if args.image_size is None:
            raise CLIError("--image-size is required with --annotations")
        width, height = args.image_size
    else:
        spec = SceneSpec(seed=args.seed, image_w=args.image_size[0] if args.image_size else 512,
                         image_h=args.image_size[1] if args.image_size else 512,
                         count_range=(args.count, args.count),
                         size_bounds=(((args.min_size, args.max_size), (args.min_size, args.max_size)),))
        boxes, ignore = {"0": generate_scene(spec)}, {}
        width, height = spec.image_w, spec.image_h
    cfg = _decoder_config(args, mode)
    fn = _decode_fn(args)
    num_classes = args.num_classes or max((b.class_id for bs in boxes.values() for b in bs), default=0) + 1
    dets = {}
    for image_id, bs in boxes.items():
        grid = encode(bs, width, height, args.stride, mode, num_classes)
        dets[image_id] = fn(grid, cfg, image_size=(width, height))
    report = evaluate(dets, boxes, EvalConfig.for_protocol(args.protocol), ignore)
    sys.stdout.write(report.to_text())
    return 0


def cmd_eval(args) -> int:
    with open(args.detections, encoding="utf-8") as fh:
        dets = read_detections(fh)
    gts, ignore = _read_annotations(args.gt, args.gt_format)
    config = EvalConfig.for_protocol(args.protocol, score_floor=args.score_floor,
                                     num_classes=args.num_classes)
    report = evaluate(dets, gts, config, ignore)
    sys.stdout.write(report.to_text())
    if args.groups:
        with open(args.groups, encoding="utf-8") as fh:
            groups = read_groups(fh)
        for key, rep in evaluate_groups(dets, gts, groups, config, ignore).items():
            sys.stdout.write(f"[group {key}]\n")
            sys.stdout.write(rep.to_text())
    return 0


def cmd_synth(args) -> int:
    bounds = ((args.min_size, args.max_size), (args.min_size, args.max_size))
    spec = SceneSpec(seed=args.seed, image_w=args.width, image_h=args.height,
                     count_range=(args.min_count, args.max_count),
                     size_bounds=(bounds,) * args.classes, max_iou=args.max_iou)
    scenes = make_scenes(spec, args.scenes)
    if args.scenes_out:
        with open(args.scenes_out, "w", encoding="utf-8", newline="\n") as fh:
            write_annotations_uavdt({k + 1: s.boxes for k, s in enumerate(scenes)}, fh)
    noise = NoiseSpec(dropout=args.dropout, vector_sigma=args.vector_noise, size_sigma=args.size_noise,
                      conf_sigma=args.conf_noise, occlusion=args.occlusion)
    noises = [NoiseSpec(), noise] if not noise.is_zero else [noise]
    modes = [EncodeMode.parse(m) for m in args.modes]
    rows = run_ablation(scenes, modes, ("voting", "no_voting"), noises, stride=args.stride,
                        seed=args.seed, num_classes=args.classes)
    table = format_table(rows)
    if args.table:
        with open(args.table, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(table)
    else:
        sys.stdout.write(table)
    return 0


def cmd_bench(args) -> int:
    grid = load_fields(args.fields)
    cfg = _decoder_config(args)
    fn = _decode_fn(args)
    fn(grid, cfg)  # warm-up (JIT compilation)
    times = []
    for _ in range(args.runs):
        t0 = time.perf_counter()
        dets = fn(grid, cfg)
        times.append(time.perf_counter() - t0)
    ms = np.array(times) * 1e3
    print(f"runs,{args.runs}")
    print(f"active_cells,{int((grid.p > cfg.accum_threshold).sum())}")
    print(f"detections,{len(dets)}")
    print(f"median_ms,{np.median(ms):.3f}")
    print(f"mean_ms,{ms.mean():.3f}")
    print(f"min_ms,{ms.min():.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="butterfly", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="annotations -> fields file")
    p.add_argument("--annotations", required=True)
    p.add_argument("--format", choices=("uavdt", "visdrone"), default="uavdt")
    p.add_argument("--image-id", default=None, help="frame/image to encode when the file holds several")
    p.add_argument("--image-size", type=int, nargs=2, metavar=("W", "H"), required=True)
    p.add_argument("-o", "--output", required=True)
    _add_encoder_args(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="fields file(s) -> detections file")
    p.add_argument("fields", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--image-size", type=int, nargs=2, metavar=("W", "H"), default=None,
                   help="clamp boxes to the unpadded image")
    p.add_argument("--image-id", default=None,
                   help="image id written to the detections file (default: fields file stem)")
    p.add_argument("--overlay-dir", default=None, help="write one PNG overlay per fields file")
    p.add_argument("--overlay-background", default=None, help="image drawn under the overlay")
    _add_decoder_args(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("roundtrip", help="encode -> decode -> self-evaluation")
    p.add_argument("--annotations", default=None)
    p.add_argument("--format", choices=("uavdt", "visdrone"), default="uavdt")
    p.add_argument("--image-size", type=int, nargs=2, metavar=("W", "H"), default=None)
    p.add_argument("--seed", type=int, default=0, help="synthetic scene seed (without --annotations)")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--min-size", type=float, default=8.0)
    p.add_argument("--max-size", type=float, default=64.0)
    p.add_argument("--protocol", choices=("uavdt", "coco"), default="uavdt")
    _add_encoder_args(p)
    _add_decoder_args(p)
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("eval", help="score a detections file against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--gt-format", choices=("uavdt", "visdrone"), default="uavdt")
    p.add_argument("--protocol", choices=("uavdt", "coco"), default="uavdt")
    p.add_argument("--score-floor", type=float, default=0.05)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--groups", default=None, help="sidecar 'image_id,group' file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="synthetic scenes + ablation table")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--min-count", type=int, default=10)
    p.add_argument("--max-count", type=int, default=30)
    p.add_argument("--min-size", type=float, default=8.0)
    p.add_argument("--max-size", type=float, default=64.0)
    p.add_argument("--classes", type=int, default=1)
    p.add_argument("--max-iou", type=float, default=0.0)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--modes", nargs="+", default=["center1", "window4", "full"])
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--vector-noise", type=float, default=0.0)
    p.add_argument("--size-noise", type=float, default=0.0)
    p.add_argument("--conf-noise", type=float, default=0.0)
    p.add_argument("--occlusion", type=float, default=0.0)
    p.add_argument("--scenes-out", default=None, help="write scenes as UAVDT-style annotations")
    p.add_argument("--table", default=None, help="ablation table path (default stdout)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="decode wall time over repeated runs")
    p.add_argument("fields")
    p.add_argument("--runs", type=int, default=20)
    _add_decoder_args(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
