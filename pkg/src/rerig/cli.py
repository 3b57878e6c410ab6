"""Command-line entry point.

Subcommands cover the whole workflow: generate a procedural dual-rig
dataset, train a scene model, render a checkpoint, adapt a split to a
shifted rig, score images and detections, fill the cross-rig experiment
matrix, and validate a dataset directory.

Exit codes: 0 success, 1 usage or runtime error, 2 validation failure,
3 quality-gate failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .dataset import DatasetError, load_scene, read_tables, validate, write_ppm
from .fields import load_checkpoint
from .geometry import RigShift, default_rig, load_rig, pose_from_json, rig_from_config
from .metrics import evaluate, experiment_matrix, load_detections, psnr, ssim
from .pipeline import PipelineConfig, adapt_dataset, image_tag, load_pipeline_config
from .renderer import render_image
from .worldgen import WorldGenConfig, export_dual_rig_dataset, generate_world

USAGE_ERROR = 1
VALIDATION_ERROR = 2
GATE_FAILURE = 3


def _pipeline_config(path: str | None) -> PipelineConfig:
    return load_pipeline_config(path) if path else PipelineConfig()


def _parse_shift(text: str) -> RigShift:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError("shift must be three comma-separated numbers: dz,d_long,d_lat")
    dz, d_long, d_lat = (float(p) for p in parts)
    return RigShift(dz=dz, d_long=d_long, d_lat=d_lat)


def _cmd_generate(args) -> int:
    world_kwargs = {}
    shift = RigShift(dz=0.50, d_long=0.90, d_lat=0.20)
    key_stride = 5
    if args.config:
        flat = json.loads(Path(args.config).read_text())
        field_names = {f.name for f in dataclasses.fields(WorldGenConfig)}
        shift_parts = {"dz": shift.dz, "d_long": shift.d_long, "d_lat": shift.d_lat}
        for key, value in flat.items():
            scope, _, name = key.partition(".")
            if key in field_names:
                world_kwargs[key] = tuple(value) if isinstance(value, list) else value
            elif scope == "shift" and name in shift_parts:
                shift_parts[name] = float(value)
            elif key == "key_stride":
                key_stride = int(value)
            else:
                raise ValueError(f"unknown config key {key!r}")
        shift = RigShift(**shift_parts)
    world = generate_world(args.seed, WorldGenConfig(**world_kwargs))
    manifest = export_dual_rig_dataset(world, default_rig(), shift, args.out,
                                       key_stride=key_stride)
    print(f"wrote {len(manifest['splits'])} splits "
          f"({len(manifest['frames'])} frames) under {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .fields import save_checkpoint
    from .renderer import train_scene

    config = _pipeline_config(args.config)
    scene = load_scene(args.scene)
    model, log = train_scene(scene, config=config.train, log_path=args.log)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    final = log[-1].total if log else float("nan")
    print(f"trained {config.train.iterations} iterations, "
          f"final loss {final:.6f}, checkpoint {out}")
    return 0


def _cmd_render(args) -> int:
    model = load_checkpoint(args.checkpoint)
    rig = load_rig(args.rig) if args.rig else rig_from_config(model.extras["rig"])
    config = _pipeline_config(args.config).train
    out = Path(args.out)
    ranks = {ch: i for i, ch in enumerate(sorted(rig.channels))}
    count = 0
    for frame in model.extras["frames"]:
        ego = pose_from_json(frame["ego_pose"])
        for cam in rig.cameras:
            render = render_image(model, cam, ego, frame["time"], config,
                                  image_tag=image_tag(frame["index"],
                                                       ranks[cam.channel]))
            write_ppm(out / "images" / cam.channel / f"{frame['index']:04d}.ppm",
                      render.rgb)
            count += 1
    print(f"rendered {count} images under {out}")
    return 0


def _cmd_adapt(args) -> int:
    shift = _parse_shift(args.shift)
    config = _pipeline_config(args.config)
    manifest = adapt_dataset(args.src, shift, args.out, config=config)
    statuses = sorted(e["status"] for e in manifest.scenes.values())
    print(f"adaptation manifest: {Path(args.out) / 'manifest.json'} "
          f"(scene statuses: {', '.join(statuses)})")
    for token, entry in manifest.scenes.items():
        if entry["status"] == "failed":
            print(f"scene {token} failed: {entry['error']}", file=sys.stderr)
            return USAGE_ERROR
        if entry["status"] == "gated":
            report = entry["report"]
            print(f"scene {token} below quality gate: "
                  f"mean PSNR {report['mean_psnr']:.3f} "
                  f"(min {report['psnr_min']:.3f}), "
                  f"mean SSIM {report['mean_ssim']:.4f} "
                  f"(min {report['ssim_min']:.4f})", file=sys.stderr)
            return GATE_FAILURE
    return 0


def _cmd_eval_images(args) -> int:
    scene_a = load_scene(args.a)
    scene_b = load_scene(args.b)
    keys = sorted(set(scene_a.images) & set(scene_b.images))
    if not keys:
        raise ValueError("the two splits share no images")
    rows = {}
    for key in keys:
        rows[key] = {"psnr": psnr(scene_a.images[key], scene_b.images[key]),
                     "ssim": ssim(scene_a.images[key], scene_b.images[key])}
    mean_psnr = sum(r["psnr"] for r in rows.values()) / len(rows)
    mean_ssim = sum(r["ssim"] for r in rows.values()) / len(rows)
    print(f"{'frame':>5} {'channel':<16} {'psnr':>9} {'ssim':>7}")
    for (frame, channel), r in rows.items():
        print(f"{frame:>5} {channel:<16} {r['psnr']:>9.4f} {r['ssim']:>7.4f}")
    print(f"mean PSNR {mean_psnr:.4f}  mean SSIM {mean_ssim:.4f} "
          f"over {len(rows)} images")
    if args.out:
        payload = {"per_image": {f"{f}/{ch}": r for (f, ch), r in rows.items()},
                   "mean_psnr": mean_psnr, "mean_ssim": mean_ssim}
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True)
                                  + "\n")
    return 0


def _cmd_eval_dets(args) -> int:
    preds = load_detections(args.preds)
    tables = read_tables(args.gt)
    summary = evaluate(preds, tables)
    print(f"mAP {summary.m_ap:.6f}  mATE {summary.m_ate:.6f}")
    for name in sorted(summary.ap):
        cells = ", ".join(
            f"{t}m: " + ("n/a" if v is None else f"{v:.4f}")
            for t, v in sorted(summary.ap[name].items()))
        print(f"  {name:<12} {cells}")
    if args.out:
        Path(args.out).write_text(json.dumps(summary.to_json(), indent=2,
                                             sort_keys=True) + "\n")
    return 0


def _cmd_matrix(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    try:
        matrix = experiment_matrix(manifest)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return VALIDATION_ERROR
    csv_text = matrix.to_csv()
    if args.out:
        Path(args.out).write_text(csv_text)
    print(csv_text, end="")
    if args.svg:
        Path(args.svg).write_text(matrix.to_svg())
        print(f"radar chart written to {args.svg}")
    return 0


def _cmd_validate(args) -> int:
    try:
        tables = read_tables(args.root, check=False)
    except DatasetError as exc:
        print(f"invalid dataset: {exc}", file=sys.stderr)
        return VALIDATION_ERROR
    errors = validate(tables)
    if errors:
        for err in errors:
            print(err, file=sys.stderr)
        print(f"{len(errors)} validation errors in {args.root}", file=sys.stderr)
        return VALIDATION_ERROR
    print(f"ok: {args.root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rerig",
        description="procedural dual-rig datasets, neural scene fitting, "
                    "and cross-rig evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a procedural dual-rig dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON with world fields, shift.*, key_stride")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="fit a scene model to a split")
    p.add_argument("--scene", required=True, help="split directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="JSON with train.* / gate.* keys")
    p.add_argument("--log", help="CSV training-loss log path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("render", help="render every frame of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rig", help="rig config JSON; defaults to the trained rig")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON with train.* render settings")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("adapt", help="re-render a split through a shifted rig")
    p.add_argument("--src", required=True, help="source split directory")
    p.add_argument("--shift", required=True, help="dz,d_long,d_lat in meters")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON with train.* / gate.* keys")
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("eval-images", help="PSNR/SSIM between two splits")
    p.add_argument("--a", required=True, help="first split directory")
    p.add_argument("--b", required=True, help="second split directory")
    p.add_argument("--out", help="JSON output path")
    p.set_defaults(func=_cmd_eval_images)

    p = sub.add_parser("eval-dets", help="detection mAP/mATE against a split")
    p.add_argument("--preds", required=True, help="detections JSON")
    p.add_argument("--gt", required=True, help="ground-truth split directory")
    p.add_argument("--out", help="JSON output path")
    p.set_defaults(func=_cmd_eval_dets)

    p = sub.add_parser("matrix", help="fill the cross-rig experiment matrix")
    p.add_argument("--manifest", required=True,
                   help="JSON mapping splits to roots and cells to predictions")
    p.add_argument("--svg", help="also write a radar chart here")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=_cmd_matrix)

    p = sub.add_parser("validate", help="check a dataset directory")
    p.add_argument("--root", required=True)
    p.set_defaults(func=_cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags; report usage problems as 1
        return 0 if exc.code == 0 else USAGE_ERROR
    try:
        return args.func(args)
    except DatasetError as exc:
        print(f"invalid dataset: {exc}", file=sys.stderr)
        return VALIDATION_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
