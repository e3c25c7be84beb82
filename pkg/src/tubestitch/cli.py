"""Command-line entry points.

Subcommands mirror the pipeline stages (unfold, match, stitch, eval), plus
`full` to chain them and `synth` to generate a test sequence with ground
truth.  Every stage takes the same settings, from ``--config`` JSON and/or
individual flags, so a chained run and separate per-stage runs agree.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline, synth
from .config import PipelineConfig
from .errors import StitchError
from .formats import dump_json, load_json

# (flag, PipelineConfig attribute, parser) for the scalar settings.
_OVERRIDES = [
    ("r-inner", "r_inner", int),
    ("margin", "margin", int),
    ("unwrap-width", "unwrap_width", int),
    ("unwrap-height", "unwrap_height", int),
    ("focal-length", "focal_length", float),
    ("horizontal-threshold", "horizontal_threshold", float),
    ("epsilon", "epsilon", float),
    ("dwho-gain", "dwho_gain", float),
    ("density-bins", "density_bins", int),
    ("seed", "seed", int),
]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline settings")
    g.add_argument("--config", type=Path, default=None, metavar="JSON",
                   help="settings file; individual flags below override it")
    for flag, attr, typ in _OVERRIDES:
        g.add_argument(f"--{flag}", dest=attr, type=typ, default=None,
                       help=argparse.SUPPRESS)
    g.add_argument("--providers", default=None, metavar="TAGS",
                   help="comma-separated: orb, dog, import:<dir>, importframe:<dir>")


def _build_config(args: argparse.Namespace) -> PipelineConfig:
    if args.config is not None:
        config = PipelineConfig.from_dict(load_json(args.config))
    else:
        config = PipelineConfig()
    for _, attr, _typ in _OVERRIDES:
        value = getattr(args, attr, None)
        if value is not None:
            setattr(config, attr, value)
    if args.providers is not None:
        config.providers = [t.strip() for t in args.providers.split(",") if t.strip()]
    config.validate()
    return config


def _cmd_synth(args: argparse.Namespace) -> int:
    steps = max(args.frames - 1, 0)
    scene = synth.make_scene(
        dy_steps=[args.dy] * steps,
        twists=[args.dx] * steps,
        frame_size=args.frame_size,
        r_inner=args.r_inner,
        focal_px=args.focal_px,
        unwrap_w=args.unwrap_width,
        unwrap_h=args.unwrap_height,
        noise_sigma=args.noise_sigma,
        texture_seed=args.texture_seed,
    )
    seq, truth = synth.render_sequence(scene, seed=args.seed)
    synth.write_outputs(args.out, scene, seq, truth,
                        focal_length=args.focal_length,
                        horizontal_threshold=args.horizontal_threshold)
    config = PipelineConfig(
        r_inner=scene.r_inner,
        unwrap_width=scene.unwrap_w,
        unwrap_height=scene.unwrap_h,
        focal_length=args.focal_length,
        horizontal_threshold=args.horizontal_threshold,
        epsilon=max(float(args.dy), 1.0),
    )
    config.validate()
    dump_json(Path(args.out) / "config.json", config.to_dict())
    print(f"wrote {len(seq)} frames + ground truth to {args.out}")
    return 0


def _cmd_unfold(args: argparse.Namespace) -> int:
    config = _build_config(args)
    unfolded, track = pipeline.stage_unfold(args.frames, args.out, config)
    note = " (luminance fallback used)" if track.used_fallback else ""
    print(f"unfolded {len(unfolded)} frames to {args.out}{note}")
    return 0


def _cmd_match(args: argparse.Namespace) -> int:
    config = _build_config(args)
    pairs, pooled = pipeline.stage_match(args.unfold, args.out, config)
    kept = sum(len(p.matches) for p in pooled if p is not None)
    print(f"matched {len(pairs)} pairs ({kept} pooled matches) to {args.out}")
    return 0


def _cmd_stitch(args: argparse.Namespace) -> int:
    config = _build_config(args)
    params, pan, report = pipeline.stage_stitch(args.unfold, args.matches,
                                                args.out, config)
    print(f"stitched {len(params) + 1} frames into a {pan.width}x{pan.height} "
          f"panorama ({report['bridged']} bridged, {report['clamped']} clamped) "
          f"in {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    report = pipeline.stage_eval(args.unfold, args.pairs_from, args.out,
                                 panorama=args.panorama, reference=args.reference)
    line = f"mean pair SSIM {report.mean_ssim:.4f}"
    if report.rmse_vs_reference is not None:
        line += (f", vs reference: RMSE {report.rmse_vs_reference:.2f}, "
                 f"SSIM {report.ssim_vs_reference:.4f}")
    print(line + f" -> {args.out}")
    return 0


def _cmd_full(args: argparse.Namespace) -> int:
    config = _build_config(args)
    report = pipeline.stage_full(args.frames, args.out, config,
                                 reference=args.reference)
    line = f"mean pair SSIM {report.mean_ssim:.4f}"
    if report.rmse_vs_reference is not None:
        line += f", RMSE vs reference {report.rmse_vs_reference:.2f}"
    print(f"pipeline finished: {line}; outputs under {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tubestitch",
        description="Unfold in-tube video frames around the depth center and "
                    "stitch the unfolded strips into an inner-surface panorama.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic tube flight with ground truth")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--dy", type=float, default=12.0,
                   help="per-pair vertical drift in unfolded px")
    p.add_argument("--dx", type=float, default=0.0,
                   help="per-pair twist in unfolded px")
    p.add_argument("--frame-size", type=int, default=721)
    p.add_argument("--r-inner", type=int, default=300)
    p.add_argument("--focal-px", type=float, default=1500.0)
    p.add_argument("--unwrap-width", type=int, default=1024)
    p.add_argument("--unwrap-height", type=int, default=64)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--texture-seed", type=int, default=7)
    p.add_argument("--focal-length", type=float, default=1000.0,
                   help="cylindrical warp parameter written to config.json")
    p.add_argument("--horizontal-threshold", type=float, default=64.0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("unfold", help="locate depth centers and unwrap each frame")
    p.add_argument("--frames", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_unfold)

    p = sub.add_parser("match", help="detect, match, and pool features per pair")
    p.add_argument("--unfold", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("stitch", help="estimate offsets and composite the panorama")
    p.add_argument("--unfold", required=True, type=Path)
    p.add_argument("--matches", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_stitch)

    p = sub.add_parser("eval", help="score overlap bands and compare to a reference")
    p.add_argument("--unfold", required=True, type=Path)
    p.add_argument("--pairs-from", required=True, type=Path,
                   help="a .stitch.json offsets file")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--panorama", type=Path, default=None)
    p.add_argument("--reference", type=Path, default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("full", help="run unfold, match, stitch, and eval in sequence")
    p.add_argument("--frames", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--reference", type=Path, default=None,
                   help="ground-truth strip to score the panorama against")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_full)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StitchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
