"""Command-line entry point: ``splatsim {simulate,validate,fill,render,diff}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import load_scene
from .errors import (ConfigError, DegenerateDeformationError, NumericalBlowupError, OutOfDomainError,
                     ParameterError, PlyDataError, PlyFormatError, StructuralDiffError, TimestepError,
                     FillOverflowError)
from .gs_io import load_gaussian_ply, save_gaussian_ply
from .pipeline import Pipeline, diff_frames, validate

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("splatsim")


def _parse_range(text, last):
    """'3', '2:5' (inclusive), ':' or 'all'."""
    if text in (None, "all", ":"):
        return range(0, last + 1)
    if ":" in text:
        a, b = text.split(":", 1)
        return range(int(a) if a else 0, (int(b) if b else last) + 1)
    return range(int(text), int(text) + 1)


def cmd_simulate(args):
    scene = load_scene(args.config)
    if args.reference:
        scene.workers = 1
    if args.output:
        scene.output_dir = Path(args.output).resolve()
    pipe = Pipeline(scene)
    try:
        out = pipe.run(render=True if args.render else None)
    except (NumericalBlowupError, DegenerateDeformationError, TimestepError, OutOfDomainError) as exc:
        step = getattr(getattr(pipe, "sim", None), "step_count", None)
        particle = getattr(exc, "particle", None)
        if particle is None:
            particle = getattr(exc, "index", None)
        print(f"numerical failure at step {step} (worst particle {particle}): {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote {scene.frames + 1} frame(s) to {out}")
    return EXIT_OK


def cmd_validate(args):
    report = validate(args.config)
    print(json.dumps(report.as_dict(), indent=2))
    return EXIT_OK if report.ok else EXIT_CONFIG


def cmd_fill(args):
    scene = load_scene(args.config)
    scene.fill_enabled = True
    pipe = Pipeline(scene)
    cloud = pipe.prepare()
    out = Path(args.output) if args.output else Path(scene.output_dir) / "filled.ply"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_gaussian_ply(cloud, out, precision=scene.precision)
    print(f"{pipe.fill_count} fill particle(s); wrote {out}")
    return EXIT_OK


def cmd_render(args):
    scene = load_scene(args.config)
    if not scene.cameras:
        raise ConfigError("no camera defined", "cameras")
    frames_dir = Path(scene.output_dir) / "frames"
    available = sorted(frames_dir.glob("frame_*.ply"))
    if not available:
        print(f"no frames under {frames_dir}", file=sys.stderr)
        return EXIT_FAIL
    last = max(int(p.stem.split("_")[1]) for p in available)
    pipe = Pipeline(scene)
    count = 0
    for f in _parse_range(args.frames, last):
        path = frames_dir / f"frame_{f:04d}.ply"
        if path.exists():
            pipe.render_frame(load_gaussian_ply(path), f)
            count += 1
    print(f"rendered {count} frame(s) x {len(scene.cameras)} camera(s)")
    return EXIT_OK


def cmd_diff(args):
    stats = diff_frames(args.a, args.b)
    print(json.dumps(stats, indent=2))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="splatsim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--reference", action="store_true",
                   help="single-threaded reference mode (overrides SPLATSIM_WORKERS)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run the full pipeline")
    s.add_argument("config")
    s.add_argument("-o", "--output", help="override output.dir")
    s.add_argument("--render", action="store_true", help="render every frame")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("validate", help="check a scene file without running it")
    s.add_argument("config")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("fill", help="write the clamped and filled input cloud")
    s.add_argument("config")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_fill)

    s = sub.add_parser("render", help="render exported frames")
    s.add_argument("config")
    s.add_argument("frames", nargs="?", default="all", help="N, A:B (inclusive) or all")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("diff", help="compare two frame files")
    s.add_argument("a")
    s.add_argument("b")
    s.set_defaults(func=cmd_diff)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.reference:
        os.environ["SPLATSIM_WORKERS"] = "1"
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PlyFormatError, PlyDataError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FillOverflowError as exc:
        print(f"fill error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StructuralDiffError as exc:
        print(f"diff error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
