"""``aquagrasp`` command-line entry point.

Exit codes: 0 ok, 1 unexpected internal error, 2 configuration / usage error,
3 I/O error (missing or unreadable inputs, missing frame data),
4 no gripper closure found while labeling.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import (AquaGraspError, ConfigError, ExportError, MissingFrameData, NoClosureFound,
                     UnknownSuite)

log = logging.getLogger("aquagrasp")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_IO, EXIT_NO_CLOSURE = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _setup_logging(verbose: int):
    level = os.environ.get("AQUAGRASP_LOG", "").upper() or ("DEBUG" if verbose > 1 else
                                                           "INFO" if verbose else "WARNING")
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


# -- image I/O for warp ---------------------------------------------------------

def _read_image(path: Path, depth: bool) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(2, "No such file or directory", str(path))
    if path.suffix == ".npy":
        return np.load(path)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    return arr.astype(np.float32) if depth else arr


def _write_image(path: Path, arr: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".npy":
        np.save(path, arr)
        return
    from PIL import Image

    Image.fromarray(arr).save(path)


# -- subcommands ----------------------------------------------------------------

def cmd_collect(args) -> int:
    from .config import load_campaign_spec
    from .harness import default_jobs, run_campaign

    spec = load_campaign_spec(args.spec)
    if args.seed is not None:
        spec.seed_base = args.seed
    jobs = args.jobs if args.jobs is not None else (spec.jobs or default_jobs())
    report = run_campaign(spec, Path(args.out), jobs=jobs)
    print(report.summary())
    print(f"report written to {Path(args.out) / 'report.json'}")
    return EXIT_OK


def cmd_warp(args) -> int:
    from .camera import cached_remap_table, load_calibration, remap_image

    spec = load_calibration(args.calib)
    image = _read_image(Path(args.input), args.depth)
    cache = Path(args.cache) if args.cache else None
    table = cached_remap_table(spec, cache)
    out = remap_image(table, image, fill=args.fill, method="nearest" if args.depth else "bilinear")
    _write_image(Path(args.output), out)
    valid = int(table.valid_mask.sum())
    print(f"warped {args.input} -> {args.output} ({valid}/{table.valid_mask.size} valid pixels)")
    return EXIT_OK


def _episode_dirs(paths) -> list:
    dirs = []
    for p in map(Path, paths):
        manifest = p / "successes.manifest"
        if manifest.exists():
            dirs.extend(p / line for line in manifest.read_text().split())
        elif (p / "record.json").exists():
            dirs.append(p)
        else:
            raise FileNotFoundError(2, "no record.json or successes.manifest", str(p))
    return dirs


def cmd_label(args) -> int:
    from .labeling import label_dataset

    dirs = _episode_dirs(args.episode)
    manifest, labeled = label_dataset(dirs, Path(args.out), val_fraction=args.val_fraction,
                                      split_seed=args.split_seed,
                                      splat_sigma=args.splat_sigma if args.splat_sigma > 0 else None)
    for le in labeled:
        print(f"episode {le.record.episode_id}: t_star={le.closure.t_star:.2f}s "
              f"frame={le.k_star} samples={len(le.sample_frames)}")
    c = manifest["counts"]
    print(f"dataset: {c['samples']} samples ({c['train_samples']} train / {c['val_samples']} val), "
          f"checksum {manifest['checksum']}")
    return EXIT_OK


def cmd_suite(args) -> int:
    from .harness import SUITES, default_jobs, experiment_suite

    if args.name not in SUITES:
        raise UnknownSuite(args.name)
    kwargs = {}
    if args.episodes is not None:
        kwargs["n"] = args.episodes
    if args.seed is not None:
        kwargs["seed_base"] = args.seed
    jobs = args.jobs if args.jobs is not None else default_jobs()
    results = experiment_suite(args.name, Path(args.out), jobs=jobs, **kwargs)
    for arm, report in results.items():
        print(f"== {arm}")
        print(report.summary())
    return EXIT_OK


def cmd_replay(args) -> int:
    from .harness import replay

    info = replay(Path(args.record), Path(args.out))
    print(f"replayed {info['frames']} frames; trace at {info['csv']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aquagrasp", description="Simulated underwater grasp data collection.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("collect", help="run a collection campaign")
    c.add_argument("--spec", required=True, help="campaign spec (YAML/JSON)")
    c.add_argument("--seed", type=int, help="override the campaign seed base")
    c.add_argument("--jobs", type=int, help="worker processes (default: logical cores)")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_collect)

    w = sub.add_parser("warp", help="plane-at-depth warp of an image between cameras")
    w.add_argument("--calib", required=True)
    w.add_argument("--in", dest="input", required=True)
    w.add_argument("--out", dest="output", required=True)
    w.add_argument("--depth", action="store_true", help="input is a depth map: float, nearest sampling")
    w.add_argument("--fill", type=float, default=0.0)
    w.add_argument("--cache", help="remap-table cache directory")
    w.set_defaults(func=cmd_warp)

    lb = sub.add_parser("label", help="label recorded episodes and export a dataset")
    lb.add_argument("--episode", required=True, action="append",
                    help="episode directory or campaign directory (repeatable)")
    lb.add_argument("--out", required=True)
    lb.add_argument("--val-fraction", type=float, default=0.2)
    lb.add_argument("--split-seed", type=int, default=0)
    lb.add_argument("--splat-sigma", type=float, default=2.0, help="0 disables the splatted targets")
    lb.set_defaults(func=cmd_label)

    s = sub.add_parser("suite", help="run a named experiment suite")
    s.add_argument("--name", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--episodes", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int)
    s.set_defaults(func=cmd_suite)

    r = sub.add_parser("replay", help="render overlays and an error trace for a recorded episode")
    r.add_argument("--record", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except (ConfigError, UnknownSuite) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoClosureFound as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CLOSURE
    except (MissingFrameData, ExportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (AquaGraspError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:  # noqa: BLE001 - the exit-code contract forbids tracebacks escaping
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
