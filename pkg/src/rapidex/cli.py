"""``explore`` command line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from rapidex.mission import (
    ConfigError,
    MissionSetupError,
    coverage_report,
    load_config,
    run_mission,
)
from rapidex.sim_env import WORLD_KINDS, WorldError

log = logging.getLogger("rapidex")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="explore", description="Run one simulated exploration mission.")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=float, help="mission time budget in seconds")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--world", help="voxworld file")
    src.add_argument("--gen", choices=WORLD_KINDS, help="procedural world kind")
    p.add_argument("--out", help="output directory")
    p.add_argument("--res", type=float, help="map voxel size in meters")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = dict(seed=args.seed, duration=args.duration, world=args.world, gen=args.gen,
                     out=args.out, res=args.res)
    if args.gen:
        overrides["world"] = ""
    try:
        config = load_config(args.config, **overrides)
        result = run_mission(config)
    except (ConfigError, MissionSetupError, WorldError, OSError) as exc:
        print(f"explore: {exc}", file=sys.stderr)
        return 2
    out = config.out or "explore_out"
    result.write(out)
    rows = result.log.rows
    print(
        f"mode={result.log.final_mode} t={rows[-1][0]:.1f}s volume={rows[-1][5]:.2f}m3 "
        f"distance={rows[-1][6]:.2f}m coverage={coverage_report(result):.3f} "
        f"collisions={result.collisions} margin_violations={result.margin_violations} out={out}"
    )
    return 1 if result.collisions else 0


if __name__ == "__main__":
    sys.exit(main())
