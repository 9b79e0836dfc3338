"""Command-line entry point.

    kskdv <subcommand> [--config PATH] [--seed U64] [--out DIR]
          [--n GRID] [--depth TREE] [--eps FINAL_EPSILON]

Subcommands: simulate, saddle, nullcontrol, stackelberg, observability,
carleman-check.  Flags override the corresponding config fields; without
--config the built-in defaults are used.  Exit codes: 0 success, 2 config or
geometry validation failure, 3 solver failure.
"""

from __future__ import annotations

import argparse
import sys

from .carleman import AuditFailed
from .config import (ExperimentConfig, ParseError, ValidationError,
                     parse_config, validate_config, with_overrides)
from .game import NonContractionError
from .leader import StageFailure
from .mesh import IllConditionedSolve, ViolatedGeometry
from .runner import run

_SUBCOMMANDS = ("simulate", "saddle", "nullcontrol", "stackelberg",
                "observability", "carleman-check")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kskdv",
        description="desk-scale hierarchical robust control experiments")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in _SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--n", type=int, help="interior grid size override")
        p.add_argument("--depth", type=int, help="tree depth override")
        p.add_argument("--eps", type=float, help="final penalty epsilon override")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config) if args.config else ExperimentConfig()
        cfg = with_overrides(cfg, seed=args.seed, out=args.out,
                             n_interior=args.n, depth=args.depth,
                             final_eps=args.eps)
        violations = validate_config(cfg)
        if violations:
            raise ValidationError(violations)
    except (ParseError, ValidationError, ViolatedGeometry, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        record = run(args.subcommand, cfg)
    except (ViolatedGeometry, AuditFailed, ValueError) as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return 2
    except (NonContractionError, IllConditionedSolve, StageFailure) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3

    print(f"wrote {len(record.files)} files to {record.out_dir} "
          f"(config {record.config_hash[:12]})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
