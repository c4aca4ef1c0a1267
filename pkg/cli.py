"""
dpdlab command line
Runs pipeline phases or the gradient check on an experiment config.
"""

import argparse
import sys
from typing import List, Optional

from lab_settings import out_dir_override, resolve_config_path, seed_override
from services.config_service import config_hash, parse_config, with_overrides
from services.errors import ConfigError, DpdLabError
from services.pipeline import PHASES, run_gradcheck, run_pipeline

COMMANDS = PHASES + ["all", "gradcheck"]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpdlab", description="HN FD-NN digital predistortion lab")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", type=str, default=None)
    ap.add_argument("--out", type=str, default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--quiet", action="store_true")

    # gradcheck only
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--max-params", type=int, default=None)
    ap.add_argument("--tolerance", type=float, default=1e-5)
    return ap


def load_config(args: argparse.Namespace):
    try:
        path = resolve_config_path(args.config)
        env_seed = seed_override()
    except (FileNotFoundError, ValueError) as e:
        raise ConfigError(str(e))
    cfg = parse_config(path)
    seed = args.seed if args.seed is not None else env_seed
    out = args.out if args.out is not None else out_dir_override()
    return with_overrides(cfg, out_dir=out, seed=seed, threads=args.threads)


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    if args.command == "gradcheck":
        errors = run_gradcheck(cfg, seeds=args.seeds, tolerance=args.tolerance,
                               max_params=args.max_params, quiet=args.quiet)
        worst = max(errors)
        print(f"{'✅' if worst < args.tolerance else '❌'} worst relative error {worst:.3e} over {len(errors)} seeds")
        return 0 if worst < args.tolerance else 1

    phases = None if args.command == "all" else [args.command]
    result = run_pipeline(cfg, phases, quiet=args.quiet)
    if result.report is not None and not args.quiet:
        print(f"📦 Report: {result.out_dir / 'report.csv'} (config {config_hash(cfg)})")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except DpdLabError as e:
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
