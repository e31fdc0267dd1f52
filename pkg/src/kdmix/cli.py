"""Command line: ``kdmix run|sweep|gridsearch|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .autodiff import ContractError
from .experiment import (
    collect_rows,
    compare_report,
    format_compare,
    load_config,
    run_experiment,
    run_gridsearch,
    run_sweep,
)
from .nets import ConfigurationError
from .train import DEFAULT_GRID, NonFiniteLossError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONFINITE = 3


def _grid(text: str | None) -> list[float]:
    if not text:
        return list(DEFAULT_GRID)
    return [float(v) for v in text.split(",")]


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kdmix", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="train one configuration over its seeds")
    run.add_argument("config", type=Path)
    run.add_argument("--out", help="output root (default: $KDMIX_OUTPUT or ./runs)")

    sw = sub.add_parser("sweep", help="train all 12 configuration x strategy models")
    sw.add_argument("config", type=Path, help="base config; its [plan] must parse but the sweep covers every cell")
    sw.add_argument("--out")
    sw.add_argument("--jobs", type=int, default=1, help="worker processes")

    gs = sub.add_parser("gridsearch", help="search loss weights on the validation split")
    gs.add_argument("config", type=Path)
    gs.add_argument("--out")
    gs.add_argument("--budget", type=int, default=5, help="epochs per grid cell")
    gs.add_argument("--grid", help="comma-separated values for alpha/alpha_p")
    gs.add_argument("--search-beta-gamma", action="store_true",
                    help="KD+ML only: also search beta, gamma and their primed forms")

    rep = sub.add_parser("report", help="compare strategies from summary CSVs")
    rep.add_argument("paths", nargs="+", type=Path)
    rep.add_argument("--metric")
    rep.add_argument("--json", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        if args.verb == "run":
            cfg = load_config(args.config)
            res = run_experiment(cfg, args.out)
            for r in res.rows:
                print(f"{r['model']:<8} {r['strategy']:<3} {r['network']:<9} {r['metric']:<9} "
                      f"{r['mean']:.4f} +- {r['std']:.4f} (n={r['seed_count']})")
            print(f"wrote {res.out_dir}")
        elif args.verb == "sweep":
            cfg = load_config(args.config)
            rows = run_sweep(cfg, args.out, jobs=args.jobs)
            print(format_compare(compare_report(rows)))
        elif args.verb == "gridsearch":
            cfg = load_config(args.config)
            grid = _grid(args.grid)
            space = {"alpha": grid, "alpha_p": grid}
            if args.search_beta_gamma:
                if cfg.config != "KD_ML":
                    raise ConfigurationError("--search-beta-gamma only applies to KD_ML")
                space.update({k: grid for k in ("beta", "gamma", "beta_p", "gamma_p")})
            result = run_gridsearch(cfg, space, args.budget, args.out)
            print(json.dumps(result["best"], sort_keys=True))
        elif args.verb == "report":
            rows = collect_rows(args.paths)
            if not rows:
                raise ConfigurationError("no summary rows found")
            table = compare_report(rows, args.metric)
            print(json.dumps(table, indent=2) if args.json else format_compare(table))
    except NonFiniteLossError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (ConfigurationError, ContractError, ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
