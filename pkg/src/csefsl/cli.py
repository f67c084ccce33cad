"""Command line entry point: ``csefsl run|gradcheck|compare``.

Exit codes: 0 ok, 1 configuration error, 2 numeric failure, 3 oracle failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import runner
from .errors import ConfigError, NumericError, UsageError
from .runner import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_ORACLE, ExperimentConfig

ENV_SEED = "CSEFSL_SEED"
ENV_OUT = "CSEFSL_OUT"


def _load(path, seed=None, out=None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path)
    seed = seed if seed is not None else os.environ.get(ENV_SEED)
    out = out if out is not None else os.environ.get(ENV_OUT)
    if seed is not None:
        try:
            cfg.seeds = [int(seed)]
        except ValueError:
            raise ConfigError(f"seed override {seed!r} is not an integer") from None
    if out is not None:
        cfg.output_dir = str(out)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args.config, args.seed, args.out)
    results = runner.run(cfg, threads=args.threads)
    for r in results:
        print(f"seed {r['seed']}: top1={r['final_test_top1']:.4f} "
              f"load={r['total_load_bytes']} B storage={r['storage_params']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed
    if seed is None and args.config:
        seed = _load(args.config).seeds[0]
    report = runner.gradcheck(seed=seed or 0)
    for r in report:
        print(f"{r['layer']:<16} params={r['params']:<3} max_rel_err={r['max_rel_err']:.3e} "
              f"input={r['max_rel_err_input']:.3e} {'ok' if r['ok'] else 'FAIL'}")
    return EXIT_OK if all(r["ok"] for r in report) else EXIT_ORACLE


def cmd_compare(args) -> int:
    if len(args.configs) < 2:
        raise UsageError("compare needs at least two configs")
    cfgs = [_load(p, args.seed) for p in args.configs]
    out = Path(args.out or os.environ.get(ENV_OUT) or "compare_out")
    rows = runner.compare(cfgs, threads=args.threads)
    out.mkdir(parents=True, exist_ok=True)
    runner.write_csv(out / "compare.csv", runner.COMPARE_COLUMNS, rows)
    print(f"wrote {len(rows)} rows to {out / 'compare.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="csefsl", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        if config_required:
            p.add_argument("--config", required=True, help="experiment JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config's seeds")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker processes across seeds")

    p = sub.add_parser("run", help="train and write metrics.csv, ledger.csv, summary.txt")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("gradcheck", help="finite-difference check of every layer kind")
    common(p, config_required=False)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gradcheck)
    p = sub.add_parser("compare", help="run several configs and merge their curves")
    p.add_argument("configs", nargs="+")
    common(p, config_required=False)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
