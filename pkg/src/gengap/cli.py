"""gengap command line: gen-data, train, measure, analyze, report."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="experiment config (YAML/JSON)")
    sub.add_argument("--out", default=None, help="output directory (default: $GENGAP_OUT or ./out)")
    sub.add_argument("--jobs", type=int, default=1, help="parallel grid cells")
    sub.add_argument("--seed-override", type=int, default=None,
                     help="re-key the dataset and all procedures from this seed")


def _load(args) -> tuple[harness.ExperimentConfig, Path]:
    config = harness.load_config(args.config)
    if args.seed_override is not None:
        config = harness.apply_seed_override(config, args.seed_override)
    out = Path(args.out) if args.out else harness.default_out_root()
    return config, out


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="gengap")
    subs = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "measure", "analyze", "report"):
        _add_common(subs.add_parser(name))
    args = parser.parse_args(argv)

    try:
        config, out = _load(args)
    except (harness.ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.command == "gen-data":
        bundle = harness.ensure_dataset(config, out)
        print(f"dataset with {bundle.features.shape[0]} points under {out / 'data'}")
        return 0

    bundle = harness.ensure_dataset(config, out)
    if args.command == "train":
        _, failures = harness.train_all(config, bundle, out, jobs=args.jobs)
        for failure in failures:
            print(f"failed: {failure}", file=sys.stderr)
        print(f"checkpoints under {out / 'ckpt'}")
        return 1 if failures else 0

    grids, failures = harness.train_all(config, bundle, out, jobs=args.jobs)
    for failure in failures:
        print(f"failed: {failure}", file=sys.stderr)
    rows = harness.measure(config, bundle, grids, out)
    if args.command == "measure":
        print(f"wrote {out / 'metrics.csv'}")
        return 1 if failures else 0

    if args.command == "analyze":
        harness.analyze(config, rows, out)
        print(f"wrote {out / 'analysis' / 'scores.csv'}")
        return 1 if failures else 0

    harness.report_plots(rows, out, families=harness.available_plot_families(rows))
    print(f"wrote plot series under {out / 'plots'}")
    return 1 if failures else 0


if __name__ == "__main__":
    raise SystemExit(main())
