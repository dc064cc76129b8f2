"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

import argparse
import logging
import sys

from . import __version__, pipeline
from .config import load_config
from .errors import ContractError, DataError, DomainError, NumericError

logger = logging.getLogger("nigdcs")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def cmd_prep(cfg):
    prep = pipeline.prepare(cfg)
    print(f"prepared {len(prep.daily)} days x {prep.panel.bars_per_day} bars into {cfg.out / 'prepared'}")


def cmd_fit(cfg):
    prep = pipeline.load_prepared(cfg)
    daily, intr, lm = pipeline.fit_models(cfg, prep)
    print(f"daily log-likelihood {daily.log_likelihood:.4f}; models in {cfg.out / 'models'}")
    print(lm.to_string(index=False, float_format=lambda x: f"{x:.4f}"))


def cmd_forecast(cfg):
    prep = pipeline.load_prepared(cfg)
    forecasts, diag = pipeline.rolling_forecast(cfg, prep)
    root = pipeline.write_forecasts(cfg, forecasts, diag)
    print(f"{cfg.horizon} forecasts at {len(cfg.levels)} levels for {len(forecasts)} models in {root}")


def cmd_backtest(cfg):
    table = pipeline.run_backtest(cfg)
    print((cfg.out / "reports" / "backtest.txt").read_text(), end="")
    return table


def cmd_mcs(cfg):
    table = pipeline.run_mcs(cfg)
    print(table.to_string(index=False, float_format=lambda x: f"{x:.4f}"))


def cmd_simulate(cfg):
    truth = pipeline.simulate_dataset(cfg)
    print(f"simulated {truth['days']} days (seed {truth['seed']}) into {cfg.daily_csv} and {cfg.intraday_csv}")


def cmd_show_config(cfg):
    print(cfg.dump(), end="")


COMMANDS = {
    "prep": (cmd_prep, "build loss-oriented returns, seasonal cycle and diagnostics"),
    "fit": (cmd_fit, "fit daily and intraday models on the prepared sample"),
    "forecast": (cmd_forecast, "rolling one-step-ahead VaR forecasts"),
    "backtest": (cmd_backtest, "coverage tests, MCS columns and VaR figures"),
    "mcs": (cmd_mcs, "model confidence set over all forecast directories"),
    "simulate": (cmd_simulate, "write a synthetic market with known coefficients"),
    "show-config": (cmd_show_config, "print the effective configuration"),
}


def build_parser():
    parser = _Parser(prog="nigdcs", description="Score-driven NIG Value-at-Risk toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("-c", "--config", help="key = value configuration file")
        p.add_argument(
            "-s", "--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting (repeatable)"
        )
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
    except ContractError as exc:
        print(f"nigdcs: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        COMMANDS[args.command][0](cfg)
    except (DataError, FileNotFoundError) as exc:
        print(f"nigdcs: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, DomainError) as exc:
        print(f"nigdcs: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as exc:
        print(f"nigdcs: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
