"""Command line entry point ``insiderlab``.

Exit codes: 0 success, 1 invalid configuration, 2 consistency failure,
3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__, runner
from .config import ConfigError, RunConfig, default_config, parse_config
from .errors import ConfigurationError, ConsistencyError, InsufficientDataError

EXIT_OK, EXIT_VALIDATION, EXIT_CONSISTENCY, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("insiderlab")

# subcommand -> (default scenario when no config is given, analyses per scenario)
COMMANDS = {
    "run": (None, None),
    "simulate": (None, {"honest_time": [], "density_lab": [], "factorization": None}),
    "diagnose": (
        "density_lab",
        {
            "density_lab": ["defects", "tau", "null_projection", "immersion"],
            "honest_time": ["qs_density", "supermartingale", "drift_energy", "what_test"],
        },
    ),
    "entropy": ("honest_time", {"honest_time": ["entropy"]}),
    "backtest": ("honest_time", {"honest_time": ["short_audit", "long_only_audit"]}),
    "factorization": ("factorization", {"factorization": None}),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override engine.seed (unsigned 64-bit)")
    common.add_argument("--paths", type=int, help="override engine.n_paths")
    common.add_argument("--steps", type=int, help="override engine.n_steps")
    common.add_argument("--threads", type=int, help="override engine.threads")
    common.add_argument("--out", type=Path, help="output directory (default: output.directory)")
    common.add_argument("--format", choices=("json", "csv"), help="json: report only; csv: report plus CSV dumps")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="insiderlab", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"insiderlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run every analysis configured for the scenario")
    sub.add_parser("simulate", parents=[common], help="simulate the scenario and dump tracks")
    sub.add_parser("diagnose", parents=[common], help="density defects and tau statistics (or honest-time diagnostics)")
    sub.add_parser("entropy", parents=[common], help="entropy objective of the Q^S perturbation family")
    sub.add_parser("backtest", parents=[common], help="short-after-g and long-only strategy audits")
    sub.add_parser("factorization", parents=[common], help="orthogonal product and regime-switch checks")
    rep = sub.add_parser("report", parents=[common], help="re-render a stored report")
    rep.add_argument("report_file", type=Path)
    return parser


def _load(args: argparse.Namespace) -> RunConfig:
    default_kind = COMMANDS[args.command][0]
    if args.config is not None:
        cfg = parse_config(args.config)
    elif default_kind is not None:
        cfg = default_config(default_kind)
    else:
        raise ConfigError([f"'{args.command}' needs --config"])
    cfg = cfg.with_overrides(seed=args.seed, n_paths=args.paths, n_steps=args.steps, threads=args.threads)
    formats = None
    if args.format == "csv":
        formats = ["json", "csv"]
    elif args.format == "json":
        formats = ["json"]
    return cfg.with_output(str(args.out) if args.out else None, formats)


def _analyses(command: str, cfg: RunConfig) -> list[str] | None:
    table = COMMANDS[command][1]
    if table is None:
        return None
    kind = cfg.scenario.kind
    if kind not in table:
        raise ConfigError([f"'{command}' does not apply to a {kind} scenario"])
    chosen = table[kind]
    return None if chosen is None else list(chosen)


def render_report(report: dict, fmt: str, stream) -> None:
    if fmt == "csv":
        wr = csv.writer(stream)
        wr.writerow(["key", "value"])
        wr.writerows(runner.flatten(report.get("payload", {})))
        return
    json.dump(report, stream, indent=2, sort_keys=True)
    stream.write("\n")


def _report_command(args: argparse.Namespace) -> int:
    report = json.loads(args.report_file.read_text())
    if not isinstance(report, dict) or "payload" not in report:
        raise ConfigError([f"{args.report_file} is not a run report"])
    render_report(report, args.format or "json", sys.stdout)
    return EXIT_CONSISTENCY if report.get("consistency", {}).get("failures") else EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            return _report_command(args)
        cfg = _load(args)
        result = runner.run(cfg, _analyses(args.command, cfg))
        written = runner.write_outputs(result, cfg.output.directory, cfg.output.formats)
        for path in written:
            log.info("wrote %s", path)
        json.dump(
            {"scenario": result.report["scenario"], "payload": result.report["payload"], "consistency": result.report["consistency"]},
            sys.stdout,
            indent=2,
            sort_keys=True,
        )
        sys.stdout.write("\n")
        for f in result.failures:
            print(f"consistency failure: {f}", file=sys.stderr)
        return result.exit_code
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigurationError, InsufficientDataError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConsistencyError as exc:
        print(f"consistency failure: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
