"""Command line: ``nightpair run|batch|report|validate``.

Exit codes: 0 success, 1 usage or config error, 2 simulation abort,
3 partial batch failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .matching import report_from_manifest
from .pipeline import SimulationAbort, batch_run, resolve_config, run_scenario, write_atomic

EXIT_OK, EXIT_USAGE, EXIT_ABORT, EXIT_PARTIAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("-o", "--out", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--delta", type=float, help="matching threshold in meters (default from config, 0.05)")
    p.add_argument("--unique", action="store_true", default=None, help="one day frame per night frame")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nightpair", description="Day/night paired frame collection simulator.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v progress, -vv optimizer iterations")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run one scenario end to end")
    p.add_argument("config", help="scenario YAML path or bundled scenario name")
    _add_run_options(p)

    p = sub.add_parser("batch", help="run every *.yaml in a directory")
    p.add_argument("directory")
    _add_run_options(p)

    p = sub.add_parser("report", help="rebuild the report from a pair manifest")
    p.add_argument("manifest")
    p.add_argument("-o", "--out", help="write report.txt / report.json here instead of stdout")
    p.add_argument("--angular-warn-deg", type=float, default=1.0)

    p = sub.add_parser("validate", help="check config files without simulating")
    p.add_argument("configs", nargs="+")
    return parser


def _run(args) -> int:
    art = run_scenario(args.config, args.out, seed=args.seed, delta=args.delta, unique=args.unique)
    print(art.result.report.to_text(), end="")
    print(f"manifest: {art.manifest}")
    return EXIT_OK


def _batch(args) -> int:
    summary = batch_run(args.directory, args.out, seed=args.seed, delta=args.delta, unique=args.unique)
    print(summary.to_text(), end="")
    return summary.exit_code


def _report(args) -> int:
    rep = report_from_manifest(args.manifest, args.angular_warn_deg)
    if args.out:
        out = Path(args.out)
        write_atomic(out / "report.txt", rep.to_text())
        write_atomic(out / "report.json", json.dumps(rep.to_dict(), indent=2) + "\n")
    print(rep.to_text(), end="")
    return EXIT_OK


def _validate(args) -> int:
    code = EXIT_OK
    for c in args.configs:
        try:
            cfg = load_config(resolve_config(c))
        except ConfigError as exc:
            print(f"{c}: INVALID: {exc}")
            code = EXIT_USAGE
        else:
            print(f"{c}: ok ({cfg.scenario_id}, config hash {cfg.config_hash()[:12]})")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": _run, "batch": _batch, "report": _report, "validate": _validate}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"nightpair: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"nightpair: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SimulationAbort as exc:
        print(f"nightpair: simulation aborted in stage '{exc.stage}': {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
