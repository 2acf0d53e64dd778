"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 runtime failure, 2 config/usage error, 3 missing
input artifact. Failures print a single machine-readable line to stderr.
"""

from __future__ import annotations

import argparse
import sys

from .config import resolve_config
from .errors import ConfigError, MissingDataError
from .experiment import ExperimentDir
from .pipeline import STAGES


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advfoolgen",
        description="Attack/defense benchmark pipeline for image classifiers.",
    )
    sub = parser.add_subparsers(dest="stage", required=True, metavar="STAGE")
    for name in STAGES:
        stage_parser = sub.add_parser(name, help=f"run the {name} stage")
        stage_parser.add_argument("--config", default=None,
                                  help="YAML config file (defaults apply when omitted)")
        stage_parser.add_argument("--set", dest="overrides", action="append", default=[],
                                  metavar="KEY=VALUE", help="override a config key")
        stage_parser.add_argument("--exp-dir", default=None,
                                  help="experiment directory (overrides config exp_dir)")
        stage_parser.add_argument("--seed", type=int, default=None,
                                  help="root seed (overrides config seed)")
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    message = " ".join(str(message).split())
    print(f'error: kind={kind} msg="{message}"', file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.overrides)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.exp_dir is not None:
            cfg["exp_dir"] = args.exp_dir
    except ConfigError as exc:
        return _fail(2, "config", exc)

    exp = ExperimentDir(cfg["exp_dir"])
    try:
        outputs = STAGES[args.stage](cfg, exp)
    except MissingDataError as exc:
        return _fail(3, "missing-artifact", exc)
    except ConfigError as exc:
        return _fail(2, "config", exc)
    except Exception as exc:  # noqa: BLE001 - single CLI failure boundary
        return _fail(1, "runtime", f"{type(exc).__name__}: {exc}")

    for path in outputs:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
