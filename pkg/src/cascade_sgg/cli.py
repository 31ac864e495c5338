"""Command-line entry point.

Exit codes: 0 success, 1 internal error, 2 user or configuration error.
Failures print one line ``error[<kind>]: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
import tempfile
from pathlib import Path

from . import runner
from .checkpoint import CheckpointError
from .config import load_config
from .core import SceneGraphError
from .evaluation import TASKS, ConfigError
from .ppg import TrainingError
from .synthetic import GenerationError, RecipeError

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2

# exception type -> (kind, exit code); first match wins
_ERRORS = (
    (ConfigError, "config", EXIT_USER),
    (RecipeError, "config", EXIT_USER),
    (runner.PrerequisiteError, "prerequisite", EXIT_USER),
    (CheckpointError, "checkpoint", EXIT_USER),
    (runner.DataError, "data", EXIT_USER),
    (SceneGraphError, "data", EXIT_USER),
    (GenerationError, "generation", EXIT_USER),
    (TrainingError, "training", EXIT_INTERNAL),
    (OSError, "io", EXIT_USER),
)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cascade-sgg", description="Scene graph toy pipeline")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config (defaults used when omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key by dotted path, e.g. rpcm.iterations=1")

    common(sub.add_parser("generate", help="write the synthetic dataset"))
    t = sub.add_parser("train", help="train one stage")
    common(t)
    t.add_argument("--stage", required=True, choices=runner.STAGES)
    e = sub.add_parser("evaluate", help="evaluate on the test split")
    common(e)
    e.add_argument("--task", action="append", choices=TASKS, help="repeatable; default: config eval.tasks")
    e.add_argument("--predictor", choices=("rpcm", "frequency", "oracle"))
    r = sub.add_parser("report", help="merge report files into a table and plots")
    r.add_argument("reports", nargs="+")
    r.add_argument("--out", default=None, help="output directory (default: directory of the first report)")
    s = sub.add_parser("selftest", help="run the whole pipeline on a small corpus")
    s.add_argument("--workdir", default=None, help="keep outputs here instead of a temporary directory")
    return p


def _run(args) -> None:
    if args.command == "report":
        out = args.out or str(Path(args.reports[0]).parent)
        for path in runner.cmd_report(args.reports, out):
            print(path)
        return
    if args.command == "selftest":
        if args.workdir:
            written = runner.cmd_selftest(Path(args.workdir))
            for path in written:
                print(path)
        else:
            with tempfile.TemporaryDirectory() as d:
                written = runner.cmd_selftest(Path(d))
                print(Path(written[-2]).read_text() if len(written) > 1 else "", end="")
        return
    cfg = load_config(args.config, args.set)
    if args.command == "generate":
        print(runner.cmd_generate(cfg))
    elif args.command == "train":
        print(runner.cmd_train(cfg, args.stage))
    elif args.command == "evaluate":
        for path in runner.cmd_evaluate(cfg, args.task, args.predictor):
            print(path)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _run(args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to one line and an exit code
        for etype, kind, code in _ERRORS:
            if isinstance(exc, etype):
                break
        else:
            kind, code = "internal", EXIT_INTERNAL
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error[{kind}]: {msg}", file=sys.stderr)
        if args.verbose and code == EXIT_INTERNAL:
            logging.exception("traceback")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
