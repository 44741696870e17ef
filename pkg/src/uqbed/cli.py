"""Command-line entry point: ``uqbed <subcommand> --config FILE --out DIR``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import pipeline
from .pipeline import ConfigError

log = logging.getLogger("uqbed")

SUBCOMMANDS = ("partition", "sweep", "train", "evaluate", "report", "selftest")
NEEDS_CONFIG = {"partition", "sweep", "train", "evaluate"}


@dataclass
class CommandSpec:
    subcommand: str
    config: str | None = None
    overrides: list[str] = field(default_factory=list)
    out: str | None = None
    verbosity: int = 0
    formats: list[str] = field(default_factory=lambda: ["text", "csv", "latex"])
    run: dict = field(default_factory=dict)


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uqbed", description="Uncertainty-estimation test-bed.")
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("-v", "--verbose", action="count", default=0)
        if name == "selftest":
            continue
        sp.add_argument("--out", required=True, help="output directory")
        if name != "report":
            sp.add_argument("--config", help="TOML sweep config")
            sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                            help="override a config key (repeatable)")
        if name in ("report", "sweep"):
            sp.add_argument("--format", dest="formats", action="append",
                            choices=sorted(pipeline.REPORT_EXT), help="report format (repeatable; default all)")
        if name == "train":
            sp.add_argument("--algorithm", required=True)
            sp.add_argument("--tier", default=None)
            sp.add_argument("--spectral", action="store_true")
            sp.add_argument("--trial", type=int, default=0)
            sp.add_argument("--data-seed", type=int, default=0)
    return p


def parse_invocation(argv) -> CommandSpec:
    """Parse argv; argparse exits with status 2 on malformed input."""
    ns = _parser().parse_args(argv)
    spec = CommandSpec(ns.subcommand, getattr(ns, "config", None), list(getattr(ns, "overrides", []) or []),
                       getattr(ns, "out", None), ns.verbose)
    if getattr(ns, "formats", None):
        spec.formats = ns.formats
    if ns.subcommand == "train":
        spec.run = {"algorithm": ns.algorithm, "tier": ns.tier, "spectral": ns.spectral,
                    "trial": ns.trial, "data_seed": ns.data_seed}
    if spec.subcommand in NEEDS_CONFIG and spec.config is None:
        raise UsageError(f"{spec.subcommand} requires --config")
    return spec


def _emit_report(out: Path, formats, outcome) -> None:
    for fmt in formats:
        for p in pipeline.write_report(out, outcome, fmt):
            log.info("wrote %s", p)


def run_command(spec: CommandSpec) -> int:
    if spec.subcommand == "selftest":
        from .selftest import run_all
        return 0 if run_all() else 1

    out = Path(spec.out)
    if spec.subcommand == "report":
        if not (out / "eval.jsonl").exists():
            log.error("no evaluation results under %s; run 'sweep' or 'evaluate' first", out)
            return 2
        outcome = pipeline.read_eval(out)
        if not outcome.records:
            log.error("evaluation file under %s is empty", out)
            return 2
        _emit_report(out, spec.formats, outcome)
        return 1 if outcome.failed_runs else 0

    config = pipeline.load_config(spec.config, spec.overrides)
    out.mkdir(parents=True, exist_ok=True)
    if spec.subcommand == "partition":
        from .dataforge import write_partition
        data = pipeline.prepare_data(config)
        write_partition(out / "partition.txt", data.partition)
        log.info("in-domain classes %s, out-domain classes %s", data.partition.in_classes,
                 data.partition.out_classes)
        return 0

    if spec.subcommand == "train":
        r = spec.run
        config.algorithms = [r["algorithm"]]
        if r["tier"]:
            config.size_tiers = [r["tier"]]
        config.spectral = [r["spectral"]]
        config.trials = r["trial"] + 1
        config.data_seeds = r["data_seed"] + 1
        config.validate()
        data = pipeline.prepare_data(config)
        (out / "runs").mkdir(exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
        plan = [x for x in pipeline.plan_runs(config, data.digest)
                if x.trial == r["trial"] and x.data_seed == r["data_seed"]]
        rec = pipeline._train_one(plan[0], config, data, out)
        log.info("run %s: %s (val NLL %s)", rec.run_id, rec.status, rec.val_nll)
        return 0 if rec.status == "done" else 1

    if spec.subcommand == "sweep":
        records = pipeline.execute_sweep(config, out)
    else:
        records = pipeline.read_records(out)
        if not records:
            log.error("no run records under %s", out)
            return 2
    outcome = pipeline.evaluate_all(config, out, records)
    pipeline.write_eval(out, outcome)
    if spec.subcommand == "sweep" and outcome.records:
        _emit_report(out, spec.formats, outcome)
    return 1 if outcome.failed_runs else 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        spec = parse_invocation(argv)
    except SystemExit as e:  # argparse already printed usage
        return int(e.code or 0)
    except UsageError as e:
        _parser().print_usage(sys.stderr)
        print(f"uqbed: error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if spec.verbosity > 1 else
                        logging.INFO if spec.verbosity == 1 else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if spec.subcommand == "selftest":
        logging.getLogger("uqbed").setLevel(logging.INFO)
    try:
        return run_command(spec)
    except ConfigError as e:
        log.error("configuration error: %s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
