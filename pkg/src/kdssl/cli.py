"""Command-line entry point.

    kdssl run <config.json> [--seed S] [--out DIR] [--threads N]
    kdssl sweep <config.json> [...]
    kdssl report <dir>
    kdssl gen-data <spec.json> <out.csv>

Exit codes: 0 success, 2 configuration or input error, 3 a run diverged,
4 report written but some result files were skipped.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import SyntheticSpec, generate_synthetic, save_dataset
from .errors import ConfigurationError, KDSSLError, TrainingDivergenceError
from .experiment import load_config, report, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_PARTIAL = 0, 2, 3, 4

log = logging.getLogger("kdssl")


def _gen_data(spec_path: str, out: str, seed_override) -> int:
    try:
        doc = json.loads(Path(spec_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"{spec_path}: {exc}") from exc
    if not isinstance(doc, dict) or "counts" not in doc:
        raise ConfigurationError(f"{spec_path}: expected an object with 'counts'")
    spec = SyntheticSpec(tuple(doc["counts"]), int(doc.get("dim", 16)), float(doc.get("separation", 3.0)),
                         float(doc.get("noise", 1.0)))
    seed = seed_override if seed_override is not None else int(doc.get("seed", 0))
    data = generate_synthetic(spec, seed)
    save_dataset(data, out, len(spec.counts))
    log.info("wrote %d examples to %s", len(data), out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="run only this seed (overrides the config list)")
    common.add_argument("--out", default=None, help="output directory (overrides config output_dir)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for independent runs")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="kdssl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    p = sub.add_parser("run", parents=[common], help="train and evaluate the configured point for every seed")
    p.add_argument("config")
    p = sub.add_parser("sweep", parents=[common], help="like run, over the cartesian product of sweep axes")
    p.add_argument("config")
    p = sub.add_parser("report", parents=[common], help="aggregate <dir>/runs into <dir>/tables")
    p.add_argument("dir")
    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset manifest")
    p.add_argument("spec")
    p.add_argument("out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb in ("run", "sweep"):
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = replace(cfg, seeds=(args.seed,))
            if args.threads < 1:
                raise ConfigurationError("--threads must be >= 1")
            return run_experiment(cfg, args.out, use_sweep=(args.verb == "sweep"), threads=args.threads)
        if args.verb == "report":
            return report(args.dir)
        return _gen_data(args.spec, args.out, args.seed)
    except TrainingDivergenceError as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    except (KDSSLError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
