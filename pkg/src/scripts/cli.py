import argparse
import logging
import os
import sys
from typing import List, Optional

from common.args import ExperimentConfig
from common.errors import ConfigError, StageError
from common.loadData import dataset_save
from common.synthdata import CORRUPTIONS, TASKS, DatasetManifest, describe, generate
from scripts.config import config_load
from scripts.experiment import build_report, evaluate_run, run_experiment, selftest

logger = logging.getLogger("scripts.cli")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _load_config(args, strategy: Optional[str] = None) -> ExperimentConfig:
    config = config_load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value", key=item)
        overrides[key.strip()] = value.strip()
    if strategy is not None:
        overrides["env.strategy"] = strategy
    return config.update_from_dict(overrides).validate()


def gen_data(args) -> int:
    kind = args.corruption or CORRUPTIONS[args.task][0]
    manifest = DatasetManifest(args.task, args.n, args.rho, kind, args.seed, (args.image_size, args.image_size))
    samples = generate(manifest, args.groups, args.artefact_fraction)
    directory = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(directory, exist_ok=True)
    dataset_save(samples, manifest, args.out)
    print(describe(samples))
    return EXIT_OK


def train(args, strategy: Optional[str] = None) -> int:
    config = _load_config(args, strategy)
    record = run_experiment(config, args.out)
    for seed in record.seeds:
        print(f"{record.strategy} seed {seed['seed']}: {seed['metric']} {seed['holdout_metric']:.4f} at ratio 0, "
              f"{seed['best_metric']:.4f} at ratio {seed['best_ratio']:.2f}")
    print(record.run_dir)
    return EXIT_OK


def evaluate(args) -> int:
    ratios = [float(r) for r in args.ratios] if getattr(args, "ratios", None) else None
    metrics = evaluate_run(args.run, args.out, ratios)
    print(metrics)
    return EXIT_OK


def report(args) -> int:
    frame = build_report(args.runs, args.out)
    with open(os.path.join(args.out or args.runs, "report.txt"), "r", encoding="utf-8") as f:
        print(f.read())
    return EXIT_OK if len(frame) else EXIT_FAILURE


def run_selftest(args) -> int:
    checks = selftest(args.out)
    failed = [name for name, ok, _ in checks if not ok]
    for name, ok, detail in checks:
        print(f"{'ok' if ok else 'FAILED':6s} {name} {detail}")
    return EXIT_FAILURE if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tams", description="Task-amenability sample selection experiments.")
    parser.add_argument("--log-level",
                        default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Logging threshold.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Generate a synthetic dataset file.")
    gen.add_argument("--task", default="classification", choices=TASKS)
    gen.add_argument("--n", default=2000, type=int, help="Number of samples.")
    gen.add_argument("--rho", default=0.3, type=float, help="Corrupted fraction.")
    gen.add_argument("--corruption", default="", type=str, help="Corruption kind; the task's first kind if empty.")
    gen.add_argument("--groups", default=30, type=int, help="Number of groups used by the split.")
    gen.add_argument("--image_size", default=16, type=int)
    gen.add_argument("--artefact_fraction", default=0.1, type=float)
    gen.add_argument("--seed", default=7, type=int)
    gen.add_argument("--out", required=True, type=str, help="Dataset file to write.")
    gen.set_defaults(handler=gen_data)

    for name, strategy, text in (("train", None, "Train a controller with the configured reward."),
                                 ("baseline", "baseline", "Train the non-selective baseline predictor.")):
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", default="", type=str, help="Experiment config file; defaults if empty.")
        cmd.add_argument("--set", nargs="*", metavar="SECTION.KEY=VALUE", help="Config overrides.")
        cmd.add_argument("--out", default=None, type=str, help="Output directory; eval.output_dir if unset.")
        cmd.set_defaults(handler=lambda args, strategy=strategy: train(args, strategy))

    ev = sub.add_parser("evaluate", help="Re-evaluate a trained seed directory on its holdout split.")
    ev.add_argument("--run", required=True, type=str, help="Seed directory holding config.cfg and checkpoints.ckpt.")
    ev.add_argument("--out", default=None, type=str)
    ev.set_defaults(handler=evaluate)

    sw = sub.add_parser("sweep", help="Rejection sweep of a trained seed directory at given ratios.")
    sw.add_argument("--run", required=True, type=str)
    sw.add_argument("--ratios", nargs="+", required=True, help="Rejection ratios in [0, 1).")
    sw.add_argument("--out", default=None, type=str)
    sw.set_defaults(handler=evaluate)

    rep = sub.add_parser("report", help="Compare strategies over all run records in a directory.")
    rep.add_argument("--runs", required=True, type=str)
    rep.add_argument("--out", default=None, type=str)
    rep.set_defaults(handler=report)

    st = sub.add_parser("selftest", help="Gradient checks, formula oracles and a miniature run.")
    st.add_argument("--out", default=None, type=str, help="Keep the miniature run here instead of a temp dir.")
    st.set_defaults(handler=run_selftest)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s:%(message)s")

    try:
        return args.handler(args)
    except ConfigError as exc:
        logger.error(" Config error: %s", exc)
        return EXIT_USAGE
    except StageError as exc:
        logger.error(" %s", exc)
        return EXIT_USAGE if isinstance(exc.cause, ConfigError) else EXIT_FAILURE
    except Exception as exc:
        logger.error(" %s: %s", type(exc).__name__, exc)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
