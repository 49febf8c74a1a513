"""End-to-end runs: data, training, holdout evaluation, reports and a self test."""
import copy
import glob
import json
import logging
import multiprocessing
import os
import tempfile
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from common.args import ExperimentConfig
from common.errors import ConfigError, StageError
from common.loadData import DatasetArrays, dataset_load, dataset_save, to_arrays
from common.reader import CSVReader, JSONReader
from common.score import (
    ContingencyTable2x2,
    SweepPoint,
    SweepResult,
    cohens_kappa,
    contingency,
    paired_t_test,
    plot_contingency,
    plot_rejection_curves,
    rejection_sweep,
    roc_auc,
)
from common.synthdata import DatasetManifest, clean_validation_filter, describe, generate, split
from model.checkpoint import checkpoint_load, checkpoint_save
from model.networks import Network, build_predictor_spec, controller_network
from rl.environment import train_supervised
from rl.trainer import LOG_COLUMNS, build_environment, reward_strategy, train_controller
from scripts.config import canonicalize, config_hash, config_load, config_save

logger = logging.getLogger(__name__)

SEED_FILES = ("config.cfg", "checkpoints.ckpt", "training_log.csv", "sweep.csv", "metrics.json")
RUN_FILES = ("config.cfg", "dataset.json", "run_record.json")


@contextmanager
def stage(name: str):
    logger.info(" Stage: %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass
class RunRecord:
    config_hash: str
    task: str
    strategy: str
    run_dir: str
    seeds: List[Dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("TAMS_THREADS", "1")))
    except ValueError:
        raise ConfigError("TAMS_THREADS must be an integer", key="TAMS_THREADS") from None


def seeded(config: ExperimentConfig, repeat: int) -> ExperimentConfig:
    """Copy with training seeds offset by ``repeat``; the data seed stays fixed."""
    result = copy.deepcopy(config)
    result.rl.seed += repeat
    result.rl.init_seed += repeat
    return result


def load_samples(config: ExperimentConfig) -> Tuple[DatasetManifest, list]:
    data = config.data
    if data.path:
        return dataset_load(data.path)
    manifest = DatasetManifest(data.task, data.n, data.rho, data.corruption_kind, data.seed,
                               (data.image_size, data.image_size))
    return manifest, generate(manifest, data.groups, data.artefact_fraction)


def prepare_splits(config: ExperimentConfig, samples) -> Tuple[DatasetArrays, DatasetArrays, DatasetArrays]:
    """(train, reward validation, holdout); fixed-avg only ever sees clean validation samples."""
    train, val, holdout = split(samples, config.data.split, config.data.seed)
    strategy = reward_strategy(config)
    if strategy is not None and strategy.requires_clean_validation:
        val = clean_validation_filter(val)
    task = config.data.task
    return to_arrays(train, task), to_arrays(val, task), to_arrays(holdout, task)


def _write_csv(frame: pd.DataFrame, path):
    frame.to_csv(path, index=False, float_format="%.10g")


def evaluate_networks(config: ExperimentConfig, predictor: Network, controller: Optional[Network],
                      holdout: DatasetArrays, out_dir: str, ratios: Optional[Sequence[float]] = None) -> Dict:
    """Sweep, contingency table and score AUC on the holdout split, written into ``out_dir``.

    Without a controller only the ratio-0 evaluation is made.
    """
    ratios = [0.0] if controller is None else sorted(set(config.eval.ratios if ratios is None else ratios) | {0.0})
    sweep = rejection_sweep(controller, predictor, holdout, ratios)
    _write_csv(sweep.to_frame(), os.path.join(out_dir, "sweep.csv"))
    _write_csv(sweep.groups_frame(), os.path.join(out_dir, "per_group.csv"))
    best = sweep.best()
    metrics = {
        "metric": sweep.metric,
        "holdout_metric": sweep.at(0.0).mean_metric,
        "best_ratio": best.ratio,
        "best_metric": best.mean_metric,
        "kappa": float("nan"),
        "low_agreement": float("nan"),
        "auc": float("nan"),
    }
    if controller is None:
        return metrics

    plot_rejection_curves({config.env.strategy: sweep}, os.path.join(out_dir, "rejection_curve.png"))
    scores = controller.predict(holdout.features)
    fraction = config.eval.fraction_for(holdout.task)
    table = contingency(scores, ~holdout.corrupted, fraction, holdout.ids)
    _write_csv(table.to_frame(), os.path.join(out_dir, "contingency.csv"))
    plot_contingency(table, os.path.join(out_dir, "contingency.png"))
    metrics.update(kappa=cohens_kappa(table), low_agreement=table.low_agreement, contingency_fraction=fraction)
    if 0 < holdout.corrupted.sum() < len(holdout):
        metrics["auc"] = roc_auc(scores, ~holdout.corrupted)
    return metrics


def _save_metrics(metrics: Dict, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)


def run_seed(config: ExperimentConfig, arrays, seed_dir: str) -> Dict:
    train, val, holdout = arrays
    os.makedirs(seed_dir, exist_ok=True)
    config_save(config, os.path.join(seed_dir, "config.cfg"))
    strategy = reward_strategy(config)
    controller, critic = None, None

    with stage("train"):
        env = build_environment(config, train, val, strategy)
        if strategy is None:
            rl = config.rl
            steps = rl.baseline_steps or rl.max_iterations * rl.episodes_per_update * rl.steps_per_episode
            predictor = train_supervised(env, steps, silent=config.eval.silent)
            log = pd.DataFrame(columns=LOG_COLUMNS)
            extra = {"iterations": 0, "predictor_steps": steps}
        else:
            result = train_controller(config, env, strategy, output_dir=seed_dir)
            predictor, controller, critic, log = result.predictor, result.controller, result.critic, result.log
            extra = {"iterations": result.iterations, "best_iteration": result.best_iteration,
                     "best_reward": result.best_reward}
        _write_csv(log, os.path.join(seed_dir, "training_log.csv"))

    with stage("checkpoint"):
        groups = {"predictor": predictor.params}
        if controller is not None:
            groups["controller"] = controller.params
        if critic is not None:
            groups["critic"] = critic.params
        checkpoint_save(os.path.join(seed_dir, "checkpoints.ckpt"), **groups)

    with stage("evaluate"):
        metrics = evaluate_networks(config, predictor, controller, holdout, seed_dir)
    metrics.update(extra, seed=config.rl.seed, init_seed=config.rl.init_seed, seed_dir=seed_dir)
    _save_metrics(metrics, os.path.join(seed_dir, "metrics.json"))
    return metrics


def run_experiment(config: ExperimentConfig, output_dir: Optional[str] = None) -> RunRecord:
    """Train and evaluate ``eval.repeats`` seeds of one config under ``<out>/<task>-<strategy>-<hash>``."""
    started = time.time()
    digest = config_hash(config)
    out = output_dir or config.eval.output_dir
    run_dir = os.path.join(out, f"{config.data.task}-{config.env.strategy}-{digest[:12]}")
    os.makedirs(run_dir, exist_ok=True)
    config_save(config, os.path.join(run_dir, "config.cfg"))

    with stage("data"):
        manifest, samples = load_samples(config)
        arrays = prepare_splits(config, samples)
        manifest.counts = {name: len(a) for name, a in zip(("train", "validation", "holdout"), arrays)}
        dataset_path = config.data.path or os.path.join(run_dir, "dataset.tads")
        if not config.data.path:
            dataset_save(samples, manifest, dataset_path)
        reference = {"manifest": asdict(manifest), "summary": describe(samples), "path": dataset_path}
        with open(os.path.join(run_dir, "dataset.json"), "w", encoding="utf-8") as f:
            json.dump(reference, f, indent=2, sort_keys=True)

    jobs = [(seeded(config, r), arrays, os.path.join(run_dir, f"seed-{r}")) for r in range(config.eval.repeats)]
    workers = min(thread_count(), len(jobs))
    if workers > 1:
        with multiprocessing.Pool(workers) as pool:
            results = pool.starmap(run_seed, jobs)
    else:
        results = [run_seed(*job) for job in jobs]

    record = RunRecord(digest, config.data.task, config.env.strategy, run_dir, results, time.time() - started)
    record.save(os.path.join(run_dir, "run_record.json"))
    logger.info(" Run %s finished in %.1fs", run_dir, record.wall_clock)
    return record


def load_run(seed_dir: str):
    """Config, holdout split and trained networks of one seed directory."""
    config = config_load(os.path.join(seed_dir, "config.cfg"))
    _, samples = load_samples(config)
    _, _, holdout = prepare_splits(config, samples)
    expected = {"predictor": build_predictor_spec(config.data.task, config.data.image_size)}
    if config.env.strategy != "baseline":
        expected["controller"] = controller_network(config.data.image_size)
    groups = checkpoint_load(os.path.join(seed_dir, "checkpoints.ckpt"), expected)
    predictor = Network(expected["predictor"], groups["predictor"])
    controller = Network(expected["controller"], groups["controller"]) if "controller" in expected else None
    return config, holdout, predictor, controller


def evaluate_run(seed_dir: str, out_dir: Optional[str] = None, ratios: Optional[Sequence[float]] = None) -> Dict:
    """Re-evaluate a trained seed directory, optionally at other rejection ratios."""
    out_dir = out_dir or seed_dir
    os.makedirs(out_dir, exist_ok=True)
    with stage("load"):
        config, holdout, predictor, controller = load_run(seed_dir)
    with stage("evaluate"):
        metrics = evaluate_networks(config, predictor, controller, holdout, out_dir, ratios)
    _save_metrics(metrics, os.path.join(out_dir, "metrics.json"))
    return metrics


def sweep_from_frame(frame: pd.DataFrame, metric: str) -> SweepResult:
    return SweepResult(
        [SweepPoint(r.ratio, r.mean_metric, r.stdev_group, int(r.n_kept)) for r in frame.itertuples()], metric
    )


def _mean_curve(sweeps: List[SweepResult]) -> SweepResult:
    joined = pd.concat([s.to_frame() for s in sweeps]).groupby("ratio", as_index=False).agg(
        mean_metric=("mean_metric", "mean"), stdev_group=("stdev_group", "mean"), n_kept=("n_kept", "mean")
    )
    return sweep_from_frame(joined, sweeps[0].metric)


def _group_vector(seed_dirs: List[str], ratios: List[float]) -> pd.Series:
    """Per-group metric at each seed's best ratio, averaged over seeds."""
    reader = CSVReader()
    parts = []
    for seed_dir, ratio in zip(seed_dirs, ratios):
        frame = reader.read(os.path.join(seed_dir, "per_group.csv"))
        parts.append(frame[np.isclose(frame["ratio"], ratio)].set_index("group_id")["mean_metric"])
    return pd.concat(parts, axis=1).mean(axis=1)


def _std(values: np.ndarray) -> float:
    return float(values.std(ddof=1)) if len(values) > 1 else float("nan")


def _lookup_p(tests: pd.DataFrame, task: str, strategy: str) -> float:
    if strategy == "baseline" or tests.empty:
        return float("nan")
    involved = (tests["a"] == strategy) | (tests["b"] == strategy)
    against = (tests["a"] == "baseline") | (tests["b"] == "baseline")
    hit = tests[(tests["task"] == task) & involved & against]
    return float(hit["p"].iloc[0]) if len(hit) else float("nan")


def build_report(runs_dir: str, out_dir: Optional[str] = None) -> pd.DataFrame:
    """Compare strategies across every run record found under ``runs_dir``."""
    out_dir = out_dir or runs_dir
    os.makedirs(out_dir, exist_ok=True)
    json_reader, csv_reader = JSONReader(), CSVReader()
    paths = sorted(glob.glob(os.path.join(runs_dir, "**", "run_record.json"), recursive=True))
    records = [json_reader.read(p) for p in paths]
    if not records:
        raise FileNotFoundError(f"no run records under {runs_dir}")
    logger.info(" Building report from %d run records", len(records))

    rows, pairwise = [], []
    for task in sorted({r["task"] for r in records}):
        by_strategy: Dict[str, List[Dict]] = {}
        for record in records:
            if record["task"] == task:
                by_strategy.setdefault(record["strategy"], []).extend(record["seeds"])

        vectors, curves, baseline_level = {}, {}, None
        for strategy, seeds in sorted(by_strategy.items()):
            selected = np.array([s["best_metric"] for s in seeds], dtype=np.float64)
            plain = np.array([s["holdout_metric"] for s in seeds], dtype=np.float64)
            seed_dirs = [s["seed_dir"] for s in seeds]
            curve = _mean_curve([
                sweep_from_frame(csv_reader.read(os.path.join(d, "sweep.csv")), seeds[0]["metric"]) for d in seed_dirs
            ])
            vectors[strategy] = _group_vector(seed_dirs, [s["best_ratio"] for s in seeds])
            selective = strategy != "baseline"
            if selective:
                curves[strategy] = curve
            else:
                baseline_level = float(plain.mean())
            rows.append({
                "task": task,
                "strategy": strategy,
                "seeds": len(seeds),
                "metric": seeds[0]["metric"],
                "holdout_mean": float(plain.mean()),
                "holdout_std": _std(plain),
                "selected_mean": float(selected.mean()),
                "selected_std": _std(selected),
                "peak_ratio": curve.best().ratio,
                "kappa_mean": float(np.nanmean([s["kappa"] for s in seeds])) if selective else float("nan"),
                "auc_mean": float(np.nanmean([s["auc"] for s in seeds])) if selective else float("nan"),
            })

        names = sorted(vectors)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                joined = pd.concat([vectors[a], vectors[b]], axis=1, join="inner").dropna()
                t, p = float("nan"), float("nan")
                if len(joined) >= 2:
                    t, p = paired_t_test(joined.iloc[:, 0].to_numpy(), joined.iloc[:, 1].to_numpy())
                pairwise.append({"task": task, "a": a, "b": b, "groups": len(joined), "t": t, "p": p})
        if curves:
            plot_rejection_curves(curves, os.path.join(out_dir, f"rejection_curves_{task}.png"), baseline_level)

    report = pd.DataFrame(rows)
    tests = pd.DataFrame(pairwise, columns=["task", "a", "b", "groups", "t", "p"])
    report["p_vs_baseline"] = [_lookup_p(tests, r.task, r.strategy) for r in report.itertuples()]
    _write_csv(report, os.path.join(out_dir, "report.csv"))
    _write_csv(tests, os.path.join(out_dir, "pairwise.csv"))
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as f:
        f.write(format_report(report, tests))
    return report


def _plus_minus(means, stds) -> List[str]:
    return [f"{m:.4f}" if np.isnan(s) else f"{m:.4f} +- {s:.4f}" for m, s in zip(means, stds)]


def format_report(report: pd.DataFrame, tests: pd.DataFrame) -> str:
    """Aligned text: mean +- st.dev. per strategy, then the paired tests."""
    table = pd.DataFrame({
        "task": report["task"],
        "strategy": report["strategy"],
        "seeds": report["seeds"],
        "metric": report["metric"],
        "holdout": _plus_minus(report["holdout_mean"], report["holdout_std"]),
        "selected": _plus_minus(report["selected_mean"], report["selected_std"]),
        "peak_ratio": report["peak_ratio"].map(lambda r: f"{r:.2f}"),
        "kappa": report["kappa_mean"].map(lambda k: "-" if np.isnan(k) else f"{k:.3f}"),
        "p_vs_baseline": report["p_vs_baseline"].map(lambda p: "-" if np.isnan(p) else f"{p:.4f}"),
    })
    lines = ["Comparison of results on the controller-selected holdout set", "", table.to_string(index=False)]
    if len(tests):
        lines += ["", "Paired t-tests across holdout groups", tests.to_string(index=False, float_format="%.4f")]
    return "\n".join(lines) + "\n"


def missing_files(record: RunRecord) -> List[str]:
    missing = [name for name in RUN_FILES if not os.path.exists(os.path.join(record.run_dir, name))]
    for seed in record.seeds:
        missing += [os.path.join(os.path.basename(seed["seed_dir"]), name) for name in SEED_FILES
                    if not os.path.exists(os.path.join(seed["seed_dir"], name))]
    return missing


def selftest(out_dir: Optional[str] = None) -> List[Tuple[str, bool, str]]:
    """Gradient checks, formula oracles and one miniature run; returns (check, passed, detail)."""
    from ndgrad import Tensor, conv2d, grad_check, losses, maxpool2, reduce, relu, sigmoid, tanh, upsample2
    from rl.rewards import RewardStrategy, clip_reward, compute_reward

    rng = np.random.default_rng(0)
    checks = []

    def check(name, ok, detail=""):
        checks.append((name, bool(ok), detail))
        logger.info(" selftest %-24s %s %s", name, "ok" if ok else "FAILED", detail)

    kernel = Tensor(rng.normal(size=(2, 1, 3, 3)))
    cases = {
        "grad sigmoid": lambda x: reduce("sum", sigmoid(x)),
        "grad tanh": lambda x: reduce("sum", tanh(x)),
        "grad relu": lambda x: reduce("sum", relu(x)),
        "grad conv2d": lambda x: reduce("sum", conv2d(x, kernel)),
        "grad maxpool2": lambda x: reduce("sum", maxpool2(x)),
        "grad upsample2": lambda x: reduce("sum", upsample2(x)),
        "grad pixel bce": lambda x: losses("pixelwise-bce-with-logits", x, Tensor((x.data > 0).astype(float))),
    }
    for name, fn in cases.items():
        # magnitudes away from zero keep relu and the max-pool argmax differentiable
        point = rng.uniform(0.2, 1.0, size=(1, 1, 4, 4)) * rng.choice([-1.0, 1.0], size=(1, 1, 4, 4))
        error = grad_check(fn, point)
        check(name, error < 1e-4, f"max rel err {error:.2e}")

    check("reward fixed-avg", abs(compute_reward(RewardStrategy("fixed-avg"), [0.2, 0.4], [1, 1]) + 0.3) < 1e-12)
    check("reward weighted", abs(compute_reward(RewardStrategy("weighted"), [1, 0], [0.2, 0.8]) + 0.1) < 1e-12)
    selective = compute_reward(RewardStrategy("selective", 0.25), [0.1, 0.9, 0.2, 0.4], [0.9, 0.1, 0.8, 0.5])
    check("reward selective", abs(selective + 0.7 / 3) < 1e-12)
    clipped, average = clip_reward(-0.5, -0.3, 0.9)
    check("reward clipping", abs(clipped + 0.18) < 1e-12 and abs(average + 0.32) < 1e-12)
    check("cohens kappa", abs(cohens_kappa(ContingencyTable2x2(20, 5, 10, 65)) - 0.625) < 1e-12)
    t, p = paired_t_test([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    check("paired t-test", abs(t - 3.4641) < 1e-3 and abs(p - 0.0742) < 5e-3, f"t={t:.4f} p={p:.4f}")

    config = ExperimentConfig().update_from_dict({
        "data": {"n": 160, "groups": 8, "rho": 0.25},
        "env": {"batch_size": 8},
        "rl": {"max_iterations": 1, "steps_per_episode": 2, "updates_per_iteration": 1, "critic_batch": 2},
        "eval": {"tensorboard": False, "silent": True, "diagnostic_samples": 16},
    }).validate()
    canonical = canonicalize(config)
    check("canonical config", canonicalize(canonical) == canonical)

    with tempfile.TemporaryDirectory() as scratch:
        run = run_experiment(config, out_dir or scratch)
        missing = missing_files(run)
        check("run directory contents", not missing, ", ".join(missing))
    return checks
