"""Task metrics, rejection sweeps and agreement statistics."""
import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from scipy import stats  # noqa: E402
from sklearn.metrics import accuracy_score, confusion_matrix, roc_auc_score  # noqa: E402

from common.errors import (  # noqa: E402
    EmptyInputError,
    NonBinaryMaskError,
    ParameterMismatchError,
    ParameterRangeError,
    SingleClassError,
)

logger = logging.getLogger(__name__)

plt.style.use('ggplot')

RATIO_EPS = 1e-9


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.size == 0:
        raise EmptyInputError("accuracy of an empty prediction set")
    if predictions.shape != labels.shape:
        raise ParameterMismatchError(f"{predictions.shape} predictions vs {labels.shape} labels")
    return float(accuracy_score(labels, predictions))


def dice(pred_mask, true_mask) -> float:
    """2|P & T| / (|P| + |T|); two empty masks score 1.0."""
    p, t = np.asarray(pred_mask), np.asarray(true_mask)
    if p.shape != t.shape:
        raise ParameterMismatchError(f"mask shapes differ: {p.shape} vs {t.shape}")
    if not (np.isin(p, (0, 1)).all() and np.isin(t, (0, 1)).all()):
        raise NonBinaryMaskError("dice needs binary masks")
    total = float(p.sum() + t.sum())
    if total == 0:
        return 1.0
    return 2.0 * float(np.sum(p * t)) / total


def per_sample_metric(task: str, outputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-sample 0/1 correctness (classification) or Dice of logits > 0 (segmentation)."""
    if task == "classification":
        return (np.argmax(outputs, axis=1) == targets).astype(np.float64)
    predicted = (outputs > 0).reshape(len(outputs), -1)
    truth = targets.reshape(len(targets), -1) > 0.5
    overlap = np.logical_and(predicted, truth).sum(axis=1)
    total = predicted.sum(axis=1) + truth.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(total == 0, 1.0, 2.0 * overlap / np.maximum(total, 1))
    return scores.astype(np.float64)


def lowest_first(scores, ids) -> np.ndarray:
    """Indices ordered by ascending score, ties by ascending sample id."""
    return np.lexsort((np.asarray(ids), np.asarray(scores)))


def rejected_count(ratio: float, n: int) -> int:
    return int(np.floor(ratio * n + RATIO_EPS))


@dataclass
class SweepPoint:
    ratio: float
    mean_metric: float
    stdev_group: float
    n_kept: int
    group_means: Dict[int, float] = field(default_factory=dict)


@dataclass
class SweepResult:
    points: List[SweepPoint]
    metric: str = "accuracy"

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(p.ratio, p.mean_metric, p.stdev_group, p.n_kept) for p in self.points],
            columns=["ratio", "mean_metric", "stdev_group", "n_kept"],
        )

    def groups_frame(self) -> pd.DataFrame:
        rows = [(p.ratio, g, m) for p in self.points for g, m in sorted(p.group_means.items())]
        return pd.DataFrame(rows, columns=["ratio", "group_id", "mean_metric"])

    def best(self) -> SweepPoint:
        """Highest mean metric; the smallest ratio wins ties."""
        return max(self.points, key=lambda p: (p.mean_metric, -p.ratio))

    def at(self, ratio: float) -> SweepPoint:
        for p in self.points:
            if abs(p.ratio - ratio) < RATIO_EPS:
                return p
        raise KeyError(ratio)


def sweep_from_scores(scores, per_sample, ids, groups, ratios: Sequence[float], metric="accuracy") -> SweepResult:
    scores, per_sample = np.asarray(scores, dtype=np.float64), np.asarray(per_sample, dtype=np.float64)
    ids, groups = np.asarray(ids), np.asarray(groups)
    n = len(per_sample)
    if n == 0:
        raise EmptyInputError("rejection sweep over an empty holdout set")
    ratios = sorted(set(float(r) for r in ratios))
    if any(not 0.0 <= r < 1.0 for r in ratios):
        raise ParameterRangeError(f"rejection ratios must lie in [0, 1), got {ratios}")

    order = lowest_first(scores, ids)
    points = []
    for ratio in ratios:
        keep = np.ones(n, dtype=bool)
        keep[order[:rejected_count(ratio, n)]] = False
        kept_values = per_sample[keep]
        group_means = {
            int(g): float(per_sample[keep & (groups == g)].mean())
            for g in np.unique(groups[keep])
        }
        spread = float(np.std(list(group_means.values()), ddof=1)) if len(group_means) > 1 else float("nan")
        points.append(SweepPoint(ratio, float(kept_values.mean()), spread, int(keep.sum()), group_means))
    return SweepResult(points, metric)


def rejection_sweep(controller, predictor, holdout, ratios: Sequence[float]) -> SweepResult:
    """Drop the lowest-scored holdout samples at each ratio and evaluate the rest.

    ``controller`` may be None (non-selective baseline); every sample then
    scores 1 and rejection falls back to id order.
    """
    outputs = predictor.predict(holdout.features)
    per_sample = per_sample_metric(holdout.task, outputs, holdout.targets)
    scores = np.ones(len(holdout)) if controller is None else controller.predict(holdout.features)
    metric = "accuracy" if holdout.task == "classification" else "dice"
    return sweep_from_scores(scores, per_sample, holdout.ids, holdout.groups, ratios, metric)


@dataclass
class ContingencyTable2x2:
    """Rows: controller low/high; columns: subjective low/high."""

    low_low: int
    low_high: int
    high_low: int
    high_high: int

    @property
    def total(self) -> int:
        return self.low_low + self.low_high + self.high_low + self.high_high

    @property
    def low_agreement(self) -> float:
        """Share of controller-rejected samples that are subjectively low too."""
        predicted_low = self.low_low + self.low_high
        return self.low_low / predicted_low if predicted_low else float("nan")

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.low_low, self.low_high], [self.high_low, self.high_high]], dtype=np.int64)

    def transpose(self) -> "ContingencyTable2x2":
        return ContingencyTable2x2(self.low_low, self.high_low, self.low_high, self.high_high)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{
            "low_low": self.low_low, "low_high": self.low_high,
            "high_low": self.high_low, "high_high": self.high_high,
            "kappa": cohens_kappa(self), "low_agreement": self.low_agreement,
        }])


def contingency(scores, subjective_high, fraction: float, ids=None) -> ContingencyTable2x2:
    """The floor(fraction * N) lowest scores are predicted low; cross-tabulate against subjective labels."""
    scores = np.asarray(scores, dtype=np.float64)
    subjective_high = np.asarray(subjective_high, dtype=bool)
    n = len(scores)
    if n == 0:
        raise EmptyInputError("contingency table over no samples")
    if not 0.0 < fraction < 1.0:
        raise ParameterRangeError(f"rejection fraction must lie in (0, 1), got {fraction}")
    ids = np.arange(n) if ids is None else np.asarray(ids)

    predicted_low = np.zeros(n, dtype=np.int64)
    predicted_low[lowest_first(scores, ids)[:rejected_count(fraction, n)]] = 1
    subjective_low = (~subjective_high).astype(np.int64)
    # rows follow y_true, columns y_pred
    cm = confusion_matrix(subjective_low, predicted_low, labels=[1, 0])
    return ContingencyTable2x2(int(cm[0, 0]), int(cm[1, 0]), int(cm[0, 1]), int(cm[1, 1]))


def cohens_kappa(table: ContingencyTable2x2) -> float:
    n = table.total
    if n == 0:
        raise EmptyInputError("kappa of an empty table")
    a, b, c, d = table.low_low, table.low_high, table.high_low, table.high_high
    agree = a + d
    # integer arithmetic keeps hand-checkable tables exact
    expected = (a + b) * (a + c) + (c + d) * (b + d)
    if n * n == expected:
        return 1.0 if agree == n else 0.0
    return (n * agree - expected) / (n * n - expected)


def roc_auc(scores, flags) -> float:
    flags = np.asarray(flags).astype(int)
    if len(np.unique(flags)) < 2:
        raise SingleClassError("ROC-AUC needs both classes present")
    return float(roc_auc_score(flags, np.asarray(scores, dtype=np.float64)))


def paired_t_test(a, b) -> Tuple[float, float]:
    """Two-sided paired t-test; constant differences give p = 0 (nonzero mean) or p = 1."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ParameterMismatchError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise ParameterRangeError("paired t-test needs at least 2 pairs")
    d = a - b
    if np.ptp(d) == 0:
        mean = float(d[0])
        if mean == 0:
            return float("nan"), 1.0
        return float(np.copysign(np.inf, mean)), 0.0
    result = stats.ttest_rel(a, b)
    return float(result.statistic), float(result.pvalue)


def plot_contingency(table: ContingencyTable2x2, path, title="Controller vs subjective amenability", cmap=None):
    """Heat map of the 2x2 table with counts and kappa, saved to ``path``."""
    cm = table.as_matrix()
    if cmap is None:
        cmap = plt.get_cmap('Blues')

    fig = plt.figure(figsize=(5, 4))
    plt.imshow(cm, interpolation='nearest', cmap=cmap)
    plt.title(title)
    plt.colorbar()
    names = ["low", "high"]
    plt.xticks([0, 1], names)
    plt.yticks([0, 1], names)

    thresh = cm.max() / 2
    for i, j in itertools.product(range(2), range(2)):
        plt.text(j, i, "{:,}".format(cm[i, j]),
                 horizontalalignment="center",
                 color="white" if cm[i, j] > thresh else "black")

    plt.tight_layout()
    plt.ylabel('Controller')
    plt.xlabel('Subjective\nkappa={:0.4f}; low agreement={:0.4f}'.format(cohens_kappa(table), table.low_agreement))
    fig.savefig(path)
    plt.close(fig)


def plot_rejection_curves(curves: Mapping[str, SweepResult], path, baseline: Optional[float] = None):
    """Mean metric against rejection ratio, one line per strategy."""
    fig = plt.figure(figsize=(6, 4))
    metric = "metric"
    for label, sweep in curves.items():
        frame = sweep.to_frame()
        metric = sweep.metric
        plt.errorbar(frame["ratio"], frame["mean_metric"], yerr=frame["stdev_group"].fillna(0.0),
                     marker="o", capsize=3, label=label)
    if baseline is not None:
        plt.axhline(baseline, color="grey", linestyle="--", label="baseline")
    plt.xlabel("Rejection ratio")
    plt.ylabel(metric)
    plt.legend()
    plt.tight_layout()
    fig.savefig(path)
    plt.close(fig)
