"""Synthetic image datasets with known corruption.

Every image is 1 x H x W. Classification images contain a bright ellipse
(class 1) or only background (class 0); segmentation images always contain
an ellipse and carry its mask. A fixed share of samples is corrupted and
flagged, which gives a ground truth for how amenable each sample is to the
task.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from common.errors import InvalidFractionError, ParameterRangeError, TooFewGroupsError

logger = logging.getLogger(__name__)

TASKS = ("classification", "segmentation")
CORRUPTIONS = {
    "classification": ("label-noise", "occlusion", "blur+noise"),
    "segmentation": ("mask-dropout", "occlusion", "blur+noise"),
}
# stable codes for the dataset file
TASK_CODES = {"classification": 0, "segmentation": 1}
CORRUPTION_CODES = {"label-noise": 0, "mask-dropout": 1, "occlusion": 2, "blur+noise": 3}

SIGNAL = 1.0
BACKGROUND_NOISE = 0.1
CORRUPTION_NOISE = 3.0 * SIGNAL


@dataclass
class DatasetSample:
    id: int
    group_id: int
    features: np.ndarray
    class_label: Optional[int] = None
    mask_label: Optional[np.ndarray] = None
    corrupted: bool = False
    artefact: bool = False

    @property
    def subjective_amenability(self) -> bool:
        return not self.corrupted

    def same_as(self, other: "DatasetSample") -> bool:
        masks_equal = (self.mask_label is None and other.mask_label is None) or (
            self.mask_label is not None and other.mask_label is not None
            and np.array_equal(self.mask_label, other.mask_label)
        )
        return (
            (self.id, self.group_id, self.class_label, self.corrupted, self.artefact)
            == (other.id, other.group_id, other.class_label, other.corrupted, other.artefact)
            and masks_equal
            and np.array_equal(self.features, other.features)
        )


@dataclass
class DatasetManifest:
    task: str
    n: int
    rho: float
    kind: str
    seed: int
    image_size: Tuple[int, int] = (16, 16)
    counts: Dict[str, int] = field(default_factory=dict)


def corrupted_count(n: int, rho: float) -> int:
    """round(rho * n) with halves rounded up."""
    return int(np.floor(rho * n + 0.5))


def _check_arguments(task, n, groups, rho, kind, image_size):
    if n <= 0:
        raise ParameterRangeError(f"n must be positive, got {n}")
    if not 0.0 <= rho < 1.0:
        raise InvalidFractionError(f"corruption fraction must lie in [0, 1), got {rho}")
    if groups < 2:
        raise TooFewGroupsError(f"need at least 2 groups, got {groups}")
    if groups > n:
        raise ParameterRangeError(f"{groups} groups cannot be filled by {n} samples")
    if kind not in CORRUPTIONS[task]:
        raise ParameterRangeError(f"{task} does not support corruption {kind!r}; choose from {CORRUPTIONS[task]}")
    if image_size < 8 or image_size % 4:
        raise ParameterRangeError(f"image size must be a multiple of 4 and >= 8, got {image_size}")


def _ellipse(rng, size: int) -> np.ndarray:
    """Random filled ellipse, fully inside the frame."""
    radius_a, radius_b = rng.uniform(0.15, 0.28, size=2) * size
    margin = max(radius_a, radius_b) + 1
    cy, cx = rng.uniform(margin, size - 1 - margin, size=2)
    angle = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    return ((u / radius_a) ** 2 + (v / radius_b) ** 2 <= 1.0).astype(np.uint8)


def _background(rng, size: int) -> np.ndarray:
    texture = ndimage.uniform_filter(rng.normal(0.0, 1.0, (size, size)), size=3, mode="reflect")
    return BACKGROUND_NOISE * texture / max(texture.std(), 1e-12)


def _occlude(rng, image: np.ndarray) -> np.ndarray:
    h, w = image.shape
    out = image.copy()
    side = rng.integers(4)
    if side == 0:
        out[: h // 2] = 0.0
    elif side == 1:
        out[h // 2:] = 0.0
    elif side == 2:
        out[:, : w // 2] = 0.0
    else:
        out[:, w // 2:] = 0.0
    return out


def _blur_noise(rng, image: np.ndarray) -> np.ndarray:
    return ndimage.uniform_filter(image, size=3, mode="reflect") + rng.normal(0.0, CORRUPTION_NOISE, image.shape)


def _mild_blur(image: np.ndarray) -> np.ndarray:
    return ndimage.uniform_filter(image, size=3, mode="reflect")


def mask_dice(a: np.ndarray, b: np.ndarray) -> float:
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * float(np.logical_and(a, b).sum()) / total


def _drop_mask(rng, mask: np.ndarray) -> np.ndarray:
    """Empty or displaced mask, always with Dice < 0.5 against the true one."""
    if rng.random() < 0.5:
        return np.zeros_like(mask)
    size = mask.shape[0]
    for _ in range(16):
        dy, dx = rng.integers(size // 4, size // 2 + 1, size=2) * rng.choice([-1, 1], size=2)
        shifted = np.roll(mask, (dy, dx), axis=(0, 1))
        if mask_dice(shifted, mask) < 0.5:
            return shifted
    return np.zeros_like(mask)


def _pick(rng, candidates: np.ndarray, count: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(rng.choice(candidates, size=count, replace=False))


def _generate(task, n, groups, rho, kind, seed, image_size, artefact_fraction):
    _check_arguments(task, n, groups, rho, kind, image_size)
    rng = np.random.default_rng(seed)

    samples = []
    for i in range(n):
        image = _background(rng, image_size)
        if task == "classification":
            label = int(rng.integers(2))
            if label:
                image = image + SIGNAL * _ellipse(rng, image_size)
            samples.append(DatasetSample(i, i * groups // n, image[None], class_label=label))
        else:
            mask = _ellipse(rng, image_size)
            image = image + SIGNAL * mask
            samples.append(DatasetSample(i, i * groups // n, image[None], mask_label=mask))

    corrupted = _pick(rng, np.arange(n), corrupted_count(n, rho))
    for i in corrupted:
        sample = samples[i]
        sample.corrupted = True
        if kind == "label-noise":
            sample.class_label = 1 - sample.class_label
        elif kind == "mask-dropout":
            sample.mask_label = _drop_mask(rng, sample.mask_label)
        elif kind == "occlusion":
            sample.features = _occlude(rng, sample.features[0])[None]
        else:
            sample.features = _blur_noise(rng, sample.features[0])[None]

    clean = np.setdiff1d(np.arange(n), corrupted)
    for i in _pick(rng, clean, min(len(clean), corrupted_count(len(clean), artefact_fraction))):
        samples[i].artefact = True
        samples[i].features = _mild_blur(samples[i].features[0])[None]

    logger.info(
        " Generated %d %s samples: %d corrupted (%s), %d with harmless artefacts",
        n, task, len(corrupted), kind, sum(s.artefact for s in samples),
    )
    return samples


def gen_classification(n: int, groups: int, rho: float, kind: str = "label-noise", seed: int = 0,
                       image_size: int = 16, artefact_fraction: float = 0.1) -> List[DatasetSample]:
    return _generate("classification", n, groups, rho, kind, seed, image_size, artefact_fraction)


def gen_segmentation(n: int, groups: int, rho: float, kind: str = "mask-dropout", seed: int = 0,
                     image_size: int = 16, artefact_fraction: float = 0.1) -> List[DatasetSample]:
    return _generate("segmentation", n, groups, rho, kind, seed, image_size, artefact_fraction)


def generate(manifest: DatasetManifest, groups: int, artefact_fraction: float = 0.1) -> List[DatasetSample]:
    gen = gen_classification if manifest.task == "classification" else gen_segmentation
    return gen(manifest.n, groups, manifest.rho, manifest.kind, manifest.seed, manifest.image_size[0], artefact_fraction)


def split(samples: Sequence[DatasetSample], fractions=(0.7, 0.15, 0.15), seed: int = 0):
    """Group-level split into (train, validation, holdout).

    Groups are shuffled and handed out by rounded share of the group count;
    the holdout takes whatever is left. Sample order inside a split follows
    the input order.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 or f > 1 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidFractionError(f"split fractions must be three values in [0, 1] summing to 1, got {fractions}")
    group_ids = np.unique([s.group_id for s in samples])
    if len(group_ids) <= 3:
        raise TooFewGroupsError(f"group-level split needs more than 3 groups, got {len(group_ids)}")

    order = np.random.default_rng(seed).permutation(group_ids)
    n_groups = len(order)
    n_train = corrupted_count(n_groups, fractions[0])
    n_val = min(corrupted_count(n_groups, fractions[1]), n_groups - n_train)
    assignment = {}
    for position, group in enumerate(order):
        assignment[int(group)] = 0 if position < n_train else 1 if position < n_train + n_val else 2

    parts = ([], [], [])
    for sample in samples:
        parts[assignment[sample.group_id]].append(sample)
    logger.info(
        " Split %d groups into %d/%d/%d (train/validation/holdout), %d/%d/%d samples",
        n_groups, n_train, n_val, n_groups - n_train - n_val, *(len(p) for p in parts),
    )
    return parts


def clean_validation_filter(samples: Sequence[DatasetSample]) -> List[DatasetSample]:
    return [s for s in samples if not s.corrupted]


def describe(samples: Sequence[DatasetSample]) -> Dict[str, int]:
    summary = {
        "samples": len(samples),
        "groups": len({s.group_id for s in samples}),
        "corrupted": sum(s.corrupted for s in samples),
        "artefact": sum(s.artefact for s in samples),
    }
    labels = [s.class_label for s in samples if s.class_label is not None]
    for value in sorted(set(labels)):
        summary[f"class_{value}"] = labels.count(value)
    return summary
