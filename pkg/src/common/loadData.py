"""Dataset files and the array view the trainers consume.

File layout (little-endian): magic ``TADS``, version u32, manifest block
(task u8, n u32, rho f64, corruption kind u8, seed u64, H u16, W u16), then
n records of id u32, group u32, flags u8 (bit 0 corrupted, bit 1 artefact),
label (class u16, or the mask as a packed bitset of ceil(H*W/8) bytes) and
H*W f64 features. A CSV with one row per sample is written next to it.
"""
import logging
import os
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from common.errors import IntegrityError, TruncatedFileError
from common.reader import BinaryReader, ByteCursor
from common.synthdata import CORRUPTION_CODES, TASK_CODES, DatasetManifest, DatasetSample
from common.writer import atomic_write

logger = logging.getLogger(__name__)

MAGIC = b"TADS"
VERSION = 1
MANIFEST_FORMAT = "<BIdBQHH"

CORRUPTED_BIT = 1
ARTEFACT_BIT = 2


def _label_bytes(task: str, height: int, width: int) -> int:
    return 2 if task == "classification" else (height * width + 7) // 8


def _record_size(task: str, height: int, width: int) -> int:
    return 4 + 4 + 1 + _label_bytes(task, height, width) + 8 * height * width


def encode_dataset(samples: Sequence[DatasetSample], manifest: DatasetManifest) -> bytes:
    height, width = manifest.image_size
    header = MAGIC + struct.pack("<I", VERSION) + struct.pack(
        MANIFEST_FORMAT,
        TASK_CODES[manifest.task], manifest.n, manifest.rho, CORRUPTION_CODES[manifest.kind],
        manifest.seed, height, width,
    )
    chunks = [header]
    for s in samples:
        flags = (CORRUPTED_BIT if s.corrupted else 0) | (ARTEFACT_BIT if s.artefact else 0)
        chunks.append(struct.pack("<IIB", s.id, s.group_id, flags))
        if manifest.task == "classification":
            chunks.append(struct.pack("<H", s.class_label))
        else:
            chunks.append(np.packbits(s.mask_label.reshape(-1).astype(np.uint8)).tobytes())
        chunks.append(np.ascontiguousarray(s.features, dtype="<f8").tobytes())
    return b"".join(chunks)


def _label_summary(sample: DatasetSample) -> str:
    if sample.class_label is not None:
        return f"class={sample.class_label}"
    return f"mask_pixels={int(sample.mask_label.sum())}"


def dataset_save(samples: Sequence[DatasetSample], manifest: DatasetManifest, path):
    if manifest.n != len(samples):
        raise IntegrityError(f"manifest says {manifest.n} samples, {len(samples)} given")
    atomic_write(path, encode_dataset(samples, manifest))
    csv_path = os.path.splitext(path)[0] + ".csv"
    df = pd.DataFrame(
        [(s.id, s.group_id, int(s.corrupted), _label_summary(s)) for s in samples],
        columns=["id", "group_id", "corrupted", "label_summary"],
    )
    df.to_csv(csv_path, index=False)
    logger.info(" Dataset of %d samples saved to %s", len(samples), path)


class DatasetReader(BinaryReader):
    magic = MAGIC
    versions = (VERSION,)

    def process(self, cursor: ByteCursor) -> Tuple[DatasetManifest, List[DatasetSample]]:
        task_code, n, rho, kind_code, seed, height, width = cursor.unpack(MANIFEST_FORMAT)
        task = {v: k for k, v in TASK_CODES.items()}.get(task_code)
        kind = {v: k for k, v in CORRUPTION_CODES.items()}.get(kind_code)
        if task is None or kind is None:
            raise IntegrityError(f"{cursor.name}: unknown task or corruption code ({task_code}, {kind_code})")
        manifest = DatasetManifest(task, n, rho, kind, seed, (height, width))

        record = _record_size(task, height, width)
        if cursor.remaining % record:
            raise TruncatedFileError(f"{cursor.name}: last record is incomplete")
        if cursor.remaining // record != n:
            raise IntegrityError(f"{cursor.name}: manifest lists {n} samples, file holds {cursor.remaining // record}")

        samples = []
        for _ in range(n):
            sample_id, group_id, flags = cursor.unpack("<IIB")
            class_label, mask = None, None
            if task == "classification":
                (class_label,) = cursor.unpack("<H")
            else:
                packed = np.frombuffer(cursor.take(_label_bytes(task, height, width)), dtype=np.uint8)
                mask = np.unpackbits(packed, count=height * width).reshape(height, width)
            features = cursor.array(height * width).reshape(1, height, width)
            samples.append(DatasetSample(
                sample_id, group_id, features, class_label, mask,
                corrupted=bool(flags & CORRUPTED_BIT), artefact=bool(flags & ARTEFACT_BIT),
            ))
        return manifest, samples


def dataset_load(path) -> Tuple[DatasetManifest, List[DatasetSample]]:
    manifest, samples = DatasetReader().read(path)
    logger.info(" Loaded %d %s samples from %s", len(samples), manifest.task, path)
    return manifest, samples


@dataclass
class DatasetArrays:
    """Stacked view of a sample list; ``targets`` are class ids or 1 x H x W masks."""

    task: str
    features: np.ndarray
    targets: np.ndarray
    ids: np.ndarray
    groups: np.ndarray
    corrupted: np.ndarray
    artefact: np.ndarray

    def __len__(self):
        return len(self.ids)

    def subset(self, indices) -> "DatasetArrays":
        indices = np.asarray(indices, dtype=np.int64)
        return DatasetArrays(
            self.task, self.features[indices], self.targets[indices], self.ids[indices],
            self.groups[indices], self.corrupted[indices], self.artefact[indices],
        )


def to_arrays(samples: Sequence[DatasetSample], task: Optional[str] = None) -> DatasetArrays:
    if task is None:
        task = "classification" if samples and samples[0].class_label is not None else "segmentation"
    if not samples:
        return DatasetArrays(task, np.zeros((0, 1, 0, 0)), np.zeros((0,)), *(np.zeros(0, dtype=np.int64),) * 2,
                             np.zeros(0, dtype=bool), np.zeros(0, dtype=bool))
    features = np.stack([s.features for s in samples]).astype(np.float64)
    if task == "classification":
        targets = np.array([s.class_label for s in samples], dtype=np.int64)
    else:
        targets = np.stack([s.mask_label[None] for s in samples]).astype(np.float64)
    return DatasetArrays(
        task,
        features,
        targets,
        np.array([s.id for s in samples], dtype=np.int64),
        np.array([s.group_id for s in samples], dtype=np.int64),
        np.array([s.corrupted for s in samples], dtype=bool),
        np.array([s.artefact for s in samples], dtype=bool),
    )
