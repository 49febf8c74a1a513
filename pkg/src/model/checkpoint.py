"""Binary checkpoint files.

Layout (little-endian): magic ``TAMS``, version u32, tensor count u32, then
per tensor: name length u16, UTF-8 name, rank u8, extents u32 x rank and
f64 data. Several parameter sets share one file through ``group/`` name
prefixes (``controller/layer0.weight``).
"""
import logging
import struct
from typing import Dict, Mapping, Optional

import numpy as np

from common.errors import CheckpointShapeError
from common.reader import BinaryReader, ByteCursor
from common.writer import atomic_write
from model.networks import NetworkSpec, ParameterSet, init_network
from ndgrad import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"TAMS"
VERSION = 1


def encode_checkpoint(groups: Mapping[str, ParameterSet]) -> bytes:
    chunks = []
    count = 0
    for group, params in groups.items():
        for name, tensor in params.items():
            data = np.ascontiguousarray(tensor.data, dtype="<f8")
            key = f"{group}/{name}".encode("utf-8")
            chunks.append(struct.pack("<H", len(key)) + key)
            chunks.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
            chunks.append(data.tobytes())
            count += 1
    return MAGIC + struct.pack("<II", VERSION, count) + b"".join(chunks)


def checkpoint_save(path, **groups: ParameterSet):
    atomic_write(path, encode_checkpoint(groups))
    logger.info(" Checkpoint with %d parameter sets saved to %s", len(groups), path)


class CheckpointReader(BinaryReader):
    magic = MAGIC
    versions = (VERSION,)

    def process(self, cursor: ByteCursor) -> Dict[str, ParameterSet]:
        (count,) = cursor.unpack("<I")
        groups: Dict[str, ParameterSet] = {}
        for _ in range(count):
            (length,) = cursor.unpack("<H")
            key = cursor.take(length).decode("utf-8")
            (rank,) = cursor.unpack("<B")
            shape = cursor.unpack(f"<{rank}I") if rank else ()
            data = cursor.array(int(np.prod(shape)) if rank else 1).reshape(shape)
            group, _, name = key.rpartition("/")
            groups.setdefault(group, ParameterSet())[name] = Tensor(data, copy=False)
        return groups


def checkpoint_load(path, expected: Optional[Mapping[str, NetworkSpec]] = None) -> Dict[str, ParameterSet]:
    """Load every parameter set in a checkpoint file.

    With ``expected`` (group -> spec), every group is checked against the
    parameter shapes that spec initialises to.
    """
    groups = CheckpointReader().read(path)
    if expected:
        for group, spec in expected.items():
            reference = init_network(spec, 0)
            stored = groups.get(group)
            if stored is None:
                raise CheckpointShapeError(f"{path}: no parameters for {group!r}")
            if stored.keys() != reference.keys():
                raise CheckpointShapeError(f"{path}: {group} parameter names do not match the network")
            for name, tensor in reference.items():
                if stored[name].shape != tensor.shape:
                    raise CheckpointShapeError(
                        f"{path}: {group}/{name} has shape {stored[name].shape}, network expects {tensor.shape}"
                    )
    return groups
