import json
import struct

import numpy as np
import pandas as pd

from common.errors import BadMagicError, IntegrityError, TruncatedFileError, UnsupportedVersionError


class Reader:
    def __init__(self, encoding="utf-8"):
        self.enc = encoding

    def read(self, file):
        with open(file, "r", encoding=self.enc) as f:
            return self.process(f)

    def process(self, f):
        pass


class CSVReader(Reader):
    def process(self, fp):
        return pd.read_csv(fp)


class JSONReader(Reader):
    def process(self, fp):
        return json.load(fp)


class ByteCursor:
    """Sequential little-endian reads over an in-memory buffer."""

    def __init__(self, buffer: bytes, name="<buffer>"):
        self.buffer = buffer
        self.offset = 0
        self.name = name

    @property
    def remaining(self) -> int:
        return len(self.buffer) - self.offset

    def take(self, n: int) -> bytes:
        if n > self.remaining:
            raise TruncatedFileError(f"{self.name}: unexpected end of file at byte {self.offset}")
        chunk = self.buffer[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, count: int, dtype="<f8") -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype).astype(dtype.newbyteorder("="))


class BinaryReader(Reader):
    """Reads a whole file, checks magic and version, then hands a cursor to ``process``.

    Nothing is returned unless the entire file parsed.
    """

    magic = b""
    versions = (1,)

    def read(self, file):
        with open(file, "rb") as f:
            buffer = f.read()
        cursor = ByteCursor(buffer, str(file))
        head = buffer[:len(self.magic)]
        if head != self.magic:
            if len(buffer) < len(self.magic) and self.magic.startswith(head):
                raise TruncatedFileError(f"{file}: file too short for a header")
            raise BadMagicError(f"{file}: expected magic {self.magic!r}, found {head!r}")
        cursor.take(len(self.magic))
        (version,) = cursor.unpack("<I")
        if version not in self.versions:
            raise UnsupportedVersionError(f"{file}: format version {version} is not supported")
        result = self.process(cursor)
        if cursor.remaining:
            raise IntegrityError(f"{file}: {cursor.remaining} trailing bytes after last record")
        return result

    def process(self, cursor: ByteCursor):
        pass
