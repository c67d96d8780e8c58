"""Little-endian binary primitives shared by the dataset, buffer and synthetic-set files."""

from __future__ import annotations

import os
import struct
import tempfile
import zlib

import numpy as np


class FormatError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


class TruncatedError(FormatError):
    pass


class Writer:
    def __init__(self):
        self.parts = []

    def raw(self, b: bytes):
        self.parts.append(b)

    def u32(self, x):
        self.parts.append(struct.pack("<I", int(x)))

    def u64(self, x):
        self.parts.append(struct.pack("<Q", int(x)))

    def f64(self, x):
        self.parts.append(struct.pack("<d", float(x)))

    def text(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.raw(b)

    def checked(self, payload: bytes):
        self.raw(payload)
        self.u32(zlib.crc32(payload))

    def matrix(self, a: np.ndarray, with_dims: bool = True):
        a = np.ascontiguousarray(a, dtype="<f8")
        if with_dims:
            self.u64(a.shape[0])
            self.u64(a.shape[1])
        self.checked(a.tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    def __init__(self, data: bytes, what: str = "file"):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise TruncatedError(
                f"truncated {self.what}: expected at least {end} bytes, found {len(self.data)}"
            )
        out = self.data[self.pos : end]
        self.pos = end
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def checked(self, n: int, label: str) -> bytes:
        payload = self.take(n)
        crc = self.u32()
        if zlib.crc32(payload) != crc:
            raise IntegrityError(f"checksum mismatch in {label}")
        return payload

    def matrix(self, label: str, shape=None) -> np.ndarray:
        if shape is None:
            shape = (self.u64(), self.u64())
        payload = self.checked(8 * shape[0] * shape[1], label)
        return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)

    def magic(self, expected: bytes):
        found = self.take(len(expected))
        if found != expected:
            raise FormatError(f"bad magic: expected {expected!r}, found {found!r}")

    def version(self, expected: int):
        v = self.u32()
        if v != expected:
            raise FormatError(f"unsupported {self.what} version {v} (expected {expected})")

    def finish(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes in {self.what}")


def atomic_write(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()
