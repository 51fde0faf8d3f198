"""Dense matrix helpers and a portable seeded random stream.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 with exactly two
dimensions. Sequences are Python lists of such matrices, one per timestep,
laid out as (features x batch).
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

Matrix = np.ndarray


class ShapeError(ValueError):
    pass


def as_matrix(a) -> Matrix:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


_EW_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def ew(a: Matrix, b: Matrix, op: str) -> Matrix:
    """Elementwise add/sub/mul of two equally shaped matrices (no broadcasting)."""
    if op not in _EW_OPS:
        raise ValueError(f"unknown elementwise op {op!r}")
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {op} needs equal shapes, got {a.shape} and {b.shape}")
    return _EW_OPS[op](a, b)


class RngState:
    """Seeded random stream.

    Uniforms come from numpy's PCG64 bit generator (``Generator.random``, 53-bit
    doubles). Normals are produced from those uniforms with the Box-Muller
    transform, so a stream is reproducible from the seed and the two documented
    algorithms alone.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, size) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self._gen.random((2, pairs))
        radius = np.sqrt(-2.0 * np.log1p(-u[0]))  # 1 - u in (0, 1]
        angle = 2.0 * np.pi * u[1]
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n]

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        return np.sort(self._gen.permutation(n)[:k])

    def state(self) -> dict:
        return self._gen.bit_generator.state


def randn(rng: RngState, rows: int, cols: int) -> Matrix:
    if rows < 1 or cols < 1:
        raise ShapeError(f"randn needs positive dimensions, got ({rows}, {cols})")
    return rng.normal(rows * cols).reshape(rows, cols)


def derive_seed(master: int, *keys: int) -> int:
    """Deterministic child seed for a (master, key...) path."""
    seq = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# serialization: little-endian u64 rows, u64 cols, then rows*cols f64 row-major

def write_matrix(fh: BinaryIO, m: Matrix) -> None:
    m = as_matrix(m)
    fh.write(struct.pack("<QQ", m.shape[0], m.shape[1]))
    fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def read_matrix(fh: BinaryIO) -> Matrix:
    header = fh.read(16)
    if len(header) != 16:
        raise EOFError("truncated matrix header")
    rows, cols = struct.unpack("<QQ", header)
    nbytes = rows * cols * 8
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise EOFError("truncated matrix payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)


def matrix_to_bytes(m: Matrix) -> bytes:
    buf = io.BytesIO()
    write_matrix(buf, m)
    return buf.getvalue()
