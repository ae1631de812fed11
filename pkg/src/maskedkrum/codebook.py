"""Noise codebooks: N mask vectors whose pairwise squared distances all equal C.

Construction: draw N Gaussian vectors, orthonormalize them with modified
Gram-Schmidt plus one re-orthogonalization sweep, then scale every row to
norm sqrt(C/2). Orthogonal rows of equal squared norm C/2 are pairwise at
squared distance exactly C.

On-disk layout (little-endian)::

    magic "NCBK" | version u16 = 1 | reserved u16 | N u32 | d u32 | C f64 | seed u64
    N * d float64 values, row-major
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DimensionError, ValidationError

MAGIC = b"NCBK"
VERSION = 1
HEADER = struct.Struct("<4sHHIIdQ")
assert HEADER.size == 32

RELATIVE_TOL = 1e-8
DEGENERATE_RESIDUAL = 1e-12
MAX_RETRIES = 3


class RankError(ValidationError):
    """Fewer dimensions than vectors; no orthogonal set exists."""


class CodebookDegenerateError(RuntimeError):
    """Gram-Schmidt kept producing (near) linearly dependent draws."""


class CodebookFormatError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseCodebook:
    n: int
    dim: int
    constant: float
    seed: int
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64, copy=True)
        if v.shape != (self.n, self.dim):
            raise DimensionError(f"vectors have shape {v.shape}, expected ({self.n}, {self.dim})")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    def row(self, i: int) -> np.ndarray:
        return self.vectors[i]

    def to_bytes(self) -> bytes:
        head = HEADER.pack(MAGIC, VERSION, 0, self.n, self.dim, float(self.constant), self.seed)
        return head + self.vectors.astype("<f8", copy=False).tobytes(order="C")

    @classmethod
    def from_bytes(cls, blob: bytes) -> "NoiseCodebook":
        if len(blob) < HEADER.size:
            raise CodebookFormatError("file shorter than the 32-byte header")
        magic, version, _reserved, n, d, c, seed = HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise CodebookFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CodebookFormatError(f"unsupported version {version}")
        expected = HEADER.size + 8 * n * d
        if len(blob) != expected:
            raise CodebookFormatError(f"expected {expected} bytes, got {len(blob)}")
        vec = np.frombuffer(blob, dtype="<f8", offset=HEADER.size).reshape(n, d)
        return cls(n=n, dim=d, constant=c, seed=seed, vectors=vec)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "NoiseCodebook":
        return cls.from_bytes(Path(path).read_bytes())


def _orthonormalize(draws: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt with a second (re-orthogonalization) sweep.

    Raises ``CodebookDegenerateError`` if a residual falls below
    ``DEGENERATE_RESIDUAL`` relative to the original row norm.
    """
    n, _ = draws.shape
    q = np.empty_like(draws)
    for i in range(n):
        v = draws[i].copy()
        start = np.linalg.norm(v)
        for _sweep in range(2):
            for j in range(i):
                v -= np.dot(q[j], v) * q[j]
        residual = np.linalg.norm(v)
        if not residual >= DEGENERATE_RESIDUAL * start or residual == 0.0:
            raise CodebookDegenerateError(f"row {i} collapsed during orthogonalization")
        q[i] = v / residual
    return q


def build_codebook(n: int, dim: int, constant: float, seed: int) -> NoiseCodebook:
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    if dim < n:
        raise RankError(f"cannot orthogonalize {n} vectors in fewer than {n} dimensions (d={dim})")
    if not (constant > 0 and math.isfinite(constant)):
        raise ValidationError(f"constant must be positive and finite, got {constant}")
    if not 0 <= seed < 2**64:
        raise ValidationError("seed must fit in an unsigned 64-bit integer")

    rng = np.random.default_rng(seed)
    for _attempt in range(1 + MAX_RETRIES):
        draws = rng.standard_normal((n, dim))
        try:
            unit = _orthonormalize(draws)
            break
        except CodebookDegenerateError:
            continue
    else:
        raise CodebookDegenerateError(f"orthogonalization failed after {MAX_RETRIES} retries")

    # Scaling is the only step that depends on C.
    return NoiseCodebook(n=n, dim=dim, constant=float(constant), seed=seed,
                         vectors=unit * math.sqrt(constant / 2))


@dataclass(frozen=True)
class CodebookReport:
    n_pairs: int
    max_pair_deviation: float
    max_norm_deviation: float
    max_dot: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return (self.max_pair_deviation <= self.tolerance
                and self.max_norm_deviation <= self.tolerance
                and self.max_dot <= self.tolerance)

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "n_pairs": self.n_pairs,
            "max_pair_deviation": self.max_pair_deviation,
            "max_norm_deviation": self.max_norm_deviation,
            "max_dot": self.max_dot,
            "tolerance": self.tolerance,
        }


def verify_codebook(cb: NoiseCodebook) -> CodebookReport:
    """Exhaustive check of every pair distance, norm and dot product."""
    c = cb.constant
    v = cb.vectors
    half = c / 2
    max_norm = 0.0
    for i in range(cb.n):
        max_norm = max(max_norm, abs(float(np.dot(v[i], v[i])) - half))
    max_pair = max_dot = 0.0
    pairs = 0
    for i in range(cb.n):
        for j in range(i + 1, cb.n):
            diff = v[i] - v[j]
            max_pair = max(max_pair, abs(float(np.dot(diff, diff)) - c))
            max_dot = max(max_dot, abs(float(np.dot(v[i], v[j]))))
            pairs += 1
    return CodebookReport(pairs, max_pair, max_norm, max_dot, RELATIVE_TOL * c)


def equivalent_sigma(cb: NoiseCodebook) -> float:
    """Per-coordinate Gaussian scale the codebook approximates: sqrt(C / 2d)."""
    return math.sqrt(cb.constant / (2 * cb.dim))


def round_seed(master_seed: int, round_index: int) -> int:
    """Derive a per-round codebook seed from the master seed."""
    ss = np.random.SeedSequence([master_seed, round_index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
