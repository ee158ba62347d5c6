"""Sobol' points in base 2 with a random linear scramble and digital shift.

Digits are held as 32-bit unsigned integers, most significant bit first, so
digit ``k`` (1-based) of a coordinate lives at bit position ``32 - k``.

The scramble of one coordinate is ``y = L x XOR d`` over GF(2), where ``L`` is
unit lower triangular in digit order: output digit ``k`` depends only on input
digits ``1..k``.  Column ``l`` of ``L`` is stored as a 32-bit integer with the
diagonal bit at position ``32 - l`` and random bits strictly below it.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from .errors import CapacityError, DirectionFileError

BITS = 32
SCALE = 2.0 ** -BITS
CLAMP_LO = 2.0 ** -64
# 1 - 2**-64 is not representable in float64; this is the largest double below 1.
CLAMP_HI = float(np.nextafter(1.0, 0.0))

DIRS_ENV = "RQMCLAB_DIRS"
DEFAULT_DIRS_NAME = "new-joe-kuo-6.1024.txt"

# Stream tags keep the pilot-run randomization disjoint from the replicates.
STREAM_REPLICATE = 0
STREAM_PILOT = 1


@dataclass(frozen=True)
class DirectionRecord:
    dim: int
    degree: int
    poly: int
    m: tuple[int, ...]


@dataclass(frozen=True)
class DirectionNumbers:
    """Parsed Joe-Kuo table. ``records[0]`` describes dimension 2."""

    records: tuple[DirectionRecord, ...]
    source: str = "<stream>"

    @property
    def dimension_count(self) -> int:
        # dimension 1 is implicit
        return len(self.records) + 1

    def require(self, s: int) -> None:
        if s < 1:
            raise CapacityError(f"dimension must be positive, got {s}")
        if s > self.dimension_count:
            raise CapacityError(
                f"direction numbers from {self.source} support {self.dimension_count} "
                f"dimensions, {s} requested"
            )


def _parse_lines(lines: Iterable[str], max_dim: int | None, source: str) -> DirectionNumbers:
    records: list[DirectionRecord] = []
    expected = 2
    for lineno, raw in enumerate(lines, start=1):
        if lineno == 1:
            continue  # header
        text = raw.strip()
        if not text:
            continue
        if max_dim is not None and expected > max_dim:
            break
        fields = text.split()
        try:
            values = [int(v) for v in fields]
        except ValueError:
            raise DirectionFileError(f"non-integer field in {text!r}", lineno) from None
        if len(values) < 4:
            raise DirectionFileError("record needs d, s, a and at least one m", lineno)
        dim, degree, poly, m = values[0], values[1], values[2], values[3:]
        if dim != expected:
            raise DirectionFileError(f"expected dimension {expected}, found {dim}", lineno)
        if degree < 1:
            raise DirectionFileError(f"degree must be >= 1, got {degree}", lineno)
        if len(m) != degree:
            raise DirectionFileError(f"degree {degree} but {len(m)} direction integers", lineno)
        if not 0 <= poly < (1 << max(degree - 1, 0)) or (degree == 1 and poly != 0):
            raise DirectionFileError(f"polynomial code {poly} out of range for degree {degree}", lineno)
        for k, mk in enumerate(m, start=1):
            if mk % 2 == 0:
                raise DirectionFileError(f"m_{k} = {mk} is even", lineno)
            if not 0 < mk < (1 << k):
                raise DirectionFileError(f"m_{k} = {mk} is not below 2^{k}", lineno)
        records.append(DirectionRecord(dim, degree, poly, tuple(m)))
        expected += 1
    return DirectionNumbers(tuple(records), source)


def load_direction_numbers(
    source: str | os.PathLike | IO[str] | IO[bytes] | bytes | None = None,
    max_dim: int | None = None,
) -> DirectionNumbers:
    """Read a direction-number table in the Joe-Kuo text layout.

    ``source`` may be a path, a text or binary stream, or raw bytes.  ``None``
    selects ``$RQMCLAB_DIRS`` when set and the bundled table otherwise.
    Only records up to ``max_dim`` are parsed.
    """
    if source is None:
        env = os.environ.get(DIRS_ENV)
        if env:
            source = env
        else:
            ref = resources.files("rqmclab.data").joinpath(DEFAULT_DIRS_NAME)
            with ref.open("r", encoding="ascii") as fh:
                return _parse_lines(fh, max_dim, DEFAULT_DIRS_NAME)
    if isinstance(source, bytes):
        return _parse_lines(io.StringIO(source.decode("ascii")), max_dim, "<bytes>")
    if isinstance(source, (str, os.PathLike)):
        path = Path(source)
        if not path.is_file():
            raise DirectionFileError(f"direction-number file not found: {path}")
        with path.open("r", encoding="ascii") as fh:
            return _parse_lines(fh, max_dim, str(path))
    data = source.read()
    if isinstance(data, bytes):
        data = data.decode("ascii")
    return _parse_lines(io.StringIO(data), max_dim, getattr(source, "name", "<stream>"))


def _direction_integers(rec: DirectionRecord | None) -> list[int]:
    """All 32 direction integers ``m_k`` for one dimension."""
    if rec is None:
        return [1] * BITS
    deg = rec.degree
    m = list(rec.m)
    # a_1 is the most significant bit of the polynomial code
    a = [(rec.poly >> (deg - 1 - i)) & 1 for i in range(1, deg)]
    for k in range(deg, BITS):
        new = m[k - deg] ^ (m[k - deg] << deg)
        for i in range(1, deg):
            if a[i - 1]:
                new ^= m[k - i] << i
        m.append(new)
    return m[:BITS]


class SobolGenerator:
    """Unscrambled Sobol' digits in Gray-code order.

    ``matrices[j, k-1]`` is column ``k`` of the generating matrix of
    dimension ``j``: ``m_k << (32 - k)``, whose leading bit sits at digit ``k``.
    """

    def __init__(self, s: int, dirs: DirectionNumbers | None = None):
        if dirs is None:
            dirs = load_direction_numbers(max_dim=s)
        dirs.require(s)
        self.s = s
        self.dirs_source = dirs.source
        cols = np.zeros((s, BITS), dtype=np.uint32)
        for j in range(s):
            rec = None if j == 0 else dirs.records[j - 1]
            m = _direction_integers(rec)
            for k in range(1, BITS + 1):
                cols[j, k - 1] = (m[k - 1] << (BITS - k)) & 0xFFFFFFFF
        cols.setflags(write=False)
        self.matrices = cols
        self._cache = np.zeros((0, s), dtype=np.uint32)

    def digits(self, n: int, start: int = 0) -> np.ndarray:
        """Integer digits of points ``start .. start+n-1``, shape ``(n, s)``."""
        if start < 0 or n < 0 or start + n > 2 ** BITS:
            raise OverflowError(f"point indices [{start}, {start + n}) exceed 2^{BITS}")
        if start == 0 and n <= len(self._cache):
            return self._cache[:n]
        idx = np.arange(start, start + n, dtype=np.uint64)
        gray = idx ^ (idx >> np.uint64(1))
        out = np.zeros((n, self.s), dtype=np.uint32)
        nbits = max(int(start + n - 1).bit_length(), 1)
        for k in range(nbits):
            bit = ((gray >> np.uint64(k)) & np.uint64(1)).astype(bool)
            out[bit] ^= self.matrices[:, k]
        if start == 0 and n <= 1 << 22:
            out.setflags(write=False)
            self._cache = out
        return out

    def point(self, index: int, state: "ScrambleState | None" = None) -> np.ndarray:
        """One point in ``(0,1)^s``; see :func:`to_unit` for the real mapping."""
        if not 0 <= index < 2 ** BITS:
            raise OverflowError(f"index {index} outside [0, 2^{BITS})")
        x = self.digits(1, start=index)
        if state is None:
            return to_unit(x, centered=False)[0]
        return to_unit(state.apply(x), centered=True)[0]

    def points(self, n: int, state: "ScrambleState | None" = None) -> np.ndarray:
        x = self.digits(n)
        if state is None:
            return to_unit(x, centered=False)
        return to_unit(state.apply(x), centered=True)


def to_unit(digits: np.ndarray, centered: bool = True) -> np.ndarray:
    """Map 32-bit digits to reals, clamped into ``[2^-64, 1 - 2^-53]``.

    Scrambled digits use the centered map ``(y + 1/2) / 2^32``; raw digits map
    to ``x / 2^32`` so the first unscrambled point is the origin before the clamp.
    """
    u = digits.astype(np.float64)
    if centered:
        u += 0.5
    u *= SCALE
    return np.clip(u, CLAMP_LO, CLAMP_HI)


@dataclass(frozen=True, eq=False)
class ScrambleState:
    """Per-dimension scramble matrices and digital shifts for one replicate."""

    seed: int
    replicate: int
    columns: np.ndarray  # (s, 32) uint32, column l of L_j at [j, l-1]
    shift: np.ndarray  # (s,) uint32
    stream: int = 0

    @property
    def s(self) -> int:
        return int(self.shift.shape[0])

    @classmethod
    def identity(cls, s: int) -> "ScrambleState":
        cols = np.array([[1 << (BITS - k) for k in range(1, BITS + 1)]] * s, dtype=np.uint32)
        return cls(seed=0, replicate=0, columns=cols, shift=np.zeros(s, dtype=np.uint32))

    def matrix(self, j: int) -> np.ndarray:
        """Dense 32x32 bit matrix of dimension ``j`` in digit order (row = output digit)."""
        out = np.zeros((BITS, BITS), dtype=np.uint8)
        for l in range(BITS):
            col = int(self.columns[j, l])
            for k in range(BITS):
                out[k, l] = (col >> (BITS - 1 - k)) & 1
        return out

    @cached_property
    def _tables(self) -> np.ndarray:
        # L x decomposes over the four bytes of x: y = T0[b0] ^ T1[b1] ^ T2[b2] ^ T3[b3].
        s = self.s
        tables = np.zeros((s, 4, 256), dtype=np.uint32)
        values = np.arange(256, dtype=np.uint32)
        for j in range(s):
            for byte in range(4):
                acc = np.zeros(256, dtype=np.uint32)
                for bit in range(8):
                    pos = 8 * byte + bit  # bit position in x, 0 = least significant
                    col = self.columns[j, BITS - 1 - pos]
                    mask = ((values >> np.uint32(bit)) & np.uint32(1)).astype(bool)
                    acc[mask] ^= col
                tables[j, byte] = acc
        return tables

    def apply(self, digits: np.ndarray) -> np.ndarray:
        """Scrambled digits ``L_j x XOR d_j`` for every column ``j`` of ``digits``."""
        digits = np.asarray(digits, dtype=np.uint32)
        if digits.shape[-1] != self.s:
            raise ValueError(f"digits have {digits.shape[-1]} dimensions, state has {self.s}")
        t = self._tables
        out = np.empty_like(digits)
        for j in range(self.s):
            x = digits[..., j]
            y = t[j, 0][x & 0xFF]
            y ^= t[j, 1][(x >> np.uint32(8)) & 0xFF]
            y ^= t[j, 2][(x >> np.uint32(16)) & 0xFF]
            y ^= t[j, 3][x >> np.uint32(24)]
            y ^= self.shift[j]
            out[..., j] = y
        return out


def _dimension_rng(master_seed: int, stream: int, replicate: int, dim: int) -> np.random.Generator:
    ss = np.random.SeedSequence([master_seed & 0xFFFFFFFFFFFFFFFF, stream, replicate, dim])
    return np.random.Generator(np.random.Philox(ss))


def fresh_scramble(master_seed: int, replicate_index: int, s: int, stream: int = STREAM_REPLICATE) -> ScrambleState:
    """Scramble state keyed on ``(master_seed, stream, replicate_index, dimension)``.

    Each dimension draws from its own Philox counter stream, so the state does
    not depend on how many dimensions or replicates are generated elsewhere.
    """
    if replicate_index < 0:
        raise ValueError("replicate index must be non-negative")
    cols = np.empty((s, BITS), dtype=np.uint32)
    shift = np.empty(s, dtype=np.uint32)
    for j in range(s):
        rng = _dimension_rng(master_seed, stream, replicate_index, j)
        raw = rng.integers(0, 2 ** BITS, size=BITS + 1, dtype=np.uint64)
        for l in range(1, BITS + 1):
            diag = 1 << (BITS - l)
            cols[j, l - 1] = diag | (int(raw[l - 1]) & (diag - 1))
        shift[j] = raw[BITS]
    return ScrambleState(master_seed, replicate_index, cols, shift, stream)


@dataclass
class RandomizedPointSet:
    """The first ``n`` points of a generator under one scramble state."""

    generator: SobolGenerator
    state: ScrambleState | None
    n: int
    _points: np.ndarray | None = field(default=None, repr=False)

    def points(self) -> np.ndarray:
        if self._points is None:
            self._points = self.generator.points(self.n, self.state)
        return self._points
