"""Byte-oriented 32-bit range coder over 16-bit quantized CDF tables.

Carry propagation follows the classic cache/low scheme: ``low`` keeps 32 bits
plus a carry bit, pending 0xFF bytes are buffered until the carry resolves.
The first byte an encoder would emit is always zero and is not stored.
"""

from __future__ import annotations

import hashlib
from bisect import bisect_right
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class CodingError(ValueError):
    """Symbol outside the table's support, or an invalid table."""


class DecodeError(ValueError):
    """Exhausted or corrupt payload."""


@dataclass(frozen=True)
class CdfTable:
    """Cumulative counts over symbols ``-bound .. bound``; ``cdf[0] == 0`` and ``cdf[-1] == 2**16``."""

    cdf: tuple[int, ...]
    bound: int

    def __post_init__(self):
        if len(self.cdf) != 2 * self.bound + 2:
            raise CodingError(f"CDF of length {len(self.cdf)} does not cover [-{self.bound}, {self.bound}]")
        if self.cdf[0] != 0 or self.cdf[-1] != TOTAL:
            raise CodingError("CDF must start at 0 and end at 2**16")
        if any(b <= a for a, b in zip(self.cdf, self.cdf[1:])):
            raise CodingError("CDF must be strictly increasing")

    @classmethod
    def from_pmf(cls, pmf: np.ndarray, bound: int) -> "CdfTable":
        """Quantize a pmf over ``2*bound+1`` symbols; every symbol keeps at least one count."""
        return cls(tuple(int(v) for v in quantize_pmf(pmf)), bound)

    def probability(self, symbol: int) -> float:
        i = symbol + self.bound
        return (self.cdf[i + 1] - self.cdf[i]) / TOTAL

    def digest(self) -> str:
        return hashlib.sha256(np.asarray(self.cdf, dtype=np.int64).tobytes()).hexdigest()


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Integer CDF (length n+1) from a pmf using a 1-count floor and largest-remainder allocation."""
    pmf = np.asarray(pmf, dtype=np.float64)
    n = pmf.shape[-1]
    if n < 1 or n > TOTAL:
        raise CodingError(f"cannot quantize a pmf over {n} symbols at {PRECISION}-bit precision")
    pmf = np.clip(pmf, 0.0, None)
    mass = pmf.sum()
    pmf = pmf / mass if mass > 0 else np.full(n, 1.0 / n)
    spare = TOTAL - n
    raw = pmf * spare
    base = np.floor(raw).astype(np.int64)
    left = spare - int(base.sum())
    if left > 0:
        # ties resolved by lower symbol index (stable sort)
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:left]] += 1
    counts = base + 1
    return np.concatenate([[0], np.cumsum(counts)])


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self._cache
            while True:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (self.low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, symbol: int, table: CdfTable):
        i = symbol + table.bound
        if not 0 <= i <= 2 * table.bound:
            raise CodingError(f"symbol {symbol} outside table support [-{table.bound}, {table.bound}]")
        start = table.cdf[i]
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * (table.cdf[i + 1] - start)
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        # the leading byte is the initial zero cache
        return bytes(self._out[1:])


class RangeDecoder:
    def __init__(self, payload: bytes):
        self._data = memoryview(bytes(payload))
        self._pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise DecodeError(f"payload exhausted after {len(self._data)} bytes")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode(self, table: CdfTable) -> int:
        r = self.range >> PRECISION
        value = self.code // r
        if value >= TOTAL:
            raise DecodeError("range decoder state out of bounds (corrupt payload or mismatched tables)")
        i = bisect_right(table.cdf, value) - 1
        start = table.cdf[i]
        self.code -= r * start
        self.range = r * (table.cdf[i + 1] - start)
        while self.range < _TOP:
            self.range <<= 8
            self.code = (self.code << 8) | self._next_byte()
        return i - table.bound

    def finish(self):
        """Raise unless the payload was consumed exactly."""
        if self._pos != len(self._data):
            raise DecodeError(f"{len(self._data) - self._pos} trailing bytes left in payload")


def range_encode(symbols: Iterable[int], cdfs: Sequence[CdfTable]) -> bytes:
    symbols = list(symbols)
    if len(symbols) != len(cdfs):
        raise CodingError(f"{len(symbols)} symbols but {len(cdfs)} tables")
    enc = RangeEncoder()
    for s, t in zip(symbols, cdfs):
        enc.encode(int(s), t)
    return enc.finish()


def range_decode(payload: bytes, cdfs: Sequence[CdfTable]) -> list[int]:
    dec = RangeDecoder(payload)
    out = [dec.decode(t) for t in cdfs]
    dec.finish()
    return out


def ideal_bits(symbols: Iterable[int], cdfs: Sequence[CdfTable]) -> float:
    """Information content of ``symbols`` under the quantized tables."""
    return float(sum(-np.log2(t.probability(int(s))) for s, t in zip(symbols, cdfs)))
