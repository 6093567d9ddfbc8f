"""Byte-oriented range coder with 16-bit fixed-point probabilities.

Carry-less variant: a 32-bit low/range pair is renormalized a byte at a time,
and the underflow case is resolved by shrinking range instead of propagating
carries. Symbol probabilities are integer widths out of 65536, so encoder and
decoder share exact tables and the stream is reproducible regardless of how
the float model behind the table was evaluated.
"""

from __future__ import annotations

from bisect import bisect_right

import numpy as np

from .errors import DecodeError

PROB_BITS = 16
PROB_TOTAL = 1 << PROB_BITS  # 65536
_TOP = 1 << 24
_BOT = 1 << 16
_MASK = 0xFFFFFFFF


class CdfTable:
    """Cumulative frequency table: cum[0] = 0, cum[-1] = 65536, widths >= 1."""

    __slots__ = ("cum", "offset")

    def __init__(self, cum, offset: int = 0):
        cum = [int(c) for c in cum]
        if cum[0] != 0 or cum[-1] != PROB_TOTAL:
            raise ValueError("cumulative table must span [0, 65536]")
        for a, b in zip(cum, cum[1:]):
            if b <= a:
                raise ValueError("every symbol needs width >= 1")
        self.cum = cum
        self.offset = offset  # value represented by symbol index 0

    @property
    def num_symbols(self) -> int:
        return len(self.cum) - 1

    def widths(self) -> np.ndarray:
        c = np.asarray(self.cum, dtype=np.int64)
        return c[1:] - c[:-1]

    def bits_for(self, indices) -> float:
        """Ideal fixed-point code length of the given symbol indices."""
        w = self.widths()[np.asarray(indices, dtype=np.int64)]
        return float(np.sum(PROB_BITS - np.log2(w)))

    @staticmethod
    def from_pmf(pmf, offset: int = 0) -> "CdfTable":
        """Quantize a positive pmf to integer widths summing to 65536.

        Largest-remainder rounding with every width floored at 1; ties go to
        the lower index so the table is a pure function of the pmf.
        """
        p = np.asarray(pmf, dtype=np.float64)
        if p.ndim != 1 or len(p) == 0:
            raise ValueError("pmf must be a non-empty vector")
        if len(p) > PROB_TOTAL:
            raise ValueError("alphabet larger than the probability grid")
        if np.any(~np.isfinite(p)) or np.any(p < 0):
            raise ValueError("pmf must be finite and non-negative")
        total = p.sum()
        if total <= 0:
            raise ValueError("pmf sums to zero")
        ideal = p * (PROB_TOTAL / total)
        base = np.floor(ideal).astype(np.int64)
        np.maximum(base, 1, out=base)
        diff = PROB_TOTAL - int(base.sum())
        if diff > 0:
            rem = ideal - np.floor(ideal)
            order = np.lexsort((np.arange(len(p)), -rem))
            base[order[:diff]] += 1
        elif diff < 0:
            # Shave the widest entries one step at a time; deterministic and
            # rare (only when many entries were floored up to 1).
            need = -diff
            while need:
                order = np.lexsort((np.arange(len(p)), -base))
                for j in order:
                    if base[j] > 1:
                        base[j] -= 1
                        need -= 1
                        if need == 0:
                            break
        cum = np.zeros(len(p) + 1, dtype=np.int64)
        np.cumsum(base, out=cum[1:])
        return CdfTable(cum.tolist(), offset)

    @staticmethod
    def from_counts(counts, offset: int = 0) -> "CdfTable":
        c = np.asarray(counts, dtype=np.float64)
        return CdfTable.from_pmf(c + 1.0, offset)  # +1 keeps unseen symbols codable

    @staticmethod
    def uniform(n: int, offset: int = 0) -> "CdfTable":
        if PROB_TOTAL % n:
            raise ValueError("uniform table size must divide 65536")
        w = PROB_TOTAL // n
        return CdfTable(list(range(0, PROB_TOTAL + 1, w)), offset)


BYTE_TABLE = CdfTable.uniform(256)


class RangeEncoder:
    def __init__(self):
        self._low = 0
        self._range = _MASK
        self._out = bytearray()

    def encode_symbol(self, index: int, table: CdfTable):
        cum = table.cum
        r = self._range >> PROB_BITS
        low = (self._low + r * cum[index]) & _MASK
        rng = r * (cum[index + 1] - cum[index])
        out = self._out
        while True:
            if (low ^ (low + rng)) & _MASK < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            out.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self._low = low
        self._range = rng

    def encode_value(self, value: int, table: CdfTable):
        self.encode_symbol(value - table.offset, table)

    def finish(self) -> bytes:
        low = self._low
        out = self._out
        for _ in range(4):
            out.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
        return bytes(out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._low = 0
        self._range = _MASK
        code = 0
        for _ in range(4):
            code = (code << 8) | self._next_byte()
        self._code = code

    def _next_byte(self) -> int:
        pos = self._pos
        if pos >= len(self._data):
            raise DecodeError("range-coded stream truncated", offset=pos)
        self._pos = pos + 1
        return self._data[pos]

    def decode_symbol(self, table: CdfTable) -> int:
        cum = table.cum
        r = self._range >> PROB_BITS
        v = ((self._code - self._low) & _MASK) // r
        if v >= PROB_TOTAL:
            raise DecodeError("range-coded stream corrupt", offset=self._pos)
        index = bisect_right(cum, v) - 1
        low = (self._low + r * cum[index]) & _MASK
        rng = r * (cum[index + 1] - cum[index])
        code = self._code
        while True:
            if (low ^ (low + rng)) & _MASK < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            code = ((code << 8) | self._next_byte()) & _MASK
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self._low = low
        self._range = rng
        self._code = code
        return index

    def decode_value(self, table: CdfTable) -> int:
        return self.decode_symbol(table) + table.offset

    @property
    def consumed(self) -> int:
        return self._pos
