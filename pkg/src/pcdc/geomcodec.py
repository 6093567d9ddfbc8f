"""Lossless octree coding of integer point coordinates.

Breadth-first occupancy coding: every nonempty node emits an 8-bit child
mask, range-coded under a context picked by (level group, occupied-sibling
bucket). Mask statistics are gathered in a counting pass at encode time and
shipped as sparse count tables, so the decoder rebuilds identical
probabilities without any learned state.
"""

from __future__ import annotations

import struct

import numpy as np

from .core import morton_decode, morton_key
from .errors import CoordOutOfRange, DecodeError, DuplicatePoints, EmptyCloud
from .rangecoder import CdfTable, RangeDecoder, RangeEncoder

_POPCOUNT = np.array([bin(v).count("1") for v in range(256)], dtype=np.int64)
_OCTANTS = [np.flatnonzero([(v >> o) & 1 for o in range(8)]).astype(np.int64) for v in range(256)]
_ROOT_BUCKET = 1
_MAX_BUCKET = 4
_COUNT_CAP = 0xFFFF


def occupancy_levels(coords: np.ndarray, bit_depth: int):
    """Per-level (node_keys, masks, buckets) for the octree of a coordinate set.

    Level L holds the unique L*3-bit Morton prefixes; masks describe which
    children exist one level down. Buckets are min(occupied siblings, 4),
    with the root pinned to bucket 1.
    """
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] != 3 or len(coords) == 0:
        raise EmptyCloud("need a non-empty (N, 3) coordinate array")
    if coords.min() < 0 or coords.max() >= (1 << bit_depth):
        raise CoordOutOfRange("coordinates exceed the declared bit depth")
    keys = np.sort(morton_key(coords))
    if len(keys) > 1 and np.any(keys[1:] == keys[:-1]):
        raise DuplicatePoints("coordinate set contains duplicates")

    prefixes = [np.unique(keys >> (3 * (bit_depth - lv))) for lv in range(bit_depth + 1)]
    levels = []
    buckets = np.array([_ROOT_BUCKET], dtype=np.int64)
    for lv in range(bit_depth):
        parents = prefixes[lv]
        children = prefixes[lv + 1]
        pidx = np.searchsorted(parents, children >> 3)
        masks = np.zeros(len(parents), dtype=np.uint8)
        np.bitwise_or.at(masks, pidx, (1 << (children & 7)).astype(np.uint8))
        levels.append((parents, masks, buckets))
        pc = _POPCOUNT[masks]
        buckets = np.repeat(np.minimum(pc, _MAX_BUCKET), pc)
    return levels


def _context_tables(levels):
    counts = {}
    for lv, (_, masks, buckets) in enumerate(levels):
        group = lv // 2
        for bu in np.unique(buckets):
            key = (int(group), int(bu))
            c = counts.setdefault(key, np.zeros(256, dtype=np.int64))
            c += np.bincount(masks[buckets == bu], minlength=256)
    # Serialized counts are capped at u16; tables must be built from the
    # capped values so both sides quantize identical pmfs.
    for c in counts.values():
        np.minimum(c, _COUNT_CAP, out=c)
    tables = {key: CdfTable.from_counts(c) for key, c in counts.items()}
    return counts, tables


def encode_coords(coords: np.ndarray, bit_depth: int) -> bytes:
    if not 1 <= bit_depth <= 21:
        raise ValueError("bit depth out of range")
    levels = occupancy_levels(coords, bit_depth)
    n_points = len(np.asarray(coords))
    counts, tables = _context_tables(levels)

    head = bytearray(struct.pack("<BIH", bit_depth, n_points, len(counts)))
    for (group, bucket) in sorted(counts):
        c = counts[(group, bucket)]
        present = np.flatnonzero(c)
        head += struct.pack("<BBH", group, bucket, len(present))
        for mask in present:
            head += struct.pack("<BH", int(mask), int(c[mask]))

    enc = RangeEncoder()
    for lv, (_, masks, buckets) in enumerate(levels):
        group = lv // 2
        for mask, bu in zip(masks.tolist(), buckets.tolist()):
            enc.encode_symbol(mask, tables[(group, bu)])
    body = enc.finish()
    return bytes(head) + struct.pack("<I", len(body)) + body


class _Cursor:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise DecodeError("coordinate section truncated", offset=self.pos)
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out


def decode_coords(blob: bytes) -> np.ndarray:
    cur = _Cursor(blob)
    bit_depth, n_points, n_ctx = cur.take("<BIH")
    if not 1 <= bit_depth <= 21 or n_points == 0:
        raise DecodeError("bad coordinate header", offset=0)
    tables = {}
    for _ in range(n_ctx):
        group, bucket, n_entries = cur.take("<BBH")
        counts = np.zeros(256, dtype=np.int64)
        for _ in range(n_entries):
            mask, count = cur.take("<BH")
            counts[mask] = count
        tables[(group, bucket)] = CdfTable.from_counts(counts)
    (body_len,) = cur.take("<I")
    if cur.pos + body_len > len(blob):
        raise DecodeError("coordinate section truncated", offset=cur.pos)
    dec = RangeDecoder(blob[cur.pos : cur.pos + body_len])

    nodes = np.zeros(1, dtype=np.int64)
    buckets = np.array([_ROOT_BUCKET], dtype=np.int64)
    for lv in range(bit_depth):
        group = lv // 2
        masks = np.empty(len(nodes), dtype=np.int64)
        for i, bu in enumerate(buckets.tolist()):
            table = tables.get((group, bu))
            if table is None:
                raise DecodeError("missing context table", offset=cur.pos)
            masks[i] = dec.decode_symbol(table)
        if np.any(masks == 0):
            raise DecodeError("empty occupancy mask", offset=cur.pos)
        pc = _POPCOUNT[masks]
        base = np.repeat(nodes << 3, pc)
        octs = np.concatenate([_OCTANTS[m] for m in masks.tolist()])
        nodes = base + octs  # children of sorted parents stay sorted
        buckets = np.repeat(np.minimum(pc, _MAX_BUCKET), pc)
    if len(nodes) != n_points:
        raise DecodeError("decoded point count mismatch", offset=cur.pos)
    return morton_decode(nodes)
