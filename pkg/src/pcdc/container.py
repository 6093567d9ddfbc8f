"""The bitstream file format.

One global header (coding parameters, hashes of the config and the weights,
and the group-of-frames plan) followed by per-frame records in coding order.
Every integer is little-endian. Weights themselves are never embedded; the
stream stores only their 64-bit digest so a decoder can refuse a mismatched
checkpoint instead of silently producing garbage.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .config import CodecConfig
from .errors import DecodeError
from .pipeline import SECTION_TAGS, FramePayload
from .schedule import GofPlan

MAGIC = b"PCDC\x01"
VERSION = 1

_TAG_IDS = {"c3": 1, "c4": 2, "f4": 3, "z": 4}
TAG_NAMES = {1: "C3_OCTREE", 2: "C4_OCTREE", 3: "F4_RANGE", 4: "Z_FACTORIZED"}
_KIND_IDS = {"I": 0, "P": 1, "B": 2}
_KIND_NAMES = {v: k for k, v in _KIND_IDS.items()}

_MAX_SECTION = 1 << 30  # sanity bound so corrupt lengths fail fast


@dataclass(frozen=True)
class StreamHeader:
    version: int
    gof_size: int
    bit_depth: int
    lambda_index: int
    frame_count: int
    config_hash: int
    weights_hash: int
    plan: GofPlan | None  # plan of the first group; None for empty streams


def _pack_plan(plan: GofPlan | None) -> bytes:
    if plan is None:
        return struct.pack("<B", 0)
    n = len(plan.order)
    out = bytearray(struct.pack("<B", n))
    for f in range(n):
        refs = plan.refs[f]
        out += struct.pack("<BBB", _KIND_IDS[plan.frame_kind[f]], plan.layer[f], len(refs))
        for r in refs:
            out += struct.pack("<h", r)
    return bytes(out)


class _Cursor:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise DecodeError("stream truncated", offset=self.pos)
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def take_bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError("stream truncated", offset=self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def _unpack_plan(cur: _Cursor, gof_size: int) -> GofPlan | None:
    (n,) = cur.take("<B")
    if n == 0:
        return None
    kinds, layers, refs = [], [], []
    for _ in range(n):
        kind_id, layer, nrefs = cur.take("<BBB")
        if kind_id not in _KIND_NAMES or nrefs > 2:
            raise DecodeError("malformed plan entry", offset=cur.pos)
        kinds.append(_KIND_NAMES[kind_id])
        layers.append(layer)
        refs.append(tuple(cur.take("<h")[0] for _ in range(nrefs)))
    order = tuple(sorted(range(n), key=lambda f: (layers[f], f)))
    return GofPlan(gof_size, order, tuple(layers), tuple(refs), tuple(kinds))


def mux(payloads, config: CodecConfig, lambda_index: int, weights_hash: int,
        plan: GofPlan | None) -> bytes:
    """Serialize payloads (already in coding order) into one stream."""
    out = bytearray(MAGIC)
    out += struct.pack(
        "<BBBBIQQ",
        VERSION,
        config.gof_size,
        config.bit_depth,
        lambda_index,
        len(payloads),
        config.config_hash(),
        weights_hash,
    )
    out += _pack_plan(plan)
    for p in payloads:
        out += struct.pack("<IBI", p.frame_index, _KIND_IDS[p.kind], p.num_points)
        out += struct.pack("<III", *p.targets)
        for tag in SECTION_TAGS:
            out += struct.pack("<BI", _TAG_IDS[tag], len(p.sections[tag]))
        for tag in SECTION_TAGS:
            out += p.sections[tag]
    return bytes(out)


def demux(blob: bytes):
    """Parse a stream into (StreamHeader, payloads in coding order).

    Structural validation only; hash checks against an actual model happen
    in check_stream once the caller has loaded weights.
    """
    cur = _Cursor(blob)
    if cur.take_bytes(len(MAGIC)) != MAGIC:
        raise DecodeError("not a codec stream (bad magic)", offset=0)
    version, gof_size, bit_depth, lambda_index, frame_count, config_hash, weights_hash = cur.take(
        "<BBBBIQQ"
    )
    if version != VERSION:
        raise DecodeError(f"unsupported stream version {version}", offset=5)
    if gof_size < 1 or gof_size & (gof_size - 1):
        raise DecodeError(f"group size {gof_size} is not a power of two", offset=6)
    plan = _unpack_plan(cur, gof_size)
    header = StreamHeader(version, gof_size, bit_depth, lambda_index, frame_count,
                          config_hash, weights_hash, plan)
    payloads = []
    for _ in range(frame_count):
        frame_index, kind_id, num_points = cur.take("<IBI")
        if kind_id not in _KIND_NAMES:
            raise DecodeError(f"unknown frame kind {kind_id}", offset=cur.pos)
        targets = cur.take("<III")
        lengths = {}
        for tag in SECTION_TAGS:
            tag_id, length = cur.take("<BI")
            if tag_id != _TAG_IDS[tag]:
                raise DecodeError(f"section tag {tag_id} out of order", offset=cur.pos)
            if length > _MAX_SECTION:
                raise DecodeError(f"section length {length} implausible", offset=cur.pos)
            lengths[tag] = length
        sections = {tag: cur.take_bytes(lengths[tag]) for tag in SECTION_TAGS}
        payloads.append(
            FramePayload(frame_index, _KIND_NAMES[kind_id], num_points, targets, sections)
        )
    if cur.pos != len(blob):
        raise DecodeError(f"{len(blob) - cur.pos} trailing bytes after the last frame",
                          offset=cur.pos)
    return header, payloads


def check_stream(header: StreamHeader, config: CodecConfig, weights_hash: int):
    """Refuse decode early when the stream was made under different state."""
    if header.bit_depth != config.bit_depth or header.gof_size != config.gof_size:
        raise DecodeError(
            f"stream was encoded at bit depth {header.bit_depth}, group size "
            f"{header.gof_size}; the supplied config says {config.bit_depth}/{config.gof_size}"
        )
    if header.config_hash != config.config_hash():
        raise DecodeError(
            f"stream config hash {header.config_hash:#018x} does not match this "
            f"configuration ({config.config_hash():#018x}); decode needs the exact "
            "encoder settings"
        )
    if header.weights_hash != weights_hash:
        raise DecodeError(
            f"stream weights hash {header.weights_hash:#018x} does not match the "
            f"loaded checkpoint ({weights_hash:#018x}); pass the checkpoint the "
            "stream was encoded with"
        )
