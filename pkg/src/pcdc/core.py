"""Voxel grids, Morton ordering, and the scale pyramid.

Every point set in the codec is kept unique and Morton-sorted (x bits above
y bits above z bits), which gives all later stages a canonical scan order and
makes parent/child grouping a contiguous-segment operation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import CoordOutOfRange, DuplicatePoints, EmptyCloud, InsufficientCandidates, NonFinite
from .nnkernels import LinearLayer, Mlp
from .tape import Tensor

MAX_COMPONENT_BITS = 21

_M1 = np.uint64(0x1F00000000FFFF)
_M2 = np.uint64(0x1F0000FF0000FF)
_M3 = np.uint64(0x100F00F00F00F00F)
_M4 = np.uint64(0x10C30C30C30C30C3)
_M5 = np.uint64(0x1249249249249249)


def _split3(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64)
    v = (v | (v << np.uint64(32))) & _M1
    v = (v | (v << np.uint64(16))) & _M2
    v = (v | (v << np.uint64(8))) & _M3
    v = (v | (v << np.uint64(4))) & _M4
    v = (v | (v << np.uint64(2))) & _M5
    return v


def _compact3(v: np.ndarray) -> np.ndarray:
    v = v & _M5
    v = (v ^ (v >> np.uint64(2))) & _M4
    v = (v ^ (v >> np.uint64(4))) & _M3
    v = (v ^ (v >> np.uint64(8))) & _M2
    v = (v ^ (v >> np.uint64(16))) & _M1
    v = (v ^ (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def morton_key(coords) -> np.ndarray:
    """Interleave (x, y, z) into one key per point, x most significant.

    Components must lie in [0, 2**21). Accepts (N, 3) or a single triple.
    """
    c = np.asarray(coords)
    single = c.ndim == 1
    c = np.atleast_2d(c)
    if c.shape[-1] != 3:
        raise ValueError("coordinates must have three components")
    if c.size and (c.min() < 0 or c.max() >= (1 << MAX_COMPONENT_BITS)):
        raise CoordOutOfRange(
            f"coordinates must lie in [0, 2^{MAX_COMPONENT_BITS}) for Morton interleave"
        )
    key = (
        (_split3(c[:, 0]) << np.uint64(2))
        | (_split3(c[:, 1]) << np.uint64(1))
        | _split3(c[:, 2])
    )
    return key[0] if single else key


def morton_decode(keys) -> np.ndarray:
    """Inverse of morton_key; returns int64 coordinates."""
    k = np.atleast_1d(np.asarray(keys, dtype=np.uint64))
    x = _compact3(k >> np.uint64(2))
    y = _compact3(k >> np.uint64(1))
    z = _compact3(k)
    return np.stack([x, y, z], axis=-1).astype(np.int64)


def morton_sorted(coords: np.ndarray) -> bool:
    keys = morton_key(coords)
    return bool(np.all(keys[1:] > keys[:-1])) if len(keys) > 1 else True


@dataclass
class FramePointCloud:
    """A voxelized frame: unique int coordinates plus per-point features."""

    frame_index: int
    coords: np.ndarray  # (N, 3) int64, unique, Morton-sorted
    feats: np.ndarray  # (N, F) float64
    bit_depth: int

    @property
    def num_points(self) -> int:
        return len(self.coords)


@dataclass
class ScaleLevel:
    """One pyramid scale; stage 0 is the full-resolution grid."""

    stage: int
    coords: np.ndarray  # (N, 3) int64, unique, Morton-sorted
    feats: Tensor  # (N, C)

    @property
    def num_points(self) -> int:
        return len(self.coords)


def voxelize(points, bit_depth: int, frame_index: int = 0) -> FramePointCloud:
    """Quantize float positions onto a 2**bit_depth grid.

    Rounds half away from zero, clips to the grid, merges duplicate voxels,
    and records the merge multiplicity as the single feature channel. Output
    is Morton-sorted.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be (N, 3)")
    if len(pts) == 0:
        raise EmptyCloud("cannot voxelize an empty point set")
    if not np.all(np.isfinite(pts)):
        raise NonFinite("input positions contain NaN or infinity")
    q = np.sign(pts) * np.floor(np.abs(pts) + 0.5)
    q = np.clip(q, 0, (1 << bit_depth) - 1).astype(np.int64)
    keys = morton_key(q)
    uniq, counts = np.unique(keys, return_counts=True)
    coords = morton_decode(uniq)
    feats = counts.astype(np.float64)[:, None]
    return FramePointCloud(frame_index, coords, feats, bit_depth)


def cloud_to_level(cloud: FramePointCloud) -> ScaleLevel:
    return ScaleLevel(0, cloud.coords, Tensor(cloud.feats))


def validate_unique_sorted(coords: np.ndarray):
    keys = morton_key(coords)
    if len(keys) > 1:
        d = np.diff(keys.astype(np.int64))
        if np.any(d == 0):
            raise DuplicatePoints("coordinates contain duplicates")
        if np.any(d < 0):
            raise ValueError("coordinates are not Morton-sorted")


def parent_segments(coords: np.ndarray):
    """Group Morton-sorted coords by parent voxel (one level coarser).

    Returns (parent_coords, starts, counts, octants): contiguous row
    segments per parent plus each child's octant index in [0, 8).
    """
    keys = morton_key(coords)
    parent_keys = keys >> np.uint64(3)
    if len(parent_keys) == 0:
        raise EmptyCloud("no points to group")
    boundaries = np.flatnonzero(np.r_[True, parent_keys[1:] != parent_keys[:-1]])
    counts = np.diff(np.r_[boundaries, len(keys)])
    parent_coords = coords[boundaries] >> 1
    octants = (keys & np.uint64(7)).astype(np.int64)
    return parent_coords, boundaries, counts, octants


def downsample(level: ScaleLevel, layer: LinearLayer) -> ScaleLevel:
    """One pyramid step: parents get learned features from their children.

    The layer input is the mean child feature concatenated with the 8-slot
    child occupancy mask, so the local pattern survives pooling.
    """
    if level.num_points == 0:
        raise EmptyCloud("cannot downsample an empty level")
    parent_coords, starts, counts, octants = parent_segments(level.coords)
    num_parents = len(parent_coords)
    seg_id = np.repeat(np.arange(num_parents), counts)
    mask = np.zeros((num_parents, 8))
    mask[seg_id, octants] = 1.0
    mean_child = tape.segment_mean(level.feats, starts, counts)
    x = tape.concat([mean_child, Tensor(mask)], axis=-1)
    return ScaleLevel(level.stage + 1, parent_coords, layer(x))


_OCTANT_OFFSETS = np.array(
    [[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.int64
)


@dataclass
class UpsampleResult:
    level: ScaleLevel  # kept children, Morton-sorted
    cand_keys: np.ndarray  # (8N,) uint64 Morton keys of all candidates
    cand_probs: Tensor  # (8N,) occupancy probabilities for all candidates


def upsample(level: ScaleLevel, occ_mlp: Mlp, feat_layer: LinearLayer, target_count: int) -> UpsampleResult:
    """One synthesis step: every parent proposes its 8 children.

    Keeps the target_count most probable children (ties broken toward the
    smaller Morton key) and gives each kept child a feature from a learned
    per-octant map of its parent. Candidate probabilities are returned for
    the occupancy loss.
    """
    n = level.num_points
    if n == 0:
        raise EmptyCloud("cannot upsample an empty level")
    if target_count < 1 or target_count > 8 * n:
        raise InsufficientCandidates(
            f"target_count {target_count} outside [1, {8 * n}] reachable children"
        )
    logits = occ_mlp(level.feats)  # (N, 8)
    probs = tape.sigmoid(logits)
    flat_probs = tape.reshape(probs, (8 * n,))
    parent_keys = morton_key(level.coords)
    cand_keys = (
        (parent_keys[:, None] << np.uint64(3)) | np.arange(8, dtype=np.uint64)[None, :]
    ).reshape(-1)
    order = np.lexsort((cand_keys, -flat_probs.data))
    keep = np.sort(order[:target_count])
    child_coords = (level.coords[:, None, :] * 2 + _OCTANT_OFFSETS[None, :, :]).reshape(-1, 3)
    child_width = feat_layer.out_width // 8
    child_feats = tape.reshape(feat_layer(level.feats), (8 * n, child_width))
    kept = ScaleLevel(level.stage - 1, child_coords[keep], tape.gather_rows(child_feats, keep))
    return UpsampleResult(kept, cand_keys, flat_probs)


def occupancy_truth(cand_keys: np.ndarray, true_coords: np.ndarray) -> np.ndarray:
    """0/1 target per candidate child; true children are always candidates."""
    true_keys = morton_key(true_coords)
    truth = np.isin(cand_keys, true_keys)
    if truth.sum() != len(true_keys):
        raise CoordOutOfRange("some true children are not reachable from the parents")
    return truth.astype(np.float64)
