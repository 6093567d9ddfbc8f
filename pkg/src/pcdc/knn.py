"""K-nearest-neighbor queries between integer point sets.

Neighbors are ranked by squared Euclidean distance with ties broken toward
the smaller Morton key of the neighbor coordinate, so results are a pure
function of the two point sets. A uniform grid prunes the search; tiny
reference sets fall back to one exhaustive pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .core import morton_key
from .errors import EmptyCloud, EmptyReference

FULL_SCAN_LIMIT = 256


@dataclass
class KnnAdjacency:
    """Fixed neighbor table from one query set into one reference set."""

    k: int
    ref_count: int
    idx: np.ndarray  # (N, k) int64 rows into the reference set
    rel_offsets: np.ndarray  # (N, k, 3) float64, anchor - neighbor


def _rank_neighbors(d2: np.ndarray, cand_rows: np.ndarray, k: int) -> np.ndarray:
    # cand columns must already be sorted by Morton key; stable sort then
    # resolves distance ties toward the smaller key.
    order = np.argsort(d2, axis=1, kind="stable")
    m = d2.shape[1]
    if m >= k:
        pick = order[:, :k]
    else:
        pad = np.repeat(order[:, -1:], k - m, axis=1)
        pick = np.concatenate([order, pad], axis=1)
    return cand_rows[pick]


def build_knn(anchors: np.ndarray, refs: np.ndarray, k: int) -> KnnAdjacency:
    """Find the k nearest reference points for every anchor.

    When the reference set has fewer than k points, rows are padded by
    repeating the farthest neighbor so the table stays rectangular.
    """
    anchors = np.asarray(anchors, dtype=np.int64)
    refs = np.asarray(refs, dtype=np.int64)
    if len(anchors) == 0:
        raise EmptyCloud("no anchor points")
    if len(refs) == 0:
        raise EmptyReference("no reference points")
    if k < 1:
        raise ValueError("k must be >= 1")

    ref_order = np.argsort(morton_key(refs), kind="stable")
    refs_sorted = refs[ref_order]

    if len(refs) <= FULL_SCAN_LIMIT:
        diff = anchors[:, None, :] - refs_sorted[None, :, :]
        d2 = np.einsum("nmc,nmc->nm", diff, diff)
        idx = _rank_neighbors(d2, ref_order, k)
    else:
        idx = _grid_knn(anchors, refs_sorted, ref_order, k)

    offsets = anchors[:, None, :].astype(np.float64) - refs[idx].astype(np.float64)
    return KnnAdjacency(k, len(refs), idx, offsets)


def _grid_knn(anchors, refs_sorted, ref_order, k):
    origin = np.minimum(refs_sorted.min(axis=0), anchors.min(axis=0))
    ext = (refs_sorted.max(axis=0) - refs_sorted.min(axis=0) + 1).astype(np.float64)
    spacing = (ext.prod() / len(refs_sorted)) ** (1.0 / 3.0)
    cell = max(1, int(round(spacing * 1.6)))

    ref_cells = (refs_sorted - origin) // cell
    cell_keys = morton_key(ref_cells)
    cell_order = np.argsort(cell_keys, kind="stable")
    sorted_cell_keys = cell_keys[cell_order]
    uniq_keys, start_at = np.unique(sorted_cell_keys, return_index=True)
    counts = np.diff(np.r_[start_at, len(sorted_cell_keys)])
    box_lo = ref_cells.min(axis=0)
    box_hi = ref_cells.max(axis=0)

    anchor_cells = (anchors - origin) // cell
    out = np.empty((len(anchors), k), dtype=np.int64)

    ring_offsets = {0: np.zeros((1, 3), dtype=np.int64)}

    def ring(r):
        if r not in ring_offsets:
            ring_offsets[r] = np.array(
                [
                    (dx, dy, dz)
                    for dx, dy, dz in product(range(-r, r + 1), repeat=3)
                    if max(abs(dx), abs(dy), abs(dz)) == r
                ],
                dtype=np.int64,
            )
        return ring_offsets[r]

    def occupied_rows(cells):
        # One lookup for a whole ring of cells; misses are dropped.
        keys = morton_key(cells)
        j = np.searchsorted(uniq_keys, keys)
        j[j == len(uniq_keys)] = 0
        hit = uniq_keys[j] == keys
        return [cell_order[start_at[i] : start_at[i] + counts[i]] for i in j[hit]]

    # Process all anchors sharing a grid cell together.
    uniq_acells, inverse = np.unique(morton_key(anchor_cells), return_inverse=True)
    for group in range(len(uniq_acells)):
        rows = np.flatnonzero(inverse == group)
        a = anchors[rows]
        c0 = anchor_cells[rows[0]]
        # Rings past this radius cannot contain any occupied cell.
        reach = np.maximum(np.abs(c0 - box_lo), np.abs(box_hi - c0))
        max_ring = int(reach.max()) + 1
        cand = []
        total = 0
        r = 0
        while True:
            cells = c0 + ring(r)
            inside = np.all((cells >= box_lo) & (cells <= box_hi), axis=1)
            if np.any(inside):
                got = occupied_rows(cells[inside])
                cand.extend(got)
                total += sum(len(g) for g in got)
            exhausted = total == len(refs_sorted) or r >= max_ring
            if total >= min(k, len(refs_sorted)):
                # Points in rings beyond r sit at least r*cell + 1 away; once
                # the kth distance beats that bound no farther ring matters.
                # Candidates are sorted so distance ties resolve toward the
                # smaller Morton key, same as the exhaustive pass.
                rows_cand = np.sort(np.concatenate(cand))
                nb = refs_sorted[rows_cand]
                diff = a[:, None, :] - nb[None, :, :]
                d2 = np.einsum("nmc,nmc->nm", diff, diff)
                kth = np.sort(d2, axis=1)[:, min(k, d2.shape[1]) - 1]
                bound = float(r * cell) ** 2
                if exhausted or bool(np.all(kth <= bound)):
                    order_local = np.argsort(d2, axis=1, kind="stable")
                    m = d2.shape[1]
                    if m >= k:
                        pick = order_local[:, :k]
                    else:
                        pick = np.concatenate(
                            [order_local, np.repeat(order_local[:, -1:], k - m, axis=1)], axis=1
                        )
                    out[rows] = ref_order[rows_cand[pick]]
                    break
            r += 1
    return out
