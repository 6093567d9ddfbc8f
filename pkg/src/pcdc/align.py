"""Implicit motion alignment in feature space.

A current-frame point gathers its K nearest reference points, scores each
neighbor from its features and relative offset, and blends the neighborhood
with the resulting soft mask. Two aligned branches (past and future
reference) are fused with complementary sigmoid gates into the motion
context that conditions the rest of the codec.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .core import ScaleLevel
from .errors import AdjacencyMismatch
from .knn import KnnAdjacency, build_knn
from .nnkernels import LinearLayer, Mlp, mlp_widths


@dataclass
class AlignParams:
    mask_mlp: Mlp  # (C+3) -> 1 scalar logit per neighbor
    pred_mlp: Mlp  # (C+3) -> C
    k: int
    coord_extent: float  # grid size of the stage these features live on

    def params(self):
        return self.mask_mlp.params() + self.pred_mlp.params()


def make_align_params(name: str, feat_width: int, k: int, coord_extent: float,
                      seed: int, depth: int = 2, hidden_mult: int = 2) -> AlignParams:
    mask = Mlp(f"{name}.mask", mlp_widths(feat_width + 3, 1, depth, hidden_mult), seed)
    pred = Mlp(f"{name}.pred", mlp_widths(feat_width + 3, feat_width, depth, hidden_mult), seed)
    return AlignParams(mask, pred, k, float(coord_extent))


@dataclass
class AlignedFeatures:
    anchor_count: int
    feats: tape.Tensor  # N x C


@dataclass
class FuseParams:
    gate: LinearLayer  # C -> C
    ctx: LinearLayer  # 2C -> context width

    def params(self):
        return self.gate.params() + self.ctx.params()


def make_fuse_params(name: str, feat_width: int, context_width: int, seed: int) -> FuseParams:
    return FuseParams(LinearLayer(f"{name}.gate", feat_width, feat_width, seed),
                      LinearLayer(f"{name}.ctx", 2 * feat_width, context_width, seed))


@dataclass
class FusedContext:
    feats: tape.Tensor  # N x context width
    fwd_weight: tape.Tensor  # N x C, forward gate in [0, 1]


def fmt_align(cur: ScaleLevel, ref: ScaleLevel, adj: KnnAdjacency, params: AlignParams) -> AlignedFeatures:
    n = cur.num_points
    k = params.k
    if adj.idx.shape != (n, k) or adj.ref_count != ref.num_points:
        raise AdjacencyMismatch("adjacency does not match this frame/reference pair")
    nbr = tape.gather_rows(ref.feats, adj.idx.reshape(-1))  # (N*K, C)
    rel = tape.Tensor(adj.rel_offsets.reshape(n * k, 3))
    logits = params.mask_mlp(tape.concat([nbr, rel], axis=1))  # (N*K, 1)
    mask = tape.softmax(tape.reshape(logits, (n, k)), axis=1)
    width = nbr.data.shape[1]
    blended = tape.tsum(tape.reshape(mask, (n, k, 1)) * tape.reshape(nbr, (n, k, width)), axis=1)
    anchors = tape.Tensor(cur.coords.astype(np.float64) / params.coord_extent)
    z = tape.concat([blended, anchors], axis=1)
    return AlignedFeatures(n, params.pred_mlp(z))


def bi_fuse(cur_feats: tape.Tensor, fwd: AlignedFeatures, bwd: AlignedFeatures,
            params: FuseParams) -> FusedContext:
    n = cur_feats.data.shape[0]
    if fwd.anchor_count != n or bwd.anchor_count != n:
        raise AdjacencyMismatch("aligned branches disagree on anchor count")
    w_fwd = tape.sigmoid(params.gate(cur_feats))
    w_bwd = 1.0 - w_fwd
    blended = (w_fwd * fwd.feats) * (w_bwd * bwd.feats)
    context = params.ctx(tape.concat([cur_feats, blended], axis=1))
    return FusedContext(context, w_fwd)


def single_ref_context(cur: ScaleLevel, ref: ScaleLevel, align_params: AlignParams,
                       fuse_params: FuseParams, adj: KnnAdjacency | None = None) -> FusedContext:
    """P-frame path: one aligned branch, gate forced open.

    The backward branch collapses to the multiplicative identity, so the
    fused row is just the aligned features twice; the context projection is
    shared with the bidirectional path.
    """
    if adj is None:
        adj = build_knn(cur.coords, ref.coords, align_params.k)
    aligned = fmt_align(cur, ref, adj, align_params)
    context = fuse_params.ctx(tape.concat([aligned.feats, aligned.feats], axis=1))
    ones = tape.Tensor(np.ones_like(aligned.feats.data))
    return FusedContext(context, ones)
