"""Cross-attention refinement of aligned features against decoded references.

Vector attention over a small KNN neighborhood in the reference frame: the
per-channel attention logits come from an MLP over query-key differences
plus a learned encoding of the relative position, and the attended value is
added back through a residual with layer normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .core import ScaleLevel
from .errors import AdjacencyMismatch
from .knn import KnnAdjacency, build_knn
from .nnkernels import LinearLayer, Mlp, mlp_widths

LN_EPS = 1e-5


@dataclass
class RefineParams:
    q_proj: LinearLayer
    k_proj: LinearLayer
    v_proj: LinearLayer
    pos_mlp: Mlp  # 3 -> C, relative-position encoding
    attn_mlp: Mlp  # C -> C, per-channel attention logits
    weight_enc: LinearLayer  # identity-initialized value reweighting
    ln_gamma: tape.Tensor
    ln_beta: tape.Tensor
    neighborhood_k: int

    def params(self):
        out = (self.q_proj.params() + self.k_proj.params() + self.v_proj.params()
               + self.pos_mlp.params() + self.attn_mlp.params() + self.weight_enc.params())
        return out + [("refine.ln.gamma", self.ln_gamma), ("refine.ln.beta", self.ln_beta)]


def make_refine_params(name: str, feat_width: int, k: int, seed: int,
                       depth: int = 2, hidden_mult: int = 2) -> RefineParams:
    c = feat_width
    return RefineParams(
        q_proj=LinearLayer(f"{name}.q", c, c, seed),
        k_proj=LinearLayer(f"{name}.k", c, c, seed),
        v_proj=LinearLayer(f"{name}.v", c, c, seed),
        pos_mlp=Mlp(f"{name}.pos", mlp_widths(3, c, depth, hidden_mult), seed),
        attn_mlp=Mlp(f"{name}.attn", mlp_widths(c, c, depth, hidden_mult), seed),
        weight_enc=LinearLayer(f"{name}.w", c, c, seed, identity=True),
        ln_gamma=tape.Tensor(np.ones(c), requires_grad=True),
        ln_beta=tape.Tensor(np.zeros(c), requires_grad=True),
        neighborhood_k=k,
    )


def cross_refine(query: ScaleLevel, ref: ScaleLevel, params: RefineParams,
                 adj: KnnAdjacency | None = None) -> tape.Tensor:
    n = query.num_points
    k = params.neighborhood_k
    if adj is None:
        adj = build_knn(query.coords, ref.coords, k)
    elif adj.idx.shape != (n, k) or adj.ref_count != ref.num_points:
        raise AdjacencyMismatch("adjacency does not match this query/reference pair")
    c = query.feats.data.shape[1]
    if ref.feats.data.shape[1] != c:
        raise AdjacencyMismatch("query and reference widths differ")

    q = params.q_proj(query.feats)  # (N, C)
    keys = params.k_proj(ref.feats)  # (M, C)
    values = params.weight_enc(params.v_proj(ref.feats))
    nbr_k = tape.reshape(tape.gather_rows(keys, adj.idx.reshape(-1)), (n, k, c))
    nbr_v = tape.reshape(tape.gather_rows(values, adj.idx.reshape(-1)), (n, k, c))
    pos = params.pos_mlp(tape.Tensor(adj.rel_offsets.reshape(n * k, 3)))
    diff = tape.reshape(q, (n, 1, c)) - nbr_k + tape.reshape(pos, (n, k, c))
    logits = tape.reshape(params.attn_mlp(tape.reshape(diff, (n * k, c))), (n, k, c))
    attn = tape.softmax(logits, axis=1)  # per-channel weights over the neighborhood
    attended = tape.tsum(attn * nbr_v, axis=1)
    return tape.layer_norm(query.feats + attended, params.ln_gamma, params.ln_beta, eps=LN_EPS)


@dataclass
class RefineFuseParams:
    gate: LinearLayer  # C -> C
    out: LinearLayer  # 2C -> C

    def params(self):
        return self.gate.params() + self.out.params()


def make_refine_fuse_params(name: str, feat_width: int, seed: int) -> RefineFuseParams:
    return RefineFuseParams(LinearLayer(f"{name}.gate", feat_width, feat_width, seed),
                            LinearLayer(f"{name}.out", 2 * feat_width, feat_width, seed))


def refine_bidirectional(query: ScaleLevel, fwd_ref: ScaleLevel | None, bwd_ref: ScaleLevel | None,
                         params: RefineParams, fuse: RefineFuseParams,
                         fwd_adj: KnnAdjacency | None = None,
                         bwd_adj: KnnAdjacency | None = None) -> tape.Tensor:
    """Refine against both references and gate-fuse; one reference passes through."""
    if fwd_ref is None and bwd_ref is None:
        raise AdjacencyMismatch("refinement needs at least one reference")
    if fwd_ref is None or bwd_ref is None:
        if fwd_ref is not None:
            return cross_refine(query, fwd_ref, params, fwd_adj)
        return cross_refine(query, bwd_ref, params, bwd_adj)
    rf = cross_refine(query, fwd_ref, params, fwd_adj)
    rb = cross_refine(query, bwd_ref, params, bwd_adj)
    w = tape.sigmoid(fuse.gate(query.feats))
    blended = (w * rf) * ((1.0 - w) * rb)
    return fuse.out(tape.concat([query.feats, blended], axis=1))
