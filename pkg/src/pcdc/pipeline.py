"""End-to-end frame and sequence coding.

The encoder builds a four-stage pyramid, conditions the last downsample on a
temporal context aligned from already-decoded reference frames, and codes
three things per frame: the stage-3/stage-4 coordinate sets (lossless
octrees) and the stage-4 feature rows (range-coded under the conditional
prior, plus the factorized hyper rows). The decoder mirrors this exactly;
the encoder never shortcuts reconstruction, it runs the real decoder so the
reference buffers on both sides hold bitwise-identical state.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tape
from .align import bi_fuse, fmt_align, single_ref_context
from .core import (
    FramePointCloud,
    ScaleLevel,
    cloud_to_level,
    downsample,
    morton_decode,
    morton_key,
    occupancy_truth,
    parent_segments,
    upsample,
)
from .entropy import (
    P_MIN,
    SequentialCoder,
    code_hyper,
    decode_hyper,
    predict_params,
    quantize,
    rate_estimate,
)
from .errors import DecodeError, SchedulingError, TrainingDiverged
from .geomcodec import decode_coords, encode_coords
from .knn import build_knn
from .model import CodecModel
from .nnkernels import Adam
from .rangecoder import RangeDecoder, RangeEncoder
from .refine import cross_refine, refine_bidirectional
from .schedule import PREV_GOF_LAST, build_plan, buffer_lifetimes, parallel_stages, tail_plan

SECTION_TAGS = ("c3", "c4", "f4", "z")

_KINDS = {0: "I", 1: "P", 2: "B"}


def thread_budget() -> int:
    """Stage-level parallelism cap; PCDC_THREADS overrides the core count."""
    raw = os.environ.get("PCDC_THREADS", "").strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"PCDC_THREADS must be an integer, got {raw!r}")
    return os.cpu_count() or 1


@dataclass
class FrameStats:
    points: int
    n3: int
    n4: int
    n5: int
    section_bits: dict
    estimate_bits: float  # batch cross-entropy estimate for the f4 section

    @property
    def total_bits(self) -> int:
        return sum(self.section_bits.values())

    @property
    def bpp(self) -> float:
        return self.total_bits / self.points


@dataclass
class FramePayload:
    """Everything the container stores for one frame."""

    frame_index: int
    kind: str  # "I" | "P" | "B"
    num_points: int  # original stage-0 count, == targets[-1]
    targets: tuple  # upsample cardinalities (n2, n1, n0)
    sections: dict  # tag -> bytes for SECTION_TAGS
    stats: FrameStats | None = None


@dataclass
class DecodedFrame:
    """Frame-buffer entry: the output cloud plus the stage-3 reference state."""

    frame_index: int
    cloud: FramePointCloud
    level3: ScaleLevel
    digest: int


def _reconstruction_digest(c3: np.ndarray, coords: np.ndarray, f3: tape.Tensor) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(np.ascontiguousarray(c3, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(coords, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(f3.data, dtype=np.float64).tobytes())
    return int.from_bytes(h.digest(), "little")


def _analysis_pyramid(model: CodecModel, cur: FramePointCloud):
    """Stages 0..3 of the current frame; stage 4 needs the temporal context."""
    levels = [cloud_to_level(cur)]
    for layer in model.down:
        levels.append(downsample(levels[-1], layer))
    return levels


def _cached_adj(cache, key, anchors, refs, k):
    """Neighbor tables depend only on coordinates, so a caller that holds
    the geometry fixed (the training loop) can reuse them across steps."""
    if cache is None:
        return build_knn(anchors, refs, k)
    hit = cache.get(key)
    if hit is None:
        hit = build_knn(anchors, refs, k)
        cache[key] = hit
    return hit


def _temporal_context(coords3: np.ndarray, ref_levels, model: CodecModel,
                      adj_cache: dict | None = None) -> tape.Tensor:
    """Motion-aligned context rows on the stage-3 grid.

    Uses only decoder-available inputs: the (lossless) stage-3 coordinates
    and the reference frames' reconstructed stage-3 features. With two
    references the gate is driven by the mean of the two aligned branches.
    """
    n3 = len(coords3)
    if len(ref_levels) == 0:
        return tape.Tensor(np.zeros((n3, model.config.context_width)))
    placeholder = ScaleLevel(3, coords3, tape.Tensor(np.zeros((n3, 1))))
    k = model.align.k
    if len(ref_levels) == 1:
        adj = _cached_adj(adj_cache, ("ctx", 0), coords3, ref_levels[0].coords, k)
        return single_ref_context(placeholder, ref_levels[0], model.align, model.fuse, adj).feats
    past, future = ref_levels
    adj_p = _cached_adj(adj_cache, ("ctx", 0), coords3, past.coords, k)
    adj_f = _cached_adj(adj_cache, ("ctx", 1), coords3, future.coords, k)
    fwd = fmt_align(placeholder, past, adj_p, model.align)
    bwd = fmt_align(placeholder, future, adj_f, model.align)
    proxy = (fwd.feats + bwd.feats) * 0.5
    return bi_fuse(proxy, fwd, bwd, model.fuse).feats


def _refined_features(coords3: np.ndarray, aligned: tape.Tensor, ref_levels,
                      model: CodecModel, adj_cache: dict | None = None) -> tape.Tensor:
    if len(ref_levels) == 0:
        return aligned
    query = ScaleLevel(3, coords3, aligned)
    k = model.refine.neighborhood_k
    if len(ref_levels) == 1:
        adj = _cached_adj(adj_cache, ("refine", 0), coords3, ref_levels[0].coords, k)
        return cross_refine(query, ref_levels[0], model.refine, adj)
    adj_p = _cached_adj(adj_cache, ("refine", 0), coords3, ref_levels[0].coords, k)
    adj_f = _cached_adj(adj_cache, ("refine", 1), coords3, ref_levels[1].coords, k)
    return refine_bidirectional(query, ref_levels[0], ref_levels[1],
                                model.refine, model.refine_fuse, adj_p, adj_f)


def _check_refs(refs, kind: str | None = None):
    if len(refs) > 2 or any(r is None for r in refs):
        raise SchedulingError("a frame takes zero, one, or two decoded references")
    if kind is not None and _KINDS[len(refs)] != kind:
        raise SchedulingError(f"frame kind {kind} does not match {len(refs)} references")


def _pack_z_section(n5: int, lo: np.ndarray, hi: np.ndarray, stream: bytes) -> bytes:
    out = bytearray(struct.pack("<I", n5))
    for a, b in zip(lo, hi):
        out += struct.pack("<hh", int(a), int(b))
    return bytes(out) + stream


def _parse_z_section(blob: bytes, channels: int):
    head = 4 + 4 * channels
    if len(blob) < head:
        raise DecodeError("hyper section header truncated", offset=len(blob))
    (n5,) = struct.unpack_from("<I", blob, 0)
    lo = np.empty(channels, dtype=np.int64)
    hi = np.empty(channels, dtype=np.int64)
    for c in range(channels):
        lo[c], hi[c] = struct.unpack_from("<hh", blob, 4 + 4 * c)
    return n5, lo, hi, blob[head:]


def encode_frame(cur: FramePointCloud, refs, model: CodecModel) -> FramePayload:
    """Code one frame against its decoded references; returns the payload.

    `refs` is a list of DecodedFrame in [past, future] order: empty for I,
    one entry for P, two for B.
    """
    cfg = model.config
    _check_refs(refs)
    if cur.bit_depth != cfg.bit_depth:
        raise SchedulingError(
            f"frame bit depth {cur.bit_depth} does not match config {cfg.bit_depth}"
        )
    ref_levels = [r.level3 for r in refs]
    with tape.no_grad():
        levels = _analysis_pyramid(model, cur)
        l3 = levels[3]
        ctx_feats = _temporal_context(l3.coords, ref_levels, model)
        l3c = ScaleLevel(3, l3.coords, tape.concat([l3.feats, ctx_feats], axis=1))
        l4 = downsample(l3c, model.ctx_down)
        symbols = quantize(l4.feats)

        # Hyper rows pooled one level above the latents, factorized coding.
        z_level = downsample(l4, model.hyper_enc)
        z_hat = quantize(z_level.feats)
        enc_z = RangeEncoder()
        z_lo, z_hi = code_hyper(z_hat, model.hyper_model, enc_z)
        n5 = len(z_level.coords)

        _, _, counts4, _ = parent_segments(l4.coords)
        hyper_rows = z_hat[np.repeat(np.arange(n5), counts4)].astype(np.float64)
        _, starts3, counts3, _ = parent_segments(l3.coords)
        pooled_ctx = tape.segment_mean(ctx_feats, starts3, counts3).data

        enc_f = RangeEncoder()
        SequentialCoder(model.prior, hyper_rows, pooled_ctx).encode(symbols, enc_f)

        mu, sigma = predict_params(
            model.prior, tape.Tensor(hyper_rows),
            symbols.astype(np.float64), tape.Tensor(pooled_ctx),
        )
        estimate = rate_estimate(symbols, mu.data, sigma.data)

        sections = {
            "c3": encode_coords(l3.coords, cfg.bit_depth - 3),
            "c4": encode_coords(l4.coords, cfg.bit_depth - 4),
            "f4": enc_f.finish(),
            "z": _pack_z_section(n5, z_lo, z_hi, enc_z.finish()),
        }
    stats = FrameStats(
        points=cur.num_points,
        n3=l3.num_points,
        n4=l4.num_points,
        n5=n5,
        section_bits={tag: 8 * len(sections[tag]) for tag in SECTION_TAGS},
        estimate_bits=estimate,
    )
    return FramePayload(
        frame_index=cur.frame_index,
        kind=_KINDS[len(refs)],
        num_points=cur.num_points,
        targets=(levels[2].num_points, levels[1].num_points, levels[0].num_points),
        sections=sections,
        stats=stats,
    )


def decode_frame(payload: FramePayload, refs, model: CodecModel) -> DecodedFrame:
    """Reconstruct one frame from its payload and decoded references."""
    _check_refs(refs, payload.kind)
    ref_levels = [r.level3 for r in refs]
    try:
        return _decode_frame_inner(payload, ref_levels, model)
    except DecodeError as e:
        err = DecodeError(f"frame {payload.frame_index}: {e}")
        err.offset = e.offset
        raise err from e


def _decode_frame_inner(payload: FramePayload, ref_levels, model: CodecModel) -> DecodedFrame:
    cfg = model.config
    with tape.no_grad():
        c3 = decode_coords(payload.sections["c3"])
        c4 = decode_coords(payload.sections["c4"])
        parents3, starts3, counts3, _ = parent_segments(c3)
        if len(parents3) != len(c4) or np.any(parents3 != c4):
            raise DecodeError("stage-4 coordinates do not match stage-3 parents")
        n3, n4 = len(c3), len(c4)

        ctx_feats = _temporal_context(c3, ref_levels, model)
        pooled_ctx = tape.segment_mean(ctx_feats, starts3, counts3).data

        parents4, _, counts4, _ = parent_segments(c4)
        n5, z_lo, z_hi, z_stream = _parse_z_section(payload.sections["z"], cfg.hyper_width)
        if n5 != len(parents4):
            raise DecodeError(
                f"hyper row count {n5} does not match {len(parents4)} stage-5 nodes"
            )
        z_hat = decode_hyper(n5, z_lo, z_hi, model.hyper_model, RangeDecoder(z_stream))
        hyper_rows = z_hat[np.repeat(np.arange(n5), counts4)].astype(np.float64)

        coder = SequentialCoder(model.prior, hyper_rows, pooled_ctx)
        symbols = coder.decode(n4, RangeDecoder(payload.sections["f4"]))
        y_hat = tape.Tensor(symbols.astype(np.float64))

        gathered = tape.gather_rows(y_hat, np.repeat(np.arange(n4), counts3))
        aligned = model.cd_mlp(tape.concat([gathered, ctx_feats], axis=1))
        f3 = _refined_features(c3, aligned, ref_levels, model)

        level = ScaleLevel(3, c3, f3)
        for occ, feat, target in zip(model.up_occ, model.up_feat, payload.targets):
            level = upsample(level, occ, feat, target).level
        if level.num_points != payload.num_points:
            raise DecodeError(
                f"decoded {level.num_points} points, header says {payload.num_points}"
            )
    cloud = FramePointCloud(payload.frame_index, level.coords, level.feats.data, cfg.bit_depth)
    digest = _reconstruction_digest(c3, level.coords, f3)
    return DecodedFrame(payload.frame_index, cloud, ScaleLevel(3, c3, f3), digest)


# ---------------------------------------------------------------------------
# Training-side differentiable path
# ---------------------------------------------------------------------------


def rd_loss(rate_bits, stages, lambda_: float) -> tape.Tensor:
    """R + lambda * D with D the stage-averaged occupancy BCE (natural log).

    `stages` is a list of (candidate_probs, truth) pairs, one per upsample
    stage; probabilities are clamped to [1e-7, 1 - 1e-7] before the log.
    """
    if not stages:
        raise ValueError("rd_loss needs at least one upsample stage")
    total = None
    for probs, truth in stages:
        p = tape.clip(tape.as_tensor(probs), 1e-7, 1.0 - 1e-7)
        t = np.asarray(truth, dtype=np.float64)
        bce = -(tape.Tensor(t) * tape.log(p) + tape.Tensor(1.0 - t) * tape.log(1.0 - p))
        stage_d = tape.tmean(bce)
        total = stage_d if total is None else total + stage_d
    d = total * (1.0 / len(stages))
    return tape.as_tensor(rate_bits) + d * float(lambda_)


def _teacher_upsample(level: ScaleLevel, occ_mlp, feat_layer, true_coords: np.ndarray):
    """Training-mode upsample: keep exactly the true children.

    Mirrors core.upsample's candidate enumeration but prunes to the ground
    truth instead of a learned top-k, so the kept set does not jump around
    under small weight perturbations and every stage trains on-distribution.
    """
    n = level.num_points
    probs = tape.sigmoid(occ_mlp(level.feats))
    flat = tape.reshape(probs, (8 * n,))
    parent_keys = morton_key(level.coords)
    cand_keys = (
        (parent_keys[:, None] << np.uint64(3)) | np.arange(8, dtype=np.uint64)[None, :]
    ).reshape(-1)
    truth = occupancy_truth(cand_keys, true_coords)
    keep = np.flatnonzero(truth > 0.5)
    width = feat_layer.out_width // 8
    child_feats = tape.reshape(feat_layer(level.feats), (8 * n, width))
    kept = ScaleLevel(level.stage - 1, morton_decode(cand_keys[keep]),
                      tape.gather_rows(child_feats, keep))
    return kept, flat, truth


@dataclass
class LossBreakdown:
    loss: tape.Tensor
    rate_bpp: float | None  # None when the rate graph was skipped
    bce: float  # stage-averaged distortion, natural log
    stage_bce: list


def frame_loss(model: CodecModel, cur: FramePointCloud, ref_levels, lambda_: float,
               noise_seed=0, include_rate: bool = True,
               adj_cache: dict | None = None) -> LossBreakdown:
    """Differentiable R + lambda*D for one frame given reference levels.

    Quantization is additive-noise with a generator seeded from `noise_seed`,
    so repeated calls at identical weights rebuild the identical graph (this
    is what makes finite-difference checks of the full loss possible).
    `adj_cache`, if given, must only ever see this frame/reference geometry.
    """
    rng = np.random.default_rng(noise_seed)
    levels = _analysis_pyramid(model, cur)
    l3 = levels[3]
    ctx_feats = _temporal_context(l3.coords, ref_levels, model, adj_cache)
    l3c = ScaleLevel(3, l3.coords, tape.concat([l3.feats, ctx_feats], axis=1))
    l4 = downsample(l3c, model.ctx_down)
    y_noisy = quantize(l4.feats, training=True, rng=rng)

    _, starts3, counts3, _ = parent_segments(l3.coords)

    rate_term = 0.0
    rate_bpp = None
    if include_rate:
        z_level = downsample(l4, model.hyper_enc)
        z_noisy = quantize(z_level.feats, training=True, rng=rng)
        _, _, counts4, _ = parent_segments(l4.coords)
        hyper_rows = tape.gather_rows(z_noisy, np.repeat(np.arange(len(z_level.coords)), counts4))
        pooled_ctx = tape.segment_mean(ctx_feats, starts3, counts3)
        mu, sigma = predict_params(model.prior, hyper_rows, y_noisy, pooled_ctx)
        box = tape.laplace_box(y_noisy, mu, sigma, P_MIN)
        bits_f4 = tape.tsum(tape.log(box)) * (-1.0 / math.log(2.0))
        bits_z = model.hyper_model.bits(z_noisy)
        rate_term = (bits_f4 + bits_z) * (1.0 / cur.num_points)
        rate_bpp = float(rate_term.data)

    gathered = tape.gather_rows(y_noisy, np.repeat(np.arange(l4.num_points), counts3))
    aligned = model.cd_mlp(tape.concat([gathered, ctx_feats], axis=1))
    refined = _refined_features(l3.coords, aligned, ref_levels, model, adj_cache)

    stages = []
    level = ScaleLevel(3, l3.coords, refined)
    for occ, feat, true_level in zip(model.up_occ, model.up_feat, (levels[2], levels[1], levels[0])):
        level, probs, truth = _teacher_upsample(level, occ, feat, true_level.coords)
        stages.append((probs, truth))

    loss = rd_loss(rate_term, stages, lambda_)
    stage_bce = []
    for probs, truth in stages:
        p = np.clip(probs.data, 1e-7, 1.0 - 1e-7)
        stage_bce.append(float(np.mean(-(truth * np.log(p) + (1.0 - truth) * np.log(1.0 - p)))))
    return LossBreakdown(loss, rate_bpp, float(np.mean(stage_bce)), stage_bce)


def residual_triplet(model: CodecModel, cur: FramePointCloud, ref_levels):
    """Stage-3 feature residuals along the real coding path (hard rounding).

    Returns (aligned, interpolated, refined) residual arrays against the
    frame's own analysis features; the interpolation baseline copies each
    point's nearest reference feature with no learned transform.
    """
    if not ref_levels:
        raise SchedulingError("residual analysis needs at least one reference")
    with tape.no_grad():
        levels = _analysis_pyramid(model, cur)
        l3 = levels[3]
        ctx_feats = _temporal_context(l3.coords, ref_levels, model)
        l3c = ScaleLevel(3, l3.coords, tape.concat([l3.feats, ctx_feats], axis=1))
        l4 = downsample(l3c, model.ctx_down)
        y_hat = tape.Tensor(quantize(l4.feats).astype(np.float64))
        _, starts3, counts3, _ = parent_segments(l3.coords)
        gathered = tape.gather_rows(y_hat, np.repeat(np.arange(l4.num_points), counts3))
        aligned = model.cd_mlp(tape.concat([gathered, ctx_feats], axis=1))
        refined = _refined_features(l3.coords, aligned, ref_levels, model)
        nn_idx = build_knn(l3.coords, ref_levels[0].coords, 1).idx[:, 0]
        interp = tape.gather_rows(ref_levels[0].feats, nn_idx)
        truth = l3.feats.data
    return (aligned.data - truth, interp.data - truth, refined.data - truth)


@dataclass
class TrainResult:
    losses: list  # raw per-step totals
    smoothed: list  # running minimum of losses
    bce: list  # per-step distortion trace
    rate_bpp: list  # per-step rate trace (empty when rate is skipped)


def train_overfit(model: CodecModel, frame_a: FramePointCloud, frame_b: FramePointCloud,
                  steps: int, lambda_: float, noise_seed: int = 0) -> TrainResult:
    """Overfit the model on a frame pair: A intra, B predicted from A.

    Warm-up uses lambda 30 for the first 10% of steps, then the requested
    value. lambda_ == 0 trains distortion only and leaves every rate-side
    parameter untouched. The reference for B is frame A's analysis features,
    recomputed each step under the current weights.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if lambda_ < 0:
        raise ValueError("lambda must be >= 0")
    include_rate = lambda_ > 0
    warm = max(1, steps // 10) if steps >= 10 else 0
    opt = Adam(model.params(), lr=model.config.train_lr)
    losses, smoothed, bces, rates = [], [], [], []
    best = math.inf
    adj_cache = {}  # geometry is fixed for the whole run
    for step in range(steps):
        lam = 30.0 if step < warm else lambda_
        opt.zero_grad()
        loss_a = frame_loss(model, frame_a, [], lam, noise_seed=[noise_seed, step, 0],
                            include_rate=include_rate)
        ref3 = _analysis_pyramid(model, frame_a)[3]
        loss_b = frame_loss(model, frame_b, [ref3], lam, noise_seed=[noise_seed, step, 1],
                            include_rate=include_rate, adj_cache=adj_cache)
        total = loss_a.loss + loss_b.loss
        value = float(total.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became non-finite at step {step}")
        total.backward()
        opt.step()
        losses.append(value)
        best = min(best, value)
        smoothed.append(best)
        bces.append(0.5 * (loss_a.bce + loss_b.bce))
        if include_rate:
            rates.append(0.5 * (loss_a.rate_bpp + loss_b.rate_bpp))
    return TrainResult(losses, smoothed, bces, rates)


# ---------------------------------------------------------------------------
# Sequence orchestration
# ---------------------------------------------------------------------------


def sequence_plans(frame_count: int, gof_size: int):
    """Per-GOF plans covering `frame_count` frames; short tails are repaired."""
    if frame_count < 1:
        raise SchedulingError("a sequence needs at least one frame")
    plans = []
    start = 0
    while start < frame_count:
        length = min(gof_size, frame_count - start)
        base = build_plan(gof_size, is_first_gof=(start == 0))
        plans.append(base if length == gof_size else tail_plan(base, length))
        start += gof_size
    return plans


def coding_order(frame_count: int, gof_size: int):
    """Absolute frame indices in the order they enter the bitstream."""
    out = []
    for g, plan in enumerate(sequence_plans(frame_count, gof_size)):
        out.extend(g * gof_size + f for f in plan.order)
    return out


def _absolute_refs(plan, gof_start: int, rel: int):
    """Plan references as absolute indices, past first, future second."""
    out = []
    for r in plan.refs[rel]:
        out.append(gof_start - 1 if r == PREV_GOF_LAST else gof_start + r)
    return sorted(out)


@dataclass
class SequenceResult:
    payloads: list  # FramePayload, coding order
    reconstructions: list  # FramePointCloud, display order
    digests: list  # reconstruction digests, display order
    plans: list


def _run_stage(fn, rels, workers: int) -> dict:
    if workers <= 1 or len(rels) <= 1:
        return {rel: fn(rel) for rel in rels}
    with ThreadPoolExecutor(max_workers=min(workers, len(rels))) as pool:
        futures = {rel: pool.submit(fn, rel) for rel in rels}
        return {rel: fut.result() for rel, fut in futures.items()}


def _gof_walk(plans, gof_size: int, frame_job, workers: int):
    """Drive frame_job(abs_index, rel, refs) stage by stage with eviction.

    frame_job returns the DecodedFrame to buffer. Stages are barriers; the
    buffer is read-shared inside a stage and pruned at stage boundaries per
    buffer_lifetimes, with the last display frame of each GOF retained for
    the next GOF's leading P-frame.
    """
    buffer = {}
    for g, plan in enumerate(plans):
        gof_start = g * gof_size
        release = buffer_lifetimes(plan, retain_last=True).release
        position = 0
        for stage_frames in parallel_stages(plan):
            order = list(stage_frames)  # already in coding order

            def job(rel):
                refs = []
                for a in _absolute_refs(plan, gof_start, rel):
                    if a not in buffer:
                        raise SchedulingError(f"reference frame {a} is not buffered")
                    refs.append(buffer[a])
                return frame_job(gof_start + rel, rel, refs)

            with tape.no_grad():
                decoded = _run_stage(job, order, workers)
            for rel in order:
                buffer[gof_start + rel] = decoded[rel]
            position += len(order)
            for rel, last_pos in release.items():
                if position > last_pos:
                    buffer.pop(gof_start + rel, None)
        keep = gof_start + max(plan.order)
        buffer = {k: v for k, v in buffer.items() if k == keep}


def encode_sequence(clouds, model: CodecModel, workers: int | None = None) -> SequenceResult:
    """Encode a display-ordered frame list; closed loop by construction.

    Every buffered reference comes out of decode_frame run on the freshly
    encoded payload, so encoder and decoder state cannot drift apart.
    """
    cfg = model.config
    plans = sequence_plans(len(clouds), cfg.gof_size)
    workers = thread_budget() if workers is None else max(1, workers)
    payloads = [None] * len(clouds)
    recon = [None] * len(clouds)
    digests = [0] * len(clouds)

    def frame_job(abs_index, rel, refs):
        cloud = clouds[abs_index]
        if cloud.frame_index != abs_index:
            cloud = FramePointCloud(abs_index, cloud.coords, cloud.feats, cloud.bit_depth)
        payload = encode_frame(cloud, refs, model)
        decoded = decode_frame(payload, refs, model)
        payloads[abs_index] = payload
        recon[abs_index] = decoded.cloud
        digests[abs_index] = decoded.digest
        return decoded

    _gof_walk(plans, cfg.gof_size, frame_job, workers)
    ordered = [payloads[i] for i in coding_order(len(clouds), cfg.gof_size)]
    return SequenceResult(ordered, recon, digests, plans)


@dataclass
class DecodedSequence:
    clouds: list  # FramePointCloud, display order
    digests: list  # display order
    plans: list


def decode_sequence(payloads, model: CodecModel, workers: int | None = None) -> DecodedSequence:
    """Decode payloads that arrive in coding order; returns display order."""
    cfg = model.config
    count = len(payloads)
    expected = coding_order(count, cfg.gof_size)
    got = [p.frame_index for p in payloads]
    if got != expected:
        raise DecodeError(f"frames are out of coding order: {got[:8]}... vs {expected[:8]}...")
    by_index = {p.frame_index: p for p in payloads}
    plans = sequence_plans(count, cfg.gof_size)
    workers = thread_budget() if workers is None else max(1, workers)
    clouds = [None] * count
    digests = [0] * count

    def frame_job(abs_index, rel, refs):
        decoded = decode_frame(by_index[abs_index], refs, model)
        clouds[abs_index] = decoded.cloud
        digests[abs_index] = decoded.digest
        return decoded

    _gof_walk(plans, cfg.gof_size, frame_job, workers)
    return DecodedSequence(clouds, digests, plans)
