"""Hierarchical group-of-frames planning for random access.

Frames are assigned dyadic layers (layer grows as the power of two dividing
the index shrinks), coded layer by layer, and reference the nearest
lower-layer frame on each side. The first frame of a group references the
last frame of the previous group, so groups chain without extra intra frames.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import SchedulingError

PREV_GOF_LAST = -1  # sentinel reference: final frame of the preceding group


def layer_of(frame: int, gof_size: int) -> int:
    if frame == 0:
        return 0
    top = gof_size.bit_length() - 1
    return top - (frame & -frame).bit_length() + 1


@dataclass(frozen=True)
class GofPlan:
    gof_size: int
    order: tuple
    layer: tuple
    refs: tuple  # per frame, tuple of reference frame indices (may hold PREV_GOF_LAST)
    frame_kind: tuple  # 'I' | 'P' | 'B'

    def position(self, frame: int) -> int:
        return self.order.index(frame)


def build_plan(gof_size: int, is_first_gof: bool = True) -> GofPlan:
    if gof_size < 1 or gof_size & (gof_size - 1):
        raise SchedulingError("group size must be a power of two")
    frames = range(gof_size)
    layers = [layer_of(f, gof_size) for f in frames]
    order = tuple(sorted(frames, key=lambda f: (layers[f], f)))

    refs = []
    kinds = []
    for f in frames:
        if f == 0:
            if is_first_gof:
                refs.append(())
                kinds.append("I")
            else:
                refs.append((PREV_GOF_LAST,))
                kinds.append("P")
            continue
        lower = [g for g in frames if layers[g] < layers[f]]
        past = max(g for g in lower if g < f)
        future = [g for g in lower if g > f]
        if future:
            refs.append((past, min(future)))
            kinds.append("B")
        else:
            refs.append((past,))
            kinds.append("P")
    plan = GofPlan(gof_size, order, tuple(layers), tuple(refs), tuple(kinds))
    _check_legal(plan)
    return plan


def tail_plan(plan: GofPlan, length: int) -> GofPlan:
    """Restrict a plan to its first `length` display frames (short final group).

    Frames whose future reference falls outside the tail drop it and become
    single-reference frames.
    """
    if not 1 <= length <= plan.gof_size:
        raise SchedulingError("tail length outside the group")
    keep = set(range(length))
    order = tuple(f for f in plan.order if f in keep)
    refs = []
    kinds = []
    for f in range(length):
        r = tuple(g for g in plan.refs[f] if g == PREV_GOF_LAST or g in keep)
        refs.append(r)
        if not r:
            kinds.append("I")
        elif len(r) == 1:
            kinds.append("P")
        else:
            kinds.append("B")
    out = GofPlan(plan.gof_size, order, plan.layer[:length], tuple(refs), tuple(kinds))
    _check_legal(out)
    return out


def low_delay_plan(length: int) -> GofPlan:
    """Sequential P-chain: every frame references its predecessor."""
    if length < 1:
        raise SchedulingError("need at least one frame")
    refs = tuple(() if f == 0 else (f - 1,) for f in range(length))
    kinds = tuple("I" if f == 0 else "P" for f in range(length))
    plan = GofPlan(length, tuple(range(length)), tuple(range(length)), refs, kinds)
    _check_legal(plan)
    return plan


def _check_legal(plan: GofPlan):
    pos = {f: i for i, f in enumerate(plan.order)}
    if sorted(pos) != sorted(set(plan.order)):
        raise SchedulingError("coding order is not a permutation")
    for f in plan.order:
        for g in plan.refs[f]:
            if g == PREV_GOF_LAST:
                continue
            if pos[g] >= pos[f]:
                raise SchedulingError(f"frame {f} references undecoded frame {g}")
            if plan.layer[g] >= plan.layer[f]:
                raise SchedulingError(f"frame {f} references its own layer")


def parallel_stages(plan: GofPlan):
    """Frames grouped by layer, in coding order; stages are encode barriers."""
    stages = []
    for f in plan.order:
        lv = plan.layer[f]
        if not stages or plan.layer[stages[-1][0]] != lv:
            stages.append([f])
        else:
            stages[-1].append(f)
    for stage in stages:
        members = set(stage)
        for f in stage:
            clash = members.intersection(g for g in plan.refs[f] if g != PREV_GOF_LAST)
            if clash:
                raise SchedulingError(f"stage containing {f} depends on itself via {clash}")
    return [tuple(s) for s in stages]


@dataclass(frozen=True)
class BufferReport:
    release: dict  # frame -> last coding-order position that reads it
    peak: int


def buffer_lifetimes(plan: GofPlan, retain_last: bool = True) -> BufferReport:
    """Release points and peak occupancy of the decoded-frame buffer.

    A frame sits in the buffer from its decode until the last frame that
    references it; frames nothing references never enter it. The final
    display frame is optionally held past the group for the next group's
    opening frame.
    """
    pos = {f: i for i, f in enumerate(plan.order)}
    release = {}
    for f in plan.order:
        for g in plan.refs[f]:
            if g != PREV_GOF_LAST:
                release[g] = max(release.get(g, -1), pos[f])
    if retain_last:
        release[max(plan.order)] = len(plan.order)
    peak = 0
    for p in range(len(plan.order)):
        live = sum(1 for f, r in release.items() if pos[f] <= p <= r)
        peak = max(peak, live)
    return BufferReport(release, peak)
