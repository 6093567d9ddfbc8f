"""Geometry quality metrics and rate-curve comparison.

D1 is symmetric point-to-point PSNR, D2 projects the same displacements onto
reference normals (MPEG convention, 12-NN PCA normals). BD-rate follows the
classic cubic fit of log-rate against PSNR integrated over the overlapping
quality range.
"""

from __future__ import annotations

import csv
import json
import math

import numpy as np

from .errors import EmptyCloud, NoOverlap

LOSSLESS = math.inf
_NORMAL_K = 12
_RANK_TOL = 1e-9
_CHUNK = 512


def _knn_indices(src: np.ndarray, dst: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest dst points per src point (brute force, float-safe).

    Distance ties resolve to the lower index; clouds here are desk-scale so
    the chunked dense pass beats building a grid.
    """
    k = min(k, len(dst))
    dst_sq = np.sum(dst * dst, axis=1)
    out = np.empty((len(src), k), dtype=np.int64)
    for s in range(0, len(src), _CHUNK):
        block = src[s : s + _CHUNK]
        dist = np.sum(block * block, axis=1)[:, None] + dst_sq[None, :] - 2.0 * (block @ dst.T)
        out[s : s + len(block)] = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return out


def _nn_displacements(src: np.ndarray, dst: np.ndarray):
    """For each src point: (squared distance, nearest index, displacement)."""
    idx = _knn_indices(src, dst, 1)[:, 0]
    disp = src - dst[idx]
    return np.sum(disp * disp, axis=1), idx, disp


def d1_mse(rec: np.ndarray, ref: np.ndarray) -> float:
    rec = np.asarray(rec, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if len(rec) == 0 or len(ref) == 0:
        raise EmptyCloud("metrics need non-empty clouds")
    fwd, _, _ = _nn_displacements(rec, ref)
    bwd, _, _ = _nn_displacements(ref, rec)
    return max(float(fwd.mean()), float(bwd.mean()))


def _psnr(mse: float, peak: float) -> float:
    if mse == 0.0:
        return LOSSLESS
    return 10.0 * math.log10(3.0 * peak * peak / mse)


def d1_psnr(rec, ref, peak: float) -> float:
    return _psnr(d1_mse(rec, ref), peak)


def estimate_normals(cloud: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit normals per point via PCA over the 12 nearest neighbors.

    Returns (normals, valid): rows with a neighborhood of rank < 2 carry a
    zero normal and valid=False. Signs point away from the cloud centroid.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    k = min(_NORMAL_K, len(cloud))
    nbrs = cloud[_knn_indices(cloud, cloud, k)]  # (N, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = evecs[:, :, 0]
    scale = np.maximum(evals[:, 2], 1.0)
    valid = evals[:, 1] > _RANK_TOL * scale
    normals = np.where(valid[:, None], normals, 0.0)
    outward = cloud - cloud.mean(axis=0)
    flip = np.sum(normals * outward, axis=1) < 0
    normals[flip] *= -1.0
    return normals, valid


def d2_mse(rec: np.ndarray, ref: np.ndarray) -> float:
    """Point-to-plane MSE; both passes project onto reference normals."""
    rec = np.asarray(rec, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if len(rec) == 0 or len(ref) == 0:
        raise EmptyCloud("metrics need non-empty clouds")
    normals, valid = estimate_normals(ref)

    d2f, idxf, dispf = _nn_displacements(rec, ref)
    proj = np.sum(dispf * normals[idxf], axis=1) ** 2
    errf = np.where(valid[idxf], proj, d2f)  # degenerate normal: full distance

    d2b, _, dispb = _nn_displacements(ref, rec)
    projb = np.sum(dispb * normals, axis=1) ** 2
    errb = np.where(valid, projb, d2b)
    return max(float(errf.mean()), float(errb.mean()))


def d2_psnr(rec, ref, peak: float) -> float:
    return _psnr(d2_mse(rec, ref), peak)


def bd_rate(curve_a, curve_b) -> float:
    """Percent rate change of curve B against curve A over the PSNR overlap."""
    ra, pa = _split_curve(curve_a)
    rb, pb = _split_curve(curve_b)
    lo = max(pa.min(), pb.min())
    hi = min(pa.max(), pb.max())
    if hi <= lo:
        raise NoOverlap("rate curves share no PSNR range")
    fit_a = np.polyfit(pa, np.log10(ra), 3)
    fit_b = np.polyfit(pb, np.log10(rb), 3)
    span = hi - lo
    int_a = np.polyval(np.polyint(fit_a), [lo, hi])
    int_b = np.polyval(np.polyint(fit_b), [lo, hi])
    avg_diff = ((int_b[1] - int_b[0]) - (int_a[1] - int_a[0])) / span
    return (10.0 ** avg_diff - 1.0) * 100.0


def _split_curve(curve):
    pts = np.asarray(curve, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 4:
        raise ValueError("a rate curve needs at least 4 (bpp, psnr) points")
    rate, psnr = pts[:, 0], pts[:, 1]
    if np.any(rate <= 0):
        raise ValueError("rates must be positive")
    order = np.argsort(psnr)
    return rate[order], psnr[order]


def residual_report(aligned: np.ndarray, interpolated: np.ndarray, refined: np.ndarray,
                    bins: int = 40) -> dict:
    """Histogram + variance summary of the three feature-residual populations."""
    out = {}
    arrays = {"aligned": np.asarray(aligned, dtype=np.float64).ravel(),
              "interpolated": np.asarray(interpolated, dtype=np.float64).ravel(),
              "refined": np.asarray(refined, dtype=np.float64).ravel()}
    span = max(np.abs(a).max() for a in arrays.values()) or 1.0
    edges = np.linspace(-span, span, bins + 1)
    for name, a in arrays.items():
        hist, _ = np.histogram(a, bins=edges)
        out[name] = {"variance": float(a.var()),
                     "mean": float(a.mean()),
                     "histogram": hist.tolist()}
    out["bin_edges"] = edges.tolist()
    return out


FRAME_CSV_COLUMNS = ["frame", "kind", "points", "bits_c3", "bits_c4", "bits_f4",
                     "bits_z", "bpp", "d1_psnr", "d2_psnr"]


def write_frame_csv(path: str, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=FRAME_CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            formatted = {}
            for col in FRAME_CSV_COLUMNS:
                v = row.get(col, "")
                if isinstance(v, float):
                    v = "inf" if math.isinf(v) else f"{v:.6f}"
                formatted[col] = v
            writer.writerow(formatted)


def write_json(path: str, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
