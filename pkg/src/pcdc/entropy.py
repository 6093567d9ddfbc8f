"""Conditional entropy model for the coded feature latents.

Per-point Laplace parameters are fused from three priors: a hyper latent
pooled one scale up and coded with a learned factorized model, a causal
window over previously decoded rows in Morton order, and the motion context
pooled onto the coded scale. Probabilities are quantized to 16-bit tables
before any symbol touches the range coder, so encoder and decoder stay
bit-identical as long as they evaluate the priors in the same order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import ScanOrderError
from .nnkernels import Mlp
from .rangecoder import BYTE_TABLE, CdfTable, RangeDecoder, RangeEncoder

SIGMA_MIN = 0.11
P_MIN = 2.0 ** -16
SYMBOL_LIMIT = 1 << 15  # coded values live in [-2^15, 2^15)
_ESCAPE_BAND_CAP = 4096
_ESCAPE_BAND_MIN = 4


def quantize(y, training: bool = False, rng: np.random.Generator | None = None):
    """Round half away from zero; in training, additive uniform noise instead."""
    if training:
        if rng is None:
            raise ValueError("training-mode quantization needs a seeded generator")
        noise = rng.uniform(-0.5, 0.5, size=np.shape(y.data if isinstance(y, tape.Tensor) else y))
        return y + tape.Tensor(noise) if isinstance(y, tape.Tensor) else y + noise
    data = y.data if isinstance(y, tape.Tensor) else np.asarray(y, dtype=np.float64)
    return (np.sign(data) * np.floor(np.abs(data) + 0.5)).astype(np.int64)


def laplace_cdf(x, mu, sigma):
    t = (np.asarray(x, dtype=np.float64) - mu) / sigma
    return np.where(t < 0, 0.5 * np.exp(t), 1.0 - 0.5 * np.exp(-t))


def laplace_pmf(n, mu, sigma):
    """Mass of the length-1 box around integer n, floored for codability.

    Evaluated per tail so no term cancels against 1; the piecewise form is
    also bitwise symmetric under (n, mu) -> (-n, -mu).
    """
    n = np.asarray(n, dtype=np.float64)
    a, b, mu, sigma = np.broadcast_arrays((n - 0.5 - mu) / sigma, (n + 0.5 - mu) / sigma, mu, sigma)
    out = np.empty(a.shape)
    right = a >= 0
    left = b <= 0
    mid = ~(right | left)
    out[right] = 0.5 * (np.exp(-a[right]) - np.exp(-b[right]))
    out[left] = 0.5 * (np.exp(b[left]) - np.exp(a[left]))
    out[mid] = 1.0 - 0.5 * (np.exp(a[mid]) + np.exp(-b[mid]))
    return np.maximum(out, P_MIN)


def rate_estimate(symbols, mu, sigma) -> float:
    """Ideal cross-entropy bits for coding `symbols` under the Laplace model."""
    p = laplace_pmf(np.asarray(symbols, dtype=np.int64), np.asarray(mu), np.asarray(sigma))
    return float(np.sum(-np.log2(p)))


def _softplus(t: tape.Tensor) -> tape.Tensor:
    return tape.relu(t) + tape.log(tape.exp(-tape.absolute(t)) + 1.0)


class FactorizedModel:
    """Learned per-channel CDF for the hyper latent (monotone by construction)."""

    def __init__(self, name: str, channels: int, units: int = 4, seed: int = 0):
        rng = np.random.default_rng([seed, channels, units])
        self.name = name
        self.channels = channels
        self.units = units
        self.w1 = tape.Tensor(rng.normal(0.0, 0.3, (channels, units)), requires_grad=True)
        self.b1 = tape.Tensor(rng.normal(0.0, 0.3, (channels, units)), requires_grad=True)
        self.a1 = tape.Tensor(np.zeros((channels, units)), requires_grad=True)
        self.w2 = tape.Tensor(rng.normal(0.0, 0.3, (channels, units)), requires_grad=True)
        self.b2 = tape.Tensor(np.zeros((channels, 1)), requires_grad=True)

    def params(self):
        n = self.name
        return [(f"{n}.w1", self.w1), (f"{n}.b1", self.b1), (f"{n}.a1", self.a1),
                (f"{n}.w2", self.w2), (f"{n}.b2", self.b2)]

    def cdf(self, x: tape.Tensor) -> tape.Tensor:
        """Evaluate the cumulative at x, shape (N, channels) -> same shape."""
        n = x.data.shape[0]
        xe = tape.reshape(x, (n, self.channels, 1))
        u = _softplus(self.w1) * xe + self.b1  # (N, C, U)
        t = u + tape.tanh(self.a1) * tape.tanh(u)
        s = tape.tsum(_softplus(self.w2) * t, axis=2, keepdims=True) + self.b2
        return tape.reshape(tape.sigmoid(s), (n, self.channels))

    def pmf(self, z: tape.Tensor) -> tape.Tensor:
        box = self.cdf(z + 0.5) - self.cdf(z - 0.5)
        return tape.clip(box, P_MIN, 1.0)

    def bits(self, z: tape.Tensor) -> tape.Tensor:
        return tape.tsum(-(1.0 / math.log(2.0)) * tape.log(self.pmf(z)))

    def channel_tables(self, lo: np.ndarray, hi: np.ndarray):
        """One CdfTable per channel over the closed integer band [lo_c, hi_c]."""
        tables = []
        with tape.no_grad():
            for c in range(self.channels):
                band = np.arange(int(lo[c]), int(hi[c]) + 1, dtype=np.float64)
                x = np.zeros((len(band), self.channels))
                x[:, c] = band
                upper = self.cdf(tape.Tensor(x + 0.5)).data[:, c]
                lower = self.cdf(tape.Tensor(x - 0.5)).data[:, c]
                pmf = np.maximum(upper - lower, P_MIN)
                tables.append(CdfTable.from_pmf(pmf, offset=int(lo[c])))
        return tables


@dataclass
class PriorParams:
    hyper_mlp: Mlp  # pooled hyper row -> prior vector
    ar_mlp: Mlp  # flattened causal window -> prior vector
    temporal_mlp: Mlp  # pooled context row -> prior vector
    fusion_mlp: Mlp  # concat of the three -> (mu, log sigma)
    window: int
    latent_width: int

    def params(self):
        return (self.hyper_mlp.params() + self.ar_mlp.params()
                + self.temporal_mlp.params() + self.fusion_mlp.params())


def make_prior_params(name: str, latent_width: int, hyper_width: int, context_width: int,
                      prior_width: int, window: int, seed: int) -> PriorParams:
    hidden = max(8, 2 * prior_width)
    return PriorParams(
        hyper_mlp=Mlp(f"{name}.hyper", [hyper_width, hidden, prior_width], seed),
        ar_mlp=Mlp(f"{name}.ar", [window * latent_width, hidden, prior_width], seed),
        temporal_mlp=Mlp(f"{name}.temporal", [context_width, hidden, prior_width], seed),
        fusion_mlp=Mlp(f"{name}.fusion", [3 * prior_width, hidden, 2 * latent_width], seed),
        window=window,
        latent_width=latent_width,
    )


def causal_window(rows, window: int):
    """(N, C) -> (N, window*C): for each row, the previous `window` rows, zero-padded.

    Column block d holds the row (window - d) steps back. Accepts a Tensor
    and stays on the tape so rate gradients reach the latents through the
    causal prior too.
    """
    if isinstance(rows, tape.Tensor):
        n, c = rows.data.shape
        padded = tape.concat([tape.Tensor(np.zeros((window, c))), rows], axis=0)
        return tape.concat([tape.narrow(padded, 0, d, n) for d in range(window)], axis=1)
    rows = np.asarray(rows, dtype=np.float64)
    n, c = rows.shape
    padded = np.concatenate([np.zeros((window, c)), rows], axis=0)
    out = np.empty((n, window * c))
    for d in range(window):
        out[:, d * c : (d + 1) * c] = padded[d : d + n]
    return out


def _split_mu_sigma(fused: tape.Tensor, width: int):
    mu = tape.narrow(fused, 1, 0, width)
    log_sigma = tape.narrow(fused, 1, width, width)
    sigma = tape.clip(tape.exp(tape.clip(log_sigma, -60.0, 60.0)), SIGMA_MIN, None)
    return mu, sigma


def predict_params(prior: PriorParams, hyper_rows: tape.Tensor, causal_rows,
                   context_rows: tape.Tensor):
    """Teacher-forced batch evaluation of (mu, sigma) for every coded row.

    `causal_rows` are the quantized latents themselves; row i of the causal
    input sees rows i-window .. i-1. Used for training and rate estimates;
    actual coding walks `SequentialCoder` so both sides share one evaluation
    order.
    """
    n = hyper_rows.data.shape[0]
    if context_rows.data.shape[0] != n:
        raise ScanOrderError("context rows do not match the coded point count")
    causal = causal_rows if isinstance(causal_rows, tape.Tensor) else tape.Tensor(
        np.asarray(causal_rows, dtype=np.float64))
    if causal.data.shape[0] != n:
        raise ScanOrderError("causal rows do not match the coded point count")
    h = prior.hyper_mlp(hyper_rows)
    a = prior.ar_mlp(causal_window(causal, prior.window))
    t = prior.temporal_mlp(context_rows)
    fused = prior.fusion_mlp(tape.concat([h, a, t], axis=1))
    return _split_mu_sigma(fused, prior.latent_width)


def _symbol_band(mu: float, sigma: float):
    center = int(np.sign(mu) * np.floor(abs(mu) + 0.5))
    reach = int(min(_ESCAPE_BAND_CAP, max(_ESCAPE_BAND_MIN, math.ceil(10.0 * sigma))))
    lo = max(center - reach, -SYMBOL_LIMIT)
    hi = min(center + reach, SYMBOL_LIMIT - 1)
    return lo, hi


def _band_table(mu: float, sigma: float):
    """Laplace band plus a final escape symbol for out-of-band values."""
    lo, hi = _symbol_band(mu, sigma)
    band = np.arange(lo, hi + 1, dtype=np.float64)
    pmf = laplace_pmf(band, mu, sigma)
    tail = max(1.0 - float(pmf.sum()), P_MIN)
    return lo, hi, CdfTable.from_pmf(np.append(pmf, tail))


_PARAM_GRID = 64.0  # (mu, sigma) snap to 1/64 before table building


class _TableCache:
    """Band tables keyed by grid-snapped (mu, sigma).

    Snapping costs a sliver of rate but lets repeated parameters reuse one
    table. Both coder sides snap the same floats to the same keys, so the
    cache (including its deterministic full-clear) cannot desynchronize them.
    """

    __slots__ = ("_map",)

    def __init__(self):
        self._map = {}

    def get(self, mu: float, sigma: float):
        key = (int(math.floor(mu * _PARAM_GRID + 0.5)), int(math.floor(sigma * _PARAM_GRID + 0.5)))
        hit = self._map.get(key)
        if hit is None:
            if len(self._map) >= (1 << 16):
                self._map.clear()
            hit = _band_table(key[0] / _PARAM_GRID, max(key[1] / _PARAM_GRID, SIGMA_MIN))
            self._map[key] = hit
        return hit


class SequentialCoder:
    """Strictly ordered per-row coding shared by encoder and decoder.

    Every float that influences a probability table is produced by the same
    sequence of single-row matrix products on both sides; batched variants
    of the same math may round differently and are kept out of this path.
    """

    def __init__(self, prior: PriorParams, hyper_rows: np.ndarray, context_rows: np.ndarray):
        self.prior = prior
        self.hyper = np.asarray(hyper_rows, dtype=np.float64)
        self.context = np.asarray(context_rows, dtype=np.float64)
        self.tables = _TableCache()
        if self.hyper.shape[0] != self.context.shape[0]:
            raise ScanOrderError("hyper and context row counts differ")

    def _row_params(self, i: int, history: np.ndarray):
        w = self.prior.window
        c = self.prior.latent_width
        win = np.zeros((1, w * c))
        take = min(w, i)
        if take:
            win[0, (w - take) * c :] = history[i - take : i].reshape(-1)
        with tape.no_grad():
            h = self.prior.hyper_mlp(tape.Tensor(self.hyper[i : i + 1]))
            a = self.prior.ar_mlp(tape.Tensor(win))
            t = self.prior.temporal_mlp(tape.Tensor(self.context[i : i + 1]))
            fused = self.prior.fusion_mlp(tape.concat([h, a, t], axis=1))
            mu, sigma = _split_mu_sigma(fused, c)
        return mu.data[0], sigma.data[0]

    def encode(self, symbols: np.ndarray, enc: RangeEncoder) -> None:
        symbols = np.asarray(symbols, dtype=np.int64)
        if np.any(symbols < -SYMBOL_LIMIT) or np.any(symbols >= SYMBOL_LIMIT):
            raise ScanOrderError("latent symbol outside the codable range")
        n = symbols.shape[0]
        for i in range(n):
            mu, sigma = self._row_params(i, symbols)
            for ch in range(self.prior.latent_width):
                lo, hi, table = self.tables.get(mu[ch], sigma[ch])
                value = int(symbols[i, ch])
                if lo <= value <= hi:
                    enc.encode_symbol(value - lo, table)
                else:
                    enc.encode_symbol(hi - lo + 1, table)  # escape
                    raw = value + SYMBOL_LIMIT
                    enc.encode_symbol(raw >> 8, BYTE_TABLE)
                    enc.encode_symbol(raw & 0xFF, BYTE_TABLE)

    def decode(self, n: int, dec: RangeDecoder) -> np.ndarray:
        c = self.prior.latent_width
        out = np.zeros((n, c), dtype=np.int64)
        for i in range(n):
            mu, sigma = self._row_params(i, out)
            for ch in range(c):
                lo, hi, table = self.tables.get(mu[ch], sigma[ch])
                sym = dec.decode_symbol(table)
                if sym <= hi - lo:
                    out[i, ch] = lo + sym
                else:
                    raw = (dec.decode_symbol(BYTE_TABLE) << 8) | dec.decode_symbol(BYTE_TABLE)
                    out[i, ch] = raw - SYMBOL_LIMIT
        return out


def code_hyper(z_hat: np.ndarray, model: FactorizedModel, enc: RangeEncoder):
    """Encode integer hyper rows column-wise; returns the (lo, hi) band per channel."""
    z_hat = np.asarray(z_hat, dtype=np.int64)
    if np.any(z_hat < -SYMBOL_LIMIT) or np.any(z_hat >= SYMBOL_LIMIT):
        raise ScanOrderError("hyper symbol outside the codable range")
    lo = z_hat.min(axis=0)
    hi = z_hat.max(axis=0)
    tables = model.channel_tables(lo, hi)
    for row in z_hat:
        for ch, table in enumerate(tables):
            enc.encode_value(int(row[ch]), table)
    return lo, hi


def decode_hyper(n: int, lo: np.ndarray, hi: np.ndarray, model: FactorizedModel,
                 dec: RangeDecoder) -> np.ndarray:
    tables = model.channel_tables(lo, hi)
    out = np.zeros((n, model.channels), dtype=np.int64)
    for i in range(n):
        for ch, table in enumerate(tables):
            out[i, ch] = dec.decode_value(table)
    return out
