"""Dense layers, initialization, optimizer, gradient checking, checkpoints.

Parameters are float64 and are drawn from a per-layer PRNG stream keyed by
(global seed, layer name), so constructing the same model twice yields
bit-identical weights regardless of construction order.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from . import tape
from .errors import CodecError, NonFinite
from .tape import Tensor

softmax = tape.softmax

WEIGHTS_MAGIC = b"PCDCWGT1"


def layer_rng(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible stream for one named layer."""
    digest = hashlib.blake2b(name.encode(), digest_size=8).digest()
    return np.random.default_rng(np.random.SeedSequence([seed, int.from_bytes(digest, "little")]))


class LinearLayer:
    """Affine map y = x @ w.T + b with w shaped (out, in)."""

    def __init__(self, name: str, in_width: int, out_width: int, seed: int = 0, identity: bool = False):
        self.name = name
        self.in_width = in_width
        self.out_width = out_width
        if identity:
            if in_width != out_width:
                raise ValueError("identity init needs a square layer")
            w = np.eye(out_width)
            b = np.zeros(out_width)
        else:
            rng = layer_rng(seed, name)
            bound = (1.0 / in_width) ** 0.5
            w = rng.uniform(-bound, bound, size=(out_width, in_width))
            b = rng.uniform(-bound, bound, size=out_width)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)

    def __call__(self, x) -> Tensor:
        return tape.linear(x, self.w, self.b)

    def params(self):
        return [(self.name + ".w", self.w), (self.name + ".b", self.b)]


class Mlp:
    """Stack of LinearLayers with ReLU between layers and none after the last."""

    def __init__(self, name: str, widths, seed: int = 0):
        if len(widths) < 2:
            raise ValueError("an Mlp needs at least input and output widths")
        self.name = name
        self.layers = [
            LinearLayer(f"{name}.{i}", widths[i], widths[i + 1], seed=seed)
            for i in range(len(widths) - 1)
        ]

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = tape.relu(x)
        return x

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out


def mlp_widths(in_width: int, out_width: int, depth: int, hidden_mult: int):
    """Default shape: `depth` weight layers, hidden width = mult * input."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    hidden = max(4, hidden_mult * in_width)
    return [in_width] + [hidden] * (depth - 1) + [out_width]


class Adam:
    """Adam with bias correction; betas default to (0.9, 0.999)."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        # params: iterable of (name, Tensor)
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def grad_check(forward_fn, tensors, h: float = 1e-5, seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    forward_fn rebuilds the graph from the current tensor values and returns
    a Tensor. The output is projected onto a fixed random cotangent so a
    single backward pass yields every gradient. Returns the max over all
    components of |analytic - numeric| / max(1, |numeric|).
    """
    if not (1e-7 <= h <= 1e-3):
        raise ValueError("step size h must lie in [1e-7, 1e-3]")
    tensors = list(tensors)
    out = forward_fn()
    if not np.all(np.isfinite(out.data)):
        raise NonFinite("forward pass produced non-finite values")
    rng = np.random.default_rng(seed)
    cot = rng.standard_normal(out.data.shape)

    for _, t in tensors:
        t.grad = None
    out.backward(cot)
    analytic = {}
    for name, t in tensors:
        if t.grad is None:
            analytic[name] = np.zeros_like(t.data)
        else:
            analytic[name] = t.grad.copy()

    def objective():
        with tape.no_grad():
            return float((forward_fn().data * cot).sum())

    worst = 0.0
    for name, t in tensors:
        flat = t.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            hi = objective()
            flat[i] = keep - h
            lo = objective()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst


# -- checkpoint serialization --------------------------------------------------


def serialize_weights(params, config_hash: int) -> bytes:
    """Little-endian blob: magic, config hash, then sorted named arrays."""
    entries = sorted(
        ((name, np.ascontiguousarray(p.data, dtype=np.float64)) for name, p in params),
        key=lambda kv: kv[0],
    )
    out = bytearray()
    out += WEIGHTS_MAGIC
    out += struct.pack("<Q", config_hash)
    out += struct.pack("<I", len(entries))
    for name, arr in entries:
        raw = name.encode()
        out += struct.pack("<H", len(raw))
        out += raw
        out += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            out += struct.pack("<I", d)
        out += arr.tobytes()
    return bytes(out)


def deserialize_weights(blob: bytes):
    """Inverse of serialize_weights; returns (config_hash, {name: array})."""
    if blob[: len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise CodecError("not a weight checkpoint: bad magic")
    pos = len(WEIGHTS_MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CodecError("weight checkpoint truncated")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (config_hash,) = take("<Q")
    (count,) = take("<I")
    named = {}
    for _ in range(count):
        (nlen,) = take("<H")
        if pos + nlen > len(blob):
            raise CodecError("weight checkpoint truncated")
        name = blob[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = take("<B")
        shape = tuple(take("<" + "I" * ndim)) if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        size = 8 * n
        if pos + size > len(blob):
            raise CodecError("weight checkpoint truncated")
        named[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += size
    return config_hash, named


def save_weights(path: str, params, config_hash: int):
    with open(path, "wb") as f:
        f.write(serialize_weights(params, config_hash))


def load_weights(path: str, expected_config_hash: int | None = None):
    with open(path, "rb") as f:
        blob = f.read()
    config_hash, named = deserialize_weights(blob)
    if expected_config_hash is not None and config_hash != expected_config_hash:
        raise CodecError(
            "weight checkpoint was produced under a different configuration "
            f"(checkpoint hash {config_hash:#018x}, expected {expected_config_hash:#018x}); "
            "re-train or pass the matching config"
        )
    return config_hash, named


def weights_digest(blob: bytes) -> int:
    """64-bit identity of a serialized checkpoint, stored in bitstreams."""
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")
