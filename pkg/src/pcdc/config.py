"""Codec configuration.

One CodecConfig instance pins every architecture and coding constant, and its
hash is embedded in both weight checkpoints and bitstreams so mismatched
artifacts are rejected instead of silently misdecoding.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict

# Rate-distortion operating points selectable from the CLI.
LAMBDA_TABLE = (1.0, 3.0, 5.0, 8.0, 15.0)
LAMBDA_INDEX_CUSTOM = 0xFF


@dataclass(frozen=True)
class CodecConfig:
    """Architecture and coding constants.

    feature_widths holds the channel count per scale, finest first: stage 0
    is raw occupancy, stage 3 is where temporal alignment happens, stage 4 is
    the coded latent.
    """

    bit_depth: int = 10
    gof_size: int = 16
    feature_widths: tuple[int, ...] = (1, 16, 32, 64, 96)
    context_width: int = 64
    hyper_width: int = 8
    prior_width: int = 64
    knn_k: int = 32
    refine_k: int = 16
    ar_window: int = 8
    hidden_mult: int = 2
    mlp_depth: int = 2
    sigma_min: float = 0.11
    lambda_: float = 8.0
    seed: int = 0
    train_lr: float = 4e-3

    def __post_init__(self):
        if len(self.feature_widths) != 5:
            raise ValueError("feature_widths must list five scales")
        if self.bit_depth < 4 or self.bit_depth > 21:
            raise ValueError("bit_depth out of supported range [4, 21]")
        if self.gof_size & (self.gof_size - 1):
            raise ValueError("gof_size must be a power of two")
        if self.lambda_ <= 0:
            raise ValueError("lambda_ must be positive")

    @property
    def peak(self) -> int:
        return (1 << self.bit_depth) - 1

    @property
    def num_scales(self) -> int:
        return len(self.feature_widths)

    def config_hash(self) -> int:
        """64-bit digest over every field that affects coded bytes."""
        blob = repr(sorted(asdict(self).items())).encode()
        return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def replace_lambda(cfg: CodecConfig, lambda_: float) -> CodecConfig:
    from dataclasses import replace
    return replace(cfg, lambda_=lambda_)


def lambda_index_for(lambda_: float) -> int:
    for i, v in enumerate(LAMBDA_TABLE):
        if abs(v - lambda_) < 1e-9:
            return i
    return LAMBDA_INDEX_CUSTOM
