"""Bundle of every learned parameter the codec uses.

One CodecModel instance owns the analysis/synthesis pyramid layers, the
temporal alignment and refinement networks, the hyper branch, and the
conditional prior. Checkpoints are keyed by the configuration hash so a
stream encoded under one geometry cannot be silently decoded under another.
"""

from __future__ import annotations

from . import align as align_mod
from . import entropy as entropy_mod
from . import refine as refine_mod
from .config import CodecConfig
from .errors import CodecError
from .nnkernels import (
    LinearLayer,
    Mlp,
    load_weights,
    mlp_widths,
    save_weights,
    serialize_weights,
    weights_digest,
)


class CodecModel:
    """All layers of the codec, addressable as one flat parameter list."""

    def __init__(self, config: CodecConfig):
        self.config = config
        w = config.feature_widths
        ctx = config.context_width
        depth = config.mlp_depth
        mult = config.hidden_mult
        seed = config.seed

        # Analysis pyramid: three plain downsampling steps shared by the
        # current frame and by reference re-expansion on the decoder side.
        self.down = [
            LinearLayer(f"down{k}", w[k] + 8, w[k + 1], seed) for k in range(3)
        ]
        # Fourth step folds the temporal context in before pooling.
        self.ctx_down = LinearLayer("ctxdown", (w[3] + ctx) + 8, w[4], seed)

        # Temporal feature alignment and bidirectional fusion at stage 3.
        # Relative offsets are normalized by the stage-3 grid extent.
        self.align = align_mod.make_align_params(
            "align", w[3], config.knn_k, float(1 << (config.bit_depth - 3)),
            seed, depth, mult,
        )
        self.fuse = align_mod.make_fuse_params("fuse", w[3], ctx, seed)

        # Contextual decoder: parent latent row + context row -> stage 3.
        self.cd_mlp = Mlp("ctxup", mlp_widths(w[4] + ctx, w[3], depth, mult), seed)

        # Cross-attention refinement of the decoded stage-3 features.
        self.refine = refine_mod.make_refine_params(
            "refine", w[3], config.refine_k, seed, depth, mult
        )
        self.refine_fuse = refine_mod.make_refine_fuse_params("rfuse", w[3], seed)

        # Synthesis: stages 3 -> 2 -> 1 -> 0. Each step predicts child
        # occupancy and maps the parent feature to 8 child features.
        self.up_occ = [
            Mlp(f"up{k}.occ", mlp_widths(w[k], 8, depth, mult), seed)
            for k in (3, 2, 1)
        ]
        self.up_feat = [
            LinearLayer(f"up{k}.feat", w[k], 8 * w[k - 1], seed) for k in (3, 2, 1)
        ]

        # Hyper branch: latents pooled one level coarser, factorized prior.
        self.hyper_enc = Mlp(
            "hyperenc",
            [w[4] + 8, max(8, 2 * config.hyper_width), config.hyper_width],
            seed,
        )
        self.hyper_model = entropy_mod.FactorizedModel(
            "hyperprior", config.hyper_width, seed=seed
        )

        # Conditional prior over the stage-4 latent rows.
        self.prior = entropy_mod.make_prior_params(
            "prior", w[4], config.hyper_width, ctx, config.prior_width,
            config.ar_window, seed,
        )

    def params(self):
        """Flat (name, tensor) list, sorted by name; names must be unique."""
        out = []
        for layer in self.down:
            out.extend(layer.params())
        out.extend(self.ctx_down.params())
        out.extend(self.align.params())
        out.extend(self.fuse.params())
        out.extend(self.cd_mlp.params())
        out.extend(self.refine.params())
        out.extend(self.refine_fuse.params())
        for m in self.up_occ:
            out.extend(m.params())
        for layer in self.up_feat:
            out.extend(layer.params())
        out.extend(self.hyper_enc.params())
        out.extend(self.hyper_model.params())
        out.extend(self.prior.params())
        out.sort(key=lambda kv: kv[0])
        names = [name for name, _ in out]
        if len(set(names)) != len(names):
            raise CodecError("duplicate parameter names in the model registry")
        return out

    def num_params(self) -> int:
        return sum(p.data.size for _, p in self.params())

    def serialize(self) -> bytes:
        return serialize_weights(self.params(), self.config.config_hash())

    def digest(self) -> int:
        """64-bit identity of the current weights, embedded in bitstreams."""
        return weights_digest(self.serialize())

    def load_state(self, named: dict) -> None:
        """Copy arrays into the live tensors; shapes and names must match."""
        params = self.params()
        missing = [name for name, _ in params if name not in named]
        if missing:
            raise CodecError(f"checkpoint is missing parameters: {missing[:4]}")
        extra = set(named) - {name for name, _ in params}
        if extra:
            raise CodecError(f"checkpoint has unknown parameters: {sorted(extra)[:4]}")
        for name, p in params:
            arr = named[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise CodecError(
                    f"parameter {name} has shape {arr.shape}, expected {p.data.shape}"
                )
            p.data[...] = arr

    def save(self, path: str) -> None:
        save_weights(path, self.params(), self.config.config_hash())


def load_model(path: str, config: CodecConfig) -> CodecModel:
    """Build a model for `config` and fill it from a checkpoint on disk."""
    _, named = load_weights(path, expected_config_hash=config.config_hash())
    model = CodecModel(config)
    model.load_state(named)
    return model
