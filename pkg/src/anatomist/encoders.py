"""The three feature extractors: patch projection, text encoder, image encoder.

The patch projection maps raw region features to model width and adds a
learned position embedding.  The text encoder runs pre-norm Transformer
blocks over [CLS]-framed sentences and reads each sentence state off its
[CLS] row.  The image encoder runs further blocks over projected patches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import PAD_ID, PatchFeatures
from .errors import ConfigError, LengthError, ValidationError
from .layers import EncoderBlock, LayerNorm, Linear, key_padding_mask, weight


@dataclass
class ModelConfig:
    """Architecture shape plus the alignment/fusion knobs.

    Defaults are a desk-scale reduction of the reference shape (equal image
    encoder and decoder depth, feed-forward wider than the model width).
    """

    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_text_layers: int = 2
    n_image_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 128
    max_len: int = 128
    patch_dim: int = 16
    temperature: float = 0.05
    contrastive_mode: str = "infonce"  # or "negatives_only"
    fusion_projected: bool = False
    fusion_scaled: bool = False

    def __post_init__(self):
        dims = (
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.n_text_layers,
            self.n_image_layers,
            self.n_decoder_layers,
            self.d_ff,
            self.max_len,
            self.patch_dim,
        )
        if min(dims) < 1:
            raise ConfigError("all model dimensions must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.contrastive_mode not in ("infonce", "negatives_only"):
            raise ConfigError(f"unknown contrastive_mode {self.contrastive_mode!r}")


def model_config_from_file(path, vocab_size: int | None = None) -> ModelConfig:
    """Read a ModelConfig from TOML or JSON; a [model] table is honored."""
    text = open(path, "rb").read()
    if str(path).endswith(".json"):
        raw = json.loads(text)
    else:
        try:
            import tomllib  # Python >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        raw = tomllib.loads(text.decode("utf-8"))
    raw = raw.get("model", raw)
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    if vocab_size is not None:
        raw["vocab_size"] = vocab_size
    if "vocab_size" not in raw:
        raise ConfigError("model config needs vocab_size")
    return ModelConfig(**raw)


@dataclass
class EncodedPair:
    """Per-report encoder outputs feeding alignment, fusion, and decoding."""

    token_states: Tensor | None  # n x d_model
    sentence_states: Tensor | None  # M x d_model, gathered at [CLS] rows
    patch_states: Tensor | None  # P x d_model
    projected_patches: Tensor | None  # P x d_model


class VisualExtractor:
    """Affine projection of raw patch features plus position embedding."""

    def __init__(self, rng, config: ModelConfig):
        self.max_len = config.max_len
        self.proj = Linear(rng, config.patch_dim, config.d_model)
        self.pos_emb = weight(rng, (config.max_len, config.d_model))

    def __call__(self, patches: PatchFeatures) -> Tensor:
        p = patches.patch_count
        if p > self.max_len:
            raise LengthError(f"{p} patches exceed max_len {self.max_len}")
        projected = self.proj(Tensor(patches.patches))
        return ad.add(projected, ad.gather_rows(self.pos_emb, np.arange(p)))

    def named_params(self, prefix: str = "visual"):
        yield from self.proj.named_params(f"{prefix}.proj")
        yield f"{prefix}.pos_emb", self.pos_emb


class TextEncoder:
    def __init__(self, rng, config: ModelConfig):
        self.max_len = config.max_len
        self.tok_emb = weight(rng, (config.vocab_size, config.d_model))
        self.pos_emb = weight(rng, (config.max_len, config.d_model))
        self.blocks = [
            EncoderBlock(rng, config.d_model, config.n_heads, config.d_ff)
            for _ in range(config.n_text_layers)
        ]
        self.final_ln = LayerNorm(config.d_model)

    def __call__(self, token_ids, cls_positions) -> tuple[Tensor, Tensor]:
        """Token states for the whole sequence plus the [CLS] sentence states.

        PAD positions are excluded from attention, so their content cannot
        leak into other rows.
        """
        ids = np.asarray(token_ids, dtype=np.int64)
        n = ids.shape[0]
        if n > self.max_len:
            raise LengthError(f"sequence length {n} exceeds max_len {self.max_len}")
        if n == 0:
            raise ValidationError("text_encode: empty token sequence")
        x = ad.add(
            ad.embedding_lookup(self.tok_emb, ids),
            ad.gather_rows(self.pos_emb, np.arange(n)),
        )
        mask = key_padding_mask(n, np.nonzero(ids == PAD_ID)[0])
        for block in self.blocks:
            x = block(x, mask)
        h = self.final_ln(x)
        h_cls = ad.gather_rows(h, np.asarray(cls_positions, dtype=np.int64))
        return h, h_cls

    def named_params(self, prefix: str = "text"):
        yield f"{prefix}.tok_emb", self.tok_emb
        yield f"{prefix}.pos_emb", self.pos_emb
        for i, block in enumerate(self.blocks):
            yield from block.named_params(f"{prefix}.block{i}")
        yield from self.final_ln.named_params(f"{prefix}.final_ln")


class ImageEncoder:
    def __init__(self, rng, config: ModelConfig):
        self.blocks = [
            EncoderBlock(rng, config.d_model, config.n_heads, config.d_ff)
            for _ in range(config.n_image_layers)
        ]
        self.final_ln = LayerNorm(config.d_model)

    def __call__(self, projected_patches: Tensor) -> Tensor:
        x = projected_patches
        for block in self.blocks:
            x = block(x)
        return self.final_ln(x)

    def named_params(self, prefix: str = "image"):
        for i, block in enumerate(self.blocks):
            yield from block.named_params(f"{prefix}.block{i}")
        yield from self.final_ln.named_params(f"{prefix}.final_ln")
