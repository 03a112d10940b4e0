"""Sentence-level co-attention fusion between sentence and patch states.

Each sentence state attends over all patch states and vice versa; each
side is then updated residually with the context vector computed *for* it:
sentences absorb their patch context, patches absorb their sentence
context, so both outputs keep their own row counts.

By default the attention logits are raw dot products with no scaling and
no learned projections; both can be switched on for ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .layers import Linear


@dataclass
class FusionOutput:
    sent_to_patch_attn: Tensor  # M x P rows sum to 1
    patch_context: Tensor  # M x d, convex combinations of patch rows
    patch_to_sent_attn: Tensor  # P x M rows sum to 1
    sentence_context: Tensor  # P x d, convex combinations of sentence rows
    fused_sentences: Tensor  # M x d
    fused_patches: Tensor  # P x d


def co_attend(
    sentence_states: Tensor,
    patch_states: Tensor,
    scaled: bool = False,
    query_proj: Linear | None = None,
    key_proj: Linear | None = None,
) -> FusionOutput:
    """Bidirectional cross-attention with residual updates.

    Contexts are always convex combinations of the *original* rows even in
    the projected variant; projections only shape the logits.
    """
    if sentence_states.data.ndim != 2 or patch_states.data.ndim != 2:
        raise ShapeError("co_attend: 2-D inputs required")
    m, d = sentence_states.shape
    p, d2 = patch_states.shape
    if d != d2:
        raise ShapeError(f"co_attend: widths differ ({d} vs {d2})")
    if m < 1 or p < 1:
        raise ShapeError("co_attend: need at least one sentence and one patch")

    queries = query_proj(sentence_states) if query_proj else sentence_states
    keys = key_proj(patch_states) if key_proj else patch_states
    logits = queries @ ad.transpose(keys)
    if scaled:
        logits = ad.scale(logits, 1.0 / np.sqrt(d))

    sent_to_patch = ad.softmax(logits, axis=-1)
    patch_context = sent_to_patch @ patch_states
    patch_to_sent = ad.softmax(ad.transpose(logits), axis=-1)
    sentence_context = patch_to_sent @ sentence_states

    return FusionOutput(
        sent_to_patch_attn=sent_to_patch,
        patch_context=patch_context,
        patch_to_sent_attn=patch_to_sent,
        sentence_context=sentence_context,
        fused_sentences=ad.add(sentence_states, patch_context),
        fused_patches=ad.add(patch_states, sentence_context),
    )
