"""Document-level cross-modal alignment.

Mean-pools patch states and sentence states into one vector per modality,
then pulls matched image/findings pairs together against in-batch
negatives with a temperature-scaled contrastive loss over the 2Q pooled
vectors of a Q-pair batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError
from .layers import ATTN_MASK_NEG


@dataclass
class PooledPair:
    pooled_image: Tensor
    pooled_text: Tensor
    pair_id: str = ""


def pool(rows: Tensor) -> Tensor:
    """Arithmetic mean over the rows of a k x d matrix."""
    if rows.data.ndim != 2 or rows.shape[0] < 1:
        raise ValidationError("pool: need a non-empty 2-D input")
    return ad.mean(rows, axis=0)


def contrastive_loss(
    pairs: list[PooledPair],
    temperature: float,
    mode: str = "infonce",
) -> Tensor:
    """Mean per-anchor contrastive loss over all 2Q pooled vectors.

    Every vector anchors once; its positive is the other modality of the
    same pair and its negatives are both modalities of every other pair.
    "infonce" keeps the positive term in the denominator (bounded, >= 0);
    "negatives_only" sums only negatives there, the literal unbounded form.
    """
    q = len(pairs)
    if q < 2:
        raise ValidationError("contrastive_loss: need at least 2 pairs for negatives")
    if temperature <= 0:
        raise ValidationError("contrastive_loss: temperature must be > 0")

    stacked = ad.stack_rows([p.pooled_image for p in pairs] + [p.pooled_text for p in pairs])
    unit = ad.normalize_rows(stacked)
    sims = unit @ ad.transpose(unit)  # cosine similarity, rows are anchors
    logits = ad.scale(sims, 1.0 / temperature)
    positives = np.concatenate([np.arange(q) + q, np.arange(q)])

    self_mask = np.full((2 * q, 2 * q), 0.0)
    np.fill_diagonal(self_mask, ATTN_MASK_NEG)

    if mode == "infonce":
        masked = ad.add(logits, Tensor(self_mask))
        return ad.cross_entropy(masked, positives)
    if mode != "negatives_only":
        raise ValidationError(f"contrastive_loss: unknown mode {mode!r}")

    # negatives-only denominator: mask self and positive, then mean over
    # anchors of logsumexp(negatives) - positive/temperature
    neg_mask = self_mask.copy()
    neg_mask[np.arange(2 * q), positives] = ATTN_MASK_NEG
    masked = ad.add(logits, Tensor(neg_mask))
    row_max = np.max(masked.data, axis=1)  # detached shift, gradient-exact
    shifted = ad.add(masked, Tensor(-np.repeat(row_max[:, None], 2 * q, axis=1)))
    lse = ad.add(ad.log(ad.sum_(ad.exp(shifted), axis=1)), Tensor(row_max))
    pos_logits = ad.sum_(ad.mul(unit, ad.gather_rows(unit, positives)), axis=1)
    per_anchor = ad.sub(lse, ad.scale(pos_logits, 1.0 / temperature))
    return ad.mean(per_anchor)
