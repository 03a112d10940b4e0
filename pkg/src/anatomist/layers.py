"""Parameterized layers shared by the encoders and the decoder.

Weights init Gaussian(0, 0.02), biases zero, layer-norm gains one; all
blocks are pre-norm.  Layers expose named_params() so the trainer and the
checkpoint format can address every tensor by a stable dotted name.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02
ATTN_MASK_NEG = -1e30


def weight(rng, shape) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.w = weight(rng, (d_in, d_out))
        self.b = zeros_param(d_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return ad.add_bias(y, self.b) if self.b is not None else y

    def named_params(self, prefix: str):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class LayerNorm:
    def __init__(self, d: int):
        self.gain = ones_param(d)
        self.bias = zeros_param(d)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)

    def named_params(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


class MultiHeadAttention:
    """Standard scaled dot-product attention over 2-D (rows x d_model) inputs.

    Heads are column slices; stores the last per-head attention matrices in
    .last_attn for inspection.
    """

    def __init__(self, rng, d_model: int, n_heads: int):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(rng, d_model, d_model)
        # a key bias shifts every logit in a softmax row equally, so it is
        # structurally gradient-free; omit it
        self.wk = Linear(rng, d_model, d_model, bias=False)
        self.wv = Linear(rng, d_model, d_model)
        self.wo = Linear(rng, d_model, d_model)
        self.last_attn: list[np.ndarray] = []

    def __call__(self, query_rows: Tensor, kv_rows: Tensor, mask: Tensor | None = None) -> Tensor:
        q, k, v = self.wq(query_rows), self.wk(kv_rows), self.wv(kv_rows)
        inv_scale = 1.0 / np.sqrt(self.d_head)
        contexts = []
        self.last_attn = []
        for h in range(self.n_heads):
            lo, hi = h * self.d_head, (h + 1) * self.d_head
            qh = ad.slice_cols(q, lo, hi)
            kh = ad.slice_cols(k, lo, hi)
            vh = ad.slice_cols(v, lo, hi)
            logits = ad.scale(qh @ ad.transpose(kh), inv_scale)
            if mask is not None:
                logits = ad.add(logits, mask)
            attn = ad.softmax(logits, axis=-1)
            self.last_attn.append(attn.data)
            contexts.append(attn @ vh)
        return self.wo(ad.concat(contexts, axis=1))

    def named_params(self, prefix: str):
        for name, sub in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            yield from sub.named_params(f"{prefix}.{name}")


class FeedForward:
    def __init__(self, rng, d_model: int, d_ff: int):
        self.w1 = Linear(rng, d_model, d_ff)
        self.w2 = Linear(rng, d_ff, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(ad.relu(self.w1(x)))

    def named_params(self, prefix: str):
        yield from self.w1.named_params(f"{prefix}.w1")
        yield from self.w2.named_params(f"{prefix}.w2")


class EncoderBlock:
    def __init__(self, rng, d_model: int, n_heads: int, d_ff: int):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(rng, d_model, n_heads)
        self.ln2 = LayerNorm(d_model)
        self.ff = FeedForward(rng, d_model, d_ff)

    def __call__(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        normed = self.ln1(x)
        x = ad.add(x, self.attn(normed, normed, mask))
        return ad.add(x, self.ff(self.ln2(x)))

    def named_params(self, prefix: str):
        yield from self.ln1.named_params(f"{prefix}.ln1")
        yield from self.attn.named_params(f"{prefix}.attn")
        yield from self.ln2.named_params(f"{prefix}.ln2")
        yield from self.ff.named_params(f"{prefix}.ff")


class DecoderBlock:
    def __init__(self, rng, d_model: int, n_heads: int, d_ff: int):
        self.ln1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.ln2 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.ln3 = LayerNorm(d_model)
        self.ff = FeedForward(rng, d_model, d_ff)

    def __call__(self, x: Tensor, memory: Tensor, causal_mask: Tensor) -> Tensor:
        normed = self.ln1(x)
        x = ad.add(x, self.self_attn(normed, normed, causal_mask))
        x = ad.add(x, self.cross_attn(self.ln2(x), memory))
        return ad.add(x, self.ff(self.ln3(x)))

    def named_params(self, prefix: str):
        yield from self.ln1.named_params(f"{prefix}.ln1")
        yield from self.self_attn.named_params(f"{prefix}.self_attn")
        yield from self.ln2.named_params(f"{prefix}.ln2")
        yield from self.cross_attn.named_params(f"{prefix}.cross_attn")
        yield from self.ln3.named_params(f"{prefix}.ln3")
        yield from self.ff.named_params(f"{prefix}.ff")


def causal_mask(n: int) -> Tensor:
    """Additive mask blocking attention to later positions."""
    m = np.triu(np.full((n, n), ATTN_MASK_NEG), k=1)
    return Tensor(m)


def key_padding_mask(n: int, pad_columns) -> Tensor | None:
    """Additive mask zeroing attention onto the given key positions."""
    pad_columns = np.asarray(pad_columns, dtype=np.int64)
    if pad_columns.size == 0:
        return None
    m = np.zeros((n, n))
    m[:, pad_columns] = ATTN_MASK_NEG
    return Tensor(m)
