"""Transformer decoder over the concatenated cross-modal memory.

The memory stacks fused patch states, fused sentence states, then raw
token states; either modality's segments may be absent under unimodal
ablations.  Teacher-forced training shifts the BOS...EOS frame by one;
inference is greedy by default with length-normalized beam search behind
a flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS_ID, EOS_ID, PAD_ID, Vocab
from .encoders import ModelConfig
from .errors import LengthError, ShapeError, ValidationError
from .layers import DecoderBlock, LayerNorm, Linear, causal_mask, weight

BEAM_LENGTH_ALPHA = 0.7


@dataclass
class DecoderMemory:
    rows: Tensor  # (P + M + n) x d_model
    segment_bounds: tuple[int, int, int]  # start offsets: patches, sentences, tokens


@dataclass
class GeneratedImpression:
    token_ids: list[int]
    text: str
    terminated: bool


def build_memory(
    patch_states: Tensor | None,
    sentence_states: Tensor | None,
    token_states: Tensor | None,
) -> DecoderMemory:
    """Stack the available segments in fixed order patches, sentences, tokens."""
    segments = [s for s in (patch_states, sentence_states, token_states) if s is not None]
    if not segments:
        raise ValidationError("build_memory: all segments absent")
    widths = {s.shape[1] for s in segments}
    if len(widths) != 1:
        raise ShapeError(f"build_memory: segment widths differ: {sorted(widths)}")
    p = patch_states.shape[0] if patch_states is not None else 0
    m = sentence_states.shape[0] if sentence_states is not None else 0
    rows = segments[0] if len(segments) == 1 else ad.concat(segments, axis=0)
    return DecoderMemory(rows=rows, segment_bounds=(0, p, p + m))


class ImpressionDecoder:
    def __init__(self, rng, config: ModelConfig):
        self.max_len = config.max_len
        self.tok_emb = weight(rng, (config.vocab_size, config.d_model))
        self.pos_emb = weight(rng, (config.max_len, config.d_model))
        self.blocks = [
            DecoderBlock(rng, config.d_model, config.n_heads, config.d_ff)
            for _ in range(config.n_decoder_layers)
        ]
        self.final_ln = LayerNorm(config.d_model)
        self.out = Linear(rng, config.d_model, config.vocab_size)

    def forward_prefix(self, memory: DecoderMemory, prefix_ids) -> Tensor:
        """Logits for every next-token position given the decoded prefix."""
        ids = np.asarray(prefix_ids, dtype=np.int64)
        n = ids.shape[0]
        if n == 0:
            raise ValidationError("decoder: empty prefix")
        if n > self.max_len:
            raise LengthError(f"prefix length {n} exceeds max_len {self.max_len}")
        if memory.rows.shape[0] < 1:
            raise ValidationError("decoder: empty memory")
        x = ad.add(
            ad.embedding_lookup(self.tok_emb, ids),
            ad.gather_rows(self.pos_emb, np.arange(n)),
        )
        mask = causal_mask(n)
        for block in self.blocks:
            x = block(x, memory.rows, mask)
        return self.out(self.final_ln(x))

    def named_params(self, prefix: str = "decoder"):
        yield f"{prefix}.tok_emb", self.tok_emb
        yield f"{prefix}.pos_emb", self.pos_emb
        for i, block in enumerate(self.blocks):
            yield from block.named_params(f"{prefix}.block{i}")
        yield from self.final_ln.named_params(f"{prefix}.final_ln")
        yield from self.out.named_params(f"{prefix}.out")


def _check_framing(target_ids) -> np.ndarray:
    ids = np.asarray(target_ids, dtype=np.int64)
    if ids.shape[0] < 3 or ids[0] != BOS_ID or ids[-1] != EOS_ID:
        raise ValidationError("target must be framed BOS ... EOS with >= 1 token")
    return ids


def decode_forward(decoder: ImpressionDecoder, memory: DecoderMemory, target_ids) -> Tensor:
    """Teacher-forced logits; row t predicts target position t+1."""
    ids = _check_framing(target_ids)
    return decoder.forward_prefix(memory, ids[:-1])


def generation_loss(decoder: ImpressionDecoder, memory: DecoderMemory, target_ids) -> Tensor:
    """Mean negative log-likelihood of the shifted target, PAD ignored."""
    ids = _check_framing(target_ids)
    logits = decoder.forward_prefix(memory, ids[:-1])
    return ad.cross_entropy(logits, ids[1:], ignore_id=PAD_ID)


def _normalized(logprob_sum: float, length: int) -> float:
    return logprob_sum / max(length, 1) ** BEAM_LENGTH_ALPHA


def _log_softmax(row: np.ndarray) -> np.ndarray:
    shifted = row - np.max(row)
    return shifted - math.log(np.sum(np.exp(shifted)))


def _greedy(decoder, memory, max_gen_len) -> tuple[list[int], bool, float]:
    prefix = [BOS_ID]
    logprob = 0.0
    terminated = False
    for _ in range(max_gen_len):
        logits = decoder.forward_prefix(memory, prefix).data[-1]
        next_id = int(np.argmax(logits))  # argmax takes the lowest id on ties
        logprob += float(_log_softmax(logits)[next_id])
        if next_id == EOS_ID:
            terminated = True
            break
        prefix.append(next_id)
    return prefix[1:], terminated, logprob


def _beam(decoder, memory, max_gen_len, width) -> tuple[list[int], bool, float]:
    # hypotheses: (ids-after-BOS, logprob sum, finished)
    live = [([], 0.0, False)]
    done: list[tuple[list[int], float, bool]] = []
    for _ in range(max_gen_len + 1):
        if not live:
            break
        candidates = []
        for ids, score, _ in live:
            logits = decoder.forward_prefix(memory, [BOS_ID] + ids).data[-1]
            logp = _log_softmax(logits)
            top = np.argsort(-logp, kind="stable")[: max(width, 1)]
            for tok in top:
                candidates.append((ids + [int(tok)], score + float(logp[tok])))
        # ties break toward the lexicographically lowest token sequence
        candidates.sort(key=lambda c: (-c[1], c[0]))
        live = []
        for ids, score in candidates[:width]:
            if ids[-1] == EOS_ID:
                done.append((ids[:-1], score, True))
            elif len(ids) >= max_gen_len:
                done.append((ids, score, False))
            else:
                live.append((ids, score, False))
    pool = done + live
    pool.sort(key=lambda h: (-_normalized(h[1], len(h[0]) + int(h[2])), h[0]))
    ids, score, finished = pool[0]
    return ids, finished, score


def generate(
    decoder: ImpressionDecoder,
    memory: DecoderMemory,
    vocab: Vocab,
    mode: str = "greedy",
    beam_width: int = 4,
    max_gen_len: int = 32,
) -> GeneratedImpression:
    """Decode an impression; beam width 1 reduces to greedy exactly."""
    if mode == "greedy":
        ids, terminated, _ = _greedy(decoder, memory, max_gen_len)
    elif mode == "beam":
        if beam_width < 1:
            raise ValidationError("beam width must be >= 1")
        ids, terminated, _ = _beam(decoder, memory, max_gen_len, beam_width)
    else:
        raise ValidationError(f"unknown decoding mode {mode!r}")
    return GeneratedImpression(
        token_ids=ids,
        text=" ".join(vocab.decode(ids)),
        terminated=terminated,
    )
