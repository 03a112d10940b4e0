"""Finite-difference verification of every differentiable op plus three
end-to-end composites (text encoder stack, contrastive loss, full model
loss).  Used by tests and the `anatomist gradcheck` subcommand."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .alignment import PooledPair, contrastive_loss
from .corpus import EncodedReport, PatchFeatures
from .decoder import generation_loss
from .encoders import ModelConfig
from .model import ImpressionModel, ablation_spec

THRESHOLD = 1e-4
STEP = 1e-5

# Composite losses are scaled down before differencing: central-difference
# truncation and roundoff are proportional to the magnitude of f, and on
# elements whose true gradient happens to be ~0 they are measured against
# the formula's absolute floor.  Scaling keeps those under threshold while
# leaving relative errors on healthy elements (what a wrong backward
# produces) untouched.
COMPOSITE_SCALE = 1e-3


def _rand(rng, *shape):
    return ad.Tensor(rng.normal(0.0, 1.0, shape), requires_grad=True)


def _probe(rng, shape):
    # fixed random readout so matrix-valued ops reduce to a scalar
    c = ad.Tensor(rng.normal(0.0, 1.0, shape))
    return lambda t: ad.sum_(ad.mul(t, c))


def _check_add(rng):
    p = _probe(rng, (3, 4))
    return ad.grad_check(lambda a, b: p(ad.add(a, b)), [_rand(rng, 3, 4), _rand(rng, 3, 4)], STEP)


def _check_mul(rng):
    p = _probe(rng, (3, 4))
    return ad.grad_check(lambda a, b: p(ad.mul(a, b)), [_rand(rng, 3, 4), _rand(rng, 3, 4)], STEP)


def _check_scale(rng):
    p = _probe(rng, (2, 5))
    return ad.grad_check(lambda a: p(ad.scale(a, -1.7)), [_rand(rng, 2, 5)], STEP)


def _check_sub(rng):
    p = _probe(rng, (2, 3))
    return ad.grad_check(lambda a, b: p(ad.sub(a, b)), [_rand(rng, 2, 3), _rand(rng, 2, 3)], STEP)


def _check_matmul(rng):
    p = _probe(rng, (3, 2))
    return ad.grad_check(lambda a, b: p(ad.matmul(a, b)), [_rand(rng, 3, 4), _rand(rng, 4, 2)], STEP)


def _check_transpose(rng):
    p = _probe(rng, (4, 3))
    return ad.grad_check(lambda a: p(ad.transpose(a)), [_rand(rng, 3, 4)], STEP)


def _check_relu(rng):
    p = _probe(rng, (3, 3))
    # keep entries away from the kink where central differences are invalid
    t = _rand(rng, 3, 3)
    t.data[np.abs(t.data) < 0.05] += 0.1
    return ad.grad_check(lambda a: p(ad.relu(a)), [t], STEP)


def _check_exp(rng):
    p = _probe(rng, (2, 3))
    return ad.grad_check(lambda a: p(ad.exp(a)), [_rand(rng, 2, 3)], STEP)


def _check_log(rng):
    p = _probe(rng, (2, 3))
    t = ad.Tensor(rng.uniform(0.5, 2.0, (2, 3)), requires_grad=True)
    return ad.grad_check(lambda a: p(ad.log(a)), [t], STEP)


def _check_sum(rng):
    p = _probe(rng, (4,))
    return ad.grad_check(lambda a: p(ad.sum_(a, axis=1)), [_rand(rng, 4, 3)], STEP)


def _check_mean(rng):
    p = _probe(rng, (4,))
    return ad.grad_check(lambda a: p(ad.mean(a, axis=0)), [_rand(rng, 3, 4)], STEP)


def _check_concat(rng):
    p = _probe(rng, (5, 3))
    return ad.grad_check(
        lambda a, b: p(ad.concat([a, b], axis=0)), [_rand(rng, 2, 3), _rand(rng, 3, 3)], STEP
    )


def _check_stack_rows(rng):
    p = _probe(rng, (2, 4))
    return ad.grad_check(
        lambda a, b: p(ad.stack_rows([a, b])), [_rand(rng, 4), _rand(rng, 4)], STEP
    )


def _check_add_bias(rng):
    p = _probe(rng, (3, 4))
    return ad.grad_check(lambda a, b: p(ad.add_bias(a, b)), [_rand(rng, 3, 4), _rand(rng, 4)], STEP)


def _check_slice_cols(rng):
    p = _probe(rng, (3, 2))
    return ad.grad_check(lambda a: p(ad.slice_cols(a, 1, 3)), [_rand(rng, 3, 4)], STEP)


def _check_embedding_lookup(rng):
    p = _probe(rng, (5, 3))
    ids = rng.integers(0, 4, 5)  # repeats exercise scatter accumulation
    return ad.grad_check(lambda t: p(ad.embedding_lookup(t, ids)), [_rand(rng, 4, 3)], STEP)


def _check_softmax(rng):
    p = _probe(rng, (3, 5))
    return ad.grad_check(lambda a: p(ad.softmax(a, axis=-1)), [_rand(rng, 3, 5)], STEP)


def _check_layer_norm(rng):
    p = _probe(rng, (3, 6))
    return ad.grad_check(
        lambda x, g, b: p(ad.layer_norm(x, g, b)),
        [_rand(rng, 3, 6), _rand(rng, 6), _rand(rng, 6)],
        STEP,
    )


def _check_normalize_rows(rng):
    p = _probe(rng, (3, 4))
    return ad.grad_check(lambda a: p(ad.normalize_rows(a)), [_rand(rng, 3, 4)], STEP)


def _check_cosine_sim(rng):
    return ad.grad_check(lambda u, v: ad.cosine_sim(u, v), [_rand(rng, 5), _rand(rng, 5)], STEP)


def _check_cross_entropy(rng):
    targets = rng.integers(0, 6, 4)
    return ad.grad_check(
        lambda lg: ad.cross_entropy(lg, targets), [_rand(rng, 4, 6)], STEP
    )


def _tiny_config(vocab_size=10):
    return ModelConfig(
        vocab_size=vocab_size,
        d_model=4,
        n_heads=2,
        n_text_layers=1,
        n_image_layers=1,
        n_decoder_layers=1,
        d_ff=6,
        max_len=12,
        patch_dim=3,
    )


def _tiny_model(rng) -> ImpressionModel:
    # training-scale init leaves some end-to-end gradients below the
    # finite-difference noise floor; redraw at unit-ish coupling so every
    # element is verifiable at the pinned step size
    model = ImpressionModel(_tiny_config(), seed=int(rng.integers(0, 2**31)))
    for t in model.named_parameters().values():
        t.data = rng.normal(0.0, 0.3, t.data.shape)
    return model


def _check_encoder_stack(rng):
    model = _tiny_model(rng)
    ids = rng.integers(0, 10, 7)
    cls_positions = np.array([0, 3])
    tensors = [t for _, t in model.text_encoder.named_params("text")]
    probe = _probe(rng, (7, 4))
    probe_cls = _probe(rng, (2, 4))

    def f(*_):
        h, h_cls = model.text_encoder(ids, cls_positions)
        return ad.scale(ad.add(probe(h), probe_cls(h_cls)), COMPOSITE_SCALE)

    return ad.grad_check(f, tensors, STEP)


def _check_contrastive(rng):
    vecs = [_rand(rng, 5) for _ in range(6)]

    def f(*vs):
        pairs = [PooledPair(vs[i], vs[i + 3], str(i)) for i in range(3)]
        return ad.scale(contrastive_loss(pairs, temperature=0.5), COMPOSITE_SCALE)

    return ad.grad_check(f, vecs, STEP)


def _check_full_model(rng):
    model = _tiny_model(rng)
    spec = ablation_spec("base_ap_dca")
    ids = np.array([4, 7, 8, 5, 4, 9, 6, 5])  # two CLS/SEP-framed sentences
    report = EncodedReport(
        report_id="g",
        token_ids=ids,
        cls_positions=np.array([0, 4]),
        target_ids=np.array([1, 7, 9, 2]),
        patches=PatchFeatures(rng.normal(0.0, 1.0, (4, 3))),
    )
    tensors = list(model.named_parameters().values())

    def f(*_):
        pair = model.encode(report, spec)
        memory = model.memory_for(pair, model.fuse(pair))
        loss = generation_loss(model.decoder, memory, report.target_ids)
        return ad.scale(loss, COMPOSITE_SCALE)

    return ad.grad_check(f, tensors, STEP)


OP_CHECKS = {
    "add": _check_add,
    "sub": _check_sub,
    "mul": _check_mul,
    "scale": _check_scale,
    "matmul": _check_matmul,
    "transpose": _check_transpose,
    "relu": _check_relu,
    "exp": _check_exp,
    "log": _check_log,
    "sum": _check_sum,
    "mean": _check_mean,
    "concat": _check_concat,
    "stack_rows": _check_stack_rows,
    "add_bias": _check_add_bias,
    "slice_cols": _check_slice_cols,
    "embedding_lookup": _check_embedding_lookup,
    "softmax": _check_softmax,
    "layer_norm": _check_layer_norm,
    "normalize_rows": _check_normalize_rows,
    "cosine_sim": _check_cosine_sim,
    "cross_entropy": _check_cross_entropy,
}

COMPOSITE_CHECKS = {
    "composite.encoder_stack": _check_encoder_stack,
    "composite.contrastive_loss": _check_contrastive,
    "composite.full_model_loss": _check_full_model,
}


@dataclass
class GradCheckReport:
    results: dict[str, float]
    threshold: float

    @property
    def passed(self) -> bool:
        return all(err <= self.threshold for err in self.results.values())

    def lines(self) -> list[str]:
        width = max(len(name) for name in self.results)
        out = []
        for name, err in self.results.items():
            status = "ok" if err <= self.threshold else "FAIL"
            out.append(f"{name:<{width}}  max_rel_err={err:.3e}  {status}")
        return out


def _broken_relu(a):
    a = ad._as_tensor(a)
    mask = a.data > 0

    def backward(grad):
        return (grad * mask * 1.1,)

    return ad._node(np.where(mask, a.data, 0.0), (a,), "relu", backward)


def gradcheck_all(
    n_seeds: int = 10,
    threshold: float = THRESHOLD,
    inject_fault: str | None = None,
) -> GradCheckReport:
    """Run every check over n_seeds seeds and report the worst error each.

    inject_fault="relu" swaps in a deliberately wrong relu backward as a
    negative control.
    """
    checks = dict(OP_CHECKS)
    checks.update(COMPOSITE_CHECKS)
    original_relu = ad.relu
    if inject_fault == "relu":
        ad.relu = _broken_relu
    elif inject_fault is not None:
        raise ValueError(f"unknown fault target {inject_fault!r}")
    try:
        results = {}
        for name, check in checks.items():
            worst = 0.0
            for seed in range(n_seeds):
                rng = np.random.default_rng(1000 + seed)
                worst = max(worst, check(rng))
            results[name] = worst
    finally:
        ad.relu = original_relu
    return GradCheckReport(results=results, threshold=threshold)
