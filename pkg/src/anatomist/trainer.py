"""Adam training of the combined generation + contrastive objective.

One train_step consumes a batch of Q encoded reports: every report runs
its active branches and contributes a teacher-forced generation loss; when
contrastive alignment is on, the batch's 2Q pooled vectors add the
alignment term, weighted by the mixing coefficient.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .alignment import PooledPair, contrastive_loss, pool
from .corpus import EncodedReport, Report, Vocab, build_vocab, encode_report
from .decoder import generate, generation_loss
from .encoders import ModelConfig
from .errors import ConfigError, DivergenceError, ValidationError
from .model import ImpressionModel, ablation_spec
from .rouge import evaluate_corpus


@dataclass
class TrainConfig:
    batch_size: int = 8  # report pairs per contrastive batch
    lambda_con: float = 1.0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    seed: int = 0
    ablation: str = "base_ap_dca"
    grad_clip: float = 1.0
    val_fraction: float = 0.1
    eval_every: int = 1  # 0 evaluates only after the last epoch
    max_gen_len: int = 32
    min_freq: int = 1

    def validate(self):
        ablation_spec(self.ablation)
        if self.lambda_con < 0:
            raise ConfigError("lambda_con must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if ablation_spec(self.ablation).use_contrastive and self.batch_size < 2:
            raise ConfigError("contrastive training needs batch_size >= 2")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def train_config_from_dict(raw: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    config = TrainConfig(**raw)
    config.validate()
    return config


@dataclass(frozen=True)
class LossBundle:
    gen: float
    con: float
    lambda_con: float
    total: float


class Adam:
    """Bias-corrected Adam over a fixed parameter list, with optional
    global-norm gradient clipping before the update."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, grad_clip=None):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def _clip(self):
        if self.grad_clip is None:
            return
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        norm = np.sqrt(total)
        if norm > self.grad_clip:
            factor = self.grad_clip / norm
            for p in self.params:
                if p.grad is not None:
                    p.grad *= factor

    def step(self):
        self.t += 1
        self._clip()
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**self.t)
            v_hat = self.v[i] / (1 - b2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _report_loss(model: ImpressionModel, report: EncodedReport, spec):
    pair = model.encode(report, spec)
    fused = model.fuse(pair)
    memory = model.memory_for(pair, fused)
    loss = generation_loss(model.decoder, memory, report.target_ids)
    return loss, pair


def batch_losses(model: ImpressionModel, batch: list[EncodedReport], config: TrainConfig):
    """Forward pass only: (generation loss, contrastive loss or None)."""
    spec = ablation_spec(config.ablation)
    gen_terms = []
    pooled = []
    for report in batch:
        loss, pair = _report_loss(model, report, spec)
        gen_terms.append(loss)
        if spec.use_contrastive:
            pooled.append(
                PooledPair(
                    pooled_image=pool(pair.patch_states),
                    pooled_text=pool(pair.sentence_states),
                    pair_id=report.report_id,
                )
            )
    gen = gen_terms[0]
    for term in gen_terms[1:]:
        gen = ad.add(gen, term)
    gen = ad.scale(gen, 1.0 / len(gen_terms))
    con = None
    if spec.use_contrastive:
        con = contrastive_loss(pooled, model.config.temperature, model.config.contrastive_mode)
    return gen, con


def train_step(
    model: ImpressionModel,
    optimizer: Adam,
    batch: list[EncodedReport],
    config: TrainConfig,
) -> LossBundle:
    """One optimization step; the returned bundle is the pre-update loss."""
    if not batch:
        raise ValidationError("train_step: empty batch")
    gen, con = batch_losses(model, batch, config)
    if con is not None:
        total = ad.add(gen, ad.scale(con, config.lambda_con))
    else:
        total = gen
    gen_value = gen.item()
    con_value = con.item() if con is not None else 0.0
    total_value = gen_value + config.lambda_con * con_value
    if not np.isfinite(total_value):
        raise DivergenceError(
            f"non-finite loss at step {optimizer.t + 1}: "
            f"gen={gen_value!r} con={con_value!r}"
        )
    optimizer.zero_grad()
    ad.backward(total)
    optimizer.step()
    return LossBundle(gen=gen_value, con=con_value, lambda_con=config.lambda_con, total=total_value)


# ---------------------------------------------------------------------------
# full training runs


@dataclass
class FitResult:
    model: ImpressionModel
    vocab: Vocab
    metrics: list[dict]
    best_val_r1: float
    best_epoch: int
    val_reports: list[Report] = field(default_factory=list)


def predict_impressions(
    model: ImpressionModel,
    encoded: list[EncodedReport],
    vocab: Vocab,
    ablation: str,
    max_gen_len: int = 32,
    mode: str = "greedy",
    beam_width: int = 4,
) -> list[str]:
    spec = ablation_spec(ablation)
    out = []
    for report in encoded:
        pair = model.encode(report, spec)
        memory = model.memory_for(pair, model.fuse(pair))
        gen = generate(
            model.decoder, memory, vocab,
            mode=mode, beam_width=beam_width, max_gen_len=max_gen_len,
        )
        out.append(gen.text)
    return out


def _validation_rouge1(model, encoded_val, val_reports, vocab, config) -> float:
    if not encoded_val:
        return 0.0
    preds = predict_impressions(
        model, encoded_val, vocab, config.ablation, config.max_gen_len
    )
    report = evaluate_corpus(preds, [r.impression for r in val_reports])
    return report.mean["rouge1"].f1


def fit(
    reports: list[Report],
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    val_reports: list[Report] | None = None,
    metrics_path=None,
    model_seed: int | None = None,
) -> FitResult:
    """Epoch loop with seeded shuffling, JSONL metrics, and best-validation
    parameter retention.

    When val_reports is None a seeded val_fraction split is carved off the
    given reports first.
    """
    config.validate()
    if not reports:
        raise ConfigError("fit: empty corpus")
    rng = np.random.default_rng(config.seed)

    if val_reports is None:
        n_val = int(round(config.val_fraction * len(reports)))
        order = rng.permutation(len(reports))
        val_reports = [reports[i] for i in order[:n_val]]
        train_reports = [reports[i] for i in order[n_val:]]
    else:
        train_reports = list(reports)
    if not train_reports:
        raise ConfigError("fit: no training reports after validation split")

    spec = ablation_spec(config.ablation)
    vocab = build_vocab(train_reports, min_freq=config.min_freq)
    encoded_train = [encode_report(r, vocab, spec.use_prompts) for r in train_reports]
    encoded_val = [encode_report(r, vocab, spec.use_prompts) for r in val_reports]

    if model_config is None:
        model_config = ModelConfig(vocab_size=len(vocab))
    else:
        model_config = dataclasses.replace(model_config, vocab_size=len(vocab))
    model = ImpressionModel(
        model_config, seed=config.seed if model_seed is None else model_seed
    )
    optimizer = Adam(
        model.parameters(),
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        grad_clip=config.grad_clip,
    )

    min_batch = 2 if spec.use_contrastive else 1
    metrics: list[dict] = []
    best_val = -1.0
    best_epoch = 0
    best_params: dict[str, np.ndarray] | None = None
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        last_val = 0.0
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(encoded_train))
            sums = {"gen": 0.0, "con": 0.0, "total": 0.0}
            steps = 0
            for start in range(0, len(order), config.batch_size):
                batch = [encoded_train[i] for i in order[start : start + config.batch_size]]
                if len(batch) < min_batch:
                    continue
                bundle = train_step(model, optimizer, batch, config)
                sums["gen"] += bundle.gen
                sums["con"] += bundle.con
                sums["total"] += bundle.total
                steps += 1
            if steps == 0:
                raise ConfigError(
                    "fit: corpus too small to form a single usable batch"
                )
            evaluate_now = (
                bool(encoded_val)
                and ((config.eval_every and epoch % config.eval_every == 0) or epoch == config.epochs)
            )
            if evaluate_now:
                last_val = _validation_rouge1(model, encoded_val, val_reports, vocab, config)
                if last_val > best_val:
                    best_val = last_val
                    best_epoch = epoch
                    best_params = {
                        name: p.data.copy() for name, p in model.named_parameters().items()
                    }
            entry = {
                "epoch": epoch,
                "gen": sums["gen"] / max(steps, 1),
                "con": sums["con"] / max(steps, 1),
                "total": sums["total"] / max(steps, 1),
                "val_r1": last_val,
            }
            metrics.append(entry)
            if sink:
                sink.write(json.dumps(entry) + "\n")
    finally:
        if sink:
            sink.close()

    if best_params is not None:
        for name, p in model.named_parameters().items():
            p.data = best_params[name].copy()
    return FitResult(
        model=model,
        vocab=vocab,
        metrics=metrics,
        best_val_r1=max(best_val, 0.0),
        best_epoch=best_epoch,
        val_reports=val_reports,
    )


def retrieval_accuracy(
    model: ImpressionModel,
    encoded: list[EncodedReport],
    batch_size: int = 8,
) -> float:
    """Top-1 image-to-findings retrieval by cosine similarity of pooled
    representations, within consecutive batches."""
    if len(encoded) < 2:
        raise ValidationError("retrieval_accuracy: need at least 2 reports")
    spec = ablation_spec("base_dca")
    pooled_images = []
    pooled_texts = []
    for report in encoded:
        pair = model.encode(report, spec)
        pooled_images.append(pool(pair.patch_states).data)
        pooled_texts.append(pool(pair.sentence_states).data)
    hits = 0
    total = 0
    for start in range(0, len(encoded), batch_size):
        imgs = pooled_images[start : start + batch_size]
        txts = pooled_texts[start : start + batch_size]
        if len(imgs) < 2:
            continue
        t = np.stack(txts)
        t = t / np.linalg.norm(t, axis=1, keepdims=True)
        for i, z in enumerate(imgs):
            sims = t @ (z / np.linalg.norm(z))
            hits += int(np.argmax(sims) == i)
            total += 1
    if total == 0:
        raise ValidationError("retrieval_accuracy: no batch had 2+ reports")
    return hits / total
