"""Single command-line entrypoint.

Subcommands: prompt, synth, train, generate, evaluate, gradcheck, ablate.
Every run that writes outputs drops a .manifest.json beside them recording
the command, config hash, seed, and package versions.  Exit codes: 0 ok,
1 validation/config error, 2 numeric/divergence error, 3 threshold failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import hashlib
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import __version__, anatomy, corpus
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import encode_report
from .encoders import ModelConfig
from .errors import AnatomistError, ConfigError, NumericError, ValidationError
from .gradchecks import gradcheck_all
from .model import ABLATIONS, ablation_spec
from .rouge import evaluate_corpus
from .trainer import (
    TrainConfig,
    fit,
    predict_impressions,
    train_config_from_dict,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2
EXIT_THRESHOLD = 3


def _read_structured(path) -> dict:
    data = open(path, "rb").read()
    if str(path).endswith(".json"):
        return json.loads(data)
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    return tomllib.loads(data.decode("utf-8"))


def _config_hash(payload) -> str:
    if isinstance(payload, (bytes, bytearray)):
        return hashlib.sha256(payload).hexdigest()
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def write_manifest(out_path, command: str, seed, config_payload, outputs: list[str]):
    manifest = {
        "command": command,
        "config_hash": _config_hash(config_payload),
        "seed": seed,
        "versions": {
            "anatomist": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
        "created": datetime.now(timezone.utc).isoformat(),
        "outputs": outputs,
    }
    path = f"{out_path}.manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_prompt(args) -> int:
    lexicon = anatomy.load_lexicon(args.lexicon)
    out_records = []
    with open(args.infile, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if "findings" not in record:
                raise ConfigError(f"line {lineno}: record has no findings")
            sentences = anatomy.plan_prompts(str(record["findings"]), lexicon)
            out_records.append(
                {
                    "id": record.get("id", f"line-{lineno}"),
                    "sentences": [dataclasses.asdict(s) for s in sentences],
                }
            )
    corpus.write_corpus_jsonl(out_records, args.out)
    write_manifest(args.out, "prompt", None, {"lexicon": args.lexicon or "builtin"}, [args.out])
    print(f"prompted {len(out_records)} records -> {args.out}")
    return EXIT_OK


def _synth_config(args) -> corpus.SynthConfig:
    raw = {}
    if args.config:
        raw = _read_structured(args.config)
        raw = raw.get("synth", raw)
    known = {f.name for f in dataclasses.fields(corpus.SynthConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
    config = corpus.SynthConfig(**raw)
    if args.seed is not None:
        config.seed = args.seed
    config.validate()
    return config


def cmd_synth(args) -> int:
    config = _synth_config(args)
    records = corpus.synth_records(config)
    corpus.write_corpus_jsonl(records, args.out)
    write_manifest(args.out, "synth", config.seed, dataclasses.asdict(config), [args.out])
    print(f"wrote {len(records)} synthetic reports -> {args.out}")
    return EXIT_OK


def _load_train_configs(args) -> tuple[TrainConfig, dict]:
    raw = _read_structured(args.config) if args.config else {}
    train_config = train_config_from_dict(raw.get("train", {}))
    if args.ablation:
        train_config.ablation = args.ablation
    if args.seed is not None:
        train_config.seed = args.seed
    train_config.validate()
    return train_config, raw


def _model_config_from_raw(raw: dict) -> ModelConfig | None:
    if "model" not in raw:
        return None
    # vocab_size is decided by fit once the vocabulary is built
    return ModelConfig(**{**raw["model"], "vocab_size": 1})


def cmd_train(args) -> int:
    train_config, raw = _load_train_configs(args)
    loaded = corpus.load_corpus(args.corpus)
    if loaded.dropped:
        print(f"dropped {loaded.dropped}/{loaded.total_lines} records by length filters")
    result = fit(
        loaded.reports,
        train_config,
        model_config=_model_config_from_raw(raw),
        metrics_path=f"{args.out}.metrics.jsonl",
    )
    save_checkpoint(
        args.out,
        result.model,
        result.vocab,
        extra={
            "ablation": train_config.ablation,
            "max_gen_len": train_config.max_gen_len,
            "best_val_r1": result.best_val_r1,
            "best_epoch": result.best_epoch,
        },
    )
    write_manifest(
        args.out,
        "train",
        train_config.seed,
        {"train": dataclasses.asdict(train_config)},
        [args.out, f"{args.out}.metrics.jsonl"],
    )
    print(
        f"trained {train_config.ablation} for {train_config.epochs} epochs; "
        f"best val R-1 {result.best_val_r1:.4f} (epoch {result.best_epoch}) -> {args.out}"
    )
    return EXIT_OK


def cmd_generate(args) -> int:
    model, vocab, meta = load_checkpoint(args.model)
    ablation = meta.get("ablation", "base_ap_dca")
    max_gen_len = args.max_gen_len or meta.get("max_gen_len", 32)
    loaded = corpus.load_corpus(args.infile)
    spec = ablation_spec(ablation)
    encoded = [encode_report(r, vocab, spec.use_prompts) for r in loaded.reports]
    texts = predict_impressions(
        model, encoded, vocab, ablation,
        max_gen_len=max_gen_len, mode=args.mode, beam_width=args.beam_width,
    )
    records = [
        {"id": r.id, "impression": text} for r, text in zip(loaded.reports, texts)
    ]
    corpus.write_corpus_jsonl(records, args.out)
    write_manifest(args.out, "generate", None, {"model": args.model, "mode": args.mode}, [args.out])
    print(f"generated {len(records)} impressions -> {args.out}")
    return EXIT_OK


def _read_jsonl(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                records.append(json.loads(raw))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path} line {lineno}: invalid JSON ({exc.msg})") from exc
    return records


def cmd_evaluate(args) -> int:
    preds = _read_jsonl(args.pred)
    refs = _read_jsonl(args.ref)
    if len(preds) != len(refs):
        raise ValidationError(
            f"evaluate: {len(preds)} predictions vs {len(refs)} references"
        )
    ref_by_id = {str(r["id"]): str(r["impression"]) for r in refs}
    pred_by_id = {str(p["id"]): str(p["impression"]) for p in preds}
    if set(ref_by_id) != set(pred_by_id):
        raise ValidationError("evaluate: prediction and reference ids differ")
    ordered_ids = [str(r["id"]) for r in refs]
    pred_texts = [pred_by_id[i] for i in ordered_ids]
    ref_texts = [ref_by_id[i] for i in ordered_ids]
    report = evaluate_corpus(pred_texts, ref_texts)
    payload = {
        name: dataclasses.asdict(score) for name, score in report.mean.items()
    }
    payload["observation_accuracy"] = corpus.observation_accuracy(pred_texts, ref_texts)
    payload["n_examples"] = len(ordered_ids)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    write_manifest(args.out, "evaluate", None, {"pred": args.pred, "ref": args.ref}, [args.out])
    for name in ("rouge1", "rouge2", "rougeL"):
        print(f"{name}: F1={payload[name]['f1']:.4f}")
    print(f"observation_accuracy: {payload['observation_accuracy']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck_all(n_seeds=args.seeds, inject_fault=args.inject_fault)
    for line in report.lines():
        print(line)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(report.lines()) + "\n")
        write_manifest(args.out, "gradcheck", None, {"seeds": args.seeds}, [args.out])
    if not report.passed:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_THRESHOLD
    print("gradcheck passed")
    return EXIT_OK


def run_ablation_table(
    reports,
    train_config: TrainConfig,
    model_config: ModelConfig | None = None,
    max_workers: int | None = None,
) -> list[dict]:
    """Train all six ablations under one seed/budget and score them on a
    shared validation split."""
    rng = np.random.default_rng(train_config.seed)
    n_val = max(1, int(round(train_config.val_fraction * len(reports))))
    order = rng.permutation(len(reports))
    val_reports = [reports[i] for i in order[:n_val]]
    train_reports = [reports[i] for i in order[n_val:]]

    def one(ablation: str) -> dict:
        config = dataclasses.replace(train_config, ablation=ablation)
        config.validate()
        result = fit(train_reports, config, model_config=model_config, val_reports=val_reports)
        spec = ablation_spec(ablation)
        encoded_val = [encode_report(r, result.vocab, spec.use_prompts) for r in val_reports]
        preds = predict_impressions(
            result.model, encoded_val, result.vocab, ablation, config.max_gen_len
        )
        refs = [r.impression for r in val_reports]
        rouge = evaluate_corpus(preds, refs)
        return {
            "ablation": ablation,
            "rouge1": rouge.mean["rouge1"].f1,
            "rouge2": rouge.mean["rouge2"].f1,
            "rougeL": rouge.mean["rougeL"].f1,
            "observation_accuracy": corpus.observation_accuracy(preds, refs),
        }

    if max_workers is None:
        max_workers = int(os.environ.get("ANATOMIST_THREADS", "1"))
    if max_workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as pool:
            rows = list(pool.map(one, ABLATIONS))
    else:
        rows = [one(a) for a in ABLATIONS]
    return rows


def _format_table(rows: list[dict]) -> str:
    header = f"{'ablation':<14} {'R-1':>8} {'R-2':>8} {'R-L':>8} {'obs-acc':>8}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row['ablation']:<14} {row['rouge1']:>8.4f} {row['rouge2']:>8.4f} "
            f"{row['rougeL']:>8.4f} {row['observation_accuracy']:>8.4f}"
        )
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    train_config, raw = _load_train_configs(args)
    loaded = corpus.load_corpus(args.corpus)
    rows = run_ablation_table(loaded.reports, train_config, _model_config_from_raw(raw))
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump({"seed": train_config.seed, "rows": rows}, fh, indent=2, sort_keys=True)
    write_manifest(
        args.out, "ablate", train_config.seed,
        {"train": dataclasses.asdict(train_config)}, [args.out],
    )
    print(_format_table(rows))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anatomist")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prompt", help="plan anatomy prompts into findings sentences")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--lexicon", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("synth", help="generate a synthetic paired corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", default=None)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", choices=ABLATIONS, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode impressions with a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("greedy", "beam"), default="greedy")
    p.add_argument("--beam-width", type=int, default=4)
    p.add_argument("--max-gen-len", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="ROUGE-score predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--out", default=None)
    p.add_argument("--inject-fault", choices=("relu",), default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score the six-model family")
    p.add_argument("--config", default=None)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", default=None, help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AnatomistError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
