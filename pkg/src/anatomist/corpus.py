"""Report ingestion, tokenization, vocabulary, and synthetic paired corpora.

A corpus is a JSONL file, one report per line:

    {"id": str, "findings": str, "impression": str,
     "image": {"patches": [[float]]} | {"grid": [[float]], "tile": int}}

The synthetic generator produces image/findings/impression triples where a
configurable fraction of abnormal observations is visible only in the
image, so multimodal models have genuinely more information than text-only
ones.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import anatomy
from .anatomy import LabeledSentence, Lexicon
from .errors import IngestionError, ValidationError

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

MIN_FINDINGS_WORDS = 10
MIN_IMPRESSION_WORDS = 2


def tokenize(text: str) -> list[str]:
    """Lowercase, whitespace-split, punctuation split off as own tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


# ---------------------------------------------------------------------------
# core record types


@dataclass(frozen=True)
class PatchFeatures:
    """Sequence of flattened image-region feature vectors, P rows wide D_v."""

    patches: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.patches, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValidationError("patches must be a P x D_v matrix with P >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("patch features must be finite")
        object.__setattr__(self, "patches", arr)

    @property
    def patch_count(self) -> int:
        return self.patches.shape[0]

    @property
    def width(self) -> int:
        return self.patches.shape[1]


def patchify_raw(grid, tile: int) -> PatchFeatures:
    """Cut an H x W grayscale grid into non-overlapping tile x tile patches.

    Patches are ordered row-major and each is flattened row-major, so
    D_v = tile**2.
    """
    arr = np.asarray(grid, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError("grid must be 2-D")
    h, w = arr.shape
    if tile < 1 or h % tile or w % tile:
        raise ValidationError(f"tile {tile} does not divide grid {h}x{w}")
    rows, cols = h // tile, w // tile
    patches = (
        arr.reshape(rows, tile, cols, tile)
        .transpose(0, 2, 1, 3)
        .reshape(rows * cols, tile * tile)
    )
    return PatchFeatures(patches)


@dataclass(frozen=True)
class Report:
    """One examination: findings text, labeled sentences, target impression,
    and the image as patch features."""

    id: str
    findings_raw: str
    sentences: list[LabeledSentence]
    impression: str
    image: PatchFeatures


# ---------------------------------------------------------------------------
# vocabulary and encoding

RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>", "[CLS]", "[SEP]")
PAD_ID, BOS_ID, EOS_ID, UNK_ID, CLS_ID, SEP_ID = range(len(RESERVED_TOKENS))


class Vocab:
    """Token/id bijection with six fixed reserved ids."""

    def __init__(self, tokens: list[str]):
        self.id_to_token = list(RESERVED_TOKENS) + list(tokens)
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise ValidationError("vocabulary tokens must be unique")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self):
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.lookup(t) for t in tokens]

    def decode(self, ids, skip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            if skip_special and i < len(RESERVED_TOKENS):
                continue
            out.append(self.id_to_token[int(i)])
        return out


def build_vocab(reports: list[Report], min_freq: int = 1) -> Vocab:
    """Frequency-thresholded vocabulary over prompted findings + impressions.

    Ids are deterministic: frequency descending, ties lexicographic.
    """
    if not reports:
        raise ValidationError("build_vocab: need at least one report")
    counts: Counter[str] = Counter()
    for report in reports:
        for sent in report.sentences:
            counts.update(tokenize(sent.prompted_text))
        counts.update(tokenize(report.impression))
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    return Vocab(kept)


@dataclass(frozen=True)
class EncodedReport:
    """Report rendered to ids: each sentence framed [CLS]...tokens...[SEP],
    target framed BOS...EOS."""

    report_id: str
    token_ids: np.ndarray
    cls_positions: np.ndarray
    target_ids: np.ndarray
    patches: PatchFeatures


def encode_report(report: Report, vocab: Vocab, use_prompts: bool = True) -> EncodedReport:
    if not report.sentences:
        raise ValidationError(f"report {report.id}: no sentences to encode")
    token_ids: list[int] = []
    cls_positions: list[int] = []
    for sent in report.sentences:
        cls_positions.append(len(token_ids))
        text = sent.prompted_text if use_prompts else sent.text
        token_ids.append(CLS_ID)
        token_ids.extend(vocab.encode(tokenize(text)))
        token_ids.append(SEP_ID)
    target = [BOS_ID] + vocab.encode(tokenize(report.impression)) + [EOS_ID]
    if len(target) < 3:
        raise ValidationError(f"report {report.id}: empty impression")
    return EncodedReport(
        report_id=report.id,
        token_ids=np.asarray(token_ids, dtype=np.int64),
        cls_positions=np.asarray(cls_positions, dtype=np.int64),
        target_ids=np.asarray(target, dtype=np.int64),
        patches=report.image,
    )


# ---------------------------------------------------------------------------
# JSONL ingestion


@dataclass
class LoadResult:
    reports: list[Report]
    dropped: int
    total_lines: int


def _image_from_payload(payload, lineno: int) -> PatchFeatures:
    if not isinstance(payload, dict):
        raise IngestionError(f"line {lineno}: missing or invalid image payload")
    if "patches" in payload:
        return PatchFeatures(np.asarray(payload["patches"], dtype=np.float64))
    if "grid" in payload:
        return patchify_raw(payload["grid"], int(payload.get("tile", 1)))
    raise IngestionError(f"line {lineno}: image needs 'patches' or 'grid'")


def report_from_record(record: dict, lexicon: Lexicon, lineno: int = 0) -> Report:
    try:
        rid = str(record["id"])
        findings = str(record["findings"])
        impression = str(record["impression"])
    except (KeyError, TypeError) as exc:
        raise IngestionError(f"line {lineno}: missing field {exc}") from exc
    image = _image_from_payload(record.get("image"), lineno)
    return Report(
        id=rid,
        findings_raw=findings,
        sentences=anatomy.plan_prompts(findings, lexicon),
        impression=impression,
        image=image,
    )


def _passes_filters(record: dict, max_findings_tokens: int | None) -> bool:
    if len(str(record.get("findings", "")).split()) < MIN_FINDINGS_WORDS:
        return False
    if len(str(record.get("impression", "")).split()) < MIN_IMPRESSION_WORDS:
        return False
    if max_findings_tokens is not None:
        if len(tokenize(str(record["findings"]))) > max_findings_tokens:
            return False
    return True


def load_corpus(
    path,
    lexicon: Lexicon | None = None,
    max_findings_tokens: int | None = None,
) -> LoadResult:
    """Parse a corpus JSONL file into Reports.

    Records with too-short findings or impressions (or past the optional
    token budget) are dropped and counted; malformed lines raise.
    """
    lexicon = lexicon or anatomy.default_lexicon()
    reports: list[Report] = []
    dropped = 0
    total = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            total += 1
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not _passes_filters(record, max_findings_tokens):
                dropped += 1
                continue
            reports.append(report_from_record(record, lexicon, lineno))
    return LoadResult(reports=reports, dropped=dropped, total_lines=total)


def write_corpus_jsonl(records: list[dict], path):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synthetic corpus

ANATOMY_WORDS = ("lungs", "pleural", "heart", "mediastinum", "osseous", "tube")

# Surface forms drawn per sentence; all are lexicon keywords of the same
# anatomy type, so prompting normalizes them back to one canonical word
# (the one impressions use) while unprompted text has to learn the mapping.
ANATOMY_SURFACES = {
    "lungs": ("lungs", "lung", "pulmonary", "perihilar", "suprahilar"),
    "pleural": ("pleural",),
    "heart": ("heart", "cardiac", "pericardial", "cardiomediastinal"),
    "mediastinum": ("mediastinum", "mediastinal"),
    "osseous": ("osseous", "bone", "bony", "thoracic"),
    "tube": ("tube", "catheter"),
}

LEAD_SENTENCE = "Portable chest radiograph was obtained."
COMPARISON_SENTENCE = "Comparison is made with the prior examination."
NORMAL_IMPRESSION = "no acute abnormality."

# Patch synthesis levels: observation patterns toggle pixels between LOW and
# HIGH, so any two codes differ by HIGH-LOW somewhere, well above the noise.
# Patterns are drawn per (region, code): knowing what ab3 looks like in one
# region says nothing about another, which keeps the image channel slower to
# learn than verbatim text, as with real radiographs versus findings.
_LOW, _HIGH = 0.1, 0.9
NOISE_SIGMA = 0.02
NOISE_AMPLITUDE = 0.05  # noise is clipped to +/- this
_CODEBOOK_SEED = 1907


@dataclass
class SynthConfig:
    n_anatomies: int = 4
    n_observations: int = 4  # code 0 is normal, 1..n-1 are abnormalities
    grid_size: int = 2  # tiles per image side; patch count = grid_size**2
    tile: int = 4
    corpus_size: int = 64
    hide_in_image_rate: float = 0.5
    abnormal_rate: float = 0.5
    seed: int = 0

    def validate(self):
        if min(self.n_anatomies, self.grid_size, self.tile, self.corpus_size) < 1:
            raise ValidationError("synth sizes must be >= 1")
        if self.n_observations < 2:
            raise ValidationError("need at least one abnormal observation code")
        if not 0.0 <= self.hide_in_image_rate <= 1.0:
            raise ValidationError("hide_in_image_rate must be in [0, 1]")
        if not 0.0 <= self.abnormal_rate <= 1.0:
            raise ValidationError("abnormal_rate must be in [0, 1]")
        if self.grid_size**2 < self.n_anatomies:
            raise ValidationError("grid too small: one tile per anatomy required")


def anatomy_name(index: int) -> str:
    if index < len(ANATOMY_WORDS):
        return ANATOMY_WORDS[index]
    return f"region{index + 1}"


def _surface_form(index: int, rng) -> str:
    name = anatomy_name(index)
    surfaces = ANATOMY_SURFACES.get(name, (name,))
    return surfaces[int(rng.integers(0, len(surfaces)))]


_SIGNATURE_PIXELS = 3


def observation_codebook(n_observations: int, dim: int, region: int) -> np.ndarray:
    """Fixed binary pixel patterns for one region, identical across corpora.

    Code 0 (normal) is a random region base pattern; abnormal codes flip a
    small distinct pixel signature on that base.  Every pair of codes
    differs in at least one pixel (full LOW/HIGH swing), but reading a code
    off a region means learning that region's codebook pixel by pixel.
    """
    rng = np.random.default_rng(_CODEBOOK_SEED + 10007 * region)
    base = rng.integers(0, 2, size=dim)
    rows: list[tuple] = [tuple(base.tolist())]
    seen_masks = set()
    while len(rows) < n_observations:
        mask = tuple(sorted(rng.choice(dim, size=min(_SIGNATURE_PIXELS, dim), replace=False).tolist()))
        if mask in seen_masks:
            continue
        seen_masks.add(mask)
        flipped = base.copy()
        flipped[list(mask)] = 1 - flipped[list(mask)]
        rows.append(tuple(flipped.tolist()))
    bits = np.asarray(rows, dtype=np.float64)
    return _LOW + (_HIGH - _LOW) * bits


def _synth_image(codes, cfg: SynthConfig, rng) -> np.ndarray:
    dim = cfg.tile * cfg.tile
    side = cfg.grid_size * cfg.tile
    grid = np.full((side, side), 0.5)
    for region, code in enumerate(codes):
        codebook = observation_codebook(cfg.n_observations, dim, region)
        r, c = divmod(region, cfg.grid_size)
        block = codebook[code].reshape(cfg.tile, cfg.tile)
        grid[r * cfg.tile : (r + 1) * cfg.tile, c * cfg.tile : (c + 1) * cfg.tile] = block
    noise = np.clip(rng.normal(0.0, NOISE_SIGMA, grid.shape), -NOISE_AMPLITUDE, NOISE_AMPLITUDE)
    return grid + noise


def synth_record(codes, hidden, cfg: SynthConfig, rng, report_id: str) -> dict:
    # hidden abnormalities keep a contentless placeholder sentence: the
    # observation code itself is visible only in the image
    sentences = [LEAD_SENTENCE]
    for r, code in enumerate(codes):
        if code == 0:
            sentences.append(f"The {_surface_form(r, rng)} are normal.")
        elif hidden[r]:
            sentences.append(f"The {_surface_form(r, rng)} are obscured.")
        else:
            sentences.append(f"The {_surface_form(r, rng)} show ab{code}.")
    sentences.append(COMPARISON_SENTENCE)
    abnormal = [(anatomy_name(r), c) for r, c in enumerate(codes) if c != 0]
    if abnormal:
        impression = " ".join(f"{name} ab{code}." for name, code in abnormal)
    else:
        impression = NORMAL_IMPRESSION
    grid = _synth_image(codes, cfg, rng)
    return {
        "id": report_id,
        "findings": " ".join(sentences),
        "impression": impression,
        "image": {"grid": [list(map(float, row)) for row in grid], "tile": cfg.tile},
    }


def synth_records(config: SynthConfig) -> list[dict]:
    """Raw JSONL-ready records; fully determined by config.seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    records = []
    for i in range(config.corpus_size):
        codes = []
        for _ in range(config.n_anatomies):
            if rng.random() < config.abnormal_rate:
                codes.append(int(rng.integers(1, config.n_observations)))
            else:
                codes.append(0)
        hidden = [c != 0 and rng.random() < config.hide_in_image_rate for c in codes]
        records.append(synth_record(codes, hidden, config, rng, f"synth-{i:05d}"))
    return records


def synth_generate(config: SynthConfig, lexicon: Lexicon | None = None) -> list[Report]:
    lexicon = lexicon or anatomy.default_lexicon()
    return [
        report_from_record(record, lexicon, lineno=i + 1)
        for i, record in enumerate(synth_records(config))
    ]


_AB_CODE_RE = re.compile(r"^ab(\d+)$")

_CANONICAL_BY_SURFACE = {
    surface: name for name, surfaces in ANATOMY_SURFACES.items() for surface in surfaces
}


def extract_observation_codes(text: str) -> frozenset[tuple[str, int]]:
    """(anatomy, code) pairs mentioned in synthetic findings or impressions.

    Each ab-code token pairs with the most recent anatomy mention before
    it (surface forms normalize to canonical names), which tolerates
    mildly malformed generated text.
    """
    pairs = set()
    current = None
    for token in tokenize(text):
        if token in _CANONICAL_BY_SURFACE:
            current = _CANONICAL_BY_SURFACE[token]
        elif re.fullmatch(r"region\d+", token):
            current = token
        else:
            m = _AB_CODE_RE.match(token)
            if m and current is not None:
                pairs.add((current, int(m.group(1))))
    return frozenset(pairs)


def observation_accuracy(predictions: list[str], references: list[str]) -> float:
    """Fraction of reports whose predicted observation-code set matches the
    reference set exactly; the factual-consistency stand-in for synthetic
    corpora."""
    if len(predictions) != len(references):
        raise ValidationError("observation_accuracy: prediction/reference count mismatch")
    if not references:
        return 0.0
    hits = sum(
        extract_observation_codes(p) == extract_observation_codes(r)
        for p, r in zip(predictions, references)
    )
    return hits / len(references)
