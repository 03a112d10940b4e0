"""Rule-based anatomy typing of findings sentences.

Each findings sentence is matched against an ordered lexicon of anatomy
types.  A sentence matching a single type keeps it; a sentence matching
several types takes the highest-priority one (lexicon order IS the
priority); a sentence matching nothing falls into "other observations".
The chosen label is then planted into the sentence as "anatomy: sentence".
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ConfigError, ValidationError

OTHER_LABEL = "other observations"

# Tokens that never end a sentence even when followed by '.':
# personal titles written in full.
_TITLE_ABBREVS = {"dr", "mr", "mrs", "ms"}

_WORD_RE = re.compile(r"[a-z0-9]+")
_BOUNDARY_RE = re.compile(r"([.!?]+)(\s+|$)")


@dataclass(frozen=True)
class Rule:
    """A single lexicon rule.

    kind "keyword" carries one exact phrase (one or more consecutive
    tokens); kind "gap_pattern" carries exactly two tokens that must both
    occur in the sentence with the first strictly before the second.
    """

    kind: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in ("keyword", "gap_pattern"):
            raise ValidationError(f"unknown rule kind {self.kind!r}")
        if self.kind == "gap_pattern" and len(self.tokens) != 2:
            raise ValidationError("gap_pattern rules take exactly two tokens")
        if self.kind == "keyword" and not self.tokens:
            raise ValidationError("keyword rules need at least one token")

    def matches(self, words: list[str]) -> bool:
        if self.kind == "keyword":
            k = len(self.tokens)
            return any(
                tuple(words[i : i + k]) == self.tokens
                for i in range(len(words) - k + 1)
            )
        first, second = self.tokens
        for i, w in enumerate(words):
            if w == first:
                return second in words[i + 1 :]
        return False


@dataclass(frozen=True)
class Lexicon:
    """Ordered anatomy entries; declaration order is the priority ranking."""

    entries: tuple[tuple[str, tuple[Rule, ...]], ...]

    def __post_init__(self):
        labels = [label for label, _ in self.entries]
        for label in labels:
            if labels.count(label) > 1:
                raise ValidationError(f"duplicate anatomy label {label!r}")
        for label, rules in self.entries:
            if not rules:
                raise ValidationError(f"anatomy {label!r} has no rules")

    @property
    def labels(self) -> list[str]:
        return [label for label, _ in self.entries]


@dataclass(frozen=True)
class LabeledSentence:
    index: int
    text: str
    anatomy: str
    prompted_text: str


def _kw(phrase: str) -> Rule:
    return Rule("keyword", tuple(phrase.split()))


def _gap(first: str, second: str) -> Rule:
    return Rule("gap_pattern", (first, second))


# The shipped lexicon carries exactly the published keyword set; site-specific
# extensions belong in a user lexicon file.
_DEFAULT_ENTRIES = (
    (
        "normal observations",
        (
            _kw("unremarkable"),
            _kw("are normal"),
            _kw("there are no"),
            _gap("no", "seen"),
            _gap("no", "present"),
        ),
    ),
    (
        "lungs",
        tuple(
            _kw(w)
            for w in (
                "lung",
                "lungs",
                "pulmonary",
                "suprahilar",
                "perihilar",
                "atelectasis",
                "bibasilar",
                "pneumonia",
            )
        ),
    ),
    ("pleural spaces", (_kw("pleural"),)),
    (
        "heart",
        tuple(
            _kw(w)
            for w in (
                "heart",
                "hearts",
                "pericardial",
                "cardiac",
                "cardiopulmonary",
                "cardiomediastinal",
            )
        ),
    ),
    ("mediastinum", (_kw("mediastinal"), _kw("mediastinum"))),
    (
        "osseous structures",
        tuple(
            _kw(w)
            for w in ("fracture", "osseous", "glenohumeral", "thoracic", "bone", "bony")
        ),
    ),
    ("tube", (_kw("tube"), _kw("catheter"))),
    ("comparisons", (_kw("comparison"), _kw("previous"), _kw("prior"))),
)


def default_lexicon() -> Lexicon:
    return Lexicon(_DEFAULT_ENTRIES)


def _parse_rule_line(line: str, lineno: int) -> Rule:
    if "..." in line:
        parts = [p.strip() for p in line.split("...")]
        parts = [p for p in parts if p]
        if len(parts) != 2 or any(len(p.split()) != 1 for p in parts):
            raise ConfigError(
                f"line {lineno}: gap pattern must be 'token ... token', got {line!r}"
            )
        return _gap(parts[0].lower(), parts[1].lower())
    tokens = tuple(line.lower().split())
    if not tokens:
        raise ConfigError(f"line {lineno}: empty rule")
    return Rule("keyword", tokens)


def load_lexicon(path: str | None = None) -> Lexicon:
    """Load a lexicon file, or return the built-in lexicon when path is None.

    File format: UTF-8, line-oriented. ``[label]`` opens an entry (file
    order is priority order), one rule per line below it, ``#`` comments
    and blank lines ignored, ``A ... B`` denotes a gap pattern.
    """
    if path is None:
        return default_lexicon()
    entries: list[tuple[str, list[Rule]]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                label = line[1:-1].strip().lower()
                if not label:
                    raise ConfigError(f"line {lineno}: empty anatomy label")
                entries.append((label, []))
                continue
            if not entries:
                raise ConfigError(f"line {lineno}: rule before any [label] header")
            entries[-1][1].append(_parse_rule_line(line, lineno))
    return Lexicon(tuple((label, tuple(rules)) for label, rules in entries))


def _words(sentence: str) -> list[str]:
    return _WORD_RE.findall(sentence.lower())


def split_sentences(findings: str) -> list[str]:
    """Split findings into sentences on '.', '!', '?' followed by whitespace.

    Guard: never split right after a single-letter token, a numeral, or a
    personal-title abbreviation, so "Dr. Smith" and "5. 2 cm" stay whole.
    """
    out = []
    start = 0
    for m in _BOUNDARY_RE.finditer(findings):
        prefix = findings[start : m.start()]
        tail = _WORD_RE.findall(prefix.lower())
        last = tail[-1] if tail else ""
        if last and (len(last) == 1 or last.isdigit() or last in _TITLE_ABBREVS):
            continue
        segment = findings[start : m.end(1)].strip()
        if segment:
            out.append(segment)
        start = m.end()
    trailing = findings[start:].strip()
    if trailing:
        out.append(trailing)
    return out


def match_anatomy(sentence: str, lexicon: Lexicon) -> list[str]:
    """All anatomy labels whose rules match, in lexicon priority order."""
    words = _words(sentence)
    return [
        label
        for label, rules in lexicon.entries
        if any(rule.matches(words) for rule in rules)
    ]


def classify_sentence(sentence: str, lexicon: Lexicon) -> str:
    """Assign exactly one anatomy label.

    Single match keeps it, several matches resolve to the highest-priority
    one, no match falls back to "other observations".
    """
    matched = match_anatomy(sentence, lexicon)
    return matched[0] if matched else OTHER_LABEL


def plan_prompts(findings: str, lexicon: Lexicon) -> list[LabeledSentence]:
    """Split findings, classify each sentence, and prefix "anatomy: "."""
    out = []
    for index, text in enumerate(split_sentences(findings)):
        anatomy = classify_sentence(text, lexicon)
        out.append(
            LabeledSentence(
                index=index,
                text=text,
                anatomy=anatomy,
                prompted_text=f"{anatomy}: {text}",
            )
        )
    return out
