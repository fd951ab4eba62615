"""Text-tune pair ingestion, corpus filters, and a synthetic pair generator.

The on-disk format is JSON Lines: one ``{"text": ..., "abc": ...}`` object
per line, UTF-8, with newlines inside the ABC escaped by the JSON encoder.
The synthesizer pairs rule-generated tunes (fixed key set, meter-consistent
bar grammar, optional explicit AABB form) with descriptions that state the
key and meter either as a labelled list or as prose; the stated meta always
matches the tune's headers, which makes the corpus usable as ground truth
for meta-following probes.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass

from .abc_notation import AbcVocab, count_bars, parse_headers, tokenize_abc
from .errors import DataError, TokenizationError
from .nn import Rng

logger = logging.getLogger(__name__)

MIN_BARS = 8

MAJOR_KEYS = ("C", "D", "F", "G", "A")
MINOR_KEYS = ("Am", "Bm", "Dm", "Em")
METERS = ("4/4", "3/4", "6/8")
UNIT_LENGTH = "1/8"

# eighth-note units per bar for each supported meter
_BAR_UNITS = {"4/4": 8, "3/4": 6, "6/8": 6}
_DURATION_PATTERNS = {
    8: ((2, 2, 2, 2), (4, 2, 2), (2, 2, 4), (2, 1, 1, 2, 2), (1, 1, 2, 2, 2),
        (4, 4), (2, 2, 1, 1, 1, 1)),
    6: ((2, 2, 2), (3, 3), (1, 1, 2, 2), (2, 1, 1, 2), (1, 1, 1, 1, 2),
        (4, 1, 1)),
}
_NOTE_POOL = ("C", "D", "E", "F", "G", "A", "B", "c", "d", "e", "f", "g", "a", "b")
_STYLES = {
    "4/4": ("reel", "march", "hornpipe", "polka"),
    "3/4": ("waltz", "mazurka", "minuet"),
    "6/8": ("jig", "double jig", "slide"),
}
_PROSE_OPENERS = ("A", "A lively", "A gentle", "A traditional", "A simple")


@dataclass(frozen=True)
class TextTunePair:
    """One training record: a description and the tune it describes."""

    text: str
    abc: str


@dataclass(frozen=True)
class DescribedMeta:
    """Key and meter recovered from a description, in header form."""

    key: str | None
    meter: str | None


@dataclass(frozen=True)
class FilterResult:
    kept: list[TextTunePair]
    rejected: list[tuple[TextTunePair, str]]


def load_pairs(path, strict: bool = False) -> list[TextTunePair]:
    """Read JSONL pairs, preserving order.

    Malformed lines are skipped with a warning naming the line number;
    ``strict`` turns them into errors instead.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    pairs: list[TextTunePair] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        problem = None
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            problem = f"invalid JSON ({exc.msg})"
        else:
            if not isinstance(record, dict) or not isinstance(
                record.get("text"), str
            ) or not isinstance(record.get("abc"), str):
                problem = "record needs string fields 'text' and 'abc'"
        if problem is not None:
            if strict:
                raise DataError(f"{path}: line {lineno}: {problem}")
            logger.warning("%s: line %d skipped: %s", path, lineno, problem)
            continue
        pairs.append(TextTunePair(text=record["text"], abc=record["abc"]))
    return pairs


def save_pairs(pairs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps({"text": pair.text, "abc": pair.abc},
                                ensure_ascii=False))
            fh.write("\n")


def filter_pairs(pairs, vocab: AbcVocab) -> FilterResult:
    """Keep pairs with nonempty text, tokenizable ABC, and >= 8 bars."""
    kept: list[TextTunePair] = []
    rejected: list[tuple[TextTunePair, str]] = []
    for pair in pairs:
        if not pair.text.strip():
            rejected.append((pair, "empty_text"))
            continue
        try:
            tokenize_abc(pair.abc, vocab)
        except TokenizationError:
            rejected.append((pair, "untokenizable_abc"))
            continue
        if count_bars(parse_headers(pair.abc).body) < MIN_BARS:
            rejected.append((pair, "too_few_bars"))
            continue
        kept.append(pair)
    return FilterResult(kept=kept, rejected=rejected)


def _key_phrase(key: str) -> str:
    if key.endswith("m"):
        return f"{key[:-1]} minor"
    return f"{key} major"


def _make_bar(rng: Rng, units: int, tonic: str) -> str:
    pattern = _DURATION_PATTERNS[units][
        int(rng.integers(0, len(_DURATION_PATTERNS[units])))
    ]
    notes = []
    for i, dur in enumerate(pattern):
        if i == 0 and rng.uniform(()) < 0.3:
            letter = tonic
        else:
            letter = _NOTE_POOL[int(rng.integers(0, len(_NOTE_POOL)))]
        notes.append(letter if dur == 1 else f"{letter}{dur}")
    middle = len(notes) // 2
    return "".join(notes[:middle]) + " " + "".join(notes[middle:])


def _make_body(rng: Rng, meter: str, key: str) -> str:
    units = _BAR_UNITS[meter]
    tonic = key[0]
    aabb = rng.uniform(()) < 0.4
    if aabb:
        a_len = int(rng.integers(2, 5))
        b_len = int(rng.integers(2, 5))
        a = [_make_bar(rng, units, tonic) for _ in range(a_len)]
        b = [_make_bar(rng, units, tonic) for _ in range(b_len)]
        bars = a + a + b + b
    else:
        bars = [_make_bar(rng, units, tonic)
                for _ in range(int(rng.integers(MIN_BARS, 17)))]
    lines = ["|".join(bars[i : i + 4]) + "|" for i in range(0, len(bars), 4)]
    text = "\n".join(lines)
    # the body must end at the final barline: anything after it, even a
    # newline, would count as one more bar span
    return text[:-1] + "|]"


def _list_description(rng: Rng, key: str, meter: str, style: str) -> str:
    return f"Key: {_key_phrase(key)}; Meter: {meter}; Style: {style}"


def _prose_description(rng: Rng, key: str, meter: str, style: str) -> str:
    opener = _PROSE_OPENERS[int(rng.integers(0, len(_PROSE_OPENERS)))]
    if rng.uniform(()) < 0.5:
        return (f"{opener} {style} in {_key_phrase(key)}, "
                f"written in {meter} time.")
    return f"{opener} {style} in {_key_phrase(key)} with a {meter} feel."


def synth_corpus(n: int, seed: int, format_mix: float = 0.5) -> list[TextTunePair]:
    """Generate ``n`` deterministic pairs; ``format_mix`` is the fraction of
    list-format descriptions (the rest are prose paraphrases)."""
    if n < 1:
        raise DataError("need n >= 1")
    if not 0.0 <= format_mix <= 1.0:
        raise DataError("format_mix must be in [0, 1]")
    rng = Rng(seed)
    keys = MAJOR_KEYS + MINOR_KEYS
    pairs: list[TextTunePair] = []
    for index in range(n):
        key = keys[int(rng.integers(0, len(keys)))]
        meter = METERS[int(rng.integers(0, len(METERS)))]
        style = _STYLES[meter][int(rng.integers(0, len(_STYLES[meter])))]
        body = _make_body(rng, meter, key)
        abc = (f"X:{index + 1}\nT:Study No. {index + 1}\n"
               f"M:{meter}\nL:{UNIT_LENGTH}\nK:{key}\n{body}")
        if rng.uniform(()) < format_mix:
            text = _list_description(rng, key, meter, style)
        else:
            text = _prose_description(rng, key, meter, style)
        pairs.append(TextTunePair(text=text, abc=abc))
    return pairs


_KEY_RE = re.compile(r"\b([A-G])\s+(major|minor)\b", re.IGNORECASE)
_METER_RE = re.compile(r"\b(\d{1,2}/\d{1,2})\b")


def described_meta(text: str) -> DescribedMeta:
    """Recover the key and meter stated in a description (either format)."""
    key = None
    match = _KEY_RE.search(text)
    if match:
        letter = match.group(1).upper()
        key = letter + "m" if match.group(2).lower() == "minor" else letter
    meter_match = _METER_RE.search(text)
    meter = meter_match.group(1) if meter_match else None
    return DescribedMeta(key=key, meter=meter)


def dedupe_report(pairs) -> list[list[int]]:
    """Cluster pair indices by exact ABC body equality.

    Clusters partition the corpus; duplicated tunes show up as clusters of
    size > 1. They are reported, never removed.
    """
    by_body: dict[str, list[int]] = {}
    for index, pair in enumerate(pairs):
        body = parse_headers(pair.abc).body
        by_body.setdefault(body, []).append(index)
    return sorted(by_body.values(), key=len, reverse=True)
