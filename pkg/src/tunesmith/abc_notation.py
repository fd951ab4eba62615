"""ABC notation tokenizer, header parsing, bar counting, and degeneration checks.

ABC tunes are ASCII text: a block of ``<letter>:<value>`` header lines
(terminated by the key field ``K:``) followed by the music body. Because
nearly every character carries its own meaning, the tokenizer is
character-level with a fixed list of merged multi-character notations
(barline variants, header prefixes, common meters, rests, ...) applied by
greedy longest match. The resulting vocabulary has exactly 164 entries:
3 specials + newline + 95 printable ASCII + 65 merged tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .errors import ConfigurationError, TokenizationError

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"

ABC_VOCAB_SIZE = 164
MERGED_TOKEN_COUNT = 65

# Barline tokens that separate bars, longest first so that e.g. "||" is a
# single separator rather than two.
BARLINE_TOKENS = ("|:", ":|", "||", "|]", "[|", "|")


@dataclass(frozen=True)
class AbcVocab:
    """Fixed 164-token vocabulary for ABC tunes."""

    tokens: tuple[str, ...]
    id_of: dict[str, int]
    pad_id: int
    bos_id: int
    eos_id: int
    merged: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.pad_id, self.bos_id, self.eos_id))


@dataclass(frozen=True)
class TuneDocument:
    """Header/body split of one tune.

    ``serialize`` reproduces the parsed input byte-for-byte; headers keep
    their raw (unstripped) values and the final header may lack a trailing
    newline, which ``last_header_newline`` records.
    """

    headers: tuple[tuple[str, str], ...]
    body: str
    last_header_newline: bool = True

    def serialize(self) -> str:
        parts = []
        for i, (letter, value) in enumerate(self.headers):
            nl = "\n" if (i < len(self.headers) - 1 or self.last_header_newline) else ""
            parts.append(f"{letter}:{value}{nl}")
        parts.append(self.body)
        return "".join(parts)


@dataclass(frozen=True)
class MetaInfo:
    """Key / meter / unit-length header fields, whitespace-stripped."""

    key: str | None = None
    meter: str | None = None
    unit_length: str | None = None


def _load_merged_tokens() -> tuple[str, ...]:
    path = resources.files("tunesmith").joinpath("data/abc_merged_tokens.txt")
    text = path.read_text(encoding="utf-8")
    tokens = [line for line in text.splitlines() if line]
    if len(tokens) != MERGED_TOKEN_COUNT:
        raise ConfigurationError(
            f"merged token list must have {MERGED_TOKEN_COUNT} entries, got {len(tokens)}"
        )
    if len(set(tokens)) != len(tokens):
        raise ConfigurationError("merged token list contains duplicates")
    for tok in tokens:
        if len(tok) < 2:
            raise ConfigurationError(f"merged token {tok!r} is not multi-character")
        if any(special in tok for special in (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN)):
            raise ConfigurationError(f"merged token {tok!r} contains a special marker")
        if not all(0x20 <= ord(c) <= 0x7E for c in tok):
            raise ConfigurationError(f"merged token {tok!r} has non-printable characters")
    return tuple(tokens)


def build_abc_vocab() -> AbcVocab:
    """Build the fixed tune-side vocabulary.

    Layout: ids 0..2 are PAD/BOS/EOS, id 3 is newline, ids 4..98 are the
    printable ASCII range 0x20..0x7E, ids 99..163 are the shipped merged
    tokens in file order.
    """
    merged = _load_merged_tokens()
    base = ["\n"] + [chr(c) for c in range(0x20, 0x7F)]
    tokens = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN] + base + list(merged)
    if len(tokens) != ABC_VOCAB_SIZE:
        raise ConfigurationError(
            f"ABC vocabulary must have {ABC_VOCAB_SIZE} tokens, got {len(tokens)}"
        )
    id_of = {tok: i for i, tok in enumerate(tokens)}
    if len(id_of) != len(tokens):
        raise ConfigurationError("ABC vocabulary contains duplicate tokens")
    return AbcVocab(
        tokens=tuple(tokens),
        id_of=id_of,
        pad_id=id_of[PAD_TOKEN],
        bos_id=id_of[BOS_TOKEN],
        eos_id=id_of[EOS_TOKEN],
        merged=merged,
    )


@lru_cache(maxsize=4)
def _merged_by_first_char(merged: tuple[str, ...]) -> dict[str, tuple[str, ...]]:
    index: dict[str, list[str]] = {}
    for tok in merged:
        index.setdefault(tok[0], []).append(tok)
    return {c: tuple(sorted(toks, key=len, reverse=True)) for c, toks in index.items()}


def tokenize_abc(s: str, vocab: AbcVocab) -> list[int]:
    """Tokenize by greedy longest match over the merged list, falling back to
    single characters. Concatenating the matched tokens reproduces ``s``.
    """
    index = _merged_by_first_char(vocab.merged)
    id_of = vocab.id_of
    ids: list[int] = []
    i = 0
    n = len(s)
    while i < n:
        ch = s[i]
        matched = False
        for tok in index.get(ch, ()):
            if s.startswith(tok, i):
                ids.append(id_of[tok])
                i += len(tok)
                matched = True
                break
        if matched:
            continue
        tok_id = id_of.get(ch)
        if tok_id is None:
            raise TokenizationError(
                f"character {ch!r} at offset {i} is not representable in the ABC vocabulary"
            )
        ids.append(tok_id)
        i += 1
    return ids


def detokenize_abc(ids: list[int], vocab: AbcVocab) -> str:
    """Concatenate token strings, skipping PAD/BOS/EOS."""
    specials = vocab.special_ids
    out = []
    for tok_id in ids:
        if not 0 <= tok_id < len(vocab.tokens):
            raise TokenizationError(f"token id {tok_id} out of range 0..{len(vocab.tokens) - 1}")
        if tok_id in specials:
            continue
        out.append(vocab.tokens[tok_id])
    return "".join(out)


def parse_headers(s: str) -> TuneDocument:
    """Split leading ``<uppercase letter>:<rest>`` lines from the body.

    The first ``K:`` line terminates the header block per ABC convention;
    inline fields occurring later are left in the body.
    """
    headers: list[tuple[str, str]] = []
    pos = 0
    last_nl = True
    while pos < len(s):
        nl = s.find("\n", pos)
        line = s[pos:] if nl < 0 else s[pos:nl]
        if len(line) >= 2 and line[1] == ":" and "A" <= line[0] <= "Z":
            headers.append((line[0], line[2:]))
            last_nl = nl >= 0
            pos = len(s) if nl < 0 else nl + 1
            if line[0] == "K":
                break
        else:
            break
    return TuneDocument(headers=tuple(headers), body=s[pos:], last_header_newline=last_nl)


def extract_meta(doc: TuneDocument) -> MetaInfo:
    """Pull key (K:), meter (M:), and unit length (L:); last occurrence wins."""
    key = meter = unit = None
    for letter, value in doc.headers:
        if letter == "K":
            key = value.strip()
        elif letter == "M":
            meter = value.strip()
        elif letter == "L":
            unit = value.strip()
    return MetaInfo(key=key, meter=meter, unit_length=unit)


def split_bars(body: str) -> list[str]:
    """Split the body into bar spans on barline tokens (longest match first).

    Barlines are separators, not bars; empty spans (between adjacent
    barlines or at the edges) are dropped.
    """
    spans: list[str] = []
    current: list[str] = []
    i = 0
    n = len(body)
    while i < n:
        matched = None
        for bar in BARLINE_TOKENS:
            if body.startswith(bar, i):
                matched = bar
                break
        if matched is not None:
            if current:
                spans.append("".join(current))
                current = []
            i += len(matched)
        else:
            current.append(body[i])
            i += 1
    if current:
        spans.append("".join(current))
    return spans


def count_bars(body: str) -> int:
    """Number of maximal nonempty spans between barline tokens."""
    return len(split_bars(body))


@dataclass(frozen=True)
class DegenerationReport:
    degenerate: bool
    unit: str | None = None
    repeats: int = 0


def detect_degeneration(body: str, min_repeats: int = 3) -> DegenerationReport:
    """Flag a bar unit repeated at least ``min_repeats`` times consecutively.

    Units are compared after whitespace stripping; whitespace-only bars are
    ignored. Returns the longest run found at or above the threshold.
    """
    if min_repeats < 2:
        raise ValueError("min_repeats must be >= 2")
    units = [u.strip() for u in split_bars(body)]
    units = [u for u in units if u]
    best_unit = None
    best_run = 0
    run = 0
    prev = None
    for unit in units:
        run = run + 1 if unit == prev else 1
        prev = unit
        if run > best_run:
            best_run = run
            best_unit = unit
    if best_run >= min_repeats:
        return DegenerationReport(degenerate=True, unit=best_unit, repeats=best_run)
    return DegenerationReport(degenerate=False, unit=None, repeats=best_run)
