"""Byte-level BPE tokenizer for the natural-language source side.

Training starts from the 256 single-byte tokens and repeatedly merges the
most frequent adjacent pair until no pair reaches the minimum frequency,
with ties broken by lexicographic order of the pair's byte strings so that
identical corpora always produce identical vocabularies. Encoding applies
the learned merges in order (lowest-rank-first loop), wraps the sequence in
BOS/EOS, and truncates to a maximum length while keeping both markers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError, TokenizationError

PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
MASK_ID = 259
NUM_SPECIALS = 4
FIRST_MERGED_ID = 256 + NUM_SPECIALS

_SPECIAL_NAMES = {PAD_ID: "<pad>", BOS_ID: "<bos>", EOS_ID: "<eos>", MASK_ID: "<mask>"}

_SEP = -1  # document separator in the concatenated training array


@dataclass(frozen=True)
class BpeVocab:
    """Learned merges plus derived lookup tables.

    ids 0..255 are raw bytes, 256..259 the PAD/BOS/EOS/MASK specials, and
    260 onward the merged tokens in learned order.
    """

    merges: tuple[tuple[bytes, bytes], ...]
    token_bytes: tuple[bytes | None, ...]  # None for the four specials
    min_freq: int

    def __len__(self) -> int:
        return len(self.token_bytes)

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def bos_id(self) -> int:
        return BOS_ID

    @property
    def eos_id(self) -> int:
        return EOS_ID

    @property
    def mask_id(self) -> int:
        return MASK_ID

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(_SPECIAL_NAMES)

    def pair_table(self) -> dict[tuple[int, int], int]:
        """(left id, right id) -> merged id, rank implied by the merged id."""
        id_of = _id_of_bytes(self.token_bytes)
        table = {}
        for i, (left, right) in enumerate(self.merges):
            table[(id_of[left], id_of[right])] = FIRST_MERGED_ID + i
        return table


def _id_of_bytes(token_bytes: tuple[bytes | None, ...]) -> dict[bytes, int]:
    return {tok: i for i, tok in enumerate(token_bytes) if tok is not None}


def _base_tokens() -> list[bytes | None]:
    toks: list[bytes | None] = [bytes([i]) for i in range(256)]
    toks.extend([None] * NUM_SPECIALS)
    return toks


def _greedy_positions(match: np.ndarray) -> np.ndarray:
    """Leftmost non-overlapping selection among candidate match positions.

    Within each run of consecutive matches (which only arise when a token
    pairs with itself), keep every other position starting from the first.
    """
    idx = np.flatnonzero(match)
    if idx.size == 0:
        return idx
    new_run = np.diff(idx, prepend=idx[0] - 2) > 1
    run_starts = idx[new_run]
    run_lengths = np.diff(np.append(np.flatnonzero(new_run), idx.size))
    offset = idx - np.repeat(run_starts, run_lengths)
    return idx[offset % 2 == 0]


def _merge_array(arr: np.ndarray, left: int, right: int, new_id: int) -> np.ndarray:
    match = (arr[:-1] == left) & (arr[1:] == right)
    chosen = _greedy_positions(match)
    if chosen.size == 0:
        return arr
    out = arr.copy()
    out[chosen] = new_id
    keep = np.ones(arr.size, dtype=bool)
    keep[chosen + 1] = False
    return out[keep]


def train_bpe(corpus: list[str], min_freq: int) -> BpeVocab:
    """Learn merges from a corpus of documents.

    Pair frequencies are counted over adjacent tokens within each document
    (overlapping occurrences included); merging stops once the most frequent
    pair falls below ``min_freq``.
    """
    if not corpus:
        raise DataError("BPE training corpus is empty")
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")

    token_bytes = _base_tokens()
    merges: list[tuple[bytes, bytes]] = []

    chunks = []
    for doc in corpus:
        data = np.frombuffer(doc.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        chunks.append(np.append(data, _SEP))
    arr = np.concatenate(chunks)

    while True:
        left, right = arr[:-1], arr[1:]
        valid = (left != _SEP) & (right != _SEP)
        if not valid.any():
            break
        keys = (left[valid] << 32) | right[valid]
        uniq, counts = np.unique(keys, return_counts=True)
        top = counts.max()
        if top < min_freq:
            break
        candidates = uniq[counts == top]
        pairs = [(int(k >> 32), int(k & 0xFFFFFFFF)) for k in candidates]
        l_id, r_id = min(pairs, key=lambda p: (token_bytes[p[0]], token_bytes[p[1]]))
        new_id = len(token_bytes)
        merges.append((token_bytes[l_id], token_bytes[r_id]))
        token_bytes.append(token_bytes[l_id] + token_bytes[r_id])
        arr = _merge_array(arr, l_id, r_id, new_id)

    return BpeVocab(merges=tuple(merges), token_bytes=tuple(token_bytes), min_freq=min_freq)


@dataclass(frozen=True)
class EncodedText:
    ids: tuple[int, ...]
    truncated: bool


def _apply_merges(ids: list[int], pair_table: dict[tuple[int, int], int]) -> list[int]:
    # Repeatedly merge the present pair with the lowest rank; equivalent to
    # applying merges in learned order because later merges cannot create
    # inputs for earlier ones.
    while len(ids) >= 2:
        best_id = None
        for pair in zip(ids, ids[1:]):
            merged = pair_table.get(pair)
            if merged is not None and (best_id is None or merged < best_id):
                best_id = merged
                best_pair = pair
        if best_id is None:
            break
        left, right = best_pair
        out = []
        i = 0
        while i < len(ids):
            if i + 1 < len(ids) and ids[i] == left and ids[i + 1] == right:
                out.append(best_id)
                i += 2
            else:
                out.append(ids[i])
                i += 1
        ids = out
    return ids


def encode_text(s: str, vocab: BpeVocab, max_len: int | None = None,
                pair_table: dict[tuple[int, int], int] | None = None) -> EncodedText:
    """Encode to ids with BOS prepended and EOS appended.

    If the result exceeds ``max_len``, the middle is cut so that BOS and a
    final EOS survive. Pass a precomputed ``pair_table`` when encoding many
    documents with the same vocabulary.
    """
    if max_len is not None and max_len < 2:
        raise ValueError("max_len must be >= 2 to fit BOS and EOS")
    if pair_table is None:
        pair_table = vocab.pair_table()
    ids = _apply_merges(list(s.encode("utf-8")), pair_table)
    truncated = False
    if max_len is not None and len(ids) + 2 > max_len:
        ids = ids[: max_len - 2]
        truncated = True
    return EncodedText(ids=tuple([BOS_ID] + ids + [EOS_ID]), truncated=truncated)


def decode_text(ids, vocab: BpeVocab) -> str:
    """Concatenate token byte strings (specials skipped) and decode as UTF-8
    with replacement for invalid sequences."""
    parts = []
    for tok_id in ids:
        if not 0 <= tok_id < len(vocab.token_bytes):
            raise TokenizationError(f"token id {tok_id} out of range 0..{len(vocab.token_bytes) - 1}")
        tok = vocab.token_bytes[tok_id]
        if tok is None:
            continue
        parts.append(tok)
    out = b"".join(parts)
    return out.decode("utf-8", errors="replace")


def save_bpe_vocab(vocab: BpeVocab, path) -> None:
    """Write the vocab file: ``bpe-v1 <min_freq>`` then one merge per line as
    two space-separated hex-encoded token byte strings."""
    lines = [f"bpe-v1 {vocab.min_freq}"]
    for left, right in vocab.merges:
        lines.append(f"{left.hex()} {right.hex()}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_bpe_vocab(path) -> BpeVocab:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read BPE vocab {path}: {exc}") from exc
    if not lines:
        raise ConfigurationError(f"{path}: empty BPE vocab file")
    header = lines[0].split()
    if len(header) != 2 or header[0] != "bpe-v1":
        raise ConfigurationError(f"{path}: expected 'bpe-v1 <min_freq>' header, got {lines[0]!r}")
    try:
        min_freq = int(header[1])
    except ValueError:
        raise ConfigurationError(f"{path}: bad min_freq {header[1]!r}") from None

    token_bytes = _base_tokens()
    id_of = _id_of_bytes(tuple(token_bytes))
    merges: list[tuple[bytes, bytes]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        fields = line.split()
        if len(fields) != 2:
            raise ConfigurationError(f"{path}:{lineno}: expected two hex fields")
        try:
            left, right = bytes.fromhex(fields[0]), bytes.fromhex(fields[1])
        except ValueError:
            raise ConfigurationError(f"{path}:{lineno}: invalid hex encoding") from None
        if left not in id_of or right not in id_of:
            raise ConfigurationError(f"{path}:{lineno}: merge references unknown token")
        merges.append((left, right))
        new_tok = left + right
        id_of[new_tok] = len(token_bytes)
        token_bytes.append(new_tok)
    return BpeVocab(merges=tuple(merges), token_bytes=tuple(token_bytes), min_freq=min_freq)
