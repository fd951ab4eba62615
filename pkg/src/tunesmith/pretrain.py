"""Self-supervised pretraining for encoder, decoder, or the full model.

Three corruption objectives are supported: masked-token prediction on a
bidirectional stack, next-token prediction under a causal mask, and
sentence-shuffle plus span-infilling denoising for the full encoder-decoder.
The first two train a temporary projection head that is dropped from the
emitted checkpoint, so the result can seed a translation model's encoder or
decoder via :func:`tunesmith.seq2seq.init_encoder_from`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError
from .nn import Rng, Tensor, add, cross_entropy, matmul, reshape
from .seq2seq import (
    Checkpoint,
    DECODER_PREFIXES,
    ENCODER_PREFIXES,
    INIT_STD,
    ModelConfig,
    decode,
    encode,
    forward_batch,
    init_model,
    save_checkpoint,
)
from .text_bpe import BOS_ID, EOS_ID, MASK_ID, PAD_ID, BpeVocab, encode_text
from .trainer import (
    AdamWState,
    TrainConfig,
    TrainLog,
    adamw_step,
    clip_gradients,
    lr_at,
)

# Target value marking positions that contribute nothing to the loss.
IGNORE_ID = -1

PARTS = ("encoder-only", "decoder-only", "full")
OBJECTIVES = ("mlm", "lm", "denoise")
_COMPATIBLE = {
    ("encoder-only", "mlm"),
    ("encoder-only", "lm"),
    ("decoder-only", "lm"),
    ("full", "denoise"),
}

_SPECIAL_IDS = np.array([PAD_ID, BOS_ID, EOS_ID, MASK_ID])

# Masked-token corruption uses BERT's published constants: 15% of positions
# selected, split 80% mask / 10% random token / 10% unchanged.
MLM_RATE = 0.15
SPAN_RATE = 0.3
MEAN_SPAN_LEN = 3.0


@dataclass(frozen=True)
class CorruptionOutput:
    """A corrupted input sequence and its prediction targets.

    For masked-token corruption the two are the same length and targets are
    IGNORE_ID except at selected positions. For next-token shifts the target
    is the input advanced by one. For denoising the target is the full
    uncorrupted sequence, which may be longer than the input.
    """

    input_ids: np.ndarray
    target_ids: np.ndarray


def mlm_corrupt(ids, rate: float, rng: Rng, vocab: BpeVocab,
                *, all_mask: bool = False) -> CorruptionOutput:
    """BERT-style corruption of non-special positions.

    Each non-special position is independently selected with probability
    ``rate``; selected positions become MASK (80%), a random non-special
    token (10%), or stay unchanged (10%). ``all_mask`` replaces the 80/10/10
    split with 100% MASK, for tests that need every selected position visible
    in the input.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigurationError(f"rate must be in [0, 1], got {rate}")
    ids = np.asarray(ids, dtype=np.int64)
    maskable = ~np.isin(ids, _SPECIAL_IDS)
    selected = maskable & (rng.uniform(ids.shape) < rate)

    out = ids.copy()
    if all_mask:
        out[selected] = MASK_ID
    else:
        action = rng.uniform(ids.shape)
        out[selected & (action < 0.8)] = MASK_ID
        random_at = selected & (action >= 0.8) & (action < 0.9)
        n_random = int(random_at.sum())
        if n_random:
            pool = np.setdiff1d(np.arange(len(vocab)), _SPECIAL_IDS)
            out[random_at] = pool[rng.integers(0, len(pool), size=n_random)]
    targets = np.where(selected, ids, IGNORE_ID)
    return CorruptionOutput(input_ids=out, target_ids=targets)


def lm_shift(ids) -> CorruptionOutput:
    """Next-token objective: input ids[:-1], target ids[1:]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or len(ids) < 2:
        raise DataError(f"need at least 2 tokens to shift, got {ids.shape}")
    return CorruptionOutput(input_ids=ids[:-1].copy(), target_ids=ids[1:].copy())


def denoise_corrupt(ids, sentence_boundaries: Sequence[int], span_rate: float,
                    mean_span_len: float, rng: Rng) -> CorruptionOutput:
    """Shuffle sentences, then replace random spans with a single MASK each.

    ``sentence_boundaries`` lists the cut indices between sentences, strictly
    inside (0, len). Span lengths are geometric with the given mean; span
    starts are drawn so that spans cover about ``span_rate`` of the tokens.
    The target is the original sequence, so the model must restore both
    sentence order and the infilled tokens.
    """
    if not 0.0 <= span_rate <= 1.0:
        raise ConfigurationError(f"span_rate must be in [0, 1], got {span_rate}")
    if mean_span_len < 1.0:
        raise ConfigurationError(f"mean_span_len must be >= 1, got {mean_span_len}")
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids)
    cuts = list(sentence_boundaries)
    if any(not 0 < c < n for c in cuts) or sorted(set(cuts)) != cuts:
        raise ConfigurationError(f"boundaries {cuts} do not partition {n} tokens")

    edges = [0, *cuts, n]
    segments = [ids[edges[i]:edges[i + 1]] for i in range(len(edges) - 1)]
    order = rng.permutation(len(segments))
    shuffled = np.concatenate([segments[k] for k in order]) if segments else ids

    # Start probability q solves q*mean / (q*mean + 1 - q) = span_rate, the
    # covered fraction of the walk's renewal process.
    q = span_rate / (mean_span_len * (1.0 - span_rate) + span_rate) \
        if span_rate < 1.0 else 1.0
    out: list[int] = []
    i = 0
    while i < n:
        if span_rate > 0.0 and float(rng.uniform(())) < q:
            length = int(rng.geometric(1.0 / mean_span_len))
            out.append(MASK_ID)
            i += min(length, n - i)
        else:
            out.append(int(shuffled[i]))
            i += 1
    return CorruptionOutput(
        input_ids=np.array(out, dtype=np.int64),
        target_ids=ids.copy(),
    )


def split_sentences(text: str) -> list[str]:
    """Split on ". ", keeping the separator attached to the left sentence."""
    parts = text.split(". ")
    return [p + ". " if i < len(parts) - 1 else p
            for i, p in enumerate(parts)]


def encode_document(text: str, vocab: BpeVocab, max_len: int,
                    pair_table=None) -> tuple[np.ndarray, list[int]]:
    """Encode one document to bare ids (no BOS/EOS) plus sentence cuts.

    ``max_len`` truncates the bare sequence; cuts falling at or beyond the
    truncation point are dropped.
    """
    if pair_table is None:
        pair_table = vocab.pair_table()
    pieces = []
    cuts: list[int] = []
    total = 0
    for sent in split_sentences(text):
        ids = encode_text(sent, vocab, pair_table=pair_table).ids[1:-1]
        if total and ids:
            cuts.append(total)
        pieces.extend(ids)
        total += len(ids)
    bare = np.array(pieces[:max_len], dtype=np.int64)
    return bare, [c for c in cuts if c < len(bare)]


def _pad_batch(seqs: list[np.ndarray], pad_value: int) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def _head_logits(hidden: Tensor, head: dict[str, Tensor]) -> Tensor:
    b, t, _ = hidden.shape
    logits = add(matmul(hidden, head["head.out.weight"]), head["head.out.bias"])
    return reshape(logits, (b * t, logits.shape[-1]))


def _encoder_step(model, head, corruptions, *, causal, rng):
    inputs = _pad_batch([c.input_ids for c in corruptions], PAD_ID)
    targets = _pad_batch([c.target_ids for c in corruptions], IGNORE_ID)
    hidden = encode(model, inputs, inputs == PAD_ID, rng=rng, training=True,
                    causal=causal)
    return cross_entropy(_head_logits(hidden, head), targets.reshape(-1),
                         ignore_id=IGNORE_ID)


def _decoder_step(model, corruptions, *, rng):
    inputs = _pad_batch([c.input_ids for c in corruptions], PAD_ID)
    targets = _pad_batch([c.target_ids for c in corruptions], IGNORE_ID)
    b = inputs.shape[0]
    # Zero-width fully-masked source: cross-attention rows are entirely
    # masked, so the decoder sees no context and reduces to a causal LM.
    enc_out = Tensor(np.zeros((b, 1, model.config.hidden), dtype=np.float32))
    logits = decode(model, enc_out, np.ones((b, 1), dtype=bool), inputs,
                    rng=rng, training=True)
    flat = reshape(logits, (logits.shape[0] * logits.shape[1], logits.shape[2]))
    return cross_entropy(flat, targets.reshape(-1), ignore_id=IGNORE_ID)


def _denoise_step(model, corruptions, *, rng):
    src = _pad_batch(
        [np.concatenate(([BOS_ID], c.input_ids, [EOS_ID])) for c in corruptions],
        PAD_ID,
    )
    tgt_in = _pad_batch(
        [np.concatenate(([BOS_ID], c.target_ids)) for c in corruptions], PAD_ID)
    tgt_out = _pad_batch(
        [np.concatenate((c.target_ids, [EOS_ID])) for c in corruptions],
        IGNORE_ID,
    )
    logits = forward_batch(model, src, src == PAD_ID, tgt_in, rng=rng,
                           training=True)
    flat = reshape(logits, (logits.shape[0] * logits.shape[1], logits.shape[2]))
    return cross_entropy(flat, tgt_out.reshape(-1), ignore_id=IGNORE_ID)


def _corrupt(objective: str, doc, crng: Rng, vocab: BpeVocab, *,
             mlm_rate: float, span_rate: float,
             mean_span_len: float) -> CorruptionOutput:
    if objective == "mlm":
        return mlm_corrupt(doc, mlm_rate, crng, vocab)
    if objective == "lm":
        return lm_shift(doc)
    bare, cuts = doc
    return denoise_corrupt(bare, cuts, span_rate, mean_span_len, crng)


def _prepare_docs(part: str, objective: str, corpus: Sequence[str],
                  config: ModelConfig, vocab: BpeVocab) -> list:
    table = vocab.pair_table()
    docs = []
    for text in corpus:
        if objective == "denoise":
            limit = min(config.max_src_len - 2, config.max_tgt_len - 1)
            docs.append(encode_document(text, vocab, limit, table))
        else:
            limit = (config.max_tgt_len if part == "decoder-only"
                     else config.max_src_len)
            ids = encode_text(text, vocab, max_len=limit, pair_table=table).ids
            docs.append(np.array(ids, dtype=np.int64))
    return docs


def pretrain(part: str, corpus: Sequence[str], objective: str,
             config: ModelConfig, cfg: TrainConfig, bpe_vocab: BpeVocab, *,
             run_dir=None, mlm_rate: float = MLM_RATE,
             span_rate: float = SPAN_RATE,
             mean_span_len: float = MEAN_SPAN_LEN) -> tuple[Checkpoint, TrainLog]:
    """Train one model part on a corrupted text corpus.

    Compatible pairs: encoder-only with mlm or lm (lm applies a causal mask
    even though the stack later runs bidirectionally), decoder-only with lm,
    and full with denoise. The emitted checkpoint holds only the pretrained
    part's tensors; the temporary ``head.`` projection used by the mlm and
    encoder lm objectives is excluded.
    """
    if part not in PARTS:
        raise ConfigurationError(f"unknown part {part!r}, expected one of {PARTS}")
    if objective not in OBJECTIVES:
        raise ConfigurationError(
            f"unknown objective {objective!r}, expected one of {OBJECTIVES}")
    if (part, objective) not in _COMPATIBLE:
        raise ConfigurationError(
            f"objective {objective!r} does not apply to part {part!r}")
    if not corpus:
        raise DataError("pretraining corpus is empty")
    vocab_size = len(bpe_vocab)
    if part != "decoder-only" and config.src_vocab != vocab_size:
        raise ConfigurationError(
            f"src_vocab {config.src_vocab} != text vocab size {vocab_size}")
    if part != "encoder-only" and config.tgt_vocab != vocab_size:
        raise ConfigurationError(
            f"tgt_vocab {config.tgt_vocab} != text vocab size {vocab_size}")

    model = init_model(config, cfg.seed)
    docs = _prepare_docs(part, objective, corpus, config, bpe_vocab)

    if part == "encoder-only":
        prefixes = ENCODER_PREFIXES
    elif part == "decoder-only":
        prefixes = DECODER_PREFIXES
    else:
        prefixes = ENCODER_PREFIXES + DECODER_PREFIXES
    trained = {n: t for n, t in model.params.items() if n.startswith(prefixes)}

    head: dict[str, Tensor] = {}
    if part == "encoder-only":
        head_rng = Rng.derived(cfg.seed, 4)
        head = {
            "head.out.weight": Tensor(
                head_rng.normal((config.hidden, vocab_size), std=INIT_STD,
                                dtype=np.float32),
                requires_grad=True),
            "head.out.bias": Tensor(np.zeros(vocab_size, dtype=np.float32),
                                    requires_grad=True),
        }
        trained = {**trained, **head}

    steps_per_epoch = math.ceil(len(docs) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    lr_at(0, total_steps, cfg)  # rejects schedules shorter than the warmup

    state = AdamWState()
    log = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        order = Rng.derived(cfg.seed, 1, epoch).permutation(len(docs))
        for start in range(0, len(docs), cfg.batch_size):
            step += 1
            batch_docs = [docs[k] for k in order[start:start + cfg.batch_size]]
            drop_rng = Rng.derived(cfg.seed, 2, step)

            # Re-roll corruption when a batch has no prediction targets,
            # which mlm on very short documents can produce.
            for attempt in range(100):
                crng = Rng.derived(cfg.seed, 3, step, attempt)
                batch = [_corrupt(objective, d, crng, bpe_vocab,
                                  mlm_rate=mlm_rate, span_rate=span_rate,
                                  mean_span_len=mean_span_len)
                         for d in batch_docs]
                if any((c.target_ids != IGNORE_ID).any() for c in batch):
                    break
            else:
                raise DataError("corruption produced no prediction targets")

            for t in trained.values():
                t.grad = None
            if objective == "mlm":
                loss = _encoder_step(model, head, batch, causal=False,
                                     rng=drop_rng)
            elif part == "encoder-only":
                loss = _encoder_step(model, head, batch, causal=True,
                                     rng=drop_rng)
            elif part == "decoder-only":
                loss = _decoder_step(model, batch, rng=drop_rng)
            else:
                loss = _denoise_step(model, batch, rng=drop_rng)

            value = float(loss.data)
            if not np.isfinite(value):
                log.diverged_step = step
                break
            loss.backward()
            if cfg.grad_clip is not None:
                clip_gradients(trained, cfg.grad_clip)
            adamw_step(trained, state, lr_at(step, total_steps, cfg), cfg)
            log.step_losses.append(value)
        if log.diverged_step is not None:
            break

    ckpt = Checkpoint(
        config=config,
        tensors={n: t.data.copy() for n, t in model.params.items()
                 if n.startswith(prefixes)},
    )
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, run_dir / "pretrained.ttmc")
        (run_dir / "train_log.csv").write_text(log.to_csv(), encoding="utf-8")
    return ckpt, log
