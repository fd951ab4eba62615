"""Nucleus sampling and autoregressive tune generation.

Decoding uses an incremental reimplementation of the decoder forward pass
with cached attention keys and values, so each new token costs one step
rather than a full-sequence pass. Activations run in float64 on top of the
model's stored float32 weights; a test pins the result to the training-time
forward pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .abc_notation import AbcVocab, detect_degeneration, detokenize_abc, parse_headers
from .errors import ConfigurationError, DataError, NumericError
from .nn import _GELU_CUBIC, _INV_SQRT2PI_COEF, Rng
from .seq2seq import Seq2SeqModel, encode
from .text_bpe import BOS_ID, EOS_ID, BpeVocab, decode_text, encode_text

# Matching the training-side layer_norm.
_EPS = 1e-5
# Cumulative-mass comparisons tolerate float error at exact boundaries, so a
# prefix summing to p keeps exactly the textbook nucleus.
_MASS_TOL = 1e-9


@dataclass(frozen=True)
class SamplerConfig:
    """Decoding controls; temperature is fixed at 1."""

    top_p: float = 0.9
    max_len: int = 1024
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigurationError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_len < 1:
            raise ConfigurationError(f"max_len must be >= 1, got {self.max_len}")


@dataclass(frozen=True)
class GenerationResult:
    abc: str
    degenerate: bool
    truncated: bool


def nucleus_filter(probs, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Keep the smallest descending-probability prefix with mass >= p.

    Ties are broken by ascending index. Returns the kept indices (ascending)
    and the full-length renormalized distribution, zero outside the nucleus.
    """
    if not 0.0 < p <= 1.0:
        raise ConfigurationError(f"p must be in (0, 1], got {p}")
    probs = np.asarray(probs, dtype=np.float64)
    total = float(probs.sum())
    if abs(total - 1.0) > 1e-6:
        raise ConfigurationError(f"probabilities sum to {total}, not 1")
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    k = int(np.searchsorted(csum, p - _MASS_TOL)) + 1
    k = min(k, len(probs))
    kept = np.sort(order[:k])
    renorm = np.zeros_like(probs)
    renorm[kept] = probs[kept] / probs[kept].sum()
    return kept, renorm


def sample_token(logits, cfg: SamplerConfig, rng: Rng) -> int:
    """Softmax, nucleus filter, then one categorical draw."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if np.isnan(logits).any() or np.isposinf(logits).any():
        raise NumericError("logits must be finite or -inf")
    if np.isneginf(logits).all():
        raise DataError("cannot sample: all logits are -inf")
    shifted = logits - logits.max()
    exps = np.where(np.isneginf(shifted), 0.0, np.exp(shifted))
    probs = exps / exps.sum()
    kept, renorm = nucleus_filter(probs, cfg.top_p)
    csum = np.cumsum(renorm[kept])
    u = float(rng.uniform(())) * csum[-1]
    j = int(np.searchsorted(csum, u, side="right"))
    return int(kept[min(j, len(kept) - 1)])


def _np_softmax(scores: np.ndarray) -> np.ndarray:
    m = scores.max(axis=-1, keepdims=True)
    finite = np.isfinite(m)
    shifted = np.where(finite, scores - np.where(finite, m, 0.0), -np.inf)
    exps = np.exp(shifted)
    sums = exps.sum(axis=-1, keepdims=True)
    return np.divide(exps, sums, out=np.zeros_like(exps), where=sums > 0)


def _np_layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    centered = x - x.mean()
    inv_std = 1.0 / math.sqrt(float((centered * centered).mean()) + _EPS)
    return centered * inv_std * gamma + beta


def _np_gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_INV_SQRT2PI_COEF * (x + _GELU_CUBIC * x**3)))


class IncrementalDecoder:
    """Single-sequence decoder with cached self- and cross-attention state.

    ``step`` consumes one token id at an absolute position and returns the
    next-token logits. Positions must be fed in order starting at 0.
    """

    def __init__(self, model: Seq2SeqModel, enc_out: np.ndarray,
                 src_pad_mask: np.ndarray):
        cfg = model.config
        self._p = {name: t.data for name, t in model.params.items()}
        self._cfg = cfg
        self._head_dim = cfg.hidden // cfg.heads
        self._scale = 1.0 / math.sqrt(self._head_dim)

        enc = np.asarray(enc_out, dtype=np.float64)
        if enc.ndim != 2 or enc.shape[1] != cfg.hidden:
            raise ConfigurationError(
                f"encoder output shape {enc.shape} does not match hidden {cfg.hidden}"
            )
        pad = np.asarray(src_pad_mask, dtype=bool).reshape(-1)
        self._src_bias = np.where(pad, -np.inf, 0.0)

        self._cross_k = []
        self._cross_v = []
        for i in range(cfg.dec_layers):
            base = f"decoder.layer.{i}.cross_attn"
            self._cross_k.append(self._project(base, "k", enc))
            self._cross_v.append(self._project(base, "v", enc))

        cap = cfg.max_tgt_len
        self._self_k = np.empty((cfg.dec_layers, cfg.heads, cap, self._head_dim))
        self._self_v = np.empty_like(self._self_k)
        self._next_pos = 0

    def _project(self, base: str, part: str, x: np.ndarray) -> np.ndarray:
        y = x @ self._p[f"{base}.{part}.weight"] + self._p[f"{base}.{part}.bias"]
        return y.reshape(len(x), self._cfg.heads, self._head_dim).transpose(1, 0, 2)

    def _heads_of(self, vec: np.ndarray) -> np.ndarray:
        return vec.reshape(self._cfg.heads, self._head_dim)

    def _attend(self, q: np.ndarray, k: np.ndarray, v: np.ndarray,
                bias: np.ndarray | None, base: str) -> np.ndarray:
        scores = np.einsum("hd,htd->ht", q, k) * self._scale
        if bias is not None:
            scores = scores + bias
        ctx = np.einsum("ht,htd->hd", _np_softmax(scores), v)
        return ctx.reshape(-1) @ self._p[f"{base}.o.weight"] + \
            self._p[f"{base}.o.bias"]

    def step(self, token_id: int, pos: int) -> np.ndarray:
        p, cfg = self._p, self._cfg
        if pos != self._next_pos:
            raise ConfigurationError(f"expected position {self._next_pos}, got {pos}")
        if pos >= cfg.max_tgt_len:
            raise DataError(f"position {pos} exceeds max_tgt_len {cfg.max_tgt_len}")
        self._next_pos += 1

        x = p["tgt_embed.weight"][token_id].astype(np.float64) + \
            p["tgt_pos_embed.weight"][pos]
        for i in range(cfg.dec_layers):
            base = f"decoder.layer.{i}"
            n1 = _np_layer_norm(x, p[f"{base}.norm1.gamma"], p[f"{base}.norm1.beta"])
            q = self._heads_of(n1 @ p[f"{base}.self_attn.q.weight"] +
                               p[f"{base}.self_attn.q.bias"])
            self._self_k[i, :, pos] = self._heads_of(
                n1 @ p[f"{base}.self_attn.k.weight"] + p[f"{base}.self_attn.k.bias"])
            self._self_v[i, :, pos] = self._heads_of(
                n1 @ p[f"{base}.self_attn.v.weight"] + p[f"{base}.self_attn.v.bias"])
            x = x + self._attend(q, self._self_k[i, :, :pos + 1],
                                 self._self_v[i, :, :pos + 1], None,
                                 f"{base}.self_attn")

            n2 = _np_layer_norm(x, p[f"{base}.norm2.gamma"], p[f"{base}.norm2.beta"])
            qc = self._heads_of(n2 @ p[f"{base}.cross_attn.q.weight"] +
                                p[f"{base}.cross_attn.q.bias"])
            x = x + self._attend(qc, self._cross_k[i], self._cross_v[i],
                                 self._src_bias, f"{base}.cross_attn")

            n3 = _np_layer_norm(x, p[f"{base}.norm3.gamma"], p[f"{base}.norm3.beta"])
            hidden = _np_gelu(n3 @ p[f"{base}.ffn.in.weight"] +
                              p[f"{base}.ffn.in.bias"])
            x = x + hidden @ p[f"{base}.ffn.out.weight"] + p[f"{base}.ffn.out.bias"]

        x = _np_layer_norm(x, p["decoder.norm.gamma"], p["decoder.norm.beta"])
        return x @ p["out_proj.weight"] + p["out_proj.bias"]


def _target_codec(model: Seq2SeqModel, bpe_vocab: BpeVocab,
                  abc_vocab: AbcVocab | None):
    tgt_vocab = model.config.tgt_vocab
    if abc_vocab is not None and tgt_vocab == len(abc_vocab):
        return "abc", abc_vocab.bos_id, abc_vocab.eos_id
    if tgt_vocab == len(bpe_vocab):
        return "bpe", BOS_ID, EOS_ID
    raise ConfigurationError(
        f"target vocab size {tgt_vocab} matches neither the tune vocabulary "
        f"nor the text vocabulary ({len(bpe_vocab)})"
    )


def generate(model: Seq2SeqModel, text: str, bpe_vocab: BpeVocab,
             abc_vocab: AbcVocab | None, cfg: SamplerConfig,
             rng: Rng | None = None) -> GenerationResult:
    """Sample a tune for one description.

    Decodes from BOS until EOS or the length cap, whichever comes first, and
    reports degeneration (a bar repeated three or more times in a row) and
    truncation alongside the detokenized string. ``rng`` overrides the
    config-seeded stream, for callers that derive one stream per sample.
    """
    if not text:
        raise DataError("description text is empty")
    if model.config.src_vocab != len(bpe_vocab):
        raise ConfigurationError(
            f"model src_vocab {model.config.src_vocab} != text vocab size "
            f"{len(bpe_vocab)}"
        )
    codec, bos, eos = _target_codec(model, bpe_vocab, abc_vocab)

    src = np.array([encode_text(text, bpe_vocab,
                                max_len=model.config.max_src_len).ids])
    src_pad = np.zeros(src.shape, dtype=bool)
    enc_out = encode(model, src, src_pad).data[0]

    if rng is None:
        rng = Rng(cfg.seed)
    decoder = IncrementalDecoder(model, enc_out, src_pad[0])
    cap = min(cfg.max_len, model.config.max_tgt_len - 1)

    out_ids: list[int] = []
    truncated = True
    logits = decoder.step(bos, 0)
    while len(out_ids) < cap:
        token = sample_token(logits, cfg, rng)
        if token == eos:
            truncated = False
            break
        out_ids.append(token)
        if len(out_ids) < cap:
            logits = decoder.step(token, len(out_ids))

    if codec == "abc":
        abc = detokenize_abc(out_ids, abc_vocab)
    else:
        abc = decode_text(out_ids, bpe_vocab)
    report = detect_degeneration(parse_headers(abc).body)
    return GenerationResult(abc=abc, degenerate=report.degenerate,
                            truncated=truncated)
