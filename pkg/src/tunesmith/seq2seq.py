"""Encoder-decoder transformer over token ids, with named parameters and a
binary checkpoint format supporting partial (encoder-only) initialization.

Architecture: pre-norm residual blocks, learned positional embeddings, GELU
feed-forward, additive attention masks. The encoder is bidirectional with
padding masked; the decoder self-attention is causal; cross-attention reads
all non-pad encoder positions. No weight tying anywhere, so parameter counts
decompose exactly into encoder + decoder.

Parameter names are stable across runs and versions, e.g.
``encoder.layer.3.attn.q.weight``; partial initialization matches tensors by
name and shape.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CheckpointError, ConfigurationError, DataError
from .nn import Rng, Tensor, add, dropout, embedding, layer_norm, matmul
from .nn import gelu, reshape, scale, softmax_rows, transpose

CHECKPOINT_MAGIC = b"TTMC"
CHECKPOINT_VERSION = 1

ENCODER_PREFIXES = ("src_embed.", "src_pos_embed.", "encoder.")
DECODER_PREFIXES = ("tgt_embed.", "tgt_pos_embed.", "decoder.", "out_proj.")

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    """Shapes of a model; every parameter is determined by these fields."""

    enc_layers: int
    dec_layers: int
    hidden: int
    heads: int
    ffn: int
    src_vocab: int
    tgt_vocab: int
    max_src_len: int
    max_tgt_len: int
    dropout: float = 0.1

    def __post_init__(self):
        counts = (
            self.enc_layers, self.dec_layers, self.hidden, self.heads,
            self.ffn, self.src_vocab, self.tgt_vocab,
            self.max_src_len, self.max_tgt_len,
        )
        if any(c < 1 for c in counts):
            raise ConfigurationError(f"all model dimensions must be >= 1: {self}")
        if self.hidden % self.heads:
            raise ConfigurationError(
                f"hidden {self.hidden} not divisible by heads {self.heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1): {self.dropout}")


def preset(name: str, *, tgt_vocab: int = 164, max_tgt_len: int = 1024) -> ModelConfig:
    """Named configurations of the studied encoder initializations.

    The source-side vocabulary and positions mirror the corresponding
    published checkpoints; the target side defaults to the 164-token ABC
    vocabulary.
    """
    table = {
        "rnd": dict(enc_layers=12, dec_layers=12, hidden=768, heads=12,
                    ffn=3072, src_vocab=7418, max_src_len=1024),
        "bert": dict(enc_layers=12, dec_layers=12, hidden=768, heads=12,
                     ffn=3072, src_vocab=28996, max_src_len=512),
        "gpt2": dict(enc_layers=12, dec_layers=12, hidden=768, heads=12,
                     ffn=3072, src_vocab=50257, max_src_len=1024),
        "bart-base": dict(enc_layers=6, dec_layers=6, hidden=768, heads=16,
                          ffn=3072, src_vocab=50265, max_src_len=1024),
        "bart-large": dict(enc_layers=12, dec_layers=12, hidden=1024, heads=16,
                           ffn=4096, src_vocab=50265, max_src_len=1024),
        "tiny": dict(enc_layers=1, dec_layers=1, hidden=4, heads=1,
                     ffn=8, src_vocab=2, max_src_len=2, tgt_vocab=2,
                     max_tgt_len=2),
    }
    if name not in table:
        raise ConfigurationError(
            f"unknown preset {name!r}; choose from {sorted(table)}"
        )
    fields = dict(table[name])
    fields.setdefault("tgt_vocab", tgt_vocab)
    fields.setdefault("max_tgt_len", max_tgt_len)
    return ModelConfig(**fields)


def _attn_schema(prefix: str, h: int):
    for part in ("q", "k", "v", "o"):
        yield f"{prefix}.{part}.weight", (h, h)
        yield f"{prefix}.{part}.bias", (h,)


def _norm_schema(prefix: str, h: int):
    yield f"{prefix}.gamma", (h,)
    yield f"{prefix}.beta", (h,)


def _ffn_schema(prefix: str, h: int, f: int):
    yield f"{prefix}.in.weight", (h, f)
    yield f"{prefix}.in.bias", (f,)
    yield f"{prefix}.out.weight", (f, h)
    yield f"{prefix}.out.bias", (h,)


def param_schema(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every parameter in the model."""
    h, f = config.hidden, config.ffn
    schema: dict[str, tuple[int, ...]] = {}

    def put(items):
        for name, shape in items:
            schema[name] = shape

    put([("src_embed.weight", (config.src_vocab, h)),
         ("src_pos_embed.weight", (config.max_src_len, h))])
    for i in range(config.enc_layers):
        base = f"encoder.layer.{i}"
        put(_norm_schema(f"{base}.norm1", h))
        put(_attn_schema(f"{base}.attn", h))
        put(_norm_schema(f"{base}.norm2", h))
        put(_ffn_schema(f"{base}.ffn", h, f))
    put([("tgt_embed.weight", (config.tgt_vocab, h)),
         ("tgt_pos_embed.weight", (config.max_tgt_len, h))])
    for i in range(config.dec_layers):
        base = f"decoder.layer.{i}"
        put(_norm_schema(f"{base}.norm1", h))
        put(_attn_schema(f"{base}.self_attn", h))
        put(_norm_schema(f"{base}.norm2", h))
        put(_attn_schema(f"{base}.cross_attn", h))
        put(_norm_schema(f"{base}.norm3", h))
        put(_ffn_schema(f"{base}.ffn", h, f))
    put(_norm_schema("decoder.norm", h))
    put([("out_proj.weight", (h, config.tgt_vocab)),
         ("out_proj.bias", (config.tgt_vocab,))])
    return schema


class Seq2SeqModel:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def init_param(name: str, shape: tuple[int, ...], rng: Rng) -> np.ndarray:
    if name.endswith(".gamma"):
        return np.ones(shape, dtype=np.float32)
    if name.endswith((".bias", ".beta")):
        return np.zeros(shape, dtype=np.float32)
    return rng.normal(shape, std=INIT_STD, dtype=np.float32)


def init_model(config: ModelConfig, seed: int) -> Seq2SeqModel:
    """Fresh model: weights ~ Normal(0, 0.02^2), biases/betas 0, gammas 1."""
    rng = Rng(seed)
    params = {
        name: Tensor(init_param(name, shape, rng), requires_grad=True)
        for name, shape in param_schema(config).items()
    }
    return Seq2SeqModel(config, params)


def count_params(config: ModelConfig, part: str = "all") -> int:
    """Exact parameter count of one part by schema enumeration."""
    if part == "encoder":
        prefixes: tuple[str, ...] = ENCODER_PREFIXES
    elif part == "decoder":
        prefixes = DECODER_PREFIXES
    elif part == "all":
        prefixes = ENCODER_PREFIXES + DECODER_PREFIXES
    else:
        raise ConfigurationError(f"unknown part {part!r}")
    total = 0
    for name, shape in param_schema(config).items():
        if name.startswith(prefixes):
            total += math.prod(shape)
    return total


def _additive_mask(blocked: np.ndarray) -> Tensor:
    data = np.where(blocked, np.float32(-np.inf), np.float32(0.0))
    return Tensor(data.astype(np.float32))


def causal_mask(t: int) -> Tensor:
    """(1, 1, t, t) additive mask hiding positions after the query."""
    return _additive_mask(np.triu(np.ones((1, 1, t, t), dtype=bool), k=1))


def padding_mask(pad: np.ndarray) -> Tensor:
    """(B, 1, 1, S) additive mask hiding padded key positions."""
    pad = np.asarray(pad, dtype=bool)
    return _additive_mask(pad[:, None, None, :])


def _attention(params, prefix, x_q, x_kv, mask, heads, drop, rng):
    b, t_q, h = x_q.shape
    t_k = x_kv.shape[1]
    head_dim = h // heads

    def project(part, x):
        y = add(matmul(x, params[f"{prefix}.{part}.weight"]),
                params[f"{prefix}.{part}.bias"])
        y = reshape(y, (b, y.shape[1], heads, head_dim))
        return transpose(y, (0, 2, 1, 3))

    q = project("q", x_q)
    k = project("k", x_kv)
    v = project("v", x_kv)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    if mask is not None:
        scores = add(scores, mask)
    ctx = matmul(softmax_rows(scores), v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, t_q, h))
    out = add(matmul(ctx, params[f"{prefix}.o.weight"]),
              params[f"{prefix}.o.bias"])
    return dropout(out, drop, rng)


def _ffn(params, prefix, x, drop, rng):
    y = gelu(add(matmul(x, params[f"{prefix}.in.weight"]),
                 params[f"{prefix}.in.bias"]))
    y = add(matmul(y, params[f"{prefix}.out.weight"]),
            params[f"{prefix}.out.bias"])
    return dropout(y, drop, rng)


def _norm(params, prefix, x):
    return layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def _embed(params, stem, ids, drop, rng):
    b, t = ids.shape
    tok = embedding(params[f"{stem}_embed.weight"], ids)
    pos = embedding(params[f"{stem}_pos_embed.weight"], np.arange(t))
    return dropout(add(tok, pos), drop, rng)


def encode(model: Seq2SeqModel, src_ids: np.ndarray, src_pad_mask: np.ndarray,
           *, rng: Rng | None = None, training: bool = False,
           causal: bool = False) -> Tensor:
    """Run the encoder; returns (B, S, hidden).

    ``causal`` restricts self-attention to earlier positions, for language
    model pretraining of a stack that will later serve as the encoder.
    """
    cfg = model.config
    src_ids = np.asarray(src_ids)
    if src_ids.shape[1] > cfg.max_src_len:
        raise DataError(
            f"source length {src_ids.shape[1]} exceeds max_src_len {cfg.max_src_len}"
        )
    drop = cfg.dropout if training else 0.0
    p = model.params
    mask = padding_mask(src_pad_mask)
    if causal:
        mask = Tensor(mask.data + causal_mask(src_ids.shape[1]).data)
    x = _embed(p, "src", src_ids, drop, rng)
    for i in range(cfg.enc_layers):
        base = f"encoder.layer.{i}"
        normed = _norm(p, f"{base}.norm1", x)
        x = add(x, _attention(p, f"{base}.attn", normed, normed, mask,
                              cfg.heads, drop, rng))
        x = add(x, _ffn(p, f"{base}.ffn", _norm(p, f"{base}.norm2", x), drop, rng))
    return x


def decode(model: Seq2SeqModel, enc_out: Tensor, src_pad_mask: np.ndarray,
           tgt_ids: np.ndarray, *, rng: Rng | None = None,
           training: bool = False) -> Tensor:
    """Run the causal decoder over ``tgt_ids``; returns (B, T, tgt_vocab)."""
    cfg = model.config
    tgt_ids = np.asarray(tgt_ids)
    if tgt_ids.shape[1] > cfg.max_tgt_len:
        raise DataError(
            f"target length {tgt_ids.shape[1]} exceeds max_tgt_len {cfg.max_tgt_len}"
        )
    drop = cfg.dropout if training else 0.0
    p = model.params
    self_mask = causal_mask(tgt_ids.shape[1])
    cross_mask = padding_mask(src_pad_mask)
    x = _embed(p, "tgt", tgt_ids, drop, rng)
    for i in range(cfg.dec_layers):
        base = f"decoder.layer.{i}"
        normed = _norm(p, f"{base}.norm1", x)
        x = add(x, _attention(p, f"{base}.self_attn", normed, normed,
                              self_mask, cfg.heads, drop, rng))
        x = add(x, _attention(p, f"{base}.cross_attn",
                              _norm(p, f"{base}.norm2", x), enc_out,
                              cross_mask, cfg.heads, drop, rng))
        x = add(x, _ffn(p, f"{base}.ffn", _norm(p, f"{base}.norm3", x), drop, rng))
    x = _norm(p, "decoder.norm", x)
    return add(matmul(x, p["out_proj.weight"]), p["out_proj.bias"])


def forward_batch(model: Seq2SeqModel, src_ids, src_pad_mask, tgt_ids, *,
                  rng: Rng | None = None, training: bool = False) -> Tensor:
    """Full forward pass on a padded batch; returns logits (B, T, tgt_vocab)."""
    enc_out = encode(model, src_ids, src_pad_mask, rng=rng, training=training)
    return decode(model, enc_out, src_pad_mask, np.asarray(tgt_ids),
                  rng=rng, training=training)


def forward(model: Seq2SeqModel, src_ids, src_pad_mask, tgt_ids, *,
            rng: Rng | None = None, training: bool = False) -> Tensor:
    """Single-sequence forward pass; returns logits (|tgt_ids|, tgt_vocab)."""
    src_ids = np.asarray(src_ids)[None, :]
    src_pad_mask = np.asarray(src_pad_mask, dtype=bool)[None, :]
    tgt_ids = np.asarray(tgt_ids)
    logits = forward_batch(model, src_ids, src_pad_mask, tgt_ids[None, :],
                           rng=rng, training=training)
    return reshape(logits, (tgt_ids.shape[0], model.config.tgt_vocab))


@dataclass
class Checkpoint:
    """A config plus named tensors; may cover only part of a model."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]


def model_checkpoint(model: Seq2SeqModel) -> Checkpoint:
    return Checkpoint(
        config=model.config,
        tensors={name: t.data for name, t in model.params.items()},
    )


def model_from_checkpoint(ckpt: Checkpoint) -> Seq2SeqModel:
    """Rebuild a full model; errors if any parameter is missing."""
    schema = param_schema(ckpt.config)
    missing = [name for name in schema if name not in ckpt.tensors]
    if missing:
        raise CheckpointError(
            f"checkpoint lacks {len(missing)} model tensors, e.g. {missing[:3]}"
        )
    params = {}
    for name, shape in schema.items():
        data = ckpt.tensors[name]
        if tuple(data.shape) != shape:
            raise CheckpointError(
                f"tensor {name} has shape {tuple(data.shape)}, model needs {shape}"
            )
        params[name] = Tensor(np.ascontiguousarray(data), requires_grad=True)
    return Seq2SeqModel(ckpt.config, params)


_DTYPES = {"float32": np.float32, "float64": np.float64}


def save_checkpoint(source: Checkpoint | Seq2SeqModel, path) -> None:
    """Write the binary checkpoint format.

    Layout: magic ``TTMC``, u32 version, u64 header length, UTF-8 JSON
    header (config + tensor directory with shapes, dtypes, and payload
    offsets), raw little-endian payload, u32 CRC32 of the payload.
    """
    ckpt = source if isinstance(source, Checkpoint) else model_checkpoint(source)
    directory = []
    chunks = []
    offset = 0
    for name, data in ckpt.tensors.items():
        data = np.ascontiguousarray(data)
        if data.dtype.name not in _DTYPES:
            raise CheckpointError(f"tensor {name} has unsupported dtype {data.dtype}")
        raw = data.astype(data.dtype.newbyteorder("<"), copy=False).tobytes()
        directory.append({
            "name": name,
            "shape": list(data.shape),
            "dtype": data.dtype.name,
            "offset": offset,
        })
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({
        "config": asdict(ckpt.config),
        "tensors": directory,
        "payload_bytes": len(payload),
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(CHECKPOINT_VERSION.to_bytes(4, "little"))
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        fh.write(payload)
        fh.write(zlib.crc32(payload).to_bytes(4, "little"))


def load_checkpoint(path) -> Checkpoint:
    """Read and verify a checkpoint file."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = int.from_bytes(blob[4:8], "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version}"
        )
    header_len = int.from_bytes(blob[8:16], "little")
    header_end = 16 + header_len
    if len(blob) < header_end + 4:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    payload_bytes = header["payload_bytes"]
    payload_end = header_end + payload_bytes
    if len(blob) < payload_end + 4:
        raise CheckpointError(f"{path}: truncated payload")
    payload = blob[header_end:payload_end]
    stored_crc = int.from_bytes(blob[payload_end:payload_end + 4], "little")
    if zlib.crc32(payload) != stored_crc:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    config = ModelConfig(**header["config"])
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        count = math.prod(shape)
        start = entry["offset"]
        end = start + count * np.dtype(dtype).itemsize
        if start < 0 or end > payload_bytes:
            raise CheckpointError(
                f"{path}: tensor {entry['name']} extends past the payload"
            )
        data = np.frombuffer(payload[start:end], dtype=np.dtype(dtype).newbyteorder("<"))
        tensors[entry["name"]] = data.astype(dtype).reshape(shape)
    return Checkpoint(config=config, tensors=tensors)


def init_encoder_from(model: Seq2SeqModel, ckpt: Checkpoint,
                      strict: bool = True) -> int:
    """Copy matching encoder tensors from ``ckpt`` into ``model``.

    Encoder tensors are those named under ``src_embed``, ``src_pos_embed``,
    or ``encoder``. Strict mode requires every one of the model's encoder
    tensors to be present with a matching shape; lenient mode loads what
    matches and skips the rest. Returns the number of tensors loaded.
    """
    loaded = 0
    skipped: list[str] = []
    for name, param in model.params.items():
        if not name.startswith(ENCODER_PREFIXES):
            continue
        source = ckpt.tensors.get(name)
        if source is None or tuple(source.shape) != param.data.shape:
            skipped.append(name)
            continue
        param.data = np.ascontiguousarray(source).astype(np.float32)
        loaded += 1
    if skipped and strict:
        raise CheckpointError(
            f"strict encoder init: {len(skipped)} unmatched tensors, "
            f"e.g. {skipped[:3]}"
        )
    return loaded
