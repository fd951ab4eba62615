"""AdamW training with linear warmup/decay, teacher forcing, validation
tracking, and best-checkpoint selection.

The learning rate climbs linearly from 0 to the peak over ``warmup_steps``
update steps (step counting is 1-based), then decays linearly to 0 at the
final step. Weight decay is decoupled and skipped for biases and layer-norm
parameters. Validation loss is the token-mean cross-entropy over non-PAD
target positions; the checkpoint with the lowest validation loss wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import text_bpe
from .abc_notation import AbcVocab, tokenize_abc
from .errors import ConfigurationError, DataError, NumericError
from .nn import Rng, Tensor, cross_entropy, reshape
from .seq2seq import Checkpoint, Seq2SeqModel, forward_batch, save_checkpoint
from .text_bpe import BpeVocab, encode_text

DECAY_EXEMPT_SUFFIXES = (".bias", ".gamma", ".beta")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    warmup_steps: int = 1000
    epochs: int = 20
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    max_src_len: int = 1024
    max_tgt_len: int = 1024
    val_fraction: float = 0.01
    grad_clip: float | None = None
    src_pad: int = text_bpe.PAD_ID
    tgt_pad: int = 0
    tgt_bos: int = 1
    tgt_eos: int = 2

    def __post_init__(self):
        positive = (self.lr, self.warmup_steps, self.epochs, self.batch_size,
                    self.beta1, self.beta2, self.eps, self.max_src_len,
                    self.max_tgt_len)
        if any(v <= 0 for v in positive):
            raise ConfigurationError(f"non-positive training setting: {self}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must be in (0, 1)")


@dataclass
class AdamWState:
    """First and second moments per parameter plus the shared step count."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class TrainLog:
    step_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    diverged_step: int | None = None

    def to_csv(self) -> str:
        lines = ["step,loss"]
        lines += [f"{i + 1},{loss:.6f}" for i, loss in enumerate(self.step_losses)]
        lines.append("epoch,val_loss")
        lines += [f"{i + 1},{loss:.6f}" for i, loss in enumerate(self.val_losses)]
        return "\n".join(lines) + "\n"


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Piecewise-linear schedule: 0 -> peak at warmup -> 0 at total_steps."""
    if total_steps < cfg.warmup_steps:
        raise ConfigurationError(
            f"total steps {total_steps} shorter than warmup {cfg.warmup_steps}"
        )
    if not 0 <= step <= total_steps:
        raise ConfigurationError(f"step {step} outside 0..{total_steps}")
    if step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    return cfg.lr * (total_steps - step) / (total_steps - cfg.warmup_steps)


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float,
               cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Parameters whose names end in ``.bias``, ``.gamma``, or ``.beta`` are
    exempt from weight decay. A missing gradient counts as zero (the decay
    still applies). Non-finite gradients abort with the parameter's name.
    """
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, param in params.items():
        grad = param.grad
        if grad is None:
            grad = np.zeros_like(param.data)
        elif not np.isfinite(grad).all():
            raise NumericError(f"non-finite gradient for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * grad
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * grad * grad
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay and not name.endswith(DECAY_EXEMPT_SUFFIXES):
            update = update + cfg.weight_decay * param.data
        param.data -= (lr * update).astype(param.data.dtype)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for param in params.values():
        if param.grad is not None:
            total += float((param.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for param in params.values():
            if param.grad is not None:
                param.grad *= factor
    return norm


def split_dataset(pairs: list, val_fraction: float, seed: int) -> tuple[list, list]:
    """Deterministic shuffle split; |val| = round(val_fraction * N).

    Python's round uses round-half-even, so N=282,870 at 1% yields 2,829.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ConfigurationError(f"val_fraction must be in (0, 1): {val_fraction}")
    if len(pairs) < 2:
        raise DataError("need at least 2 records to split")
    n_val = round(val_fraction * len(pairs))
    order = Rng(seed).permutation(len(pairs))
    val = [pairs[i] for i in order[:n_val]]
    train = [pairs[i] for i in order[n_val:]]
    return train, val


def encode_pairs(pairs, bpe_vocab: BpeVocab, abc_vocab: AbcVocab | None,
                 cfg: TrainConfig, tgt_codec: str = "abc"):
    """Tokenize text-tune pairs into (src_ids, tgt_ids) arrays.

    Source text is byte-BPE encoded with BOS/EOS and truncated to
    ``max_src_len``. Targets are bare ids without specials (the batcher adds
    BOS/EOS): ABC-vocabulary ids by default, or BPE ids for a model whose
    decoder was pretrained on byte-BPE text.
    """
    pair_table = bpe_vocab.pair_table()
    encoded = []
    for pair in pairs:
        src = np.asarray(
            encode_text(pair.text, bpe_vocab, max_len=cfg.max_src_len,
                        pair_table=pair_table).ids,
            dtype=np.int64,
        )
        if tgt_codec == "abc":
            if abc_vocab is None:
                raise ConfigurationError("abc target codec needs an AbcVocab")
            ids = tokenize_abc(pair.abc, abc_vocab)
        elif tgt_codec == "bpe":
            ids = list(encode_text(pair.abc, bpe_vocab,
                                   pair_table=pair_table).ids[1:-1])
        else:
            raise ConfigurationError(f"unknown target codec {tgt_codec!r}")
        # room for BOS on the input side and EOS on the target side
        ids = ids[: cfg.max_tgt_len - 1]
        encoded.append((src, np.asarray(ids, dtype=np.int64)))
    return encoded


def _assemble_batch(items, cfg: TrainConfig):
    """Pad a list of (src_ids, tgt_ids) into training arrays."""
    b = len(items)
    s_max = max(len(src) for src, _ in items)
    t_max = max(len(tgt) for _, tgt in items) + 1
    src = np.full((b, s_max), cfg.src_pad, dtype=np.int64)
    src_pad = np.ones((b, s_max), dtype=bool)
    tgt_in = np.full((b, t_max), cfg.tgt_pad, dtype=np.int64)
    tgt_out = np.full((b, t_max), cfg.tgt_pad, dtype=np.int64)
    for i, (s, t) in enumerate(items):
        src[i, : len(s)] = s
        src_pad[i, : len(s)] = False
        tgt_in[i, 0] = cfg.tgt_bos
        tgt_in[i, 1 : len(t) + 1] = t
        tgt_out[i, : len(t)] = t
        tgt_out[i, len(t)] = cfg.tgt_eos
    return src, src_pad, tgt_in, tgt_out


def _batch_loss(model: Seq2SeqModel, batch, cfg: TrainConfig, *,
                rng: Rng | None, training: bool):
    src, src_pad, tgt_in, tgt_out = batch
    logits = forward_batch(model, src, src_pad, tgt_in, rng=rng,
                           training=training)
    b, t, v = logits.shape
    flat = reshape(logits, (b * t, v))
    loss = cross_entropy(flat, tgt_out.reshape(-1), ignore_id=cfg.tgt_pad)
    n_kept = int((tgt_out != cfg.tgt_pad).sum())
    return loss, n_kept


def validation_loss(model: Seq2SeqModel, val_data, cfg: TrainConfig) -> float:
    """Token-mean cross-entropy over all non-PAD target positions."""
    total, kept = 0.0, 0
    for start in range(0, len(val_data), cfg.batch_size):
        batch = _assemble_batch(val_data[start : start + cfg.batch_size], cfg)
        loss, n = _batch_loss(model, batch, cfg, rng=None, training=False)
        total += float(loss.data) * n
        kept += n
    return total / kept


def _snapshot(model: Seq2SeqModel) -> Checkpoint:
    return Checkpoint(config=model.config,
                      tensors={n: t.data.copy() for n, t in model.params.items()})


def fit(model: Seq2SeqModel, train_data, cfg: TrainConfig, *, val_data=None,
        run_dir=None) -> tuple[Checkpoint, TrainLog]:
    """Train with teacher forcing; return the lowest-validation checkpoint.

    ``train_data``/``val_data`` are encoded (src_ids, tgt_ids) pairs; when
    ``val_data`` is omitted, ``cfg.val_fraction`` of the training data is
    held out. A non-finite training loss aborts the run and returns the best
    checkpoint seen so far (the current parameters if none was recorded).
    When ``run_dir`` is given, per-epoch checkpoints, a ``best`` marker, and
    the CSV log are written there.
    """
    if val_data is None:
        train_data, val_data = split_dataset(train_data, cfg.val_fraction, cfg.seed)
    if not train_data:
        raise DataError("no training records")
    if not val_data:
        raise DataError("no validation records; raise val_fraction")
    steps_per_epoch = math.ceil(len(train_data) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    lr_at(0, total_steps, cfg)  # validates warmup <= total up front
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    state = AdamWState()
    log = TrainLog()
    best_ckpt: Checkpoint | None = None
    best_val = math.inf
    step = 0
    for epoch in range(cfg.epochs):
        order = Rng.derived(cfg.seed, 1, epoch).permutation(len(train_data))
        for start in range(0, len(order), cfg.batch_size):
            step += 1
            items = [train_data[i] for i in order[start : start + cfg.batch_size]]
            batch = _assemble_batch(items, cfg)
            loss, _ = _batch_loss(model, batch, cfg,
                                  rng=Rng.derived(cfg.seed, 2, step),
                                  training=True)
            value = float(loss.data)
            if not math.isfinite(value):
                log.diverged_step = step
                ckpt = best_ckpt if best_ckpt is not None else _snapshot(model)
                return ckpt, log
            for param in model.params.values():
                param.grad = None
            loss.backward()
            if cfg.grad_clip is not None:
                clip_gradients(model.params, cfg.grad_clip)
            adamw_step(model.params, state, lr_at(step, total_steps, cfg), cfg)
            log.step_losses.append(value)
        val = validation_loss(model, val_data, cfg)
        log.val_losses.append(val)
        if run_dir is not None:
            save_checkpoint(model, run_dir / f"epoch-{epoch + 1:03d}.ttmc")
        if val < best_val:
            best_val = val
            best_ckpt = _snapshot(model)
            log.best_epoch = epoch
    if run_dir is not None:
        (run_dir / "best").write_text(f"epoch-{log.best_epoch + 1:03d}.ttmc\n",
                                      encoding="utf-8")
        (run_dir / "train_log.csv").write_text(log.to_csv(), encoding="utf-8")
    assert best_ckpt is not None
    return best_ckpt, log
