"""Command-line entry point.

Subcommands cover the full workflow: synthesize data, learn a text
tokenizer, pretrain, fine-tune, generate, and score. Exit codes: 0 success,
1 usage or configuration problem, 2 data problem, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .abc_notation import build_abc_vocab
from .dataset import filter_pairs, load_pairs, save_pairs, synth_corpus
from .errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    NumericError,
    TokenizationError,
    TunesmithError,
    UsageError,
)
from .metrics import evaluate_pairs, report_from_json, welch_t_test
from .nn import Rng
from .pretrain import MEAN_SPAN_LEN, MLM_RATE, SPAN_RATE, pretrain
from .sampler import SamplerConfig, generate
from .seq2seq import (
    ModelConfig,
    count_params,
    init_encoder_from,
    init_model,
    load_checkpoint,
    model_from_checkpoint,
)
from .text_bpe import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    load_bpe_vocab,
    save_bpe_vocab,
    train_bpe,
)
from .trainer import TrainConfig, encode_pairs, fit

logger = logging.getLogger("tunesmith")

_MODEL_KEYS = {
    "enc_layers": int, "dec_layers": int, "hidden": int, "heads": int,
    "ffn": int, "max_src_len": int, "max_tgt_len": int, "dropout": float,
}
_TRAIN_KEYS = {
    "lr": float, "warmup_steps": int, "epochs": int, "batch_size": int,
    "beta1": float, "beta2": float, "eps": float, "weight_decay": float,
    "seed": int, "val_fraction": float, "grad_clip": float,
}
_EXTRA_KEYS = {
    "tgt_codec": str, "mlm_rate": float, "span_rate": float,
    "mean_span_len": float,
}

_MODEL_DEFAULTS = {
    "enc_layers": 2, "dec_layers": 2, "hidden": 128, "heads": 4, "ffn": 512,
    "max_src_len": 256, "max_tgt_len": 256, "dropout": 0.1,
}
_EXTRA_DEFAULTS = {
    "tgt_codec": "abc", "mlm_rate": MLM_RATE, "span_rate": SPAN_RATE,
    "mean_span_len": MEAN_SPAN_LEN,
}


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment anywhere."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce(key: str, raw: str, kind):
    if kind is float and key == "grad_clip" and raw.lower() == "none":
        return None
    try:
        return kind(raw)
    except ValueError:
        raise ConfigurationError(
            f"config key {key}: cannot parse {raw!r} as {kind.__name__}"
        ) from None


def _load_settings(config_path, overrides: dict) -> dict:
    """Merge defaults, the config file, and non-None flag overrides."""
    settings: dict = {**_MODEL_DEFAULTS, **_EXTRA_DEFAULTS}
    for key, field in (("lr", "lr"), ("warmup_steps", "warmup_steps"),
                       ("epochs", "epochs"), ("batch_size", "batch_size"),
                       ("beta1", "beta1"), ("beta2", "beta2"), ("eps", "eps"),
                       ("weight_decay", "weight_decay"), ("seed", "seed"),
                       ("val_fraction", "val_fraction"),
                       ("grad_clip", "grad_clip")):
        settings[key] = getattr(TrainConfig, field)
    known = {**_MODEL_KEYS, **_TRAIN_KEYS, **_EXTRA_KEYS}
    if config_path is not None:
        for key, raw in parse_config_file(config_path).items():
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            settings[key] = _coerce(key, raw, known[key])
    for key, value in overrides.items():
        if value is not None:
            settings[key] = value
    return settings


def _model_config(settings: dict, src_vocab: int, tgt_vocab: int) -> ModelConfig:
    return ModelConfig(
        enc_layers=settings["enc_layers"], dec_layers=settings["dec_layers"],
        hidden=settings["hidden"], heads=settings["heads"],
        ffn=settings["ffn"], src_vocab=src_vocab, tgt_vocab=tgt_vocab,
        max_src_len=settings["max_src_len"],
        max_tgt_len=settings["max_tgt_len"], dropout=settings["dropout"],
    )


def _train_config(settings: dict, *, tgt_codec: str) -> TrainConfig:
    if tgt_codec == "bpe":
        pads = {"tgt_pad": PAD_ID, "tgt_bos": BOS_ID, "tgt_eos": EOS_ID}
    else:
        pads = {"tgt_pad": 0, "tgt_bos": 1, "tgt_eos": 2}
    return TrainConfig(
        lr=settings["lr"], warmup_steps=settings["warmup_steps"],
        epochs=settings["epochs"], batch_size=settings["batch_size"],
        beta1=settings["beta1"], beta2=settings["beta2"],
        eps=settings["eps"], weight_decay=settings["weight_decay"],
        seed=settings["seed"], max_src_len=settings["max_src_len"],
        max_tgt_len=settings["max_tgt_len"],
        val_fraction=settings["val_fraction"],
        grad_clip=settings["grad_clip"], src_pad=PAD_ID, **pads,
    )


def _write_effective_config(out_dir: Path, settings: dict, notes: dict) -> None:
    lines = [f"# {key}: {value}" for key, value in notes.items()]
    for key in sorted(settings):
        value = settings[key]
        lines.append(f"{key} = {'none' if value is None else value}")
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _resolve_checkpoint(path) -> Path:
    """Accept a checkpoint file or a run directory with a ``best`` marker."""
    path = Path(path)
    if path.is_dir():
        marker = path / "best"
        if not marker.exists():
            raise CheckpointError(f"run directory {path} has no best marker")
        name = marker.read_text(encoding="utf-8").strip()
        return path / name
    return path


def _load_model(path):
    return model_from_checkpoint(load_checkpoint(_resolve_checkpoint(path)))


def _read_corpus_lines(path) -> list[str]:
    """One document per line; JSONL pair files contribute their text field."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    docs = []
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.lstrip().startswith("{"):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                obj = None
            if isinstance(obj, dict) and "text" in obj:
                docs.append(str(obj["text"]))
                continue
        docs.append(line)
    if not docs:
        raise DataError(f"corpus {path} contains no documents")
    return docs


def _read_sample_lines(path) -> list[str]:
    """One sample per line, JSON-encoded strings so tunes can hold newlines."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read samples {path}: {exc}") from exc
    samples = []
    for line in text.splitlines():
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            obj = line
        samples.append(obj if isinstance(obj, str) else line)
    if not samples:
        raise DataError(f"sample file {path} is empty")
    return samples


def _cmd_synth_data(args) -> int:
    pairs = synth_corpus(args.n, args.seed, format_mix=args.format_mix)
    save_pairs(pairs, args.out)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def _cmd_train_bpe(args) -> int:
    docs = _read_corpus_lines(args.corpus)
    vocab = train_bpe(docs, min_freq=args.min_freq)
    save_bpe_vocab(vocab, args.out)
    print(f"learned {len(vocab.merges)} merges "
          f"({len(vocab)} tokens) from {len(docs)} documents -> {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    overrides = {"seed": args.seed, "epochs": args.epochs,
                 "batch_size": args.batch_size, "lr": args.lr}
    settings = _load_settings(args.config, overrides)
    bpe = load_bpe_vocab(args.bpe)
    corpus = _read_corpus_lines(args.corpus)
    config = _model_config(settings, src_vocab=len(bpe), tgt_vocab=len(bpe))
    cfg = _train_config(settings, tgt_codec="bpe")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt, log = pretrain(args.part, corpus, args.objective, config, cfg, bpe,
                         run_dir=out_dir, mlm_rate=settings["mlm_rate"],
                         span_rate=settings["span_rate"],
                         mean_span_len=settings["mean_span_len"])
    _write_effective_config(out_dir, settings, {
        "command": "pretrain", "part": args.part, "objective": args.objective,
        "corpus": args.corpus, "bpe": args.bpe,
    })
    if log.diverged_step is not None:
        print(f"diverged at step {log.diverged_step}; checkpoint kept")
    final = log.step_losses[-1] if log.step_losses else float("nan")
    print(f"pretrained {args.part} with {args.objective} for "
          f"{len(log.step_losses)} steps (final loss {final:.4f}) "
          f"-> {out_dir / 'pretrained.ttmc'}")
    return 0


def _cmd_train(args) -> int:
    overrides = {"seed": args.seed, "epochs": args.epochs,
                 "batch_size": args.batch_size, "lr": args.lr,
                 "val_fraction": args.val_fraction}
    settings = _load_settings(args.config, overrides)
    bpe = load_bpe_vocab(args.bpe)
    abc = build_abc_vocab()

    pairs = load_pairs(args.data)
    result = filter_pairs(pairs, abc)
    if result.rejected:
        logger.warning("filtered out %d of %d pairs", len(result.rejected),
                       len(pairs))
    if not result.kept:
        raise DataError(f"no usable pairs in {args.data}")

    if args.init_full is not None:
        ckpt = load_checkpoint(_resolve_checkpoint(args.init_full))
        model = model_from_checkpoint(ckpt)
        config = ckpt.config
        if config.tgt_vocab == len(bpe):
            tgt_codec = "bpe"
        elif config.tgt_vocab == len(abc):
            tgt_codec = "abc"
        else:
            raise ConfigurationError(
                f"checkpoint tgt_vocab {config.tgt_vocab} matches neither "
                f"vocabulary")
        settings.update(max_src_len=config.max_src_len,
                        max_tgt_len=config.max_tgt_len, tgt_codec=tgt_codec)
    else:
        tgt_codec = settings["tgt_codec"]
        if tgt_codec not in ("abc", "bpe"):
            raise ConfigurationError(f"tgt_codec must be abc or bpe, "
                                     f"got {tgt_codec!r}")
        tgt_vocab = len(abc) if tgt_codec == "abc" else len(bpe)
        config = _model_config(settings, src_vocab=len(bpe),
                               tgt_vocab=tgt_vocab)
        model = init_model(config, settings["seed"])
        if args.init_encoder is not None:
            enc_ckpt = load_checkpoint(_resolve_checkpoint(args.init_encoder))
            loaded = init_encoder_from(model, enc_ckpt)
            print(f"initialized {loaded} encoder tensors from "
                  f"{args.init_encoder}")

    cfg = _train_config(settings, tgt_codec=tgt_codec)
    data = encode_pairs(result.kept, bpe, abc, cfg, tgt_codec=tgt_codec)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    best, log = fit(model, data, cfg, run_dir=out_dir)
    _write_effective_config(out_dir, settings, {
        "command": "train", "data": args.data, "bpe": args.bpe,
        "init_encoder": args.init_encoder, "init_full": args.init_full,
    })
    if log.diverged_step is not None:
        print(f"diverged at step {log.diverged_step}; "
              f"best checkpoint so far kept")
    best_val = (log.val_losses[log.best_epoch]
                if 0 <= log.best_epoch < len(log.val_losses) else float("nan"))
    print(f"trained {len(log.step_losses)} steps; best epoch "
          f"{log.best_epoch + 1} (val loss {best_val:.4f}) -> {out_dir}")
    return 0


def _cmd_generate(args) -> int:
    model = _load_model(args.ckpt)
    bpe = load_bpe_vocab(args.bpe)
    if args.text is not None:
        text = args.text
    else:
        text = sys.stdin.read().strip()
    cfg = SamplerConfig(top_p=args.top_p, max_len=args.max_len, seed=args.seed)
    result = generate(model, text, bpe, build_abc_vocab(), cfg)
    print(result.abc)
    if result.degenerate:
        print("warning: degenerate output (repeated bars)", file=sys.stderr)
    if result.truncated:
        print("warning: output truncated at max-len", file=sys.stderr)
    return 0


def _cmd_evaluate(args) -> int:
    model = _load_model(args.ckpt)
    bpe = load_bpe_vocab(args.bpe)
    abc = build_abc_vocab()
    pairs = load_pairs(args.data)
    if not pairs:
        raise DataError(f"no pairs in {args.data}")
    cfg = SamplerConfig(top_p=args.top_p, max_len=args.max_len, seed=args.seed)
    candidates = []
    for i, pair in enumerate(pairs):
        sample = generate(model, pair.text, bpe, abc, cfg,
                          rng=Rng.derived(args.seed, i))
        candidates.append(sample.abc)
    report = evaluate_pairs(candidates, [p.abc for p in pairs], abc)

    ttests = None
    if args.baseline is not None:
        base = report_from_json(Path(args.baseline).read_text(encoding="utf-8"))
        test = welch_t_test(report.values["EDS"], base.values["EDS"])
        ttests = {"EDS": test}
        print(f"EDS {report.mean('EDS'):.2f} vs baseline "
              f"{base.mean('EDS'):.2f}: "
              f"t={test.t:.4f} df={test.df:.2f} p={test.p:.4f}")
    print(report.format_table())
    if args.out is not None:
        Path(args.out).write_text(report.to_json(ttests=ttests),
                                  encoding="utf-8")
        sidecar = Path(str(args.out) + ".config")
        sidecar.write_text(
            "".join(f"{k} = {v}\n" for k, v in (
                ("ckpt", args.ckpt), ("data", args.data), ("bpe", args.bpe),
                ("top_p", args.top_p), ("seed", args.seed),
                ("max_len", args.max_len), ("baseline", args.baseline),
            )),
            encoding="utf-8",
        )
    return 0


def _cmd_metrics(args) -> int:
    candidates = _read_sample_lines(args.candidates)
    references = _read_sample_lines(args.references)
    report = evaluate_pairs(candidates, references, build_abc_vocab())
    print(report.format_table())
    if args.out is not None:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
    return 0


def _cmd_inspect_ckpt(args) -> int:
    ckpt = load_checkpoint(_resolve_checkpoint(args.path))
    c = ckpt.config
    print(f"config: enc_layers={c.enc_layers} dec_layers={c.dec_layers} "
          f"hidden={c.hidden} heads={c.heads} ffn={c.ffn} "
          f"src_vocab={c.src_vocab} tgt_vocab={c.tgt_vocab} "
          f"max_src_len={c.max_src_len} max_tgt_len={c.max_tgt_len} "
          f"dropout={c.dropout}")
    for part in ("encoder", "decoder", "all"):
        print(f"{part} parameters: {count_params(c, part):,}")
    stored = sum(int(t.size) for t in ckpt.tensors.values())
    print(f"tensors stored: {len(ckpt.tensors)} ({stored:,} parameters)")
    for name in sorted(ckpt.tensors):
        tensor = ckpt.tensors[name]
        shape = "x".join(str(d) for d in tensor.shape)
        print(f"  {name} {shape} {tensor.dtype}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tunesmith",
        description="Text-conditioned ABC tune generation toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="synthesize text/tune pairs")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--format-mix", type=float, default=0.5,
                   help="fraction of list-format descriptions")
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train-bpe", help="learn a byte-pair text vocabulary")
    p.add_argument("--corpus", required=True,
                   help="text file (one document per line) or pairs JSONL")
    p.add_argument("--min-freq", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_bpe)

    p = sub.add_parser("pretrain", help="pretrain on a text corpus")
    p.add_argument("--objective", choices=("mlm", "lm", "denoise"),
                   required=True)
    p.add_argument("--part",
                   choices=("encoder-only", "decoder-only", "full"),
                   required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--bpe", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune on text/tune pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--bpe", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--init-encoder", help="load encoder tensors from here")
    p.add_argument("--init-full", help="load the whole model from here")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--val-fraction", type=float)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="sample one tune for a description")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bpe", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--text")
    group.add_argument("--stdin", action="store_true")
    p.add_argument("--top-p", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=1024)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("evaluate",
                       help="generate for every pair and score the results")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bpe", required=True)
    p.add_argument("--top-p", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=1024)
    p.add_argument("--out", help="write the report JSON here")
    p.add_argument("--baseline",
                   help="earlier report JSON to compare EDS against")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("metrics", help="score candidate tunes against references")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("inspect-ckpt", help="describe a checkpoint file")
    p.add_argument("path")
    p.set_defaults(func=_cmd_inspect_ckpt)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, TokenizationError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TunesmithError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
