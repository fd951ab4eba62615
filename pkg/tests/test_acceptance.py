"""Acceptance checks, one test per numbered criterion.

Each test prints a single ``criterion NN PASS/FAIL`` line (run with ``-s`` to
see them) and enforces its own runtime budget where one applies. The two
training probes dominate the wall time; the whole file is a self-contained
gate over tokenization, modelling, training, sampling, and evaluation.
"""
import io
import json
import math
import re
import time
from contextlib import contextmanager, redirect_stdout

import numpy as np

from tunesmith.abc_notation import (
    build_abc_vocab,
    detect_degeneration,
    detokenize_abc,
    extract_meta,
    parse_headers,
    tokenize_abc,
)
from tunesmith.cli import main
from tunesmith.dataset import described_meta, save_pairs, synth_corpus
from tunesmith.metrics import bleu_n, dist_n, eds, levenshtein, welch_t_test
from tunesmith.nn import (
    Rng,
    Tensor,
    add,
    cross_entropy,
    dropout,
    embedding,
    finite_diff_check,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    scale,
    softmax_rows,
    transpose,
    tsum,
)
from tunesmith.sampler import SamplerConfig, generate, nucleus_filter, sample_token
from tunesmith.seq2seq import (
    ENCODER_PREFIXES,
    ModelConfig,
    count_params,
    forward,
    init_model,
    param_schema,
    preset,
)
from tunesmith.text_bpe import decode_text, encode_text, train_bpe
from tunesmith.trainer import TrainConfig, encode_pairs, fit, lr_at, split_dataset


@contextmanager
def criterion(num: int, summary: str):
    try:
        yield
    except BaseException:
        print(f"criterion {num:2d} FAIL  {summary}")
        raise
    print(f"criterion {num:2d} PASS  {summary}")


def _dp_oracle(a: str, b: str) -> int:
    # row-by-row quadratic DP, independent of the shipped implementation
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[-1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def test_criterion_01_edit_distance_oracle():
    with criterion(1, "levenshtein and eds match an independent DP oracle"):
        start = time.perf_counter()
        rng = np.random.default_rng(101)
        letters = np.array(list("abcdefgh"))
        for _ in range(1000):
            a = "".join(rng.choice(letters, size=int(rng.integers(0, 65))))
            b = "".join(rng.choice(letters, size=int(rng.integers(0, 65))))
            d = levenshtein(a, b)
            assert d == _dp_oracle(a, b), (a, b)
            if a or b:
                want = (1.0 - d / max(len(a), len(b))) * 100.0
                assert abs(eds(a, b) - want) < 1e-9
        assert levenshtein("kitten", "sitting") == 3
        assert abs(eds("kitten", "sitting") - 100.0 * (1.0 - 3.0 / 7.0)) < 1e-9
        assert time.perf_counter() - start < 10.0


def test_criterion_02_bleu_dist_hand_cases():
    with criterion(2, "BLEU and DIST reproduce hand-computed values"):
        start = time.perf_counter()
        cand, ref = list("abcd"), list("abcde")
        assert abs(bleu_n(cand, ref, 2) - 100.0 * math.exp(1.0 - 5.0 / 4.0)) < 1e-6
        assert bleu_n(list("xyz"), list("abc"), 2) == 0.0
        assert dist_n(list("abc"), 1) == 100.0
        assert abs(dist_n(list("aaaa"), 1) - 25.0) < 1e-6
        assert abs(dist_n(list("abab"), 2) - 200.0 / 3.0) < 1e-6
        rng = np.random.default_rng(102)
        for _ in range(100):
            n = int(rng.integers(1, 5))
            x = [int(v) for v in rng.integers(0, 6, size=int(rng.integers(n, 20)))]
            assert bleu_n(x, x, n) == 100.0
        assert time.perf_counter() - start < 5.0


def test_criterion_03_welch_t_test():
    with criterion(3, "Welch t-test value, identity, and swap antisymmetry"):
        res = welch_t_test([2, 4, 6, 8], [1, 3, 5, 7])
        assert abs(res.t - 0.5477) < 1e-3
        same = welch_t_test([2, 4, 6, 8], [2, 4, 6, 8])
        assert same.t == 0.0 and same.p == 1.0
        swap = welch_t_test([1, 3, 5, 7], [2, 4, 6, 8])
        assert abs(res.t + swap.t) < 1e-10
        assert abs(res.p - swap.p) < 1e-10


def test_criterion_04_gradient_checks():
    with criterion(4, "every op and a full model loss pass finite differences"):
        start = time.perf_counter()
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)

            def r(*shape):
                return Tensor(rng.standard_normal(shape))

            x, y = r(3, 4), r(3, 4)
            b, bias = r(4, 2), r(4)
            gamma, beta = r(4), r(4)
            table, w_embed = r(3, 4), r(5, 4)
            ids = rng.integers(0, 3, size=5)
            targets = rng.integers(0, 4, size=3)
            targets[0] = -1
            checks = [
                finite_diff_check(lambda t: tsum(matmul(t, b)), x),
                finite_diff_check(lambda t: tsum(matmul(x, t)), b),
                finite_diff_check(lambda t: tsum(add(t, bias)), x),
                finite_diff_check(lambda t: tsum(mul(t, y)), x),
                finite_diff_check(
                    lambda t: tsum(transpose(reshape(scale(t, 1.7), (4, 3)), (1, 0))), x
                ),
                finite_diff_check(lambda t: tsum(mul(softmax_rows(t), y)), x),
                finite_diff_check(lambda t: tsum(mul(layer_norm(t, gamma, beta), y)), x),
                finite_diff_check(lambda t: tsum(mul(layer_norm(x, t, beta), y)), gamma),
                finite_diff_check(lambda t: tsum(mul(layer_norm(x, gamma, t), y)), beta),
                finite_diff_check(lambda t: tsum(mul(gelu(t), y)), x),
                finite_diff_check(lambda t: tsum(mul(embedding(t, ids), w_embed)), table),
                finite_diff_check(lambda t: cross_entropy(t, targets, ignore_id=-1), x),
                finite_diff_check(
                    lambda t: tsum(mul(dropout(t, 0.25, Rng(seed)), y)), x
                ),
            ]
            worst = max(worst, *checks)
        assert worst < 1e-5

        config = ModelConfig(enc_layers=1, dec_layers=1, hidden=8, heads=2, ffn=12,
                             src_vocab=5, tgt_vocab=6, max_src_len=4, max_tgt_len=5,
                             dropout=0.0)
        names = ("out_proj.bias", "decoder.layer.0.cross_attn.q.weight",
                 "encoder.layer.0.norm1.gamma", "src_embed.weight")
        worst_model = 0.0
        for seed in range(100):
            nprng = np.random.default_rng(seed)
            model = init_model(config, seed=seed)
            for tensor in model.params.values():
                tensor.data = tensor.data.astype(np.float64)
            src = nprng.integers(0, 5, size=3)
            pad = np.array([False, False, seed % 2 == 1])
            tgt_in = nprng.integers(0, 6, size=4)
            tgt_out = nprng.integers(0, 6, size=4)
            tgt_out[0] = -1
            name = names[seed % len(names)]

            def loss_with(t):
                original = model.params[name]
                model.params[name] = t
                try:
                    logits = forward(model, src, pad, tgt_in)
                    return cross_entropy(logits, tgt_out, ignore_id=-1)
                finally:
                    model.params[name] = original

            err = finite_diff_check(loss_with, Tensor(model.params[name].data.copy()))
            worst_model = max(worst_model, err)
        assert worst_model < 1e-5
        assert time.perf_counter() - start < 60.0


def test_criterion_05_parameter_counts():
    with criterion(5, "preset encoder sizes near 91M/109M, tiny enumerated exactly"):
        start = time.perf_counter()
        assert abs(count_params(preset("rnd"), "encoder") / 91e6 - 1.0) < 0.03
        assert abs(count_params(preset("bert"), "encoder") / 109e6 - 1.0) < 0.03
        attn = 4 * (4 * 4 + 4)
        norm = 2 * 4
        ffn = (4 * 8 + 8) + (8 * 4 + 4)
        enc = (2 * 4) + (2 * 4) + norm + attn + norm + ffn
        dec = (2 * 4) + (2 * 4) + (norm + attn + norm + attn + norm + ffn) \
            + norm + (4 * 2 + 2)
        tiny = preset("tiny")
        assert count_params(tiny, "encoder") == enc
        assert count_params(tiny, "decoder") == dec
        assert count_params(tiny, "all") == enc + dec
        assert time.perf_counter() - start < 1.0


def test_criterion_06_lr_schedule():
    with criterion(6, "warmup peak exact, zero endpoints, piecewise linear"):
        cfg = TrainConfig(lr=1e-4, warmup_steps=1000)
        total = 5000
        assert lr_at(1000, total, cfg) == 1e-4
        assert lr_at(0, total, cfg) == 0.0
        assert lr_at(total, total, cfg) == 0.0
        ramp = [lr_at(s, total, cfg) for s in range(0, 1001, 25)]
        decay = [lr_at(s, total, cfg) for s in range(1000, 5001, 100)]
        for grid in (ramp, decay):
            second = np.diff(np.diff(np.asarray(grid)))
            assert np.abs(second).max() < 1e-16
        assert ramp[0] < ramp[1] < ramp[-1]
        assert decay[0] > decay[1] > decay[-1]


def test_criterion_07_tokenizer_round_trips():
    with criterion(7, "10k ABC round-trips byte-exact; BPE identity on 1k docs"):
        vocab = build_abc_vocab()
        assert len(vocab) == 164
        pairs = synth_corpus(10_000, seed=3)
        for pair in pairs:
            assert detokenize_abc(tokenize_abc(pair.abc, vocab), vocab) == pair.abc
        docs = [pair.text for pair in pairs[:1000]]
        bpe = train_bpe(docs, min_freq=2)
        table = bpe.pair_table()
        for doc in docs:
            encoded = encode_text(doc, bpe, pair_table=table)
            assert not encoded.truncated
            assert decode_text(encoded.ids, bpe) == doc


def test_criterion_08_sampling_statistics():
    with criterion(8, "nucleus exclusion, 3-sigma frequencies, monotonicity"):
        logits = np.log(np.array([0.6, 0.3, 0.1]))
        cfg = SamplerConfig(top_p=0.9)
        rng = Rng(17)
        n = 100_000
        counts = np.zeros(3, dtype=int)
        for _ in range(n):
            counts[sample_token(logits, cfg, rng)] += 1
        assert counts[2] == 0
        for idx, want in ((0, 2.0 / 3.0), (1, 1.0 / 3.0)):
            sigma = math.sqrt(want * (1.0 - want) / n)
            assert abs(counts[idx] / n - want) < 3.0 * sigma
        for seed in range(200):
            gen = np.random.default_rng(seed)
            probs = gen.dirichlet(np.ones(int(gen.integers(2, 9))))
            lo, hi = sorted(gen.uniform(0.05, 1.0, size=2))
            kept_lo, _ = nucleus_filter(probs, float(lo))
            kept_hi, _ = nucleus_filter(probs, float(hi))
            assert set(kept_lo.tolist()) <= set(kept_hi.tolist())


def test_criterion_09_overfit_probe():
    with criterion(9, "32-pair overfit: loss < 0.1 in 500 steps, 90% exact tunes"):
        start = time.perf_counter()
        abc_vocab = build_abc_vocab()
        pairs, seen = [], set()
        for pair in synth_corpus(400, seed=7, format_mix=0.0):
            if pair.text in seen or len(tokenize_abc(pair.abc, abc_vocab)) > 100:
                continue
            seen.add(pair.text)
            pairs.append(pair)
            if len(pairs) == 32:
                break
        assert len(pairs) == 32
        bpe = train_bpe([pair.text for pair in pairs], min_freq=2)
        config = ModelConfig(enc_layers=2, dec_layers=2, hidden=128, heads=4,
                             ffn=512, src_vocab=len(bpe), tgt_vocab=len(abc_vocab),
                             max_src_len=48, max_tgt_len=112, dropout=0.0)
        cfg = TrainConfig(lr=1e-3, warmup_steps=25, epochs=125, batch_size=8,
                          weight_decay=0.01, seed=11, max_src_len=48,
                          max_tgt_len=112, grad_clip=1.0)
        data = encode_pairs(pairs, bpe, abc_vocab, cfg)
        model = init_model(config, seed=5)
        _, log = fit(model, data, cfg, val_data=data[:4])
        assert len(log.step_losses) == 500
        assert min(log.step_losses) < 0.1
        probe = pairs[0]
        hits = sum(
            generate(model, probe.text, bpe, abc_vocab,
                     SamplerConfig(top_p=0.5, max_len=111, seed=seed)).abc == probe.abc
            for seed in range(100)
        )
        assert hits >= 90, hits
        assert time.perf_counter() - start < 300.0


def test_criterion_10_meta_following_probe():
    with criterion(10, "key and meter followed for 90% of held-out descriptions"):
        start = time.perf_counter()
        abc_vocab = build_abc_vocab()
        train_pairs = synth_corpus(5000, seed=21, format_mix=1.0)
        held_out = synth_corpus(200, seed=22, format_mix=1.0)
        bpe = train_bpe([pair.text for pair in train_pairs], min_freq=2)
        config = ModelConfig(enc_layers=2, dec_layers=2, hidden=128, heads=4,
                             ffn=512, src_vocab=len(bpe), tgt_vocab=len(abc_vocab),
                             max_src_len=32, max_tgt_len=96, dropout=0.0)
        cfg = TrainConfig(lr=5e-4, warmup_steps=150, epochs=8, batch_size=16,
                          weight_decay=0.01, seed=23, max_src_len=32,
                          max_tgt_len=96, grad_clip=1.0)
        data = encode_pairs(train_pairs, bpe, abc_vocab, cfg)
        model = init_model(config, seed=19)
        fit(model, data, cfg, val_data=data[:64])
        hits = 0
        for i, pair in enumerate(held_out):
            out = generate(model, pair.text, bpe, abc_vocab,
                           SamplerConfig(top_p=0.5, max_len=95, seed=0),
                           rng=Rng.derived(31, i))
            want = described_meta(pair.text)
            got = extract_meta(parse_headers(out.abc))
            hits += got.key == want.key and got.meter == want.meter
        assert hits >= 180, hits
        assert time.perf_counter() - start < 1800.0


def test_criterion_11_pretrain_pipeline(tmp_path):
    with criterion(11, "pretrain -> warm/cold fine-tune -> report with t-test"):
        texts = [pair.text for pair in synth_corpus(400, seed=41)]
        (tmp_path / "corpus.txt").write_text("\n".join(texts) + "\n", encoding="utf-8")
        save_pairs(synth_corpus(48, seed=42), tmp_path / "pairs.jsonl")
        save_pairs(synth_corpus(12, seed=43), tmp_path / "eval.jsonl")
        (tmp_path / "tiny.cfg").write_text(
            "enc_layers = 1\ndec_layers = 1\nhidden = 32\nheads = 2\nffn = 64\n"
            "max_src_len = 48\nmax_tgt_len = 112\ndropout = 0.0\n"
            "lr = 1e-3\nwarmup_steps = 5\nepochs = 3\nbatch_size = 8\n"
            "val_fraction = 0.1\nseed = 7\n",
            encoding="utf-8",
        )

        def run(*argv) -> str:
            buf = io.StringIO()
            with redirect_stdout(buf):
                code = main(list(argv))
            assert code == 0, (argv, buf.getvalue())
            return buf.getvalue()

        run("train-bpe", "--corpus", str(tmp_path / "corpus.txt"),
            "--min-freq", "2", "--out", str(tmp_path / "bpe.vocab"))
        run("pretrain", "--objective", "mlm", "--part", "encoder-only",
            "--corpus", str(tmp_path / "corpus.txt"),
            "--bpe", str(tmp_path / "bpe.vocab"),
            "--config", str(tmp_path / "tiny.cfg"), "--out", str(tmp_path / "pre"))
        assert (tmp_path / "pre" / "pretrained.ttmc").exists()

        warm_out = run(
            "train", "--data", str(tmp_path / "pairs.jsonl"),
            "--bpe", str(tmp_path / "bpe.vocab"),
            "--config", str(tmp_path / "tiny.cfg"),
            "--init-encoder", str(tmp_path / "pre" / "pretrained.ttmc"),
            "--out", str(tmp_path / "warm"),
        )
        loaded = int(re.search(r"initialized (\d+) encoder tensors", warm_out).group(1))
        schema = param_schema(ModelConfig(
            enc_layers=1, dec_layers=1, hidden=32, heads=2, ffn=64,
            src_vocab=2, tgt_vocab=2, max_src_len=48, max_tgt_len=112,
        ))
        assert loaded == sum(name.startswith(ENCODER_PREFIXES) for name in schema)

        run("train", "--data", str(tmp_path / "pairs.jsonl"),
            "--bpe", str(tmp_path / "bpe.vocab"),
            "--config", str(tmp_path / "tiny.cfg"), "--out", str(tmp_path / "cold"))

        run("evaluate", "--ckpt", str(tmp_path / "warm"),
            "--data", str(tmp_path / "eval.jsonl"),
            "--bpe", str(tmp_path / "bpe.vocab"), "--top-p", "0.9", "--seed", "5",
            "--max-len", "100", "--out", str(tmp_path / "warm.json"))
        cold_out = run(
            "evaluate", "--ckpt", str(tmp_path / "cold"),
            "--data", str(tmp_path / "eval.jsonl"),
            "--bpe", str(tmp_path / "bpe.vocab"), "--top-p", "0.9", "--seed", "5",
            "--max-len", "100", "--out", str(tmp_path / "cold.json"),
            "--baseline", str(tmp_path / "warm.json"),
        )
        assert "t=" in cold_out and "p=" in cold_out

        warm = json.loads((tmp_path / "warm.json").read_text(encoding="utf-8"))
        cold = json.loads((tmp_path / "cold.json").read_text(encoding="utf-8"))
        names = {"BLEU-2", "BLEU-3", "BLEU-4", "DIST-1", "DIST-2", "DIST-3", "EDS"}
        for report in (warm, cold):
            assert set(report["metrics"]) == names
            assert report["n"] == 12
            assert len(report["metrics"]["EDS"]["values"]) == 12
        ttest = cold["ttests"]["EDS"]
        assert math.isfinite(ttest["t"]) and 0.0 <= ttest["p"] <= 1.0
        # which initialization wins is reported, never asserted
        print(f"        warm EDS {warm['metrics']['EDS']['mean']:.2f} "
              f"vs cold {cold['metrics']['EDS']['mean']:.2f} "
              f"(p={ttest['p']:.3f}, direction informational)")


def test_criterion_12_degeneration_detector():
    with criterion(12, "repeated rest bars flagged, distinct 16-bar tune clean"):
        assert detect_degeneration("z8|z8|z8|z8", min_repeats=3).degenerate
        notes = "CDEFGABcdefgabzC"
        bars = [f"{notes[i]}2{notes[(i + 3) % 16]}2" for i in range(16)]
        assert len(set(bars)) == 16
        body = "|".join(bars) + "|"
        assert not detect_degeneration(body, min_repeats=3).degenerate


def test_criterion_13_split_rounding():
    with criterion(13, "1% of 282,870 records splits to 2,829, stable and exact"):
        records = list(range(282_870))
        train, val = split_dataset(records, 0.01, seed=0)
        assert len(val) == round(0.01 * 282_870)
        assert len(val) in (2828, 2829)
        assert len(train) + len(val) == len(records)
        assert not set(train) & set(val)
        assert sorted(train + val) == records
        train_again, val_again = split_dataset(records, 0.01, seed=0)
        assert train_again == train and val_again == val
        _, val_other = split_dataset(records, 0.01, seed=1)
        assert val_other != val
