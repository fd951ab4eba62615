"""Text-to-ABC-music toolkit.

End-to-end pieces for training and evaluating text-conditional tune
generators: ABC and BPE tokenizers, a numpy-backed seq2seq transformer with
hand-written backward passes, pretraining objectives (MLM / causal LM /
denoising), an AdamW trainer with linear warmup, nucleus sampling, and the
BLEU / DIST / edit-distance-similarity evaluation suite.
"""

__version__ = "0.1.0"
