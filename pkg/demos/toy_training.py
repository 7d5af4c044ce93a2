"""
Training SSAN on a marker-detection corpus
==========================================

Label 1 means the sentence contains the token MARK. A one-layer SSAN with
relative positions learns it in a couple of thousand batches.
"""

from ssan.data import Vocabulary, encode, marker_corpus
from ssan.model import ssan_spec
from ssan.train import TrainConfig, evaluate, run_protocol

train = marker_corpus(200, rng=0)
held_out = marker_corpus(200, rng=100, split="held-out")
print(train.statistics())
print(" ".join(train.examples[0].tokens), "->", train.label_names[train.examples[0].label])

vocab = Vocabulary.build([train])
enc_train, enc_held = encode(train, vocab), encode(held_out, vocab)

spec = ssan_spec(1, d_model=8, n_classes=2, position="rpr", clip_k=10, vocab_size=len(vocab))
config = TrainConfig(total_batches=2000, eval_interval=200, learning_rate=0.1, dropout_rate=0.1, runs=3)

# select checkpoints on dev accuracy and score the held-out split
report = run_protocol(spec, config, enc_train, enc_train, enc_held)
print(report.to_tsv(), end="")
print("best run, train accuracy:", evaluate(report.best_params, spec, enc_train))
