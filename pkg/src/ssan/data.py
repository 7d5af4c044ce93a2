"""Corpus files, vocabularies, word2vec embeddings and padded batches.

Corpus file format: UTF-8, one example per line, ``label<TAB>space separated tokens``.
The class-index order comes from a sidecar file with one label name per line.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import (
    DimMismatch,
    EmptyCorpus,
    EmptySentence,
    MalformedLine,
    ParseError,
    UnknownLabel,
)
from .model import Batch

logger = logging.getLogger(__name__)

PAD_ID = 0
OOV_ID = 1
OOV_INIT = 0.25


class Example(NamedTuple):
    tokens: tuple[str, ...]
    label: int


@dataclass
class Corpus:
    split: str
    examples: list[Example]
    label_names: list[str]

    def __len__(self):
        return len(self.examples)

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    def statistics(self) -> dict:
        lengths = [len(ex.tokens) for ex in self.examples]
        return {
            "split": self.split,
            "size": len(self.examples),
            "classes": self.n_classes,
            "avg_len": float(np.mean(lengths)) if lengths else 0.0,
            "max_len": max(lengths, default=0),
        }


def read_labels(path) -> list[str]:
    names = [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines()]
    return [n for n in names if n]


def load_corpus(path, labels, split: str = "train", format: str = "tsv") -> Corpus:
    """Parse a corpus file; ``labels`` is a label list or the path of a labels file."""
    if format != "tsv":
        raise ValueError(f"unsupported corpus format {format!r}")
    label_names = list(labels) if isinstance(labels, (list, tuple)) else read_labels(labels)
    lookup = {name: i for i, name in enumerate(label_names)}
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if "\t" not in line:
                raise ParseError(lineno, "expected 'label<TAB>tokens'")
            label, text = line.split("\t", 1)
            if label not in lookup:
                raise UnknownLabel(lineno, f"label {label!r} not in {label_names}")
            tokens = tuple(t for t in text.split(" ") if t)
            if not tokens:
                raise EmptySentence(lineno, "no tokens")
            examples.append(Example(tokens, lookup[label]))
    return Corpus(split, examples, label_names)


def save_corpus(corpus: Corpus, path, labels_path=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus.examples:
            fh.write(f"{corpus.label_names[ex.label]}\t{' '.join(ex.tokens)}\n")
    if labels_path is not None:
        Path(labels_path).write_text("".join(f"{n}\n" for n in corpus.label_names), encoding="utf-8")


@dataclass
class Vocabulary:
    """Token ids: 0 is padding, 1 is the out-of-vocabulary row, words start at 2."""

    tokens: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.index = {tok: i + 2 for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, corpora: Iterable[Corpus]) -> "Vocabulary":
        seen: dict[str, None] = {}
        for corpus in corpora:
            for ex in corpus.examples:
                for tok in ex.tokens:
                    seen.setdefault(tok, None)
        return cls(list(seen))

    def __len__(self):
        return len(self.tokens) + 2

    def __contains__(self, token):
        return token in self.index

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.index.get(t, OOV_ID) for t in tokens], dtype=np.int64)


@dataclass
class EncodedCorpus:
    ids: list[np.ndarray]
    labels: np.ndarray
    n_classes: int

    def __len__(self):
        return len(self.ids)


def encode(corpus: Corpus, vocab: Vocabulary) -> EncodedCorpus:
    return EncodedCorpus([vocab.encode(ex.tokens) for ex in corpus.examples],
                         np.array([ex.label for ex in corpus.examples], dtype=np.int64),
                         corpus.n_classes)


@dataclass
class EmbeddingMatrix:
    matrix: np.ndarray
    coverage: float
    trainable: bool = True


def _is_header(parts: list[str]) -> bool:
    return len(parts) == 2 and all(p.isdigit() for p in parts)


def load_embeddings(path, vocab: Vocabulary, dim: int | None = None,
                    rng: np.random.Generator | int | None = None,
                    trainable: bool = True) -> EmbeddingMatrix:
    """Read word2vec text vectors for ``vocab``; uncovered rows are drawn from U(-0.25, 0.25).

    Row 0 (padding) is all zero. ``dim`` defaults to the header or first vector.
    """
    rng = np.random.default_rng(rng)
    found: dict[int, np.ndarray] = {}
    seen_vector = False
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.rstrip().split(" ")
            if not raw.strip():
                continue
            if lineno == 1 and _is_header(parts):
                file_dim = int(parts[1])
                if dim is not None and file_dim != dim:
                    raise DimMismatch(f"file has dimension {file_dim}, expected {dim}")
                dim = file_dim
                continue
            word, values = parts[0], parts[1:]
            first_vector, seen_vector = not seen_vector, True
            if dim is None:
                dim = len(values)
            if len(values) != dim:
                if first_vector:
                    raise DimMismatch(f"file has dimension {len(values)}, expected {dim}")
                raise MalformedLine(lineno, f"expected {dim} values, got {len(values)}")
            idx = vocab.index.get(word)
            if idx is None or idx in found:
                continue
            try:
                found[idx] = np.array(values, dtype=np.float64)
            except ValueError:
                raise MalformedLine(lineno, "non-numeric vector component") from None
    if dim is None:
        raise DimMismatch("cannot infer embedding dimension from an empty file")
    matrix = rng.uniform(-OOV_INIT, OOV_INIT, size=(len(vocab), dim))
    matrix[PAD_ID] = 0.0
    for idx, vec in found.items():
        matrix[idx] = vec
    words = len(vocab.tokens)
    coverage = len(found) / words if words else 0.0
    logger.info("embedding coverage %.1f%% of %d words", 100 * coverage, words)
    return EmbeddingMatrix(matrix, coverage, trainable)


def pad_batch(seqs: Sequence[np.ndarray], labels: Sequence[int]) -> Batch:
    n_max = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n_max), PAD_ID, dtype=np.int64)
    for row, s in enumerate(seqs):
        ids[row, : len(s)] = s
    return Batch(ids, ids != PAD_ID, np.asarray(labels, dtype=np.int64))


def make_batch(corpus: EncodedCorpus, size: int, rng: np.random.Generator) -> Batch:
    """``size`` examples drawn uniformly with replacement, padded to the longest."""
    if len(corpus) == 0:
        raise EmptyCorpus("cannot sample from an empty corpus")
    if size < 1:
        raise ValueError(f"batch size must be >= 1, got {size}")
    picks = rng.integers(0, len(corpus), size=size)
    return pad_batch([corpus.ids[i] for i in picks], corpus.labels[picks])


def epoch_batches(corpus: EncodedCorpus, size: int) -> list[Batch]:
    """Sequential, unshuffled slices; the trailing partial batch is kept."""
    if len(corpus) == 0:
        raise EmptyCorpus("cannot batch an empty corpus")
    if size < 1:
        raise ValueError(f"batch size must be >= 1, got {size}")
    return [pad_batch(corpus.ids[i:i + size], corpus.labels[i:i + size])
            for i in range(0, len(corpus), size)]


def n_epoch_batches(n_examples: int, size: int, epochs: int = 1) -> int:
    return epochs * -(-n_examples // size)


def marker_corpus(n: int = 200, rng: np.random.Generator | int | None = 0,
                  vocab_size: int = 20, min_len: int = 3, max_len: int = 12,
                  marker: str = "MARK", split: str = "train") -> Corpus:
    """Two-class toy corpus: label 1 iff the sentence contains ``marker``.

    Classes are balanced; filler words are ``w0 .. w{vocab_size-1}``.
    """
    rng = np.random.default_rng(rng)
    examples = []
    for i in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        words = [f"w{j}" for j in rng.integers(0, vocab_size, size=length)]
        label = i % 2
        if label:
            words[int(rng.integers(0, length))] = marker
        examples.append(Example(tuple(words), label))
    order = rng.permutation(n)
    return Corpus(split, [examples[i] for i in order], ["absent", "present"])
