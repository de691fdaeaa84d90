"""Synthetic sequence-classification tasks and CSV text ingestion."""

from __future__ import annotations

import csv
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .tensor import SeededRng

TASK_KINDS = ("parity", "majority", "copy-detect")
PAD_ID = 0


@dataclass
class Dataset:
    tokens: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.tokens.ndim != 2 or self.labels.shape != (self.tokens.shape[0],):
            raise ValueError(f"tokens {self.tokens.shape} and labels {self.labels.shape} are inconsistent")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]


@dataclass
class SyntheticTask:
    kind: str = "parity"
    n_train: int = 2000
    n_eval: int = 500
    seq_len: int = 4
    vocab: int = 32
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def parity_label(seq) -> int:
    """XOR of the low bits of all tokens."""
    return int(np.bitwise_xor.reduce(np.asarray(seq) & 1))


def majority_label(seq) -> int:
    """1 when odd tokens strictly outnumber even tokens."""
    odd = int((np.asarray(seq) & 1).sum())
    return int(odd > len(seq) - odd)


def copy_label(seq) -> int:
    half = len(seq) // 2
    return int(list(seq[:half]) == list(seq[half:]))


LABELERS = {"parity": parity_label, "majority": majority_label, "copy-detect": copy_label}


def generate_task(spec: SyntheticTask) -> tuple[Dataset, Dataset]:
    """Deterministic ``(train, eval)`` split with no sequence shared between them.

    Copy-detect alternates positives (second half repeats the first) and
    non-copy negatives, since random sequences are almost never copies.
    """
    if spec.kind not in LABELERS:
        raise ConfigError(f"unknown task kind {spec.kind!r}; expected one of {', '.join(TASK_KINDS)}")
    if spec.vocab < 2:
        raise ConfigError(f"vocab must be at least 2, got {spec.vocab}")
    if spec.seq_len < 1 or spec.n_train < 1 or spec.n_eval < 0:
        raise ConfigError("seq_len and n_train must be positive, n_eval non-negative")
    if spec.kind == "copy-detect" and spec.seq_len % 2:
        raise ConfigError(f"copy-detect needs an even seq_len, got {spec.seq_len}")

    needed = spec.n_train + spec.n_eval
    space = spec.vocab**spec.seq_len
    if needed > space:
        raise ConfigError(f"{needed} distinct sequences requested from a space of only {space}")
    if spec.kind == "copy-detect" and (needed + 1) // 2 > spec.vocab ** (spec.seq_len // 2):
        raise ConfigError(
            f"copy-detect needs {(needed + 1) // 2} distinct positives but only "
            f"{spec.vocab ** (spec.seq_len // 2)} exist at seq_len={spec.seq_len}, vocab={spec.vocab}"
        )

    rng = SeededRng(spec.seed).child(f"task:{spec.kind}")
    label = LABELERS[spec.kind]
    seen: set[tuple[int, ...]] = set()
    rows: list[tuple[int, ...]] = []
    while len(rows) < needed:
        seq = rng.integers(0, spec.vocab, spec.seq_len)
        if spec.kind == "copy-detect":
            half = spec.seq_len // 2
            if len(rows) % 2 == 0:
                seq[half:] = seq[:half]
            elif copy_label(seq):
                continue
        key = tuple(int(t) for t in seq)
        if key in seen:
            continue
        seen.add(key)
        rows.append(key)

    tokens = np.array(rows, dtype=np.int64)
    labels = np.array([label(r) for r in rows], dtype=np.int64)
    train = Dataset(tokens[: spec.n_train], labels[: spec.n_train])
    held_out = Dataset(tokens[spec.n_train :].reshape(-1, spec.seq_len), labels[spec.n_train :])
    return train, held_out


def hash_token(word: str, vocab: int) -> int:
    """Stable bucket in ``[1, vocab)``; id 0 is reserved for padding."""
    return 1 + zlib.crc32(word.encode("utf-8")) % (vocab - 1)


def load_csv_dataset(path: str | Path, vocab: int, seq_len: int) -> Dataset:
    """Read a ``text,label`` CSV, whitespace-tokenize and hash words into the vocabulary."""
    if vocab < 2:
        raise ConfigError(f"vocab must be at least 2, got {vocab}")
    tokens, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"text", "label"} <= set(reader.fieldnames):
            raise ConfigError(f"{path}: CSV header must contain text,label")
        for lineno, row in enumerate(reader, start=2):
            try:
                labels.append(int(row["label"]))
            except (TypeError, ValueError):
                raise ConfigError(f"{path}: label {row['label']!r} is not an integer", line=lineno) from None
            ids = [hash_token(w, vocab) for w in (row["text"] or "").split()][:seq_len]
            tokens.append(ids + [PAD_ID] * (seq_len - len(ids)))
    return Dataset(np.array(tokens, dtype=np.int64).reshape(-1, seq_len), np.array(labels, dtype=np.int64))
