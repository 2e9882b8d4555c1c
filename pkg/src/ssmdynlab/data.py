"""Batch streams for training: a synthetic selective-copy task and a
byte-level text loader.

Selective-copy vocabulary layout (ids):
    0 = PAD, 1 = NOISE, 2 = END, 3.. = data tokens.

Each sequence is a prefix of NOISE with k data tokens scattered in it,
followed by END and k blank slots.  The target is PAD everywhere except the
k positions starting at the END marker, which must reproduce the data
tokens in order of appearance.  Loss and accuracy are meant to be taken
over the non-PAD target positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COPY_PAD = 0
COPY_NOISE = 1
COPY_END = 2
COPY_DATA_START = 3

TEXT_PAD = 256
TEXT_EOS = 257  # reserved; full windows never need it
TEXT_VOCAB = 258


@dataclass
class BatchStream:
    """A fixed, reproducible sequence of (inputs, targets) id batches."""

    batches: tuple
    vocab_size: int
    seed: int
    pad_id: int = COPY_PAD

    def __iter__(self):
        return iter(self.batches)

    def __len__(self):
        return len(self.batches)

    @property
    def empty(self) -> bool:
        return len(self.batches) == 0


def _group_batches(inputs, targets, batch_size, pad_id):
    """Split (N, T) arrays into full (B, T) batches, padding the ragged tail
    with all-PAD sequences so every batch has the same shape."""
    n, t = inputs.shape
    batches = []
    for start in range(0, n, batch_size):
        bi = inputs[start : start + batch_size]
        bt = targets[start : start + batch_size]
        if bi.shape[0] < batch_size:
            short = batch_size - bi.shape[0]
            fill = np.full((short, t), pad_id, dtype=np.int64)
            bi = np.concatenate([bi, fill])
            bt = np.concatenate([bt, fill])
        batches.append((bi, bt))
    return tuple(batches)


def gen_selective_copy(
    seed: int,
    T: int,
    vocab: int,
    n_sequences: int,
    batch_size: int = 8,
    k: int = 1,
) -> BatchStream:
    if T < 8:
        raise ValueError(f"invalid sizes: need T >= 8, got {T}")
    if vocab < 4:
        raise ValueError(f"invalid sizes: need vocab >= 4, got {vocab}")
    if k < 0 or T < 2 * k + 1:
        raise ValueError(f"invalid sizes: k={k} does not fit in T={T}")
    if n_sequences < 1 or batch_size < 1:
        raise ValueError("invalid sizes: need at least one sequence and batch")

    prefix = T - 1 - k
    rng = np.random.default_rng(seed)
    inputs = np.full((n_sequences, T), COPY_NOISE, dtype=np.int64)
    targets = np.full((n_sequences, T), COPY_PAD, dtype=np.int64)
    inputs[:, prefix] = COPY_END
    inputs[:, prefix + 1 :] = COPY_PAD
    for i in range(n_sequences):
        if k == 0:
            continue
        marks = np.sort(rng.choice(prefix, size=k, replace=False))
        data = rng.integers(COPY_DATA_START, vocab, size=k)
        inputs[i, marks] = data
        targets[i, prefix : prefix + k] = data
    batches = _group_batches(inputs, targets, batch_size, COPY_PAD)
    return BatchStream(batches=batches, vocab_size=vocab, seed=seed, pad_id=COPY_PAD)


def rederive_copy_targets(inputs: np.ndarray) -> np.ndarray:
    """Recompute selective-copy targets from inputs alone.

    Independent of the generator: scans each row for data tokens before the
    END marker and writes them after it.  Used as a labeling oracle.
    """
    inputs = np.asarray(inputs)
    targets = np.full_like(inputs, COPY_PAD)
    for i, row in enumerate(inputs):
        end_pos = int(np.nonzero(row == COPY_END)[0][0])
        data = row[:end_pos][row[:end_pos] >= COPY_DATA_START]
        targets[i, end_pos : end_pos + data.size] = data
    return targets


def load_text_corpus(path, max_seq_len: int, batch_size: int = 8, seed: int = 0) -> BatchStream:
    """Byte-level windows over a local file with next-byte targets.

    A file of N bytes yields floor((N-1)/max_seq_len) full windows; no
    partial window is emitted.  Ids 0..255 are raw bytes; 256 pads ragged
    final batches.
    """
    if max_seq_len < 1:
        raise ValueError(f"invalid sizes: max_seq_len must be >= 1, got {max_seq_len}")
    try:
        with open(path, "rb") as handle:
            raw = handle.read()
    except OSError as exc:
        raise ValueError(f"unreadable path {path!r}: {exc}") from exc
    ids = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    n_windows = max(0, (len(ids) - 1) // max_seq_len) if len(ids) else 0
    if n_windows == 0:
        return BatchStream(batches=(), vocab_size=TEXT_VOCAB, seed=seed, pad_id=TEXT_PAD)
    inputs = np.empty((n_windows, max_seq_len), dtype=np.int64)
    targets = np.empty((n_windows, max_seq_len), dtype=np.int64)
    for i in range(n_windows):
        lo = i * max_seq_len
        inputs[i] = ids[lo : lo + max_seq_len]
        targets[i] = ids[lo + 1 : lo + max_seq_len + 1]
    batches = _group_batches(inputs, targets, batch_size, TEXT_PAD)
    return BatchStream(batches=batches, vocab_size=TEXT_VOCAB, seed=seed, pad_id=TEXT_PAD)
