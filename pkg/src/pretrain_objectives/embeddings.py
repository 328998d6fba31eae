"""Skip-gram word2vec with negative sampling, used only to cluster tokens."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .corpus import NUM_SPECIALS, TokenSequence, Vocabulary


class EmbeddingError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    vectors: np.ndarray
    epoch_losses: list[float] = field(default_factory=list, compare=False)

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise EmbeddingError("embedding table must be 2-D")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def save(self, path) -> None:
        v = np.ascontiguousarray(self.vectors, dtype="<f4")
        with open(path, "wb") as fh:
            fh.write(struct.pack("<II", v.shape[0], v.shape[1]))
            fh.write(v.tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        data = Path(path).read_bytes()
        if len(data) < 8:
            raise EmbeddingError(f"{path}: truncated embedding header")
        rows, dim = struct.unpack("<II", data[:8])
        if len(data) != 8 + 4 * rows * dim:
            raise EmbeddingError(f"{path}: expected {rows}x{dim} floats")
        vecs = np.frombuffer(data, dtype="<f4", offset=8).reshape(rows, dim)
        return cls(vecs.astype(np.float32))


def cosine(table: EmbeddingTable, i: int, j: int) -> float:
    n = len(table)
    if not (0 <= i < n and 0 <= j < n):
        raise EmbeddingError(f"token id out of range [0, {n})")
    a = table.vectors[i].astype(np.float64)
    b = table.vectors[j].astype(np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise EmbeddingError("degenerate embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -30.0, 30.0)))


def _token_streams(corpus: Iterable[TokenSequence]) -> list[np.ndarray]:
    streams = []
    for seq in corpus:
        ids = np.asarray(seq.ids[: seq.attention_len])
        streams.append(ids[ids >= NUM_SPECIALS])
    return streams


def initial_vectors(vocab_size: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return ((rng.random((vocab_size, dim)) - 0.5) / dim).astype(np.float32)


def train_word2vec(corpus: Iterable[TokenSequence], vocab: Vocabulary, window: int = 2,
                   dim: int = 300, epochs: int = 5, lr: float = 0.025, negatives: int = 5,
                   seed: int = 0) -> EmbeddingTable:
    """Train SGNS input vectors over the non-special tokens of `corpus`.

    The learning rate decays linearly from `lr` towards zero over all
    (center, context) pairs. Negatives are drawn from the unigram
    distribution raised to 0.75; there is no frequent-token subsampling.
    Rows of special tokens keep their initial values.
    """
    if window < 1:
        raise EmbeddingError("window must be >= 1")
    if dim < 2:
        raise EmbeddingError("dim must be >= 2")
    if vocab.num_regular < 1:
        raise EmbeddingError("vocabulary has no non-special tokens")
    streams = _token_streams(corpus)
    if not streams:
        raise EmbeddingError("empty corpus")

    rng = np.random.default_rng([seed, 1])
    V = vocab.size
    w_in = initial_vectors(V, dim, seed)
    w_out = np.zeros((V, dim), dtype=np.float32)

    # one update per token occurrence: its 2*window neighbours plus negatives
    occurrences = []
    for ids in streams:
        n = len(ids)
        for pos in range(n):
            ctx = np.concatenate([ids[max(0, pos - window):pos], ids[pos + 1:pos + 1 + window]])
            if len(ctx):
                occurrences.append((int(ids[pos]), ctx))
    if not occurrences:
        raise EmbeddingError("corpus too small for window")
    n_pairs = sum(len(ctx) for _, ctx in occurrences)

    counts = np.bincount(np.concatenate(streams), minlength=V).astype(np.float64)
    noise = counts ** 0.75
    noise[:NUM_SPECIALS] = 0.0
    noise_cdf = np.cumsum(noise / noise.sum())
    noise_cdf[-1] = 1.0

    total = max(epochs * n_pairs, 1)
    done = 0
    table = EmbeddingTable(w_in)
    for _ in range(epochs):
        loss_sum = 0.0
        for c, ctx in occurrences:
            k = len(ctx)
            alpha = np.float32(max(lr * (1.0 - done / total), lr * 1e-4))
            done += k
            neg = np.searchsorted(noise_cdf, rng.random(k * negatives), side="right")
            targets = np.concatenate([ctx, neg])
            labels = np.zeros(len(targets), dtype=np.float32)
            labels[:k] = 1.0
            u = w_out[targets]
            v = w_in[c].copy()
            score = _sigmoid(u @ v)
            loss_sum += float(-np.log(np.maximum(score[:k], 1e-12)).sum()
                              - np.log(np.maximum(1.0 - score[k:], 1e-12)).sum())
            g_score = (labels - score).astype(np.float32) * alpha
            w_in[c] += g_score @ u
            np.add.at(w_out, targets, np.outer(g_score, v))
        table.epoch_losses.append(loss_sum / n_pairs)
    if not np.all(np.isfinite(w_in)):
        raise EmbeddingError("word2vec diverged")
    return table
