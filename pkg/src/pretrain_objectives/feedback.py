"""Cluster-transition feedback for C-RTS.

``F[a, b]`` counts detected minus undetected replacements of a token from
cluster ``a`` by a token from cluster ``b``. A row of F is turned into a
distribution over target clusters by min-max normalization followed by a
gamma-softmax.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .clustering import Clustering, ClusteringError

COMPLEMENT = "complement"
DIRECT = "direct"
ORIENTATIONS = (COMPLEMENT, DIRECT)
MAX_RESAMPLE = 8


class FeedbackError(ValueError):
    pass


class FeedbackMatrix:
    def __init__(self, n: int, counts: np.ndarray | None = None):
        if n < 1:
            raise FeedbackError("n must be >= 1")
        self.n = n
        if counts is None:
            counts = np.zeros((n, n), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (n, n):
            raise FeedbackError(f"counts must be {n}x{n}")
        self.counts = counts

    def copy(self) -> "FeedbackMatrix":
        return FeedbackMatrix(self.n, self.counts.copy())

    def __eq__(self, other):
        return isinstance(other, FeedbackMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"FeedbackMatrix(n={self.n}, total_abs={int(np.abs(self.counts).sum())})"

    def update(self, events: Iterable[tuple[int, int, bool]]) -> "FeedbackMatrix":
        """Apply (a, b, detected) events in place; +1 when detected, -1 otherwise."""
        ev = np.asarray(list(events), dtype=np.int64).reshape(-1, 3)
        if len(ev) == 0:
            return self
        a, b, det = ev[:, 0], ev[:, 1], ev[:, 2]
        # validate the whole batch first so a bad event leaves F untouched
        if a.min() < 0 or b.min() < 0 or a.max() >= self.n or b.max() >= self.n:
            raise FeedbackError(f"cluster id out of range [0, {self.n})")
        np.add.at(self.counts, (a, b), np.where(det != 0, 1, -1))
        return self

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", self.n))
            fh.write(np.ascontiguousarray(self.counts, dtype="<i8").tobytes())

    @classmethod
    def load(cls, path) -> "FeedbackMatrix":
        data = Path(path).read_bytes()
        if len(data) < 4:
            raise FeedbackError(f"{path}: truncated header")
        (n,) = struct.unpack("<I", data[:4])
        if len(data) != 4 + 8 * n * n:
            raise FeedbackError(f"{path}: expected {n}x{n} int64 counts")
        counts = np.frombuffer(data, dtype="<i8", offset=4).reshape(n, n)
        return cls(n, counts.astype(np.int64))


def update(F: FeedbackMatrix, events) -> FeedbackMatrix:
    return F.update(events)


def _row_probs(row: np.ndarray, gamma: float, orientation: str) -> np.ndarray:
    lo, hi = row.min(), row.max()
    if hi == lo:
        return np.full(len(row), 1.0 / len(row))
    m = (row - lo) / (hi - lo)
    x = 1.0 - m if orientation == COMPLEMENT else m
    z = gamma * x
    e = np.exp(z - z.max())
    return e / e.sum()


def transition_probs(F: FeedbackMatrix, a: int, gamma: float = 2.0,
                     orientation: str = COMPLEMENT) -> np.ndarray:
    """Distribution over target clusters for a token from cluster `a`.

    With the default complement orientation the mass concentrates on the
    clusters whose replacements the discriminator missed most often.
    """
    if not 0 <= a < F.n:
        raise FeedbackError(f"cluster id {a} out of range [0, {F.n})")
    if gamma <= 0:
        raise FeedbackError("gamma must be > 0")
    if orientation not in ORIENTATIONS:
        raise FeedbackError(f"unknown hardness orientation {orientation!r}")
    return _row_probs(F.counts[a].astype(np.float64), gamma, orientation)


def transition_matrix(F: FeedbackMatrix, gamma: float = 2.0,
                      orientation: str = COMPLEMENT) -> np.ndarray:
    return np.stack([transition_probs(F, a, gamma, orientation) for a in range(F.n)])


def sample_replacement(F: FeedbackMatrix, clustering: Clustering, w: int, gamma: float,
                       rng, orientation: str = COMPLEMENT,
                       probs: np.ndarray | None = None) -> tuple[int, int, int]:
    """Draw a replacement for token `w`; returns (w_prime, a, b).

    `probs` may carry a precomputed transition matrix for the current F
    snapshot. If the drawn token equals `w` it is redrawn inside cluster b
    a few times, then any other clustered token is taken uniformly.
    """
    try:
        a = clustering.cluster_of(w)
    except (ClusteringError, IndexError) as exc:
        raise FeedbackError(f"token {w} has no cluster assignment") from exc
    if F.n != clustering.n:
        raise FeedbackError("feedback matrix and clustering disagree on n")
    p = probs[a] if probs is not None else transition_probs(F, a, gamma, orientation)
    cdf = np.cumsum(p)
    b = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), F.n - 1))
    members = clustering.members[b]
    for _ in range(1 + MAX_RESAMPLE):
        w_prime = int(members[rng.integers(len(members))])
        if w_prime != w:
            return w_prime, a, b
    pool = clustering.regular_ids
    if len(pool) < 2:
        raise FeedbackError("need at least two clustered tokens to replace")
    k = int(rng.integers(len(pool) - 1))
    w_prime = int(pool[k] if pool[k] < w else pool[k + 1])
    return w_prime, a, clustering.cluster_of(w_prime)
