"""K-means over token embeddings (Lloyd iterations, k-means++ seeding).

Special tokens are never clustered: their assignment is -1 and they appear
in no member list, so they can never be drawn as replacements.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import NUM_SPECIALS, Vocabulary
from .embeddings import EmbeddingTable


class ClusteringError(ValueError):
    pass


@dataclass
class LloydRun:
    labels: np.ndarray
    centroids: np.ndarray
    history: list[float]

    @property
    def inertia(self) -> float:
        return self.history[-1]


@dataclass
class Clustering:
    assignment: np.ndarray  # length |V|, -1 for specials
    centroids: np.ndarray
    restart_inertias: list[float] = field(default_factory=list, compare=False)
    history: list[float] = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        self.members = [np.flatnonzero(self.assignment == c) for c in range(self.n)]
        self.regular_ids = np.flatnonzero(self.assignment >= 0)

    @property
    def n(self) -> int:
        return self.centroids.shape[0]

    @property
    def vocab_size(self) -> int:
        return len(self.assignment)

    def cluster_of(self, token: int) -> int:
        c = int(self.assignment[token])
        if c < 0:
            raise ClusteringError(f"token {token} has no cluster (special token)")
        return c

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{c}\n" for c in self.assignment), encoding="utf-8")

    @classmethod
    def load(cls, path, table: EmbeddingTable | None = None) -> "Clustering":
        """Read an assignment file; centroids are recomputed from `table` when given."""
        lines = Path(path).read_text(encoding="utf-8").split()
        assignment = np.array([int(x) for x in lines], dtype=np.int64)
        n = int(assignment.max()) + 1 if assignment.size else 0
        if table is None:
            centroids = np.zeros((n, 0))
        else:
            if len(table) != len(assignment):
                raise ClusteringError("clustering and embedding table disagree on |V|")
            X = table.vectors.astype(np.float64)
            centroids = np.stack([X[assignment == c].mean(axis=0) for c in range(n)])
        return cls(assignment, centroids)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _inertia(X, labels, C) -> float:
    diff = X - C[labels]
    return float((diff * diff).sum())


def kmeans_plus_plus(X: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    m = len(X)
    centers = [int(rng.integers(m))]
    closest = _sq_dists(X, X[centers])[:, 0]
    for _ in range(1, n):
        total = closest.sum()
        if total <= 0.0:
            # every point coincides with a chosen center; pick any unused one
            unused = np.setdiff1d(np.arange(m), centers)
            nxt = int(unused[rng.integers(len(unused))])
        else:
            cdf = np.cumsum(closest / total)
            nxt = int(min(np.searchsorted(cdf, rng.random(), side="right"), m - 1))
        centers.append(nxt)
        closest = np.minimum(closest, _sq_dists(X, X[[nxt]])[:, 0])
    return X[centers].copy()


def _repair_empty(X, labels, C, n) -> np.ndarray:
    """Give every empty cluster the point farthest from its own centroid."""
    labels = labels.copy()
    sizes = np.bincount(labels, minlength=n)
    empty = np.flatnonzero(sizes == 0)
    if not len(empty):
        return labels
    far = ((X - C[labels]) ** 2).sum(1)
    for e in empty:
        # never strip the last point from a cluster
        movable = sizes[labels] > 1
        cand = np.where(movable, far, -1.0)
        p = int(np.argmax(cand))
        sizes[labels[p]] -= 1
        labels[p] = e
        sizes[e] = 1
        far[p] = 0.0
    return labels


def lloyd(X: np.ndarray, n: int, rng: np.random.Generator, max_iter: int = 300,
          tol: float = 1e-4) -> LloydRun:
    """One k-means run. `history` holds the inertia after each iteration."""
    C = kmeans_plus_plus(X, n, rng)
    labels = np.argmin(_sq_dists(X, C), axis=1)
    history: list[float] = []
    for _ in range(max_iter):
        labels = _repair_empty(X, labels, C, n)
        C = np.stack([X[labels == c].mean(axis=0) for c in range(n)])
        history.append(_inertia(X, labels, C))
        new = np.argmin(_sq_dists(X, C), axis=1)
        if np.array_equal(new, labels):
            break
        small_change = (len(history) > 1
                        and history[-2] - history[-1] <= tol * max(history[-2], 1e-300))
        labels = new
        if small_change and np.bincount(labels, minlength=n).min() > 0:
            # stop with nearest-centroid labels against the current centroids
            history.append(_inertia(X, labels, C))
            break
    else:
        if np.bincount(labels, minlength=n).min() == 0:
            labels = _repair_empty(X, labels, C, n)
        history.append(_inertia(X, labels, C))
    return LloydRun(labels, C, history)


def kmeans(table: EmbeddingTable, vocab: Vocabulary, n: int = 100, restarts: int = 20,
           max_iter: int = 300, tol: float = 1e-4, seed: int = 0,
           workers: int = 1) -> Clustering:
    """Best-of-`restarts` k-means over the non-special rows of `table`.

    The winning restart is the one with the lowest final inertia; ties go to
    the lower restart index, so the result does not depend on `workers`.
    """
    if len(table) != vocab.size:
        raise ClusteringError("embedding table and vocabulary disagree on |V|")
    m = vocab.num_regular
    if n > m:
        raise ClusteringError("more clusters than tokens")
    if n < 1 or restarts < 1:
        raise ClusteringError("need n >= 1 and restarts >= 1")
    X = table.vectors[NUM_SPECIALS:].astype(np.float64)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(restarts)]

    def run(rng):
        return lloyd(X, n, rng, max_iter=max_iter, tol=tol)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(run, rngs))
    else:
        runs = [run(r) for r in rngs]
    inertias = [r.inertia for r in runs]
    best = runs[int(np.argmin(inertias))]
    assignment = np.full(vocab.size, -1, dtype=np.int64)
    assignment[NUM_SPECIALS:] = best.labels
    return Clustering(assignment, best.centroids, restart_inertias=inertias,
                      history=best.history)


def inertia(table: EmbeddingTable, clustering: Clustering) -> float:
    """Sum of squared L2 distances from each clustered token to its centroid."""
    if len(table) != clustering.vocab_size:
        raise ClusteringError("clustering and embedding table disagree on |V|")
    if clustering.centroids.shape[1] != table.dim:
        raise ClusteringError(
            f"dimension mismatch: centroids {clustering.centroids.shape[1]}, table {table.dim}")
    mask = clustering.assignment >= 0
    X = table.vectors[mask].astype(np.float64)
    return _inertia(X, clustering.assignment[mask], clustering.centroids)
