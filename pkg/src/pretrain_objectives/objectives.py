"""Token corruption for the MLM, RTS, C-RTS and SLM objectives.

Each ``corrupt_*`` function works on one clean sequence and returns a
``CorruptedRow``; ``corrupt_batch`` stacks rows into a ``CorruptedBatch``.
Only regular (non-special) tokens inside the attention span are eligible,
so CLS, SEP, PAD and UNK are never touched.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .clustering import Clustering
from .corpus import MASK, NUM_SPECIALS, TokenSequence, Vocabulary
from .feedback import COMPLEMENT, ORIENTATIONS, FeedbackMatrix, sample_replacement, transition_matrix

IGNORE = -100


class Objective(str, enum.Enum):
    MLM = "MLM"
    RTS = "RTS"
    CRTS = "CRTS"
    SLM = "SLM"

    @property
    def binary(self) -> bool:
        return self in (Objective.RTS, Objective.CRTS)


class CorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionConfig:
    kind: Objective = Objective.MLM
    selection_rate: float = 0.15
    gamma: float = 2.0
    mlm_bert_split: bool = False
    hardness_orientation: str = COMPLEMENT

    def __post_init__(self):
        object.__setattr__(self, "kind", Objective(self.kind))
        if not 0.0 < self.selection_rate < 1.0:
            raise CorruptionError("selection_rate must be in (0, 1)")
        if self.gamma <= 0:
            raise CorruptionError("gamma must be > 0")
        if self.hardness_orientation not in ORIENTATIONS:
            raise CorruptionError(f"unknown hardness_orientation {self.hardness_orientation!r}")


@dataclass
class CorruptedRow:
    input_ids: np.ndarray
    selected: np.ndarray
    token_labels: np.ndarray | None = None
    binary_labels: np.ndarray | None = None
    events: list[tuple[int, int, int]] = field(default_factory=list)  # (a, b, position)


@dataclass
class CorruptedBatch:
    kind: Objective
    input_ids: np.ndarray
    attention_mask: np.ndarray
    token_labels: np.ndarray | None = None
    binary_labels: np.ndarray | None = None
    events: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))

    @property
    def labels(self) -> np.ndarray:
        return self.binary_labels if self.kind.binary else self.token_labels


def eligible_positions(seq: TokenSequence) -> np.ndarray:
    ids = np.asarray(seq.ids[: seq.attention_len])
    return np.flatnonzero(ids >= NUM_SPECIALS)


def selection_count(n_eligible: int, rate: float) -> int:
    # round half to even, matching Python's round()
    return max(1, int(round(rate * n_eligible)))


def select_positions(seq: TokenSequence, rate: float, rng) -> np.ndarray:
    """Sorted positions to corrupt, drawn uniformly without replacement."""
    elig = eligible_positions(seq)
    if len(elig) == 0:
        raise CorruptionError("nothing to corrupt")
    k = selection_count(len(elig), rate)
    return np.sort(rng.choice(elig, size=k, replace=False))


def random_regular_token(vocab_size: int, exclude: int, rng) -> int:
    """Uniform over regular ids other than `exclude`."""
    n_regular = vocab_size - NUM_SPECIALS
    if n_regular < 2:
        raise CorruptionError("vocabulary needs at least two regular tokens")
    r = NUM_SPECIALS + int(rng.integers(n_regular - 1))
    return r + 1 if r >= exclude else r


def _binary_labels(seq: TokenSequence, selected) -> np.ndarray:
    labels = np.full(len(seq.ids), IGNORE, dtype=np.int64)
    labels[eligible_positions(seq)] = 0
    labels[selected] = 1
    return labels


def _token_labels(seq: TokenSequence, selected) -> np.ndarray:
    labels = np.full(len(seq.ids), IGNORE, dtype=np.int64)
    labels[selected] = seq.ids[selected]
    return labels


def _selection(seq, cfg, rng, selected):
    if selected is None:
        return select_positions(seq, cfg.selection_rate, rng)
    return np.sort(np.asarray(selected, dtype=np.int64))


def corrupt_mlm(seq: TokenSequence, vocab: Vocabulary, cfg: CorruptionConfig, rng,
                selected=None) -> CorruptedRow:
    sel = _selection(seq, cfg, rng, selected)
    ids = seq.ids.copy()
    if cfg.mlm_bert_split:
        for pos in sel:
            u = rng.random()
            if u < 0.8:
                ids[pos] = MASK
            elif u < 0.9:
                ids[pos] = random_regular_token(vocab.size, int(seq.ids[pos]), rng)
    else:
        ids[sel] = MASK
    return CorruptedRow(ids, sel, token_labels=_token_labels(seq, sel))


def _replace_uniform(seq, vocab_size, sel, rng) -> np.ndarray:
    ids = seq.ids.copy()
    for pos in sel:
        ids[pos] = random_regular_token(vocab_size, int(seq.ids[pos]), rng)
    return ids


def corrupt_rts(seq: TokenSequence, vocab: Vocabulary, cfg: CorruptionConfig, rng,
                selected=None) -> CorruptedRow:
    sel = _selection(seq, cfg, rng, selected)
    ids = _replace_uniform(seq, vocab.size, sel, rng)
    return CorruptedRow(ids, sel, binary_labels=_binary_labels(seq, sel))


def corrupt_slm(seq: TokenSequence, vocab: Vocabulary, cfg: CorruptionConfig, rng,
                selected=None) -> CorruptedRow:
    sel = _selection(seq, cfg, rng, selected)
    ids = _replace_uniform(seq, vocab.size, sel, rng)
    return CorruptedRow(ids, sel, token_labels=_token_labels(seq, sel))


def corrupt_crts(seq: TokenSequence, clustering: Clustering, F: FeedbackMatrix,
                 cfg: CorruptionConfig, rng, selected=None,
                 probs: np.ndarray | None = None) -> CorruptedRow:
    """RTS with replacements drawn through the cluster-transition sampler.

    Pass `probs` (a transition matrix of the current F snapshot) to avoid
    recomputing it for every row of a batch.
    """
    if F.n != clustering.n:
        raise CorruptionError("feedback matrix and clustering disagree on n")
    sel = _selection(seq, cfg, rng, selected)
    if probs is None:
        probs = transition_matrix(F, cfg.gamma, cfg.hardness_orientation)
    ids = seq.ids.copy()
    events = []
    for pos in sel:
        w = int(seq.ids[pos])
        if clustering.assignment[w] < 0:
            raise CorruptionError(f"token {w} at position {pos} has no cluster")
        w_prime, a, b = sample_replacement(F, clustering, w, cfg.gamma, rng,
                                           orientation=cfg.hardness_orientation, probs=probs)
        ids[pos] = w_prime
        events.append((a, b, int(pos)))
    return CorruptedRow(ids, sel, binary_labels=_binary_labels(seq, sel), events=events)


def corrupt(seq: TokenSequence, vocab: Vocabulary, cfg: CorruptionConfig, rng,
            clustering: Clustering | None = None, F: FeedbackMatrix | None = None,
            probs=None) -> CorruptedRow:
    if cfg.kind is Objective.MLM:
        return corrupt_mlm(seq, vocab, cfg, rng)
    if cfg.kind is Objective.RTS:
        return corrupt_rts(seq, vocab, cfg, rng)
    if cfg.kind is Objective.SLM:
        return corrupt_slm(seq, vocab, cfg, rng)
    if clustering is None or F is None:
        raise CorruptionError("C-RTS needs a clustering and a feedback matrix")
    return corrupt_crts(seq, clustering, F, cfg, rng, probs=probs)


def corrupt_batch(seqs: list[TokenSequence], vocab: Vocabulary, cfg: CorruptionConfig, rng,
                  clustering: Clustering | None = None, F: FeedbackMatrix | None = None,
                  trim: bool = True) -> CorruptedBatch:
    """Corrupt and stack sequences; `trim` cuts trailing all-PAD columns."""
    probs = None
    if cfg.kind is Objective.CRTS and F is not None:
        probs = transition_matrix(F, cfg.gamma, cfg.hardness_orientation)
    rows = [corrupt(s, vocab, cfg, rng, clustering, F, probs) for s in seqs]
    width = max(s.attention_len for s in seqs) if trim else len(seqs[0].ids)
    input_ids = np.stack([r.input_ids[:width] for r in rows])
    attention_mask = np.stack([np.arange(width) < s.attention_len for s in seqs])
    batch = CorruptedBatch(cfg.kind, input_ids, attention_mask)
    if cfg.kind.binary:
        batch.binary_labels = np.stack([r.binary_labels[:width] for r in rows])
    else:
        batch.token_labels = np.stack([r.token_labels[:width] for r in rows])
    events = [(a, b, i, pos) for i, r in enumerate(rows) for a, b, pos in r.events]
    if events:
        batch.events = np.asarray(events, dtype=np.int64)
    return batch

