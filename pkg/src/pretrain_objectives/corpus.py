"""Vocabulary construction, encoding and corpus ingestion.

Tokenization is lowercased whitespace splitting. Ids 0..4 are reserved for
the special tokens; everything else is ranked by corpus frequency.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
NUM_SPECIALS = 5
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Vocabulary:
    tokens: list[str]
    id_of: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:NUM_SPECIALS]) != SPECIAL_TOKENS:
            raise CorpusError("vocabulary must start with the five special tokens")
        self.id_of = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.id_of) != len(self.tokens):
            raise CorpusError("duplicate token in vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def specials(self) -> dict[str, int]:
        return {"PAD": PAD, "UNK": UNK, "CLS": CLS, "SEP": SEP, "MASK": MASK}

    @property
    def num_regular(self) -> int:
        return len(self.tokens) - NUM_SPECIALS

    def require_regular(self, minimum: int = 1) -> None:
        if self.num_regular < minimum:
            raise CorpusError(
                f"vocabulary has {self.num_regular} non-special tokens, need >= {minimum}")

    def decode(self, ids: Iterable[int], skip_specials: bool = True) -> list[str]:
        return [self.tokens[i] for i in ids if not (skip_specials and i < NUM_SPECIALS)]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


@dataclass
class TokenSequence:
    ids: np.ndarray
    attention_len: int

    def __len__(self) -> int:
        return len(self.ids)


def build_vocab(texts: Iterable[str], max_size: int, min_freq: int = 1) -> Vocabulary:
    """Frequency-ranked vocabulary with the specials at ids 0..4.

    Ties in frequency keep first-occurrence order, so the result depends only
    on the token stream.
    """
    if max_size <= NUM_SPECIALS:
        raise CorpusError(f"max_size must exceed {NUM_SPECIALS}")
    if min_freq < 1:
        raise CorpusError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    n_texts = 0
    for text in texts:
        n_texts += 1
        for tok in tokenize(text):
            if tok not in first_seen:
                first_seen[tok] = len(first_seen)
            counts[tok] += 1
    if n_texts == 0:
        raise CorpusError("empty corpus")

    for tok in SPECIAL_TOKENS:
        # a literal special string in the text must not shadow the reserved id
        counts.pop(tok, None)
    ranked = sorted((t for t, c in counts.items() if c >= min_freq),
                    key=lambda t: (-counts[t], first_seen[t]))
    return Vocabulary(list(SPECIAL_TOKENS) + ranked[: max_size - NUM_SPECIALS])


def encode(vocab: Vocabulary, text: str, max_len: int) -> TokenSequence:
    if max_len < 3:
        raise CorpusError("max_len must be >= 3")
    body = [vocab.id_of.get(tok, UNK) for tok in tokenize(text)][: max_len - 2]
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[0] = CLS
    ids[1:1 + len(body)] = body
    ids[1 + len(body)] = SEP
    return TokenSequence(ids, len(body) + 2)


def iter_lines(paths: Iterable) -> Iterator[str]:
    """Yield non-blank lines from each file in order.

    Lines that are not valid UTF-8 are skipped and counted.
    """
    skipped = 0
    for path in paths:
        path = Path(path)
        try:
            fh = open(path, "rb")
        except OSError as exc:
            raise CorpusError(f"cannot read corpus file {path}: {exc.strerror}") from exc
        with fh:
            for raw in fh:
                try:
                    line = raw.decode("utf-8")
                except UnicodeDecodeError:
                    skipped += 1
                    continue
                if line.strip():
                    yield line.rstrip("\r\n")
    if skipped:
        logger.warning("skipped %d line(s) with invalid UTF-8", skipped)


def ingest_corpus(paths: Iterable, vocab: Vocabulary, max_len: int) -> Iterator[TokenSequence]:
    for line in iter_lines(paths):
        yield encode(vocab, line, max_len)
