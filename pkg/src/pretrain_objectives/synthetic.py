"""Synthetic corpus with Zipf-distributed tokens and planted topic structure.

Every sentence is drawn from a single topic: most tokens come from that
topic's private word list, the rest from a shared pool of function words.
Both pools are Zipfian. Tokens of one topic therefore co-occur with each
other and never with another topic's words, which gives word2vec something
to find and makes in-topic substitutions hard to detect.
"""
from __future__ import annotations

from importlib import resources

import numpy as np

BUNDLED_CORPUS = "synthetic_200.txt"


def _zipf(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def generate_corpus(n_sentences: int = 200, n_topics: int = 8, topic_words: int = 24,
                    function_words: int = 16, function_rate: float = 0.25,
                    min_len: int = 12, max_len: int = 28, exponent: float = 1.0,
                    seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    topic_p = _zipf(topic_words, exponent)
    func_p = _zipf(function_words, exponent)
    sentences = []
    for _ in range(n_sentences):
        topic = int(rng.integers(n_topics))
        length = int(rng.integers(min_len, max_len + 1))
        is_func = rng.random(length) < function_rate
        words = []
        for f in is_func:
            if f:
                words.append(f"f{int(rng.choice(function_words, p=func_p)):02d}")
            else:
                words.append(f"t{topic}w{int(rng.choice(topic_words, p=topic_p)):02d}")
        sentences.append(" ".join(words))
    return sentences


def topic_of(token: str) -> int | None:
    """Topic index of a generated token, None for function words."""
    if token.startswith("t") and "w" in token:
        return int(token[1:token.index("w")])
    return None


def bundled_corpus_path():
    return resources.files("pretrain_objectives") / "data" / BUNDLED_CORPUS


def write_bundled(path=None) -> None:
    path = path or bundled_corpus_path()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(generate_corpus()) + "\n")
