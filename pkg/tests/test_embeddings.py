import struct

import numpy as np
import pytest

from pretrain_objectives.corpus import NUM_SPECIALS, build_vocab, encode
from pretrain_objectives.embeddings import (EmbeddingError, EmbeddingTable, cosine, initial_vectors,
                                            train_word2vec)


def cooccurrence_corpus(n=150, seed=0):
    """'aa' and 'bb' always appear side by side; 'cc' only among its own filler."""
    rng = np.random.default_rng(seed)
    left = [f"x{i}" for i in range(8)]
    right = [f"y{i}" for i in range(8)]
    texts = []
    for i in range(n):
        if i % 2:
            texts.append(" ".join(list(rng.choice(left, 3)) + ["aa", "bb"] + list(rng.choice(left, 3))))
        else:
            texts.append(" ".join(list(rng.choice(right, 3)) + ["cc"] + list(rng.choice(right, 3))))
    vocab = build_vocab(texts, max_size=64)
    return [encode(vocab, t, 16) for t in texts], vocab


@pytest.fixture(scope="module")
def trained():
    seqs, vocab = cooccurrence_corpus()
    return train_word2vec(seqs, vocab, dim=50, epochs=10, seed=0), vocab, seqs


def test_cooccurring_tokens_are_closer(trained):
    table, vocab, _ = trained
    a, b, c = (vocab.id_of[t] for t in ("aa", "bb", "cc"))
    assert cosine(table, a, b) > cosine(table, a, c)


def test_epoch_losses_non_increasing_first_three(trained):
    table, _, _ = trained
    l = table.epoch_losses
    assert len(l) == 10
    assert l[0] >= l[1] >= l[2]


def test_dim_300_rows():
    seqs, vocab = cooccurrence_corpus(20)
    table = train_word2vec(seqs, vocab, dim=300, epochs=1)
    assert table.vectors.shape == (vocab.size, 300)
    assert np.all(np.isfinite(table.vectors))


def test_zero_epochs_is_initialization():
    seqs, vocab = cooccurrence_corpus(20)
    table = train_word2vec(seqs, vocab, dim=16, epochs=0, seed=5)
    assert np.array_equal(table.vectors, initial_vectors(vocab.size, 16, 5))


def test_specials_keep_initialization(trained):
    table, vocab, _ = trained
    init = initial_vectors(vocab.size, 50, 0)
    assert np.array_equal(table.vectors[:NUM_SPECIALS], init[:NUM_SPECIALS])
    assert not np.array_equal(table.vectors[NUM_SPECIALS:], init[NUM_SPECIALS:])


def test_deterministic_bitwise():
    seqs, vocab = cooccurrence_corpus(40)
    a = train_word2vec(seqs, vocab, dim=20, epochs=2, seed=3)
    b = train_word2vec(seqs, vocab, dim=20, epochs=2, seed=3)
    assert a.vectors.tobytes() == b.vectors.tobytes()
    c = train_word2vec(seqs, vocab, dim=20, epochs=2, seed=4)
    assert not np.array_equal(a.vectors, c.vectors)


def test_errors():
    seqs, vocab = cooccurrence_corpus(10)
    with pytest.raises(EmbeddingError):
        train_word2vec(seqs, vocab, window=0)
    with pytest.raises(EmbeddingError):
        train_word2vec(seqs, vocab, dim=1)
    with pytest.raises(EmbeddingError):
        train_word2vec([], vocab)
    lonely = [encode(vocab, "aa", 8), encode(vocab, "cc", 8)]
    with pytest.raises(EmbeddingError, match="corpus too small for window"):
        train_word2vec(lonely, vocab, dim=4)


def test_cosine_examples():
    t = EmbeddingTable(np.array([[1.0, 0.0], [0.0, 2.0], [-1.0, 0.0], [0.0, 0.0], [3.0, 4.0]]))
    assert cosine(t, 4, 4) == pytest.approx(1.0)
    assert cosine(t, 0, 1) == pytest.approx(0.0)
    assert cosine(t, 0, 2) == pytest.approx(-1.0)
    with pytest.raises(EmbeddingError, match="degenerate embedding"):
        cosine(t, 0, 3)
    with pytest.raises(EmbeddingError):
        cosine(t, 0, 5)


def test_file_format(tmp_path):
    vecs = np.arange(12, dtype=np.float32).reshape(4, 3) / 7
    EmbeddingTable(vecs).save(tmp_path / "e.bin")
    raw = (tmp_path / "e.bin").read_bytes()
    assert struct.unpack("<II", raw[:8]) == (4, 3)
    assert len(raw) == 8 + 4 * 12
    assert np.frombuffer(raw[8:12], "<f4")[0] == vecs[0, 0]
    back = EmbeddingTable.load(tmp_path / "e.bin")
    assert back.vectors.tobytes() == vecs.tobytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-4])
    with pytest.raises(EmbeddingError):
        EmbeddingTable.load(tmp_path / "bad.bin")
