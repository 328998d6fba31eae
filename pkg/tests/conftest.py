import numpy as np
import pytest

from pretrain_objectives.clustering import Clustering
from pretrain_objectives.corpus import NUM_SPECIALS


def make_clustering(sizes):
    """Clustering with contiguous member blocks after the special ids."""
    assignment = [-1] * NUM_SPECIALS
    for c, s in enumerate(sizes):
        assignment += [c] * s
    return Clustering(np.array(assignment), np.zeros((len(sizes), 1)))


@pytest.fixture
def two_clusters():
    # cluster 0: ids 5..7, cluster 1: ids 8..13
    return make_clustering([3, 6])


def small_pipeline(n_clusters=10):
    """Bundled corpus, vocabulary and a quick clustering for trainer tests."""
    from pretrain_objectives.clustering import kmeans
    from pretrain_objectives.corpus import build_vocab, ingest_corpus, iter_lines
    from pretrain_objectives.embeddings import train_word2vec
    from pretrain_objectives.synthetic import bundled_corpus_path

    path = bundled_corpus_path()
    vocab = build_vocab(iter_lines([path]), max_size=2000)
    seqs = list(ingest_corpus([path], vocab, max_len=32))
    table = train_word2vec(seqs, vocab, dim=32, epochs=3, seed=0)
    clustering = kmeans(table, vocab, n=n_clusters, restarts=3, seed=0)
    return vocab, seqs, clustering


@pytest.fixture(scope="session")
def pipeline():
    return small_pipeline()
