from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advseq import embed
from advseq.embed import CooccurrenceCounts, EmbeddingMatrix
from advseq.seqdata import BENIGN, Dataset, LabeledSample


def as_dataset(seqs):
    return Dataset(tuple(LabeledSample(tuple(s), BENIGN, str(k)) for k, s in enumerate(seqs)), "train")


def brute_cooccurrence(seqs, radius):
    out = defaultdict(float)
    for s in seqs:
        s = [t for t in s if t]
        for a in range(len(s)):
            for b in range(len(s)):
                if a != b and abs(a - b) <= radius:
                    out[(s[a], s[b])] += 1.0 / abs(a - b)
    return dict(out)


def test_cooccurrence_examples():
    c = embed.build_cooccurrence(as_dataset([[1, 2]]), radius=1)
    assert c.counts == {(1, 2): 1.0, (2, 1): 1.0}
    c = embed.build_cooccurrence(as_dataset([[1, 2, 3]]), radius=2)
    assert c.counts[(1, 3)] == 0.5 and c.counts[(3, 1)] == 0.5
    with pytest.raises(ValueError):
        embed.build_cooccurrence(as_dataset([[1]]), radius=0)


@given(st.lists(st.lists(st.integers(1, 6), max_size=10), min_size=1, max_size=6), st.integers(1, 4))
def test_cooccurrence_matches_pair_enumeration(seqs, radius):
    c = embed.build_cooccurrence(as_dataset(seqs), radius)
    ref = brute_cooccurrence(seqs, radius)
    assert set(c.counts) == set(ref)
    for k in ref:
        assert c.counts[k] == pytest.approx(ref[k], rel=1e-12)
        assert c.counts[k] == c.counts[(k[1], k[0])]


@settings(max_examples=20)
@given(st.lists(st.lists(st.integers(1, 5), max_size=8), min_size=2, max_size=5), st.randoms())
def test_cooccurrence_order_invariant(seqs, rnd):
    shuffled = list(seqs)
    rnd.shuffle(shuffled)
    a = embed.build_cooccurrence(as_dataset(seqs), 3).counts
    b = embed.build_cooccurrence(as_dataset(shuffled), 3).counts
    assert a.keys() == b.keys() and all(a[k] == pytest.approx(b[k]) for k in a)


def random_counts(seed, V=8):
    rng = np.random.default_rng(seed)
    counts = {}
    for i in range(1, V + 1):
        for j in range(i + 1, V + 1):
            if rng.random() < 0.6:
                x = float(rng.integers(1, 50))
                counts[(i, j)] = counts[(j, i)] = x
    return CooccurrenceCounts(counts, 5, 100, V)


def test_objective_decreases_and_training_deterministic():
    counts = random_counts(0)
    emb, hist = embed.train_embeddings(counts, d=4, iters=30, seed=1, return_history=True)
    assert hist[-1] < hist[0]
    again = embed.train_embeddings(counts, d=4, iters=30, seed=1)
    assert np.array_equal(emb.vectors, again.vectors)
    assert np.isfinite(emb.vectors).all() and emb.vectors.shape == (8, 4)


def test_zero_iterations_returns_initialisation():
    counts = random_counts(2)
    emb = embed.train_embeddings(counts, d=3, iters=0, seed=4)
    rng = np.random.default_rng(4)
    W = (rng.random((8, 3)) - 0.5) / 3
    Wc = (rng.random((8, 3)) - 0.5) / 3
    assert np.allclose(emb.vectors, W + Wc)


def test_partners_become_nearest_neighbours():
    # tokens (1,2) always appear together, as do (3,4) and (5,6)
    seqs = [[1, 2] * 6, [3, 4] * 6, [5, 6] * 6] * 10
    counts = embed.build_cooccurrence(as_dataset(seqs), radius=1, vocab_size=6)
    emb = embed.train_embeddings(counts, d=8, iters=200, seed=0)
    for a, b in [(1, 2), (3, 4), (5, 6)]:
        others = [t for t in range(1, 7) if t != a]
        dists = {t: embed.pairwise_distance(emb, a, t) for t in others}
        assert min(dists, key=dists.get) == b


def test_unseen_tokens_zero_and_flagged():
    counts = embed.build_cooccurrence(as_dataset([[1, 2, 1, 2]]), radius=1, vocab_size=4)
    emb = embed.train_embeddings(counts, d=2, iters=3)
    assert emb.unseen == (3, 4)
    assert not emb.vectors[2:].any()


def test_bad_arguments():
    with pytest.raises(ValueError):
        embed.train_embeddings(random_counts(0), d=0)
    with pytest.raises(ValueError):
        embed.train_embeddings(CooccurrenceCounts({}, 5, 0, 3))


def test_distance_metric_properties():
    emb = EmbeddingMatrix(np.random.default_rng(0).normal(size=(6, 3)))
    for i in range(1, 7):
        assert embed.pairwise_distance(emb, i, i) == 0.0
        for j in range(1, 7):
            assert embed.pairwise_distance(emb, i, j) == embed.pairwise_distance(emb, j, i)


def test_nearest_token_matches_scan():
    rng = np.random.default_rng(3)
    emb = EmbeddingMatrix(rng.normal(size=(12, 4)))
    for _ in range(10):
        p = rng.normal(size=4)
        best = min(range(1, 13), key=lambda t: (np.linalg.norm(emb.vectors[t - 1] - p), t))
        assert embed.nearest_token(emb, p) == best


def test_nearest_token_tie_lowest_index():
    emb = EmbeddingMatrix(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]))
    assert embed.nearest_token(emb, [1.0, 0.0]) == 1
    assert embed.nearest_token(emb, [0.5, 0.5]) == 1


def test_embedding_file_roundtrip(tmp_path):
    emb = EmbeddingMatrix(np.random.default_rng(1).normal(size=(5, 3)))
    emb.save(tmp_path / "e.txt")
    back = EmbeddingMatrix.load(tmp_path / "e.txt")
    assert np.array_equal(back.vectors, emb.vectors)
