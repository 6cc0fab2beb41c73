"""GloVe token embeddings trained from trace co-occurrence statistics."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .seqdata import PAD, Dataset

EMBEDDING_FORMAT_VERSION = 1


@dataclass(frozen=True)
class CooccurrenceCounts:
    """Symmetric weighted co-occurrence counts over token indices 1..vocab_size."""

    counts: dict  # (i, j) -> X_ij, both orientations stored
    radius: int
    total_tokens: int
    vocab_size: int

    def pairs(self):
        """Arrays (rows, cols, values) over every stored ordered pair, sorted."""
        keys = sorted(self.counts)
        rows = np.array([k[0] for k in keys], dtype=np.int64)
        cols = np.array([k[1] for k in keys], dtype=np.int64)
        vals = np.array([self.counts[k] for k in keys], dtype=np.float64)
        return rows, cols, vals


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Row ``k`` embeds token index ``k + 1``."""

    vectors: np.ndarray
    unseen: tuple[int, ...] = ()

    @property
    def vocab_size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{self.vocab_size} {self.dim} {EMBEDDING_FORMAT_VERSION}\n")
            for row in self.vectors:
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")

    @classmethod
    def load(cls, path) -> "EmbeddingMatrix":
        with open(path, encoding="utf-8") as fh:
            size, dim, version = (int(x) for x in fh.readline().split())
            if version != EMBEDDING_FORMAT_VERSION:
                raise ValueError(f"unsupported embedding file version {version}")
            vecs = np.array([[float(x) for x in line.split()] for line in fh if line.strip()])
        if vecs.shape != (size, dim):
            raise ValueError(f"embedding body has shape {vecs.shape}, header says {(size, dim)}")
        return cls(vecs)


def build_cooccurrence(dataset: Dataset, radius: int = 5, vocab_size: int | None = None) -> CooccurrenceCounts:
    """Add ``1/distance`` for every token pair within ``radius``; padding is skipped."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    counts = defaultdict(float)
    total = 0
    top = 0
    for sample in dataset:
        seq = [t for t in sample.seq if t != PAD]
        total += len(seq)
        if seq:
            top = max(top, max(seq))
        for a in range(len(seq)):
            for d in range(1, radius + 1):
                b = a + d
                if b >= len(seq):
                    break
                w = 1.0 / d
                counts[(seq[a], seq[b])] += w
                counts[(seq[b], seq[a])] += w
    return CooccurrenceCounts(dict(counts), radius, total, vocab_size if vocab_size is not None else top)


def glove_weight(x, x_max: float = 100.0, alpha: float = 0.75):
    return np.minimum(1.0, (np.asarray(x) / x_max) ** alpha)


def glove_objective(params, rows, cols, vals, x_max=100.0, alpha=0.75) -> float:
    W, Wc, b, bc = params
    diff = np.einsum("ij,ij->i", W[rows], Wc[cols]) + b[rows] + bc[cols] - np.log(vals)
    return float(np.sum(glove_weight(vals, x_max, alpha) * diff**2))


def train_embeddings(
    counts: CooccurrenceCounts,
    d: int = 32,
    iters: int = 100,
    seed: int = 0,
    learning_rate: float = 0.05,
    x_max: float = 100.0,
    alpha: float = 0.75,
    return_history: bool = False,
):
    """AdaGrad on the GloVe weighted least-squares objective; returns ``W + W~``.

    Each iteration is one pass over the non-zero pairs in a seeded random order.
    Tokens with no co-occurrences keep zero vectors and are listed in ``unseen``.
    """
    if d < 1:
        raise ValueError("embedding dimension must be >= 1")
    if not counts.counts:
        raise ValueError("co-occurrence counts are empty")
    V = counts.vocab_size
    rng = np.random.default_rng(seed)
    rows, cols, vals = counts.pairs()
    rows, cols = rows - 1, cols - 1
    W = (rng.random((V, d)) - 0.5) / d
    Wc = (rng.random((V, d)) - 0.5) / d
    b = np.zeros(V)
    bc = np.zeros(V)
    gW, gWc = np.ones((V, d)), np.ones((V, d))
    gb, gbc = np.ones(V), np.ones(V)
    weights = glove_weight(vals, x_max, alpha)
    logx = np.log(vals)
    history = [glove_objective((W, Wc, b, bc), rows, cols, vals, x_max, alpha)]
    for _ in range(iters):
        for k in rng.permutation(len(vals)):
            i, j = rows[k], cols[k]
            diff = W[i] @ Wc[j] + b[i] + bc[j] - logx[k]
            fd = weights[k] * diff
            grad_w = fd * Wc[j]
            grad_c = fd * W[i]
            W[i] -= learning_rate * grad_w / np.sqrt(gW[i])
            Wc[j] -= learning_rate * grad_c / np.sqrt(gWc[j])
            b[i] -= learning_rate * fd / np.sqrt(gb[i])
            bc[j] -= learning_rate * fd / np.sqrt(gbc[j])
            gW[i] += grad_w**2
            gWc[j] += grad_c**2
            gb[i] += fd**2
            gbc[j] += fd**2
        history.append(glove_objective((W, Wc, b, bc), rows, cols, vals, x_max, alpha))
    seen = np.zeros(V, dtype=bool)
    seen[rows] = True
    vectors = W + Wc
    vectors[~seen] = 0.0
    emb = EmbeddingMatrix(vectors, tuple(int(k) + 1 for k in np.flatnonzero(~seen)))
    return (emb, history) if return_history else emb


def pairwise_distance(embedding: EmbeddingMatrix, i: int, j: int) -> float:
    """Euclidean distance between tokens ``i`` and ``j`` (1-based indices)."""
    v = embedding.vectors
    return float(np.linalg.norm(v[i - 1] - v[j - 1]))


def nearest_token(embedding: EmbeddingMatrix, point, among=None) -> int:
    """Token index whose vector is closest to ``point``; ties go to the lowest index."""
    idx = np.arange(1, embedding.vocab_size + 1) if among is None else np.sort(np.asarray(among))
    dist = np.linalg.norm(embedding.vectors[idx - 1] - np.asarray(point), axis=1)
    return int(idx[int(np.argmin(dist))])
