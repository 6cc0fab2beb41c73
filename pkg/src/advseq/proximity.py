"""Nearest-reference defenses: nearest training window, and defense by generation.

Windows are compared as flattened one-hot matrices. For two windows of the
same length the squared Euclidean distance is exactly twice their Hamming
distance, so lookups run on token arrays and never materialise the vectors.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import neural
from .neural import RnnClassifier
from .seqdata import BENIGN, LABEL_IDS, LABEL_NAMES, MALICIOUS, PAD, Dataset

log = logging.getLogger(__name__)

GENERATOR_FORMAT_VERSION = 1
_QUERY_CHUNK = 64


def onehot_vector(window, width: int) -> np.ndarray:
    """Flattened ``(m, width)`` one-hot encoding of a window."""
    w = np.asarray(window, dtype=np.int64)
    out = np.zeros((len(w), width))
    out[np.arange(len(w)), w] = 1.0
    return out.ravel()


def hamming(a, b) -> int:
    return int(np.count_nonzero(np.asarray(a) != np.asarray(b)))


def nearest_rows(queries: np.ndarray, reference: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(row index, Hamming distance) of the nearest reference window per query; ties -> lowest row."""
    queries = np.atleast_2d(queries)
    idx = np.empty(len(queries), dtype=np.int64)
    dist = np.empty(len(queries), dtype=np.int64)
    for s in range(0, len(queries), _QUERY_CHUNK):
        q = queries[s : s + _QUERY_CHUNK]
        d = (q[:, None, :] != reference[None, :, :]).sum(axis=2)
        idx[s : s + len(q)] = d.argmin(axis=1)
        dist[s : s + len(q)] = d[np.arange(len(q)), idx[s : s + len(q)]]
    return idx, dist


# --------------------------------------------------------------------------
# nearest neighbor in the training set


@dataclass(frozen=True)
class NeighborIndex:
    windows: np.ndarray  # (rows, m) token windows
    ids: tuple[str, ...]
    labels: np.ndarray
    vocab_width: int
    metric: str = "euclidean"

    def __len__(self) -> int:
        return len(self.windows)

    def vector(self, row: int) -> np.ndarray:
        return onehot_vector(self.windows[row], self.vocab_width)


def build_index(window: int, vocab_width: int, train_set: Dataset) -> NeighborIndex:
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    wins, ids, labels = [], [], []
    for s in train_set:
        w = neural.sequence_windows(s.seq, window)
        wins.append(w)
        ids.extend([s.id] * len(w))
        labels.extend([s.label] * len(w))
    return NeighborIndex(np.concatenate(wins), tuple(ids), np.asarray(labels), vocab_width)


def nearest_neighbor_defend(index: NeighborIndex, classifier: RnnClassifier, seq):
    """(label, neighbor sample id per window, neighbor confidence per window)."""
    wins = neural.sequence_windows(seq, classifier.window)
    rows, _ = nearest_rows(wins, index.windows)
    conf = neural.window_confidences(classifier, index.windows[rows])
    label = MALICIOUS if (conf >= 0.5).any() else BENIGN
    return label, [index.ids[r] for r in rows], conf


@dataclass(frozen=True)
class NeighborDefense:
    """Answers with the classifier's score on the nearest training window."""

    classifier: RnnClassifier
    index: NeighborIndex
    reference_conf: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, classifier: RnnClassifier, train_set: Dataset) -> "NeighborDefense":
        index = build_index(classifier.window, classifier.config.vocab_width, train_set)
        return cls(classifier, index, neural.window_confidences(classifier, index.windows))

    def window_malicious(self, window) -> bool:
        row, _ = nearest_rows(np.asarray(window)[None], self.index.windows)
        return bool(self.reference_conf[row[0]] >= 0.5)

    def predict(self, seq) -> tuple[int, bool]:
        rows, _ = nearest_rows(neural.sequence_windows(seq, self.classifier.window), self.index.windows)
        return (MALICIOUS if (self.reference_conf[rows] >= 0.5).any() else BENIGN), False


# --------------------------------------------------------------------------
# class-conditional generators


@dataclass(frozen=True)
class GeneratorModel:
    """Order-k autoregressive token model with additive smoothing and backoff.

    ``counts[ctx]`` holds next-token counts after context ``ctx`` for every
    context length 0..k; contexts at the sequence start are left-padded with 0.
    Sampling uses the longest context seen in training.
    """

    label: int
    order: int
    vocab_size: int
    counts: dict = field(repr=False)
    smoothing: float = 0.1
    seed: int = 0

    def distribution(self, history) -> np.ndarray:
        """Next-token probabilities over tokens 1..vocab_size."""
        hist = ([PAD] * self.order + list(history))[-self.order :] if self.order else []
        for k in range(len(hist), -1, -1):
            ctx = tuple(hist[len(hist) - k :])
            row = self.counts.get(ctx)
            if row is not None:
                p = row + self.smoothing
                return p / p.sum()
        return np.full(self.vocab_size, 1.0 / self.vocab_size)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(
                f"# version={GENERATOR_FORMAT_VERSION} class={LABEL_NAMES[self.label]} order={self.order} "
                f"vocab_size={self.vocab_size} smoothing={self.smoothing!r} seed={self.seed}\n"
            )
            for ctx in sorted(self.counts, key=lambda c: (len(c), c)):
                probs = self.counts[ctx] + self.smoothing
                probs = probs / probs.sum()
                fh.write(
                    " ".join(str(t) for t in ctx) + " | " + " ".join(repr(float(x)) for x in self.counts[ctx])
                    + " | " + " ".join(repr(float(x)) for x in probs) + "\n"
                )

    @classmethod
    def load(cls, path) -> "GeneratorModel":
        with open(path, encoding="utf-8") as fh:
            h = dict(kv.split("=", 1) for kv in fh.readline().lstrip("#").split())
            if int(h.get("version", -1)) != GENERATOR_FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported generator file version")
            V = int(h["vocab_size"])
            counts = {}
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                ctx, row, _ = line.split("|")
                vals = np.array([float(x) for x in row.split()])
                if len(vals) != V:
                    raise ValueError(f"{path}:{lineno}: expected {V} counts")
                counts[tuple(int(t) for t in ctx.split())] = vals
        return cls(LABEL_IDS[h["class"]], int(h["order"]), V, counts, float(h["smoothing"]), int(h["seed"]))


def train_generator(samples, vocab_size: int, order: int = 2, smoothing: float = 0.1, seed: int = 0, label: int = BENIGN) -> GeneratorModel:
    """Maximum-likelihood counts for every context length up to ``order``."""
    seqs = [[t for t in s if t != PAD] for s in samples]
    if not seqs:
        raise ValueError("generator corpus is empty")
    if order < 0:
        raise ValueError("order must be >= 0")
    counts: dict = defaultdict(lambda: np.zeros(vocab_size))
    for seq in seqs:
        padded = [PAD] * order + seq
        for pos, tok in enumerate(seq):
            hist = padded[pos : pos + order]
            for k in range(order + 1):
                counts[tuple(hist[order - k :])][tok - 1] += 1.0
    return GeneratorModel(label, order, vocab_size, dict(counts), smoothing, seed)


def generate_sequences(generator: GeneratorModel, count: int, length: int, seed: int | None = None) -> list[tuple[int, ...]]:
    if count < 0 or length < 0:
        raise ValueError("count and length must be >= 0")
    rng = np.random.default_rng(generator.seed if seed is None else seed)
    out = []
    for _ in range(count):
        seq: list[int] = []
        for _ in range(length):
            p = generator.distribution(seq)
            seq.append(int(rng.choice(generator.vocab_size, p=p)) + 1)
        out.append(tuple(seq))
    return out


# --------------------------------------------------------------------------
# defense by generation


@dataclass(frozen=True)
class DefGenConfig:
    m_generated: int = 50
    order: int = 2
    smoothing: float = 0.1
    seed: int = 0
    distance: str = "euclidean"

    def __post_init__(self):
        if self.m_generated < 1:
            raise ValueError("m_generated must be >= 1")
        if self.distance != "euclidean":
            raise ValueError("only the euclidean distance is supported")


@dataclass(frozen=True)
class DefGenDefense:
    """Classifies the nearest window of a fixed pool drawn from both generators."""

    classifier: RnnClassifier
    pool: np.ndarray  # (2 * m_generated, m) windows, benign draws first
    pool_classes: np.ndarray
    pool_conf: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, classifier: RnnClassifier, benign_gen: GeneratorModel, malicious_gen: GeneratorModel, config: DefGenConfig = DefGenConfig()):
        m = classifier.window
        draws = generate_sequences(benign_gen, config.m_generated, m, seed=config.seed)
        draws += generate_sequences(malicious_gen, config.m_generated, m, seed=config.seed + 1)
        pool = np.array(draws, dtype=np.int64).reshape(-1, m)
        classes = np.repeat([BENIGN, MALICIOUS], config.m_generated)
        return cls(classifier, pool, classes, neural.window_confidences(classifier, pool))

    def nearest(self, window) -> tuple[int, int]:
        row, dist = nearest_rows(np.asarray(window)[None], self.pool)
        return int(row[0]), int(dist[0])

    def window_malicious(self, window) -> bool:
        return bool(self.pool_conf[self.nearest(window)[0]] >= 0.5)

    def predict(self, seq) -> tuple[int, bool]:
        rows, _ = nearest_rows(neural.sequence_windows(seq, self.classifier.window), self.pool)
        return (MALICIOUS if (self.pool_conf[rows] >= 0.5).any() else BENIGN), False


def defgen_defend(benign_gen: GeneratorModel, malicious_gen: GeneratorModel, classifier: RnnClassifier, config: DefGenConfig, seq):
    """(label, pool row of the nearest generated window for each input window)."""
    d = DefGenDefense.build(classifier, benign_gen, malicious_gen, config)
    rows, _ = nearest_rows(neural.sequence_windows(seq, classifier.window), d.pool)
    return d.predict(seq)[0], [int(r) for r in rows]
