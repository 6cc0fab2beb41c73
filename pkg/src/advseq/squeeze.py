"""Sequence squeezing: merge near-synonymous tokens and flag confidence jumps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import neural
from .embed import EmbeddingMatrix
from .neural import RnnClassifier
from .seqdata import BENIGN, MALICIOUS, Dataset


@dataclass(frozen=True)
class MergeGroup:
    members: tuple[int, ...]
    center: np.ndarray
    representative: int


@dataclass(frozen=True)
class SqueezeMap:
    mapping: np.ndarray  # mapping[t] = representative of t; mapping[0] = 0
    groups: tuple[MergeGroup, ...]
    size: int

    def __post_init__(self):
        m = np.array(self.mapping, dtype=np.int64)
        m.setflags(write=False)
        object.__setattr__(self, "mapping", m)

    @property
    def representatives(self) -> np.ndarray:
        return np.unique(self.mapping[1:])

    def apply(self, seq):
        arr = self.mapping[np.asarray(seq, dtype=np.int64)]
        return arr if isinstance(seq, np.ndarray) else tuple(int(t) for t in arr)

    def save(self, path, threshold: float | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# size_squeezed={self.size} threshold_adv={'' if threshold is None else repr(float(threshold))}\n")
            for t in range(1, len(self.mapping)):
                fh.write(f"{t} {int(self.mapping[t])}\n")

    @staticmethod
    def load(path) -> tuple["SqueezeMap", float | None]:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().lstrip("#").split()
            meta = dict(kv.split("=", 1) for kv in header)
            pairs = [tuple(int(x) for x in line.split()) for line in fh if line.strip()]
        mapping = np.zeros(len(pairs) + 1, dtype=np.int64)
        for t, r in pairs:
            mapping[t] = r
        groups = []
        for rep in np.unique(mapping[1:]):
            members = tuple(int(t) for t in np.flatnonzero(mapping == rep) if t != 0)
            groups.append(MergeGroup(members, np.zeros(0), int(rep)))
        smap = SqueezeMap(mapping, tuple(groups), int(meta["size_squeezed"]))
        thr = meta.get("threshold_adv", "")
        return smap, (float(thr) if thr else None)


def default_squeezed_size(vocab_size: int) -> int:
    return math.ceil(vocab_size / 2)


def build_squeeze_map(embedding: EmbeddingMatrix, size_squeezed: int | None = None) -> SqueezeMap:
    """Greedy agglomerative merging down to ``size_squeezed`` groups.

    The two groups with the closest centers merge into their count-weighted
    center of mass; ties go to the lexicographically lowest pair, groups being
    ordered by their smallest member. Each group is then represented by the
    member whose original embedding is closest to the group center, ties
    (up to rounding) going to the lowest token.
    """
    V = embedding.vocab_size
    if size_squeezed is None:
        size_squeezed = default_squeezed_size(V)
    if not 1 <= size_squeezed <= V:
        raise ValueError(f"size_squeezed must lie in [1, {V}]")
    vecs = np.asarray(embedding.vectors, dtype=np.float64)
    members = [[t] for t in range(1, V + 1)]
    centers = [vecs[t - 1].copy() for t in range(1, V + 1)]
    while len(members) > size_squeezed:
        C = np.stack(centers)
        D = np.sqrt(((C[:, None, :] - C[None, :, :]) ** 2).sum(axis=2))
        D[np.tril_indices(len(C))] = np.inf
        i, j = divmod(int(np.argmin(D)), len(C))
        ni, nj = len(members[i]), len(members[j])
        merged = (centers[i] * ni + centers[j] * nj) / (ni + nj)
        members[i] = sorted(members[i] + members[j])
        centers[i] = merged
        del members[j], centers[j]
    mapping = np.zeros(V + 1, dtype=np.int64)
    groups = []
    for mem, center in zip(members, centers):
        idx = np.asarray(mem)
        dist = np.linalg.norm(vecs[idx - 1] - center, axis=1)
        # distances equal up to rounding are ties; the lowest token wins
        rep = int(idx[int(np.flatnonzero(dist <= dist.min() * (1 + 1e-9) + 1e-12)[0])])
        mapping[idx] = rep
        groups.append(MergeGroup(tuple(mem), center, rep))
    return SqueezeMap(mapping, tuple(groups), size_squeezed)


def apply_squeeze(smap: SqueezeMap, seq):
    return smap.apply(seq)


@dataclass(frozen=True)
class SqueezeDetector:
    squeeze_map: SqueezeMap
    threshold: float

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")


def window_differences(smap: SqueezeMap, classifier: RnnClassifier, seq):
    """(original confidences, squeezed confidences) per window, from one forward pass."""
    wins = neural.sequence_windows(seq, classifier.window)
    squeezed = smap.mapping[wins]
    changed = (squeezed != wins).any(axis=1)
    conf = neural.window_confidences(classifier, np.concatenate([wins, squeezed[changed]]))
    k = len(wins)
    # an unchanged window scores identically by purity; reuse it
    conf_sq = conf[:k].copy()
    conf_sq[changed] = conf[k:]
    return conf[:k], conf_sq


def calibrate_threshold(smap: SqueezeMap, classifier: RnnClassifier, train_set: Dataset) -> float:
    """Largest |f(w) - f(squeeze(w))| over every training window."""
    if len(train_set) == 0:
        raise ValueError("calibration set is empty")
    worst = 0.0
    for s in train_set:
        c, cs = window_differences(smap, classifier, s.seq)
        worst = max(worst, float(np.abs(c - cs).max()))
    return worst


def detect(detector: SqueezeDetector, classifier: RnnClassifier, seq):
    """(adversarial flag, original confidences, squeezed confidences)."""
    c, cs = window_differences(detector.squeeze_map, classifier, seq)
    return bool(np.abs(c - cs).max() > detector.threshold), c, cs


@dataclass(frozen=True)
class SqueezeDefense:
    classifier: RnnClassifier
    detector: SqueezeDetector

    def predict(self, seq) -> tuple[int, bool]:
        flagged, c, _ = detect(self.detector, self.classifier, seq)
        malicious = flagged or bool((c >= 0.5).any())
        return (MALICIOUS if malicious else BENIGN), flagged
