"""Adversarial n-gram signatures: token n-grams that occur only (or mostly) in attack outputs."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from . import neural
from .neural import RnnClassifier
from .seqdata import MALICIOUS, PAD, Vocabulary

SIGNATURE_FORMAT_VERSION = 1


def ngrams(seq: Sequence[int], n: int) -> set[tuple[int, ...]]:
    """Distinct n-grams of the unpadded sequence."""
    toks = [t for t in seq if t != PAD]
    return {tuple(toks[k : k + n]) for k in range(len(toks) - n + 1)}


def count_ngrams(seqs: Iterable[Sequence[int]], n: int) -> Counter:
    """Number of sequences containing each n-gram (each sequence counted once per gram)."""
    if n < 1:
        raise ValueError("n-gram length must be >= 1")
    counts: Counter = Counter()
    for s in seqs:
        counts.update(ngrams(s, n))
    return counts


@dataclass(frozen=True)
class NgramStats:
    n: int
    counts: dict  # gram -> (adv_count, benign_count)
    n_adv: int
    n_benign: int

    @classmethod
    def from_corpora(cls, adv_seqs, benign_seqs, n: int) -> "NgramStats":
        adv = count_ngrams(adv_seqs, n)
        ben = count_ngrams(benign_seqs, n)
        grams = set(adv) | set(ben)
        return cls(n, {g: (adv[g], ben[g]) for g in grams}, len(adv_seqs), len(benign_seqs))


def adv_ngram_probability(stats: NgramStats, gram: Sequence[int]) -> Fraction:
    """Share of samples containing ``gram`` that are adversarial; 0 for an unseen gram."""
    gram = tuple(gram)
    if len(gram) != stats.n:
        raise ValueError(f"gram has length {len(gram)}, stats use n={stats.n}")
    a, b = stats.counts.get(gram, (0, 0))
    if a + b == 0:
        return Fraction(0)
    return Fraction(a, a + b)


@dataclass(frozen=True)
class SignatureSet:
    n: int
    signatures: frozenset
    p_threshold: float = 1.0
    sigs_threshold: int = 1
    probabilities: dict = field(default_factory=dict, compare=False)

    def matches(self, seq: Sequence[int]) -> list[tuple[int, ...]]:
        """Distinct signatures occurring in ``seq``, sorted."""
        if not self.signatures:
            return []
        return sorted(ngrams(seq, self.n) & self.signatures)

    def detect(self, seq: Sequence[int]) -> tuple[bool, list[tuple[int, ...]]]:
        found = self.matches(seq)
        return (bool(self.signatures) and len(found) >= self.sigs_threshold), found

    def creates_signature(self, tokens: Sequence[int], index: int) -> bool:
        """True if some n-gram covering position ``index`` is a signature."""
        n = self.n
        lo = max(0, index - n + 1)
        hi = min(index, len(tokens) - n)
        for k in range(lo, hi + 1):
            g = tuple(tokens[k : k + n])
            if PAD not in g and g in self.signatures:
                return True
        return False

    def save(self, path, vocab: Vocabulary) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(
                f"# version={SIGNATURE_FORMAT_VERSION} n={self.n} "
                f"p_threshold={self.p_threshold!r} sigs_threshold={self.sigs_threshold}\n"
            )
            for g in sorted(self.signatures):
                fh.write(" ".join(vocab.name(t) for t in g) + "\n")

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "SignatureSet":
        with open(path, encoding="utf-8") as fh:
            header = dict(kv.split("=", 1) for kv in fh.readline().lstrip("#").split())
            if int(header.get("version", -1)) != SIGNATURE_FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported signature file version")
            n = int(header["n"])
            sigs = set()
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                gram = tuple(vocab.lookup(t) for t in line.split())
                if len(gram) != n:
                    raise ValueError(f"{path}:{lineno}: expected {n} tokens, got {len(gram)}")
                sigs.add(gram)
        return cls(n, frozenset(sigs), float(header["p_threshold"]), int(header["sigs_threshold"]))


def build_signature_set(
    adv_seqs: Sequence[Sequence[int]],
    benign_train_seqs: Sequence[Sequence[int]],
    n: int = 5,
    p_threshold: float = 1.0,
    sigs_threshold: int = 1,
) -> SignatureSet:
    """Every n-gram seen in ``adv_seqs`` whose adversarial probability reaches ``p_threshold``.

    Only benign training traces enter the denominator.
    """
    if len(adv_seqs) == 0:
        raise ValueError("adversarial corpus is empty")
    if sigs_threshold < 1:
        raise ValueError("sigs_threshold must be >= 1")
    stats = NgramStats.from_corpora(adv_seqs, benign_train_seqs, n)
    probs = {}
    for g, (a, _) in stats.counts.items():
        if a == 0:
            continue
        p = adv_ngram_probability(stats, g)
        if p >= p_threshold:
            probs[g] = p
    return SignatureSet(n, frozenset(probs), p_threshold, sigs_threshold, probs)


def detect(signatures: SignatureSet, seq) -> tuple[bool, list[tuple[int, ...]]]:
    return signatures.detect(seq)


@dataclass(frozen=True)
class SignatureDefense:
    classifier: RnnClassifier
    signatures: SignatureSet

    def predict(self, seq) -> tuple[int, bool]:
        flagged, _ = self.signatures.detect(seq)
        if flagged:
            return MALICIOUS, True
        return neural.classify_sequence(self.classifier, seq)[0], False

    def predict_many(self, seqs):
        base, _ = neural.predict_sequences(self.classifier, seqs)
        flags = [self.signatures.detect(s)[0] for s in seqs]
        labels = [MALICIOUS if f else int(b) for f, b in zip(flags, base)]
        return labels, flags
