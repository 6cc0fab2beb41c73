"""Token vocabularies, integer traces, windowing, synthetic corpora and JSONL I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD = 0
BENIGN = 0
MALICIOUS = 1
LABEL_NAMES = {BENIGN: "benign", MALICIOUS: "malicious"}
LABEL_IDS = {v: k for k, v in LABEL_NAMES.items()}
SPLITS = ("train", "validation", "test", "holdout")


class DatasetFormatError(ValueError):
    """Raised for malformed dataset or vocabulary files."""


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token types; token ``k`` (1-based) has index ``k``, index 0 is padding."""

    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        index = {t: i + 1 for i, t in enumerate(tokens)}
        if len(index) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def width(self) -> int:
        """One-hot width, padding channel included."""
        return len(self.tokens) + 1

    def lookup(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise KeyError(f"unknown token {token!r}") from None

    def name(self, index: int) -> str:
        if not 1 <= index <= len(self.tokens):
            raise IndexError(f"token index {index} out of range 1..{len(self.tokens)}")
        return self.tokens[index - 1]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line for line in lines if line != ""))

    @classmethod
    def synthetic(cls, size: int) -> "Vocabulary":
        """Names ``api000 .. apiNNN``; zero padding keeps lexicographic and numeric order aligned."""
        digits = max(3, len(str(size)))
        return cls(tuple(f"api{i:0{digits}d}" for i in range(size)))


@dataclass(frozen=True)
class LabeledSample:
    seq: tuple[int, ...]
    label: int
    id: str

    def __post_init__(self):
        if self.label not in LABEL_NAMES:
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        object.__setattr__(self, "seq", tuple(int(t) for t in self.seq))


@dataclass(frozen=True)
class Dataset:
    samples: tuple[LabeledSample, ...]
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique within a dataset")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def sequences(self) -> list[tuple[int, ...]]:
        return [s.seq for s in self.samples]

    def of_label(self, label: int) -> "Dataset":
        return Dataset(tuple(s for s in self.samples if s.label == label), self.split)

    def subset(self, indices: Iterable[int], split: str | None = None) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices), split or self.split)


def build_vocabulary(traces: Sequence[Sequence[str]]) -> Vocabulary:
    """Vocabulary of the distinct tokens in ``traces``, sorted lexicographically."""
    if len(traces) == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    seen = set()
    for trace in traces:
        seen.update(trace)
    return Vocabulary(tuple(sorted(seen)))


def encode(tokens: Sequence[str], vocab: Vocabulary) -> tuple[int, ...]:
    return tuple(vocab.lookup(t) for t in tokens)


def decode(seq: Sequence[int], vocab: Vocabulary) -> list[str]:
    return [vocab.name(int(i)) for i in seq]


def split_windows(seq: Sequence[int], m: int) -> np.ndarray:
    """Split into ``ceil(l/m)`` windows of length ``m``; the last one is right-padded.

    An empty sequence yields a single all-padding window.
    """
    if m < 1:
        raise ValueError("window length must be >= 1")
    arr = np.asarray(seq, dtype=np.int64).reshape(-1)
    n_windows = max(1, math.ceil(len(arr) / m))
    out = np.zeros((n_windows, m), dtype=np.int64)
    out.reshape(-1)[: len(arr)] = arr
    return out


def strip_padding(seq: Sequence[int]) -> tuple[int, ...]:
    seq = list(seq)
    while seq and seq[-1] == PAD:
        seq.pop()
    return tuple(seq)


# --------------------------------------------------------------------------
# synthetic corpora


@dataclass(frozen=True)
class SynthSpec:
    """Two order-1 Markov sources over ``vocab_size`` tokens (indices 1..vocab_size).

    ``benign`` and ``malicious`` are ``(vocab_size + 1, vocab_size)`` row-stochastic
    tables: row 0 is the start distribution, row ``t`` the successors of token ``t``.
    """

    vocab_size: int
    seq_len_range: tuple[int, int]
    benign: np.ndarray
    malicious: np.ndarray
    overlap_fraction: float
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.seq_len_range
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if not 0 <= lo <= hi:
            raise ValueError("seq_len_range must satisfy 0 <= min <= max")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1]")
        shape = (self.vocab_size + 1, self.vocab_size)
        for name in ("benign", "malicious"):
            table = np.array(getattr(self, name), dtype=np.float64)
            if table.shape != shape:
                raise ValueError(f"{name} table must have shape {shape}, got {table.shape}")
            if (table < 0).any() or np.abs(table.sum(axis=1) - 1.0).max() > 1e-9:
                raise ValueError(f"{name} table rows must be probability vectors")
            table.setflags(write=False)
            object.__setattr__(self, name, table)

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.synthetic(self.vocab_size)


def make_synth_spec(
    vocab_size: int = 50,
    seq_len_range: tuple[int, int] = (40, 120),
    overlap_fraction: float = 0.3,
    seed: int = 0,
    successors: int = 3,
    variants: int = 2,
    benign_concentration: float = 0.85,
    malicious_concentration: float = 0.85,
    disjoint: bool = True,
) -> SynthSpec:
    """Build a two-class Markov spec with a difficulty knob.

    Tokens are grouped into "API families" of ``variants`` interchangeable
    spellings (think ``FooA``/``FooW``). Transitions are defined between
    families: every family has ``successors`` preferred next families holding
    ``*_concentration`` of the mass, and the remainder is spread uniformly.
    A fraction ``overlap_fraction`` of the rows share the same preferred
    successors in both classes; elsewhere the classes draw their preferred
    successors independently (from disjoint family halves when ``disjoint``).
    """
    rng = np.random.default_rng(seed)
    n_fam = math.ceil(vocab_size / variants)
    family = np.arange(vocab_size) // variants  # token k+1 belongs to family[k]
    # within-family spelling preference: first spelling dominant
    spell = np.zeros(vocab_size)
    for f in range(n_fam):
        members = np.flatnonzero(family == f)
        w = np.array([0.6 ** j for j in range(len(members))])
        spell[members] = w / w.sum()

    halves = (np.arange(n_fam) % 2 == 0, np.arange(n_fam) % 2 == 1)
    shared_rows = set(rng.permutation(n_fam + 1)[: round(overlap_fraction * (n_fam + 1))].tolist())

    def preferred(pool_mask):
        pool = np.flatnonzero(pool_mask) if pool_mask is not None else np.arange(n_fam)
        k = min(successors, len(pool))
        return rng.choice(pool, size=k, replace=False)

    fam_tables = []
    prefs = {}
    for cls in (BENIGN, MALICIOUS):
        for row in range(n_fam + 1):
            if row in shared_rows:
                if row not in prefs:
                    prefs[row] = preferred(None)
                prefs[(cls, row)] = prefs[row]
            else:
                prefs[(cls, row)] = preferred(halves[cls] if disjoint else None)
    for cls, conc in ((BENIGN, benign_concentration), (MALICIOUS, malicious_concentration)):
        table = np.full((n_fam + 1, n_fam), (1.0 - conc) / n_fam)
        for row in range(n_fam + 1):
            p = prefs[(cls, row)]
            table[row, p] += conc / len(p)
        fam_tables.append(table)

    # expand family transitions to token transitions: row of token t = row of its family
    def expand(fam_table):
        out = np.empty((vocab_size + 1, vocab_size))
        out[0] = fam_table[0][family] * spell
        for t in range(vocab_size):
            out[t + 1] = fam_table[family[t] + 1][family] * spell
        return out / out.sum(axis=1, keepdims=True)

    return SynthSpec(
        vocab_size=vocab_size,
        seq_len_range=tuple(seq_len_range),
        benign=expand(fam_tables[0]),
        malicious=expand(fam_tables[1]),
        overlap_fraction=overlap_fraction,
        seed=seed,
    )


def _sample_chain(table: np.ndarray, length: int, rng: np.random.Generator) -> tuple[int, ...]:
    cdf = np.cumsum(table, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(length)
    out = []
    state = 0
    for k in range(length):
        nxt = int(np.searchsorted(cdf[state], u[k], side="right"))
        out.append(nxt + 1)
        state = nxt + 1
    return tuple(out)


def generate_synthetic(
    spec: SynthSpec, n_benign: int, n_malicious: int, split: str = "train", id_prefix: str = ""
) -> Dataset:
    """Draw a labelled corpus; a pure function of ``(spec, counts, split)``."""
    if n_benign < 0 or n_malicious < 0:
        raise ValueError("sample counts must be >= 0")
    # the split name feeds the stream so train/test drawn from one spec differ
    rng = np.random.default_rng([spec.seed, SPLITS.index(split) if split in SPLITS else 99])
    lo, hi = spec.seq_len_range
    samples = []
    order = [BENIGN] * n_benign + [MALICIOUS] * n_malicious
    for k, label in enumerate(order):
        length = int(rng.integers(lo, hi + 1))
        table = spec.benign if label == BENIGN else spec.malicious
        samples.append(LabeledSample(_sample_chain(table, length, rng), label, f"{id_prefix}{split}-{k:06d}"))
    perm = rng.permutation(len(samples))
    return Dataset(tuple(samples[i] for i in perm), split)


# --------------------------------------------------------------------------
# JSONL I/O


def load_dataset(
    path, vocab: Vocabulary | None = None, split: str = "train", min_length: int = 0
) -> tuple[Dataset, Vocabulary]:
    """Read a JSONL trace file.

    When ``vocab`` is None the vocabulary is built from the file. Traces with
    ``min_length`` or fewer tokens are dropped when ``min_length`` > 0.
    """
    raw = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or "label" not in obj or "tokens" not in obj:
                raise DatasetFormatError(f"{path}:{lineno}: expected an object with 'label' and 'tokens'")
            label = obj["label"]
            if label not in LABEL_IDS:
                raise DatasetFormatError(f"{path}:{lineno}: unknown label {label!r}")
            tokens = obj["tokens"]
            if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
                raise DatasetFormatError(f"{path}:{lineno}: 'tokens' must be a list of strings")
            raw.append((obj.get("id", f"line{lineno}"), LABEL_IDS[label], tokens, lineno))
    if min_length > 0:
        raw = [r for r in raw if len(r[2]) > min_length]
    if vocab is None:
        vocab = build_vocabulary([r[2] for r in raw])
    samples = []
    for sid, label, tokens, lineno in raw:
        try:
            seq = encode(tokens, vocab)
        except KeyError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc.args[0]}") from None
        samples.append(LabeledSample(seq, label, str(sid)))
    return Dataset(tuple(samples), split), vocab


def save_dataset(dataset: Dataset, vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset:
            obj = {"id": s.id, "label": LABEL_NAMES[s.label], "tokens": decode(s.seq, vocab)}
            fh.write(json.dumps(obj) + "\n")
