"""Insertion-only adversarial sequence generation.

Windows of ``n`` tokens are attacked left to right. While the target still
calls the current window malicious, a random position is drawn and the
token whose insertion best matches the sign of the gradient is inserted
there; the window's tail is pushed into the next window, so original
tokens are never dropped or reordered.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import neural
from .neural import ModelConfig, RnnClassifier, TrainConfig
from .seqdata import BENIGN, MALICIOUS, PAD, Dataset, LabeledSample

VARIANTS = ("whitebox", "blackbox", "random")
DEFENSE_IDS = ("squeeze", "defgen", "neighbor", "ensemble", "signatures", "advtrain")


class Insertion(NamedTuple):
    window: int
    position: int
    token: int
    index: int  # absolute position in the sequence at the time of insertion


@dataclass(frozen=True)
class AttackConfig:
    n: int = 140
    max_insertions: int | None = None
    variant: str = "whitebox"
    adaptive_target: str | None = None
    adaptive_iteration_cap: int = 10
    seed: int = 0
    reject_cap: int = 50

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.adaptive_target is not None and self.adaptive_target not in DEFENSE_IDS:
            raise ValueError(f"unknown defense id {self.adaptive_target!r}")
        if self.n < 2:
            raise ValueError("attack window must hold at least 2 tokens")
        if not 0 <= self.budget < self.n:
            raise ValueError("max_insertions must lie in [0, n)")

    @property
    def budget(self) -> int:
        """Insertions allowed per window: strictly fewer than ceil(2n/3)."""
        if self.max_insertions is not None:
            return self.max_insertions
        return math.ceil(2 * self.n / 3) - 1


@dataclass
class AttackResult:
    original: tuple[int, ...]
    perturbed: tuple[int, ...]
    insertions: list[Insertion]
    evaded: bool
    queries: int
    variant: str = "whitebox"
    id: str = ""
    iterations: int = 1

    def log_record(self) -> dict:
        return {
            "id": self.id,
            "variant": self.variant,
            "evaded": bool(self.evaded),
            "insertions": [[int(w), int(p), int(t)] for w, p, t, _ in self.insertions],
            "queries": int(self.queries),
        }


def replay(original: Sequence[int], insertions: Sequence[Insertion]) -> tuple[int, ...]:
    tokens = list(original)
    for ins in insertions:
        tokens.insert(ins.index, ins.token)
    return tuple(tokens)


def remove_insertions(perturbed: Sequence[int], insertions: Sequence[Insertion]) -> tuple[int, ...]:
    tokens = list(perturbed)
    for ins in reversed(insertions):
        if tokens[ins.index] != ins.token:
            raise ValueError("insertion log does not match the perturbed sequence")
        del tokens[ins.index]
    return tuple(tokens)


def is_subsequence(needle: Sequence[int], haystack: Sequence[int]) -> bool:
    it = iter(haystack)
    return all(any(x == y for y in it) for x in needle)


# --------------------------------------------------------------------------
# token choice


def _onehot(window: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(window), width))
    out[np.arange(len(window)), window] = 1.0
    return out


def insertion_scores(jacobian: np.ndarray, window: Sequence[int], i: int, candidates: Sequence[int]) -> np.ndarray:
    """``||sign(w - insert(w, i, c)) - sign(J)||_2`` for every candidate ``c``.

    ``insert`` places ``c`` at ``i``, shifts the suffix right and drops the last
    token. Rows other than ``i`` are shared by every candidate, so they are
    scored once.
    """
    w = np.asarray(window, dtype=np.int64)
    n, width = jacobian.shape
    sJ = np.sign(jacobian)
    shifted = np.concatenate([w[:i], [PAD], w[i : n - 1]])
    delta = _onehot(w, width) - _onehot(shifted, width)
    delta[i] = 0.0
    delta[i, w[i]] = 1.0  # row i before the candidate is subtracted
    rows = (np.sign(delta) - sJ) ** 2
    common = rows.sum() - rows[i].sum()
    row_i = rows[i].sum()
    c = np.asarray(candidates, dtype=np.int64)
    same = c == w[i]
    # candidate equal to the displaced token: cell (i, w[i]) becomes 0
    adj_same = (0.0 - sJ[i, w[i]]) ** 2 - (1.0 - sJ[i, w[i]]) ** 2
    # otherwise cell (i, c) becomes -1
    adj_other = (-1.0 - sJ[i, c]) ** 2 - (0.0 - sJ[i, c]) ** 2
    total = common + row_i + np.where(same, adj_same, adj_other)
    return np.sqrt(total)


def select_insertion(jacobian: np.ndarray, window: Sequence[int], i: int, candidates: Sequence[int] | None = None) -> int:
    """Best token to insert at position ``i``.

    Sign-pattern ties are broken by the raw gradient at the inserted cell
    (most negative first), then by the lowest token index.
    """
    if candidates is None:
        candidates = np.arange(1, jacobian.shape[1])
    candidates = np.sort(np.asarray(candidates, dtype=np.int64))
    scores = insertion_scores(jacobian, window, i, candidates)
    order = np.lexsort((candidates, jacobian[i, candidates], scores))
    return int(candidates[order[0]])


def gradient_chooser(model: RnnClassifier, candidates=None) -> Callable:
    def choose(window, i):
        return select_insertion(neural.input_jacobian(model, window), window, i, candidates)

    return choose


def random_chooser(vocab_width: int, rng: np.random.Generator, candidates=None) -> Callable:
    pool = np.arange(1, vocab_width) if candidates is None else np.asarray(candidates)

    def choose(window, i):
        return int(pool[rng.integers(len(pool))])

    return choose


# --------------------------------------------------------------------------
# the insertion loop


class _Counter:
    def __init__(self):
        self.queries = 0


def _window(tokens: list, start: int, n: int) -> np.ndarray:
    w = np.zeros(n, dtype=np.int64)
    chunk = tokens[start : start + n]
    w[: len(chunk)] = chunk
    return w


def perturb(
    tokens: Sequence[int],
    n: int,
    budget: int,
    rng: np.random.Generator,
    is_malicious: Callable[[np.ndarray], bool],
    choose: Callable[[np.ndarray, int], int],
    accept: Callable[[list, int], bool] | None = None,
    offset: int = 0,
    reject_cap: int = 50,
):
    """Run the window-by-window insertion loop on ``tokens[offset:]``.

    Returns ``(tokens, insertions, success)``. ``success`` is False as soon as a
    window exhausts its budget (or its rejection cap) while still malicious.
    """
    tokens = list(tokens)
    insertions: list[Insertion] = []
    j = 0
    while j == 0 or offset + j * n < len(tokens):
        start = offset + j * n
        w = _window(tokens, start, n)
        used = rejected = 0
        while is_malicious(w):
            if used >= budget or rejected > reject_cap:
                return tokens, insertions, False
            real = max(0, min(len(tokens) - start, n))
            i = int(rng.integers(0, min(real, n - 1) + 1))
            tok = choose(w, i)
            at = min(start + i, len(tokens))
            candidate = tokens[:at] + [tok] + tokens[at:]
            if accept is not None and not accept(candidate, at):
                rejected += 1
                continue
            tokens = candidate
            insertions.append(Insertion(j, i, tok, at))
            used += 1
            w = _window(tokens, start, n)
        j += 1
    return tokens, insertions, True


def _model_predicate(model: RnnClassifier, counter: _Counter, threshold: float = 0.5):
    def is_malicious(w):
        counter.queries += 1
        return bool(neural.window_confidences(model, w)[0] >= threshold)

    return is_malicious


def _check_window(model: RnnClassifier, cfg: AttackConfig):
    if model.window != cfg.n:
        raise ValueError(f"attack window n={cfg.n} must equal the classifier window {model.window}")


def _require_malicious(target: RnnClassifier, seq):
    if neural.classify_sequence(target, seq)[0] != MALICIOUS:
        raise ValueError("input sequence is not classified malicious by the target")


def attack_sequence(target: RnnClassifier, gradient_source: RnnClassifier, seq, config: AttackConfig, sample_id: str = "") -> AttackResult:
    """Gradient-guided insertion attack (white-box when both models coincide)."""
    _check_window(target, config)
    _require_malicious(target, seq)
    rng = np.random.default_rng(config.seed)
    counter = _Counter()
    tokens, ins, ok = perturb(
        seq, config.n, config.budget, rng, _model_predicate(target, counter), gradient_chooser(gradient_source)
    )
    variant = "whitebox" if gradient_source is target else "blackbox"
    return AttackResult(tuple(seq), tuple(tokens), ins, ok, counter.queries, variant, sample_id)


def attack_random(target: RnnClassifier, seq, config: AttackConfig, sample_id: str = "") -> AttackResult:
    _check_window(target, config)
    _require_malicious(target, seq)
    rng = np.random.default_rng(config.seed)
    counter = _Counter()
    tokens, ins, ok = perturb(
        seq, config.n, config.budget, rng, _model_predicate(target, counter),
        random_chooser(target.config.vocab_width, rng),
    )
    return AttackResult(tuple(seq), tuple(tokens), ins, ok, counter.queries, "random", sample_id)


def run_attack(target: RnnClassifier, seq, config: AttackConfig, substitute: RnnClassifier | None = None, sample_id: str = "") -> AttackResult:
    if config.variant == "random":
        return attack_random(target, seq, config, sample_id)
    if config.variant == "blackbox":
        if substitute is None:
            raise ValueError("black-box attack needs a substitute model")
        return attack_sequence(target, substitute, seq, config, sample_id)
    return attack_sequence(target, target, seq, config, sample_id)


# --------------------------------------------------------------------------
# substitute model


@dataclass(frozen=True)
class SubstituteSpec:
    cell: str = "gru"
    hidden_units: int = 64
    optimizer: str = "adadelta"
    epochs: int = 30
    dropout_rate: float = 0.2
    seed: int = 0
    learning_rate: float | None = None


def train_substitute(target: RnnClassifier, holdout: Dataset, spec: SubstituteSpec = SubstituteSpec()) -> RnnClassifier:
    """Fit a different architecture to the target's own labels on ``holdout``."""
    if len(holdout) == 0:
        raise ValueError("substitute holdout set is empty")
    pred, _ = neural.predict_sequences(target, holdout.sequences)
    relabeled = Dataset(
        tuple(LabeledSample(s.seq, int(p), s.id) for s, p in zip(holdout, pred)), holdout.split
    )
    cfg = ModelConfig(
        vocab_width=target.config.vocab_width,
        window=target.window,
        cell=spec.cell,
        hidden_units=spec.hidden_units,
        dropout_rate=spec.dropout_rate,
        seed=spec.seed,
    )
    tc = TrainConfig(optimizer=spec.optimizer, epochs=spec.epochs, seed=spec.seed, learning_rate=spec.learning_rate)
    model, _ = neural.train(neural.init_model(cfg), relabeled, tc)
    return model


def agreement(a: RnnClassifier, b: RnnClassifier, dataset: Dataset) -> float:
    pa, _ = neural.predict_sequences(a, dataset.sequences)
    pb, _ = neural.predict_sequences(b, dataset.sequences)
    return float((pa == pb).mean())


# --------------------------------------------------------------------------
# adaptive attacks


def adaptive_attack(defense_id: str, system, seq, config: AttackConfig, sample_id: str = "") -> AttackResult:
    """Defense-aware white-box attack; ``evaded`` means the defended system answers benign."""
    if defense_id not in DEFENSE_IDS:
        raise ValueError(f"unknown defense id {defense_id!r}")
    if system is None:
        raise ValueError("adaptive attack needs the defended system")
    fn = {
        "squeeze": _adaptive_squeeze,
        "defgen": _adaptive_reference,
        "neighbor": _adaptive_reference,
        "ensemble": _adaptive_ensemble,
        "signatures": _adaptive_signatures,
        "advtrain": _adaptive_advtrain,
    }[defense_id]
    result = fn(system, tuple(seq), config)
    result.id = sample_id
    result.variant = f"adaptive-{defense_id}"
    return result


def _iterate(seq, config, one_pass, final_ok):
    rng = np.random.default_rng(config.seed)
    counter = _Counter()
    tokens = list(seq)
    insertions: list[Insertion] = []
    it = 0
    for it in range(1, config.adaptive_iteration_cap + 1):
        tokens, ins = one_pass(tokens, rng, counter)
        insertions.extend(ins)
        counter.queries += 1
        if final_ok(tokens):
            return AttackResult(tuple(seq), tuple(tokens), insertions, True, counter.queries, iterations=it)
    return AttackResult(tuple(seq), tuple(tokens), insertions, False, counter.queries, iterations=it)


def _adaptive_squeeze(system, seq, config):
    f = system.classifier
    smap = system.detector.squeeze_map
    thr = system.detector.threshold
    reps = smap.representatives
    _check_window(f, config)

    def one_pass(tokens, rng, counter):
        def confs(w):
            counter.queries += 1
            both = neural.window_confidences(f, np.stack([w, smap.apply(w)]))
            return both[0], both[1]

        def bad(w):
            c, cs = confs(w)
            return c >= 0.5 or abs(c - cs) > thr

        def choose(w, i):
            c, cs = confs(w)
            # push down whichever view currently scores higher
            src = w if (c >= 0.5 or c >= cs) else np.asarray(smap.apply(w))
            return select_insertion(neural.input_jacobian(f, src), src, i, reps)

        tokens, ins, _ = perturb(tokens, config.n, config.budget, rng, bad, choose, reject_cap=config.reject_cap)
        return tokens, ins

    return _iterate(seq, config, one_pass, lambda t: system.predict(t)[0] == BENIGN)


def _adaptive_reference(system, seq, config):
    """Defenses that answer with the label of a reference window (neighbor, generation)."""
    f = system.classifier
    _check_window(f, config)

    def one_pass(tokens, rng, counter):
        def bad(w):
            counter.queries += 1
            return system.window_malicious(w)

        tokens, ins, _ = perturb(tokens, config.n, config.budget, rng, bad, gradient_chooser(f), reject_cap=config.reject_cap)
        return tokens, ins

    return _iterate(seq, config, one_pass, lambda t: system.predict(t)[0] == BENIGN)


def _adaptive_ensemble(ensemble, seq, config):
    def one_pass(tokens, rng, counter):
        out = []
        for member, offset in zip(ensemble.members, ensemble.offsets):
            _check_window(member, config)
            tokens, ins, _ = perturb(
                tokens, config.n, config.budget, rng, _model_predicate(member, counter),
                gradient_chooser(member), offset=offset, reject_cap=config.reject_cap,
            )
            out.extend(ins)
        return tokens, out

    return _iterate(seq, config, one_pass, lambda t: ensemble.predict(t)[0] == BENIGN)


def _adaptive_signatures(system, seq, config):
    f = system.classifier
    sigs = system.signatures
    _check_window(f, config)

    def accept(tokens, index):
        return not sigs.creates_signature(tokens, index)

    def one_pass(tokens, rng, counter):
        tokens, ins, _ = perturb(
            tokens, config.n, config.budget, rng, _model_predicate(f, counter), gradient_chooser(f),
            accept=accept, reject_cap=config.reject_cap,
        )
        return tokens, ins

    return _iterate(seq, config, one_pass, lambda t: system.predict(t)[0] == BENIGN)


def _adaptive_advtrain(classifier, seq, config):
    f = getattr(classifier, "classifier", classifier)
    if neural.classify_sequence(f, seq)[0] == BENIGN:
        return AttackResult(tuple(seq), tuple(seq), [], True, 1)
    return attack_sequence(f, f, seq, config)


# --------------------------------------------------------------------------
# logs


def write_attack_log(results: Sequence[AttackResult], path) -> None:
    """One JSON object per attacked sample."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.log_record()) + "\n")


def read_attack_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
