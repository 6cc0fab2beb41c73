"""Recurrent-classifier ensembles and adversarial training."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import neural
from .attack import AttackConfig, AttackResult, attack_sequence
from .neural import ModelConfig, RnnClassifier, TrainConfig
from .seqdata import BENIGN, MALICIOUS, Dataset, LabeledSample

log = logging.getLogger(__name__)

ENSEMBLE_VARIANTS = (
    "regular",
    "subsequence",
    "bagging",
    "bagging_subsequence",
    "adversarial",
    "adversarial_subsequence",
)
VOTING = ("soft", "hard")


@dataclass(frozen=True)
class EnsembleConfig:
    variant: str = "regular"
    size: int = 9
    voting: str = "soft"
    stride: int | None = None  # subsequence offset step; default ceil(m / 14)
    adversarial_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ENSEMBLE_VARIANTS:
            raise ValueError(f"variant must be one of {ENSEMBLE_VARIANTS}")
        if self.voting not in VOTING:
            raise ValueError(f"voting must be one of {VOTING}")
        if self.size < 1:
            raise ValueError("ensemble size must be >= 1")
        if not 0.0 <= self.adversarial_fraction <= 1.0:
            raise ValueError("adversarial_fraction must lie in [0, 1]")
        if self.stride is not None and self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def subsequence(self) -> bool:
        return self.variant.endswith("subsequence")

    @property
    def bagging(self) -> bool:
        return self.variant.startswith("bagging")

    @property
    def adversarial(self) -> bool:
        return self.variant.startswith("adversarial")

    def offsets(self, window: int) -> tuple[int, ...]:
        if not self.subsequence:
            return (0,) * self.size
        step = self.stride or math.ceil(window / 14)
        return tuple(k * step for k in range(self.size))


@dataclass(frozen=True)
class MemberRecipe:
    index: int
    seed: int
    offset: int
    bag: tuple[int, ...] | None = None  # sample indices drawn with replacement
    adversarial_pool: str | None = None
    replaced: tuple[str, ...] = ()
    checkpoint: str | None = None

    def record(self) -> dict:
        d = asdict(self)
        d["bag_seed"] = self.seed if self.bag is not None else None
        return d


def bagging_draw(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, n, size=n)


def coverage(draw: np.ndarray, n: int) -> float:
    """Fraction of distinct samples hit by a draw."""
    return len(np.unique(draw)) / n


@dataclass(frozen=True)
class Ensemble:
    config: EnsembleConfig
    members: tuple[RnnClassifier, ...]
    recipes: tuple[MemberRecipe, ...]

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(r.offset for r in self.recipes)

    def member_confidences(self, seq) -> np.ndarray:
        """Each member's highest window confidence over its own view of ``seq``."""
        return np.array(
            [neural.window_confidences(m, neural.sequence_windows(seq, m.window, o)).max()
             for m, o in zip(self.members, self.offsets)]
        )

    def predict(self, seq) -> tuple[int, bool]:
        return ensemble_predict(self, seq)[0], False

    def predict_many(self, seqs):
        conf = np.stack([neural.predict_sequences(m, seqs, offset=o)[1] for m, o in zip(self.members, self.offsets)], axis=1)
        labels = [vote(c, self.config.voting) for c in conf]
        return labels, [False] * len(labels)

    def save_manifest(self, path, checkpoints: list[str] | None = None) -> None:
        recipes = [replace(r, checkpoint=c) for r, c in zip(self.recipes, checkpoints or [None] * len(self.recipes))]
        doc = {"config": asdict(self.config), "voting": self.config.voting, "members": [r.record() for r in recipes]}
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load_manifest(cls, path) -> "Ensemble":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        base = Path(path).parent
        members, recipes = [], []
        for r in doc["members"]:
            r.pop("bag_seed", None)
            r["bag"] = tuple(r["bag"]) if r["bag"] is not None else None
            r["replaced"] = tuple(r["replaced"])
            recipe = MemberRecipe(**r)
            if recipe.checkpoint is None:
                raise ValueError(f"{path}: member {recipe.index} has no checkpoint")
            members.append(neural.load_checkpoint(base / recipe.checkpoint))
            recipes.append(recipe)
        return cls(EnsembleConfig(**doc["config"]), tuple(members), tuple(recipes))


def vote(confidences, voting: str = "soft") -> int:
    c = np.asarray(confidences, dtype=np.float64)
    if voting == "soft":
        return MALICIOUS if c.mean() >= 0.5 else BENIGN
    if voting == "hard":
        # ties go to malicious
        return MALICIOUS if 2 * int((c >= 0.5).sum()) >= len(c) else BENIGN
    raise ValueError(f"voting must be one of {VOTING}")


def ensemble_predict(ensemble: Ensemble, seq, voting: str | None = None) -> tuple[int, np.ndarray]:
    conf = ensemble.member_confidences(seq)
    return vote(conf, voting or ensemble.config.voting), conf


def replace_with_adversarial(dataset: Dataset, pool: list[AttackResult], fraction: float, seed: int = 0):
    """Swap ``floor(fraction * malicious)`` malicious samples for their adversarial variants.

    Returns the new dataset and the replaced sample ids. Pool entries are used in
    pool order; a short pool replaces fewer samples and logs a warning.
    """
    n_mal = int((dataset.labels == MALICIOUS).sum())
    want = math.floor(fraction * n_mal)
    usable = [r for r in pool if r.evaded and r.id]
    if len(usable) < want:
        log.warning("adversarial pool holds %d examples, %d requested; using all of them", len(usable), want)
    chosen = {r.id: r.perturbed for r in usable[:want]}
    samples = tuple(
        LabeledSample(chosen[s.id], MALICIOUS, s.id) if s.id in chosen else s for s in dataset
    )
    return Dataset(samples, dataset.split), tuple(sorted(chosen))


def train_ensemble(
    config: EnsembleConfig,
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    adversarial_pool: list[AttackResult] | Callable[[int], list[AttackResult]] | None = None,
    pool_id: str = "pool",
) -> Ensemble:
    """Train ``config.size`` members.

    ``adversarial_pool`` is either one pool shared by every member or a
    function of the member seed returning that member's own pool.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    if config.adversarial and adversarial_pool is None:
        raise ValueError(f"variant {config.variant} needs an adversarial example pool")
    offsets = config.offsets(model_config.window)
    per_member = callable(adversarial_pool)
    base = dataset
    replaced: tuple[str, ...] = ()
    if config.adversarial and not per_member:
        base, replaced = replace_with_adversarial(dataset, adversarial_pool, config.adversarial_fraction)
    longest = max(len(s.seq) for s in dataset)
    padded = [k for k, o in enumerate(offsets) if o + model_config.window > longest]
    if padded:
        log.warning("members %s see right-padded windows (longest trace %d)", padded, longest)
    members, recipes = [], []
    for k in range(config.size):
        seed = config.seed * 1000 + k
        offset = offsets[k]
        bag = None
        pool_name = pool_id if config.adversarial else None
        if config.adversarial and per_member:
            base, replaced = replace_with_adversarial(dataset, adversarial_pool(seed), config.adversarial_fraction)
            pool_name = f"{pool_id}:{k}"
        data = base
        if config.bagging:
            draw = bagging_draw(len(base), seed)
            bag = tuple(int(i) for i in draw)
            data = Dataset(
                tuple(LabeledSample(base.samples[i].seq, base.samples[i].label, f"{base.samples[i].id}#{j}") for j, i in enumerate(draw)),
                base.split,
            )
        mcfg = replace(model_config, seed=seed)
        tcfg = replace(train_config, seed=seed)
        model, _ = neural.train(neural.init_model(mcfg), data, tcfg, offset=offset)
        members.append(model)
        recipes.append(MemberRecipe(k, seed, offset, bag, pool_name, replaced))
    return Ensemble(config, tuple(members), tuple(recipes))


# --------------------------------------------------------------------------
# adversarial examples for training


def adversarial_pool(
    target: RnnClassifier,
    substitute: RnnClassifier | None,
    dataset: Dataset,
    count: int,
    attack_config: AttackConfig,
    seed: int = 0,
) -> list[AttackResult]:
    """Successful attacks on malicious ``dataset`` samples, alternating white-box and black-box.

    Samples are visited in a seeded order until ``count`` successes or the
    samples run out; samples the target already calls benign are skipped.
    """
    mal = [s for s in dataset if s.label == MALICIOUS]
    order = np.random.default_rng(seed).permutation(len(mal))
    pred, _ = neural.predict_sequences(target, [s.seq for s in mal])
    out: list[AttackResult] = []
    tried = 0
    for i in order:
        if len(out) >= count:
            break
        if pred[i] != MALICIOUS:
            continue
        s = mal[i]
        source = target if (substitute is None or tried % 2 == 0) else substitute
        cfg = replace(attack_config, seed=attack_config.seed + int(i))
        res = attack_sequence(target, source, s.seq, cfg, s.id)
        tried += 1
        if res.evaded:
            out.append(res)
    if tried and len(out) / tried < 0.1:
        log.warning("attack success rate %.1f%% while building the adversarial pool", 100 * len(out) / tried)
    return out


def adversarial_training(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    pool: list[AttackResult],
    fraction: float = 0.5,
) -> tuple[RnnClassifier, tuple[str, ...]]:
    """Retrain from scratch after swapping malicious samples for adversarial variants."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    data, replaced = replace_with_adversarial(dataset, pool, fraction)
    model, _ = neural.train(neural.init_model(model_config), data, train_config)
    return model, replaced


@dataclass(frozen=True)
class AdvTrainDefense:
    classifier: RnnClassifier
    replaced: tuple[str, ...] = field(default=(), repr=False)

    def predict(self, seq) -> tuple[int, bool]:
        return neural.classify_sequence(self.classifier, seq)[0], False

    def predict_many(self, seqs):
        pred, _ = neural.predict_sequences(self.classifier, seqs)
        return [int(p) for p in pred], [False] * len(pred)
