"""End-to-end experiment: train, attack, defend, and tabulate adversarial recall."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import attack, embed, ensemble, neural, proximity, signatures, squeeze
from .attack import AttackConfig, AttackResult, SubstituteSpec
from .neural import ModelConfig, RnnClassifier, TrainConfig
from .seqdata import BENIGN, MALICIOUS, Dataset, generate_synthetic, make_synth_spec

log = logging.getLogger(__name__)

CSV_HEADER = (
    "defense",
    "adaptive_recall",
    "whitebox_recall",
    "blackbox_recall",
    "random_recall",
    "clean_accuracy",
    "fpr",
    "train_overhead_s",
    "inference_overhead_s",
)
ALL_DEFENSES = (
    "squeeze",
    "defgen",
    "neighbor",
    "ensemble-regular",
    "ensemble-subsequence",
    "ensemble-bagging",
    "ensemble-bagging_subsequence",
    "ensemble-adversarial",
    "ensemble-adversarial_subsequence",
    "signatures",
    "advtrain",
)


@dataclass(frozen=True)
class ExperimentPlan:
    """Everything that determines a run. Flat so it maps onto a ``key = value`` file."""

    # data
    vocab_size: int = 50
    seq_len_min: int = 40
    seq_len_max: int = 40
    overlap_fraction: float = 0.3
    benign_concentration: float = 0.85
    malicious_concentration: float = 0.85
    n_train: int = 2000
    n_test: int = 500
    n_holdout: int = 70
    # classifier
    cell: str = "lstm"
    hidden_units: int = 32
    window: int = 40
    dropout_rate: float = 0.2
    epochs: int = 30
    learning_rate: float = 3e-3
    batch_size: int = 32
    # substitute
    substitute_cell: str = "gru"
    substitute_hidden: int = 64
    substitute_epochs: int = 30
    # attacks
    attack_samples: int = 100
    random_seeds: tuple = (0, 1, 2, 3, 4)
    adaptive: bool = True
    adaptive_seeds: tuple = (0,)
    adaptive_samples: int = 50
    adaptive_iteration_cap: int = 10
    # defenses
    defenses: tuple = ALL_DEFENSES
    embed_dim: int = 32
    embed_iters: int = 100
    embed_radius: int = 5
    embed_corpus: str = "all"  # all | benign
    squeezed_size: int = 0  # 0 -> ceil(|D| / 2)
    defgen_m: int = 50
    defgen_order: int = 2
    ensemble_size: int = 9
    ensemble_epochs: int = 10
    ensemble_voting: str = "soft"
    adversarial_fraction: float = 0.5
    pool_per_member: bool = False
    ngram: int = 5
    p_threshold: float = 1.0
    sigs_threshold: int = 1
    # bookkeeping
    seed: int = 0
    csv_timings: bool = False
    output: str = "report.csv"

    def __post_init__(self):
        unknown = set(self.defenses) - set(ALL_DEFENSES)
        if unknown:
            raise ValueError(f"unknown defenses: {sorted(unknown)}")
        if self.seq_len_min > self.seq_len_max or self.seq_len_min < 0:
            raise ValueError("invalid sequence length range")
        if self.embed_corpus not in ("all", "benign"):
            raise ValueError("embed_corpus must be 'all' or 'benign'")
        if not self.random_seeds:
            raise ValueError("random_seeds must not be empty")
        ModelConfig(vocab_width=self.vocab_size + 1, window=self.window, cell=self.cell, hidden_units=self.hidden_units, dropout_rate=self.dropout_rate)
        ensemble.EnsembleConfig(size=self.ensemble_size, voting=self.ensemble_voting, adversarial_fraction=self.adversarial_fraction)

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentPlan":
        types = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown plan key {key!r}")
            kwargs[key] = _coerce(raw, types[key].default)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ExperimentPlan":
        return cls.from_mapping(read_kv_file(path))

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {','.join(str(x) for x in v) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"


def read_kv_file(path) -> dict:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(raw, default):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    if isinstance(default, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(x) for x in items)
        return tuple(items)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


# --------------------------------------------------------------------------
# metrics


def _predict_all(system, seqs) -> tuple[list[int], list[bool]]:
    many = getattr(system, "predict_many", None)
    if many is not None:
        return many(seqs)
    out = [system.predict(s) for s in seqs]
    return [int(p) for p, _ in out], [bool(f) for _, f in out]


def adversarial_recall(system, adversarial_seqs) -> float:
    """Percentage of adversarial inputs flagged or classified malicious."""
    if len(adversarial_seqs) == 0:
        raise ValueError("adversarial set is empty")
    labels, flags = _predict_all(system, list(adversarial_seqs))
    caught = sum(1 for p, f in zip(labels, flags) if f or p == MALICIOUS)
    return 100.0 * caught / len(adversarial_seqs)


def clean_accuracy_fpr(system, dataset: Dataset) -> tuple[float, float]:
    """Accuracy and false-positive rate in percent; flagged inputs count as malicious."""
    if len(dataset) == 0:
        raise ValueError("clean set is empty")
    labels, flags = _predict_all(system, dataset.sequences)
    pred = [MALICIOUS if f else p for p, f in zip(labels, flags)]
    acc, fpr = neural.accuracy_fpr(pred, dataset.labels)
    return 100.0 * acc, 100.0 * fpr


@dataclass(frozen=True)
class Baseline:
    classifier: RnnClassifier

    def predict(self, seq) -> tuple[int, bool]:
        return neural.classify_sequence(self.classifier, seq)[0], False

    def predict_many(self, seqs):
        pred, _ = neural.predict_sequences(self.classifier, seqs)
        return [int(p) for p in pred], [False] * len(pred)


@dataclass
class MetricsReport:
    rows: list  # dicts keyed by CSV_HEADER
    meta: dict = field(default_factory=dict)

    def row(self, defense: str) -> dict:
        for r in self.rows:
            if r["defense"] == defense:
                return r
        raise KeyError(defense)

    def csv_text(self, timings: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            out = []
            for key in CSV_HEADER:
                v = r.get(key)
                if key.endswith("overhead_s") and not timings:
                    v = None
                out.append(r["defense"] if key == "defense" else _fmt(v))
            w.writerow(out)
        return buf.getvalue()

    def write(self, path, timings: bool = False) -> tuple[Path, Path]:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.csv_text(timings), encoding="utf-8")
        side = path.with_suffix(".json")
        side.write_text(json.dumps({"rows": self.rows, "meta": self.meta}, indent=1, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
        return path, side


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.2f}"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


# --------------------------------------------------------------------------
# the run


@dataclass
class Workbench:
    """Shared artifacts of a run; built lazily so tests can reuse stages."""

    plan: ExperimentPlan
    train: Dataset
    test: Dataset
    holdout: Dataset
    classifier: RnnClassifier
    timings: dict = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        return self.classifier.config

    def train_config(self, epochs: int | None = None) -> TrainConfig:
        p = self.plan
        return TrainConfig(optimizer="adam", learning_rate=p.learning_rate, batch_size=p.batch_size,
                           epochs=p.epochs if epochs is None else epochs, seed=p.seed)

    def attack_config(self, seed: int = 0) -> AttackConfig:
        return AttackConfig(n=self.plan.window, seed=seed, adaptive_iteration_cap=self.plan.adaptive_iteration_cap)


def synth_splits(plan: ExperimentPlan) -> tuple[Dataset, Dataset, Dataset]:
    spec = make_synth_spec(
        plan.vocab_size, (plan.seq_len_min, plan.seq_len_max), plan.overlap_fraction, seed=plan.seed,
        benign_concentration=plan.benign_concentration, malicious_concentration=plan.malicious_concentration,
    )
    half = lambda n: (n - n // 2, n // 2)
    train = generate_synthetic(spec, *half(plan.n_train), split="train")
    test = generate_synthetic(spec, *half(plan.n_test), split="test")
    holdout = generate_synthetic(spec, *half(plan.n_holdout), split="holdout")
    return train, test, holdout


def prepare(plan: ExperimentPlan) -> Workbench:
    train, test, holdout = synth_splits(plan)
    cfg = ModelConfig(vocab_width=plan.vocab_size + 1, window=plan.window, cell=plan.cell,
                      hidden_units=plan.hidden_units, dropout_rate=plan.dropout_rate, seed=plan.seed)
    bench = Workbench(plan, train, test, holdout, neural.init_model(cfg))
    t = time.perf_counter()
    bench.classifier, _ = neural.train(bench.classifier, train, bench.train_config())
    bench.timings["baseline_train_s"] = time.perf_counter() - t
    return bench


def attack_targets(bench: Workbench) -> list:
    """The first ``attack_samples`` malicious test samples the baseline detects."""
    mal = [s for s in bench.test if s.label == MALICIOUS]
    pred, _ = neural.predict_sequences(bench.classifier, [s.seq for s in mal])
    return [s for s, p in zip(mal, pred) if p == MALICIOUS][: bench.plan.attack_samples]


def run_variant(bench: Workbench, targets, variant: str, seed: int = 0, substitute=None) -> list[AttackResult]:
    out = []
    for k, s in enumerate(targets):
        cfg = AttackConfig(n=bench.plan.window, variant=variant, seed=seed * 100_003 + k)
        out.append(attack.run_attack(bench.classifier, s.seq, cfg, substitute, s.id))
    return out


def _evaded(results) -> list:
    return [r.perturbed for r in results if r.evaded]


def _safe_recall(system, seqs):
    return adversarial_recall(system, seqs) if seqs else None


def build_defense(name: str, bench: Workbench, shared: dict):
    """Construct one defense; ``shared`` caches the adversarial pool and generators."""
    p = bench.plan
    f = bench.classifier
    if name == "squeeze":
        corpus = bench.train if p.embed_corpus == "all" else bench.train.of_label(BENIGN)
        counts = embed.build_cooccurrence(corpus, p.embed_radius, p.vocab_size)
        emb = embed.train_embeddings(counts, p.embed_dim, p.embed_iters, p.seed)
        smap = squeeze.build_squeeze_map(emb, p.squeezed_size or None)
        thr = squeeze.calibrate_threshold(smap, f, bench.train)
        shared["squeeze_threshold"] = thr
        return squeeze.SqueezeDefense(f, squeeze.SqueezeDetector(smap, thr))
    if name == "neighbor":
        return proximity.NeighborDefense.build(f, bench.train)
    if name == "defgen":
        cfg = proximity.DefGenConfig(m_generated=p.defgen_m, order=p.defgen_order, seed=p.seed)
        gens = [
            proximity.train_generator(bench.train.of_label(c).sequences, p.vocab_size, cfg.order, cfg.smoothing, p.seed, c)
            for c in (BENIGN, MALICIOUS)
        ]
        return proximity.DefGenDefense.build(f, gens[0], gens[1], cfg)
    if name.startswith("ensemble-"):
        variant = name.split("-", 1)[1]
        cfg = ensemble.EnsembleConfig(variant, p.ensemble_size, p.ensemble_voting, None, p.adversarial_fraction, p.seed)
        pool = None
        if cfg.adversarial:
            pool = member_pool_factory(bench, shared) if p.pool_per_member else adversarial_pool(bench, shared)
        return ensemble.train_ensemble(cfg, bench.train, bench.model_config, bench.train_config(p.ensemble_epochs), pool)
    if name == "signatures":
        pool = adversarial_pool(bench, shared)
        sigs = signatures.build_signature_set(
            [r.perturbed for r in pool], bench.train.of_label(BENIGN).sequences, p.ngram, p.p_threshold, p.sigs_threshold
        )
        shared["signature_count"] = len(sigs.signatures)
        return signatures.SignatureDefense(f, sigs)
    if name == "advtrain":
        pool = adversarial_pool(bench, shared)
        model, replaced = ensemble.adversarial_training(bench.train, bench.model_config, bench.train_config(), pool, p.adversarial_fraction)
        return ensemble.AdvTrainDefense(model, replaced)
    raise ValueError(f"unknown defense {name!r}")


def substitute_model(bench: Workbench, shared: dict) -> RnnClassifier:
    if "substitute" not in shared:
        p = bench.plan
        spec = SubstituteSpec(cell=p.substitute_cell, hidden_units=p.substitute_hidden, epochs=p.substitute_epochs, seed=p.seed)
        shared["substitute"] = attack.train_substitute(bench.classifier, bench.holdout, spec)
        shared["substitute_agreement"] = attack.agreement(bench.classifier, shared["substitute"], bench.test)
    return shared["substitute"]


def adversarial_pool(bench: Workbench, shared: dict) -> list[AttackResult]:
    if "pool" not in shared:
        p = bench.plan
        n_mal = int((bench.train.labels == MALICIOUS).sum())
        count = math.floor(p.adversarial_fraction * n_mal)
        t = time.perf_counter()
        shared["pool"] = ensemble.adversarial_pool(
            bench.classifier, substitute_model(bench, shared), bench.train, count, bench.attack_config(p.seed), p.seed
        )
        shared["pool_s"] = time.perf_counter() - t
    return shared["pool"]


def member_pool_factory(bench: Workbench, shared: dict) -> Callable[[int], list[AttackResult]]:
    """Pools drawn separately for each member seed, attacking the baseline classifier."""
    p = bench.plan
    count = math.floor(p.adversarial_fraction * int((bench.train.labels == MALICIOUS).sum()))
    sub = substitute_model(bench, shared)
    return lambda seed: ensemble.adversarial_pool(bench.classifier, sub, bench.train, count, bench.attack_config(seed), seed)


def _adaptive_id(name: str) -> str:
    return "ensemble" if name.startswith("ensemble-") else name


def run_experiment_table(plan: ExperimentPlan, progress: Callable[[str], None] | None = None, bench: Workbench | None = None) -> MetricsReport:
    say = progress or (lambda msg: log.info(msg))
    stage = "setup"
    try:
        stage = "baseline"
        if bench is None:
            bench = prepare(plan)
        say(f"baseline trained in {bench.timings['baseline_train_s']:.1f}s")
        shared: dict = {}
        base = Baseline(bench.classifier)
        targets = attack_targets(bench)

        stage = "attacks"
        t_attack = time.perf_counter()
        wb = run_variant(bench, targets, "whitebox", plan.seed)
        bb = run_variant(bench, targets, "blackbox", plan.seed, substitute_model(bench, shared))
        rnd = {s: run_variant(bench, targets, "random", s) for s in plan.random_seeds}
        adv = {"whitebox": _evaded(wb), "blackbox": _evaded(bb)}
        adv_random = {s: _evaded(r) for s, r in rnd.items()}
        wb_sources = [t for t, r in zip(targets, wb) if r.evaded][: plan.adaptive_samples]
        bench.timings["attacks_s"] = time.perf_counter() - t_attack
        say(f"attacks: whitebox {len(adv['whitebox'])}/{len(targets)}, blackbox {len(adv['blackbox'])}/{len(targets)}")

        meta = {
            "plan": asdict(plan),
            "recall_denominator": "attack outputs that evade the undefended classifier",
            "adaptive_denominator": "white-box-evaded source samples; failed adaptive attacks count as caught",
            "attack_targets": len(targets),
            "evasion": {
                "whitebox": len(adv["whitebox"]) / max(1, len(targets)),
                "blackbox": len(adv["blackbox"]) / max(1, len(targets)),
                "random_per_seed": {str(s): len(v) / max(1, len(targets)) for s, v in adv_random.items()},
            },
            "baseline": {},
            "defenses": {},
            "timings": dict(bench.timings),
        }

        def evaluate(name, system, train_s):
            t = time.perf_counter()
            acc, fpr = clean_accuracy_fpr(system, bench.test)
            infer_s = time.perf_counter() - t
            row = {"defense": name, "clean_accuracy": acc, "fpr": fpr,
                   "train_overhead_s": train_s, "inference_overhead_s": infer_s}
            row["whitebox_recall"] = _safe_recall(system, adv["whitebox"])
            row["blackbox_recall"] = _safe_recall(system, adv["blackbox"])
            per_seed = {str(s): _safe_recall(system, v) for s, v in adv_random.items()}
            defined = [v for v in per_seed.values() if v is not None]
            row["random_recall"] = float(np.mean(defined)) if defined else None
            info = {"denominators": {"whitebox": len(adv["whitebox"]), "blackbox": len(adv["blackbox"]),
                                     "random_per_seed": {str(s): len(v) for s, v in adv_random.items()}},
                    "random_recall_per_seed": per_seed}
            return row, info

        stage = "baseline-eval"
        t0 = time.perf_counter()
        row, info = evaluate("none", base, 0.0)
        row["adaptive_recall"] = None
        base_infer = row["inference_overhead_s"]
        row["inference_overhead_s"] = 0.0
        rows = [row]
        meta["baseline"] = info
        meta["substitute_agreement"] = shared.get("substitute_agreement")

        for name in plan.defenses:
            stage = f"defense:{name}"
            t = time.perf_counter()
            system = build_defense(name, bench, shared)
            train_s = time.perf_counter() - t
            row, info = evaluate(name, system, train_s)
            row["inference_overhead_s"] = max(0.0, row["inference_overhead_s"] - base_infer)
            if plan.adaptive and wb_sources:
                stage = f"adaptive:{name}"
                t = time.perf_counter()
                per_seed = {}
                for s in plan.adaptive_seeds:
                    caught = 0
                    for k, src in enumerate(wb_sources):
                        cfg = AttackConfig(n=plan.window, seed=s * 100_003 + k, adaptive_iteration_cap=plan.adaptive_iteration_cap)
                        res = attack.adaptive_attack(_adaptive_id(name), system, src.seq, cfg, src.id)
                        final, flagged = system.predict(res.perturbed)
                        caught += int(flagged or final == MALICIOUS)
                    per_seed[str(s)] = 100.0 * caught / len(wb_sources)
                row["adaptive_recall"] = min(per_seed.values())
                info["adaptive_recall_per_seed"] = per_seed
                info["adaptive_denominator"] = len(wb_sources)
                info["adaptive_s"] = time.perf_counter() - t
            else:
                row["adaptive_recall"] = None
            if name == "squeeze":
                info["threshold_adv"] = shared["squeeze_threshold"]
            if name == "signatures":
                info["signature_count"] = shared["signature_count"]
            if name == "advtrain":
                info["replaced"] = len(system.replaced)
            rows.append(row)
            meta["defenses"][name] = info
            say(f"{name}: whitebox recall {_fmt(row['whitebox_recall'])} adaptive {_fmt(row['adaptive_recall'])}")
        meta["adversarial_pool_size"] = len(shared["pool"]) if "pool" in shared else None
        meta["timings"]["total_s"] = time.perf_counter() - t0 + bench.timings.get("baseline_train_s", 0.0)
        return MetricsReport(rows, meta)
    except Exception as exc:
        raise RuntimeError(f"experiment failed at stage {stage!r}: {exc}") from exc
