import csv
import io
import json

import pytest

from advseq import harness
from advseq.harness import ALL_DEFENSES, CSV_HEADER, ExperimentPlan, MetricsReport
from advseq.seqdata import BENIGN, MALICIOUS

TINY = dict(
    vocab_size=12, seq_len_min=10, seq_len_max=10, n_train=160, n_test=60, n_holdout=60, overlap_fraction=0.2,
    hidden_units=8, window=10, epochs=10, substitute_hidden=12, substitute_epochs=15, attack_samples=10,
    random_seeds=(0, 1), adaptive_samples=4, defgen_m=10, ensemble_size=2, ensemble_epochs=3, ngram=3,
    embed_dim=8, embed_iters=20,
)


@pytest.fixture(scope="module")
def tiny_report():
    return harness.run_experiment_table(ExperimentPlan(**TINY))


class Fixed:
    """Says malicious for sequences starting with token 1, flags those starting with 2."""

    def predict(self, seq):
        return (MALICIOUS if seq[0] == 1 else BENIGN), seq[0] == 2


def test_recall_counts_flags_and_labels():
    assert harness.adversarial_recall(Fixed(), [(1,), (2,), (3,), (3,)]) == 50.0
    with pytest.raises(ValueError):
        harness.adversarial_recall(Fixed(), [])


def test_plan_from_file(tmp_path):
    (tmp_path / "p.txt").write_text("# tiny\nvocab_size = 12\nrandom_seeds = 3, 4\nadaptive = false\nlearning_rate=0.01\n")
    plan = ExperimentPlan.from_file(tmp_path / "p.txt")
    assert plan.vocab_size == 12 and plan.random_seeds == (3, 4) and plan.adaptive is False
    assert plan.learning_rate == 0.01
    again = ExperimentPlan.from_mapping(harness.read_kv_file(_write(tmp_path / "q.txt", plan.to_text())))
    assert again == plan


def _write(path, text):
    path.write_text(text)
    return path


def test_plan_rejects_bad_values():
    with pytest.raises(ValueError):
        ExperimentPlan.from_mapping({"vocab": "3"})
    with pytest.raises(ValueError):
        ExperimentPlan.from_mapping({"adaptive": "maybe"})
    with pytest.raises(ValueError):
        ExperimentPlan(defenses=("squeeze", "moat"))
    with pytest.raises(ValueError):
        ExperimentPlan(seq_len_min=5, seq_len_max=4)


def test_csv_format_and_blank_timings(tmp_path):
    rows = [{"defense": "none", "whitebox_recall": 0.0, "clean_accuracy": 97.123, "fpr": 1.0,
             "train_overhead_s": 1.5, "inference_overhead_s": 0.25}]
    rep = MetricsReport(rows, {"note": (1, 2)})
    text = rep.csv_text()
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[1] == "none,,0.00,,,97.12,1.00,,"
    assert rep.csv_text(timings=True).splitlines()[1].endswith("1.50,0.25")
    csv_path, side = rep.write(tmp_path / "out" / "r.csv")
    assert csv_path.read_text() == text
    doc = json.loads(side.read_text())
    assert doc["rows"][0]["train_overhead_s"] == 1.5 and doc["meta"]["note"] == [1, 2]


def test_table_shape_and_baseline(tiny_report):
    rows = list(csv.DictReader(io.StringIO(tiny_report.csv_text())))
    assert [r["defense"] for r in rows] == ["none", *ALL_DEFENSES]
    base = tiny_report.row("none")
    assert base["whitebox_recall"] == 0.0
    assert base["adaptive_recall"] is None
    for r in tiny_report.rows:
        for key in ("whitebox_recall", "blackbox_recall", "clean_accuracy", "fpr"):
            v = r[key]
            assert v is None or 0.0 <= v <= 100.0
    assert all(r["train_overhead_s"] == "" for r in rows)


def test_meta_records_denominators(tiny_report):
    meta = tiny_report.meta
    n_wb = meta["baseline"]["denominators"]["whitebox"]
    assert n_wb == round(meta["evasion"]["whitebox"] * meta["attack_targets"])
    sq = meta["defenses"]["squeeze"]
    assert sq["threshold_adv"] >= 0
    assert set(sq["adaptive_recall_per_seed"]) == {"0"}
    assert sq["adaptive_denominator"] == min(n_wb, TINY["adaptive_samples"])
    assert meta["defenses"]["signatures"]["signature_count"] >= 0
    assert 0.0 <= meta["substitute_agreement"] <= 1.0
    assert set(meta["baseline"]["random_recall_per_seed"]) == {"0", "1"}


def test_subset_run_is_deterministic():
    plan = ExperimentPlan(**dict(TINY, defenses=("squeeze", "neighbor"), adaptive=False))
    a = harness.run_experiment_table(plan)
    b = harness.run_experiment_table(plan)
    assert a.csv_text() == b.csv_text()
    assert [r["defense"] for r in a.rows] == ["none", "squeeze", "neighbor"]
    assert a.row("squeeze")["adaptive_recall"] is None


def test_failure_names_stage(monkeypatch):
    plan = ExperimentPlan(**dict(TINY, defenses=("neighbor",), adaptive=False, attack_samples=2))

    def boom(name, bench, shared):
        raise ArithmeticError("no")

    monkeypatch.setattr(harness, "build_defense", boom)
    with pytest.raises(RuntimeError, match="defense:neighbor"):
        harness.run_experiment_table(plan)


def test_benign_embeddings_and_member_pools():
    plan = ExperimentPlan(**dict(TINY, defenses=("squeeze", "ensemble-adversarial"), adaptive=False,
                                 embed_corpus="benign", pool_per_member=True))
    report = harness.run_experiment_table(plan)
    assert [r["defense"] for r in report.rows] == ["none", "squeeze", "ensemble-adversarial"]
    with pytest.raises(ValueError):
        ExperimentPlan(embed_corpus="malicious")
