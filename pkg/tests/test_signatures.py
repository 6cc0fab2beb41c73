from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from advseq import signatures as sg
from advseq.seqdata import MALICIOUS, Vocabulary
from advseq.signatures import NgramStats, SignatureSet

from oracles import brute_probability, substring_present

corpus = st.lists(st.lists(st.integers(1, 4), max_size=9), max_size=6)


def test_worked_example():
    adv = [(1, 2, 3), (1, 2, 4)]
    ben = [(1, 2, 5)]
    stats = NgramStats.from_corpora(adv, ben, 2)
    assert sg.adv_ngram_probability(stats, (1, 2)) == Fraction(2, 3)
    assert sg.adv_ngram_probability(stats, (2, 3)) == 1
    assert sg.adv_ngram_probability(stats, (2, 5)) == 0
    assert sg.adv_ngram_probability(stats, (7, 7)) == 0
    sigs = sg.build_signature_set(adv, ben, n=2)
    assert sigs.signatures == {(2, 3), (2, 4)}


def test_presence_not_frequency():
    # a gram repeated inside one sample counts once for that sample
    stats = NgramStats.from_corpora([(1, 1, 1, 1)], [(1, 1)], 2)
    assert stats.counts[(1, 1)] == (1, 1)
    assert sg.adv_ngram_probability(stats, (1, 1)) == Fraction(1, 2)


@settings(max_examples=100, deadline=None)
@given(corpus, corpus, st.integers(1, 3))
def test_probability_matches_brute_force(adv, ben, n):
    stats = NgramStats.from_corpora(adv, ben, n)
    grams = {tuple(s[k : k + n]) for s in adv + ben for k in range(len(s) - n + 1)}
    for g in grams:
        assert sg.adv_ngram_probability(stats, g) == brute_probability(adv, ben, g)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.integers(1, 4), max_size=9), min_size=1, max_size=6), corpus, st.integers(1, 3))
def test_signature_membership_and_detection_match_scan(adv, ben, n):
    sigs = sg.build_signature_set(adv, ben, n=n)
    for s in adv:
        for k in range(len(s) - n + 1):
            g = tuple(s[k : k + n])
            assert (g in sigs.signatures) == (brute_probability(adv, ben, g) >= 1)
    for s in adv + ben:
        naive = sorted(g for g in sigs.signatures if substring_present(s, g))
        assert sigs.matches(s) == naive
        assert sigs.detect(s)[0] == (len(naive) >= 1)


def test_threshold_is_inclusive():
    adv = [(1, 2), (1, 2), (3, 4)]
    ben = [(1, 2)]
    assert (1, 2) in sg.build_signature_set(adv, ben, n=2, p_threshold=2 / 3).signatures
    assert (1, 2) not in sg.build_signature_set(adv, ben, n=2, p_threshold=0.7).signatures


def test_sigs_threshold_counts_distinct_matches():
    sigs = SignatureSet(2, frozenset({(1, 2), (3, 4)}), 1.0, 2)
    assert not sigs.detect((1, 2, 1, 2))[0]
    assert sigs.detect((1, 2, 3, 4))[0]


def test_benign_hits_suppress_signature():
    sigs = sg.build_signature_set([(5, 6, 7)], [(5, 6, 7)], n=3)
    assert not sigs.signatures
    assert sigs.detect((5, 6, 7)) == (False, [])


def test_bad_inputs():
    with pytest.raises(ValueError):
        sg.build_signature_set([], [(1, 2)], n=2)
    with pytest.raises(ValueError):
        sg.count_ngrams([(1, 2)], 0)
    with pytest.raises(ValueError):
        sg.adv_ngram_probability(NgramStats.from_corpora([(1, 2)], [], 2), (1,))


def test_padding_is_ignored():
    assert sg.ngrams((0, 0, 1, 2), 2) == {(1, 2)}
    assert sg.ngrams((1,), 2) == set()


def test_creates_signature_window():
    sigs = SignatureSet(3, frozenset({(1, 2, 3)}))
    toks = [9, 1, 2, 3, 9]
    assert [sigs.creates_signature(toks, i) for i in range(5)] == [False, True, True, True, False]


def test_file_roundtrip(tmp_path):
    vocab = Vocabulary(tuple(f"api{k}" for k in range(1, 7)))
    sigs = SignatureSet(2, frozenset({(1, 2), (5, 6)}), 0.75, 2)
    sigs.save(tmp_path / "s.txt", vocab)
    back = SignatureSet.load(tmp_path / "s.txt", vocab)
    assert back == sigs
    (tmp_path / "bad.txt").write_text("# version=1 n=3 p_threshold=1.0 sigs_threshold=1\napi1 api2\n")
    with pytest.raises(ValueError):
        SignatureSet.load(tmp_path / "bad.txt", vocab)


def test_defense_flags_before_classifier(small_task):
    _, test, model = small_task
    test = list(test)[:10]
    seq = test[0].seq
    sigs = SignatureSet(2, frozenset({tuple(seq[:2])}))
    defense = sg.SignatureDefense(model, sigs)
    assert defense.predict(seq) == (MALICIOUS, True)
    labels, flags = defense.predict_many([s.seq for s in test])
    assert flags[0] and labels[0] == MALICIOUS
    for s, lab, f in zip(test, labels, flags):
        assert lab == defense.predict(s.seq)[0]
