import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advseq import neural
from advseq.neural import ModelConfig, RnnClassifier, TrainConfig
from advseq.seqdata import BENIGN, MALICIOUS, Dataset, LabeledSample, generate_synthetic, make_synth_spec

from conftest import tiny_model


def fd_input_jacobian(model, window, h=1e-5):
    M = np.zeros((model.window, model.config.vocab_width))
    M[np.arange(model.window), window] = 1.0
    J = np.zeros_like(M)
    for idx in np.ndindex(*M.shape):
        up, dn = M.copy(), M.copy()
        up[idx] += h
        dn[idx] -= h
        J[idx] = (neural.onehot_logit(model, up) - neural.onehot_logit(model, dn)) / (2 * h)
    return J


def rel_error(a, b, floor=1e-6):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


@pytest.mark.parametrize(
    "cell,kw",
    [("lstm", {}), ("gru", {}), ("rnn", {}), ("lstm", {"bidirectional": True}), ("gru", {"depth": 2})],
)
def test_input_jacobian_matches_finite_differences(cell, kw):
    model = tiny_model(cell, hidden=5, window=4, width=6, seed=7, **kw)
    window = np.random.default_rng(1).integers(0, 6, size=4)
    assert rel_error(neural.input_jacobian(model, window), fd_input_jacobian(model, window)) <= 1e-4


@pytest.mark.parametrize("cell", ["lstm", "gru", "rnn"])
def test_parameter_gradients_match_finite_differences(cell):
    model = tiny_model(cell, hidden=3, window=4, width=5, seed=2, dense_units=3, bidirectional=True)
    X = np.random.default_rng(0).integers(0, 5, size=(3, 4))
    y = np.array([1.0, 0.0, 1.0])

    def loss(params):
        m = RnnClassifier(model.config, params, True)
        return neural.bce_with_logits(neural.window_logits(m, X), y) * len(y)

    logit, cache = neural._forward(model, X)
    grads, _ = neural._backward(model, cache, neural._sigmoid(logit) - y)
    h = 1e-6
    for name, p in model.params.items():
        flat = p.ravel()
        for k in range(0, flat.size, max(1, flat.size // 6)):
            up = {n: v.copy() for n, v in model.params.items()}
            dn = {n: v.copy() for n, v in model.params.items()}
            up[name].ravel()[k] += h
            dn[name].ravel()[k] -= h
            num = (loss(up) - loss(dn)) / (2 * h)
            assert abs(num - grads[name].ravel()[k]) <= 1e-5 * max(1.0, abs(num)), name


def test_zero_output_layer_gives_half():
    model = tiny_model("lstm")
    params = dict(model.params, **{"out.W": np.zeros_like(model.params["out.W"]), "out.b": np.array(0.0)})
    m = RnnClassifier(model.config, params, True)
    assert neural.forward_window(m, [1, 2, 3, 4, 5]) == 0.5


def test_all_padding_window_is_finite():
    c = neural.forward_window(tiny_model("gru"), [0] * 5)
    assert 0.0 < c < 1.0


def test_hand_built_single_unit_recurrence():
    cfg = ModelConfig(vocab_width=3, window=2, cell="rnn", hidden_units=1, dropout_rate=0.0)
    params = {
        "rnn0.fwd.Wx": np.array([[0.0], [0.5], [-1.0]]),
        "rnn0.fwd.Wh": np.array([[2.0]]),
        "rnn0.fwd.b": np.array([0.1]),
        "out.W": np.array([1.5]),
        "out.b": np.array(-0.2),
    }
    m = RnnClassifier(cfg, params, True)
    h1 = math.tanh(0.5 + 0.1)
    h2 = math.tanh(-1.0 + 2.0 * h1 + 0.1)
    expected = 1.0 / (1.0 + math.exp(-(1.5 * h2 - 0.2)))
    assert neural.forward_window(m, [1, 2]) == pytest.approx(expected, abs=1e-14)


def test_zero_weights_give_zero_jacobian():
    model = tiny_model("lstm", dense_units=3)
    params = {k: (np.zeros_like(v) if not k.endswith(".b") else v) for k, v in model.params.items()}
    m = RnnClassifier(model.config, params, True)
    assert not neural.input_jacobian(m, [1, 2, 0, 3, 4]).any()


def test_permuting_channels_permutes_jacobian_columns():
    model = tiny_model("gru", width=6, seed=3)
    perm = np.array([0, 3, 1, 5, 2, 4])  # channel k of the new model = channel perm[k] of the old
    params = dict(model.params)
    params["rnn0.fwd.Wx"] = model.params["rnn0.fwd.Wx"][perm]
    m2 = RnnClassifier(model.config, params, True)
    inv = np.argsort(perm)
    w = np.array([1, 4, 2, 0, 5])
    J = neural.input_jacobian(model, w)
    J2 = neural.input_jacobian(m2, inv[w])
    assert np.allclose(J2, J[:, perm], atol=1e-13)


def test_window_length_checked():
    with pytest.raises(ValueError):
        neural.forward_window(tiny_model(), [1, 2, 3])
    with pytest.raises(ValueError):
        neural.forward_window(tiny_model(), [1, 2, 3, 4, 99])


def test_init_model_determinism_and_errors():
    cfg = ModelConfig(vocab_width=9, window=4, hidden_units=3, seed=5)
    a, b = neural.init_model(cfg), neural.init_model(cfg)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = neural.init_model(ModelConfig(vocab_width=9, window=4, hidden_units=3, seed=6))
    assert not np.array_equal(a.params["rnn0.fwd.Wx"], c.params["rnn0.fwd.Wx"])
    with pytest.raises(ValueError):
        ModelConfig(vocab_width=9, hidden_units=0)


def test_inference_ignores_dropout():
    model = tiny_model("lstm", dropout_rate=0.5)
    w = [1, 2, 3, 4, 5]
    assert neural.forward_window(model, w) == neural.forward_window(model, w)
    rng = np.random.default_rng(0)
    assert neural.forward_window(model, w, train_mode=True, rng=rng) != neural.forward_window(model, w)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=0, max_size=17))
def test_classify_is_or_of_windows(seq):
    model = tiny_model("lstm", width=7, window=5)
    label, conf = neural.classify_sequence(model, seq)
    wins = neural.sequence_windows(seq, 5)
    direct = [neural.forward_window(model, w) for w in wins]
    assert np.allclose(conf, direct, atol=1e-14)
    assert label == (MALICIOUS if max(direct) >= 0.5 else BENIGN)


def test_evaluate_accuracy_matches_tally():
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 2, 20)
    pred = rng.integers(0, 2, 20)
    acc, fpr = neural.accuracy_fpr(pred, labels)
    correct = sum(int(p == l) for p, l in zip(pred, labels))
    fp = sum(int(p == 1 and l == 0) for p, l in zip(pred, labels))
    assert acc == correct / 20
    assert fpr == fp / sum(int(l == 0) for l in labels)
    assert neural.accuracy_fpr([1, 1, 1, 1], [0, 1, 0, 1]) == (0.5, 1.0)
    assert neural.accuracy_fpr([0, 1], [0, 1]) == (1.0, 0.0)
    with pytest.raises(ValueError):
        neural.accuracy_fpr([], [])


def test_training_is_reproducible_and_zero_epochs_is_identity():
    spec = make_synth_spec(8, (6, 6), 0.2, seed=1)
    data = generate_synthetic(spec, 20, 20)
    model = neural.init_model(ModelConfig(vocab_width=9, window=6, hidden_units=4, seed=2))
    a, ha = neural.train(model, data, TrainConfig(epochs=2, seed=3))
    b, hb = neural.train(model, data, TrainConfig(epochs=2, seed=3))
    assert ha == hb and all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    z, _ = neural.train(model, data, TrainConfig(epochs=0))
    assert all(np.array_equal(z.params[k], model.params[k]) for k in model.params)


def test_separable_task_learns(small_task):
    _, test, model = small_task
    acc, fpr = neural.evaluate_accuracy(model, test)
    assert acc >= 0.9


def test_indistinguishable_classes_near_chance():
    spec = make_synth_spec(12, (10, 10), 1.0, seed=0)
    train = generate_synthetic(spec, 150, 150, "train")
    test = generate_synthetic(spec, 200, 200, "test")
    cfg = ModelConfig(vocab_width=13, window=10, hidden_units=8, seed=0)
    model, _ = neural.train(neural.init_model(cfg), train, TrainConfig(epochs=4, learning_rate=3e-3))
    acc, _ = neural.evaluate_accuracy(model, test)
    assert 0.4 <= acc <= 0.6


def test_nan_loss_aborts():
    model = tiny_model("rnn")
    params = dict(model.params, **{"out.b": np.array(np.nan)})
    m = RnnClassifier(model.config, params, False)
    data = Dataset((LabeledSample((1, 2, 3, 4, 5), MALICIOUS, "a"),), "train")
    with pytest.raises(FloatingPointError):
        neural.train(m, data, TrainConfig(epochs=1))


def test_checkpoint_roundtrip(tmp_path):
    model = tiny_model("gru", bidirectional=True, dense_units=2)
    neural.save_checkpoint(model, tmp_path / "m.npz")
    back = neural.load_checkpoint(tmp_path / "m.npz")
    assert back.config == model.config
    assert all(np.array_equal(back.params[k], model.params[k]) for k in model.params)


def test_checkpoint_shape_validation(tmp_path):
    model = tiny_model("lstm")
    bad = RnnClassifier(model.config, dict(model.params, **{"out.W": np.zeros(9)}), True)
    neural.save_checkpoint(bad, tmp_path / "m.npz")
    with pytest.raises(ValueError, match="out.W"):
        neural.load_checkpoint(tmp_path / "m.npz")
