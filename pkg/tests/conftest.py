import numpy as np
import pytest

from advseq import neural
from advseq.seqdata import generate_synthetic, make_synth_spec


@pytest.fixture(scope="session")
def small_task():
    """A quick, well-separated task: 20 tokens, window 12."""
    spec = make_synth_spec(20, (12, 12), 0.2, seed=3)
    train = generate_synthetic(spec, 150, 150, "train")
    test = generate_synthetic(spec, 40, 40, "test")
    cfg = neural.ModelConfig(vocab_width=21, window=12, cell="lstm", hidden_units=12, dropout_rate=0.1, seed=1)
    model, _ = neural.train(neural.init_model(cfg), train, neural.TrainConfig(epochs=12, learning_rate=5e-3, seed=1))
    return train, test, model


def tiny_model(cell="lstm", hidden=4, window=5, width=7, seed=0, **kw):
    cfg = neural.ModelConfig(vocab_width=width, window=window, cell=cell, hidden_units=hidden, seed=seed, **kw)
    model = neural.init_model(cfg)
    rng = np.random.default_rng(seed + 100)
    # push weights off the small init so gradients are not trivially tiny
    params = {k: v + rng.normal(0, 0.3, v.shape) for k, v in model.params.items()}
    return neural.RnnClassifier(cfg, {k: np.array(v) for k, v in params.items()}, True)
