import numpy as np
import pytest

from specexit.model import ModelConfig, init_model
from specexit.train_lm import TrainConfig, epoch_loss, train_language_model


@pytest.fixture(scope="module")
def tiny_corpus(corpus):
    return corpus[:4096]


def test_loss_decreases(tiny_corpus):
    model = init_model(ModelConfig(num_layers=2, seed=1))
    trained, history = train_language_model(model, tiny_corpus,
                                            TrainConfig(epochs=3, seed=0))
    assert len(history) == 3
    assert history[-1] < history[0]
    assert history[-1] < np.log(256)  # better than uniform


def test_training_deterministic(tiny_corpus):
    cfg = TrainConfig(epochs=2, seed=5)
    m1, h1 = train_language_model(init_model(ModelConfig(num_layers=2, seed=1)),
                                  tiny_corpus, cfg)
    m2, h2 = train_language_model(init_model(ModelConfig(num_layers=2, seed=1)),
                                  tiny_corpus, cfg)
    assert h1 == h2
    for name in m1.tensors:
        assert np.array_equal(m1[name], m2[name])


def test_seed_changes_result(tiny_corpus):
    m1, _ = train_language_model(init_model(ModelConfig(num_layers=2, seed=1)),
                                 tiny_corpus, TrainConfig(epochs=1, seed=5))
    m2, _ = train_language_model(init_model(ModelConfig(num_layers=2, seed=1)),
                                 tiny_corpus, TrainConfig(epochs=1, seed=6))
    assert not np.array_equal(m1["embedding"], m2["embedding"])


def test_epoch_loss_finite(tiny_corpus):
    model = init_model(ModelConfig(num_layers=2, seed=1))
    loss = epoch_loss(model, tiny_corpus, TrainConfig(seed=0))
    assert np.isfinite(loss)
    # untrained byte model should sit near the uniform baseline
    assert abs(loss - np.log(256)) < 1.0


def test_rejects_tiny_corpus():
    model = init_model(ModelConfig(num_layers=1, seed=0))
    with pytest.raises(ValueError):
        train_language_model(model, b"", TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train_language_model(model, b"a", TrainConfig(epochs=1))
