import pytest

from specexit.model import ModelConfig, init_model
from specexit.train_lm import TrainConfig, train_language_model

CORPUS_PATH = "data/fixture_corpus.txt"


@pytest.fixture(scope="session")
def corpus():
    with open(CORPUS_PATH, "rb") as fh:
        return fh.read()


@pytest.fixture(scope="session")
def small_target(corpus):
    """4-layer target trained briefly; enough structure for oracle tests."""
    model = init_model(ModelConfig(num_layers=4, seed=7))
    model, _ = train_language_model(model, corpus[:16384], TrainConfig(epochs=3, seed=1))
    return model


@pytest.fixture(scope="session")
def small_draft(corpus):
    model = init_model(ModelConfig(num_layers=2, seed=8))
    model, _ = train_language_model(model, corpus[:16384], TrainConfig(epochs=2, seed=2))
    return model


@pytest.fixture(scope="session")
def untrained_target():
    return init_model(ModelConfig(num_layers=4, seed=3))
