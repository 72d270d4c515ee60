import numpy as np
import pytest

from bilasr import synthdata as sd
from bilasr.model import AcousticModel, ModelConfig
from bilasr.training import TrainingPlan, train_stage

TINY = dict(model_dim=8, heads=2, ff_dim=16, n_shared_layers=1, n_pe_layers=1, n_lid_layers=1, chunk_frames=4)
SMALL_SIZES = {
    "train": {"mono-A": 24, "mono-B": 24},
    "dev": {"mono-A": 4, "mono-B": 4},
    "test": {"mono-A": 6, "mono-B": 6, "code-mixed": 6},
}


@pytest.fixture(scope="session")
def specs():
    return sd.gen_locale_specs(0, n_words=12, shared_fraction=0.25)


@pytest.fixture(scope="session")
def space(specs):
    return specs[0].space


@pytest.fixture(scope="session")
def corpus(specs):
    return sd.build_corpus(specs, SMALL_SIZES, seed=0, words_per_utt=(2, 3))


def tiny_model(space, **kw):
    return AcousticModel(ModelConfig(**dict(TINY, **kw)), space)


@pytest.fixture(scope="session")
def trained_aux(corpus, space):
    """A small aux-mode model trained long enough to have learned something."""
    model = AcousticModel(ModelConfig(model_dim=16, heads=2, ff_dim=32, n_shared_layers=1, n_pe_layers=1,
                                      chunk_frames=4), space)
    plan = TrainingPlan(stage="aux-joint", epochs=12, batch_utterances=4, lr=3e-3, warmup_steps=10)
    train_stage(model, corpus.select("train"), plan)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)
