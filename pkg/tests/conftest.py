import pytest
import torch

from dualpath.config import CorpusConfig, ExperimentConfig, TrainingConfig
from dualpath.synth import make_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus_config():
    return CorpusConfig(train=12, valid=6, test=6, min_tokens=3, max_tokens=5)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_corpus_config):
    return make_corpus(tiny_corpus_config)


@pytest.fixture(scope="session")
def tiny_experiment(tiny_corpus_config):
    return ExperimentConfig(
        corpus=tiny_corpus_config,
        training=TrainingConfig(epochs=2, batch_size=6, warmup_steps=4),
    )


@pytest.fixture(scope="session")
def tiny_run(tiny_corpus, tiny_experiment, tmp_path_factory):
    from dualpath.training import run_training

    out = tmp_path_factory.mktemp("tiny-run")
    return run_training(tiny_experiment, tiny_corpus, out)
