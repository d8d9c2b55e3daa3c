import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from indret.datakit import SyntheticConfig, generate_synthetic
from indret.network import TrainConfig
from indret.pipeline import Corpus, ExperimentConfig, train_model

settings.register_profile("repo", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

SMALL = SyntheticConfig(corpus_size=144, n_queries=12, grid_rows=5, grid_cols=5, resolution=80, seed=5)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    manifest, annotations = generate_synthetic(SMALL, root)
    return root, manifest, annotations


@pytest.fixture(scope="session")
def small_corpus(small_dataset):
    return Corpus(small_dataset[1])


@pytest.fixture(scope="session")
def trained_small(small_corpus):
    """Model trained on ten of the twelve small-corpus queries; the last two are held out."""
    ids = small_corpus.manifest.query_ids
    cfg = ExperimentConfig(train=TrainConfig(epochs=12), val_queries=2)
    model, log = train_model(small_corpus, ids[:10], cfg)
    return model, log, ids[:10], ids[10:]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
