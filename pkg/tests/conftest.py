import numpy as np
import pytest

from ehtune.backbone import build_backbone
from ehtune.experiment import ExperimentConfig, pretrain_backbone
from ehtune.tasks import make_task
from helpers import SMALL, TINY


@pytest.fixture(scope="session")
def pretrained():
    """The default desk backbone after the default masked-token pretraining (~40 s)."""
    return pretrain_backbone(ExperimentConfig())


@pytest.fixture(scope="session")
def backbone(pretrained):
    return pretrained.backbone


@pytest.fixture(scope="session")
def topic_pair():
    return make_task("topic-pair", 0)


@pytest.fixture
def tiny_backbone():
    return build_backbone(TINY, seed=0)


@pytest.fixture
def small_backbone():
    return build_backbone(SMALL, seed=0)


@pytest.fixture
def small_task():
    """topic-pair trimmed to 64 train and 64 dev rows, for quick training runs."""
    t = make_task("topic-pair", 0)
    t.train_X, t.train_y = t.train_X[:64], t.train_y[:64]
    t.dev_X, t.dev_y = t.dev_X[:64], t.dev_y[:64]
    return t


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
