import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bhavnet.data import EmbeddingTable, LabeledPair, synthetic_task  # noqa: E402
from bhavnet.model import HyperParams, ModelParams  # noqa: E402
from bhavnet.tensor import Rng  # noqa: E402

TINY = dict(d=8, d_prime=4, fused_dim=8, H=2, L_layers=1, hidden=4, tau=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_hp():
    return HyperParams(**TINY)


@pytest.fixture
def tiny_params(tiny_hp):
    return ModelParams.init(tiny_hp, Rng(3).stream("init"), bias_scale=0.1)


@pytest.fixture
def tiny_task():
    pairs, table = synthetic_task(4, 8, Rng(11).stream("sampling"), noise=0.3)
    return pairs, table


@pytest.fixture
def word_table():
    rng = np.random.default_rng(5)
    words = ["hot", "cold", "icy", "big", "small", "warm", "large", "tiny"]
    return EmbeddingTable(dim=8, entries={w: rng.normal(size=8) for w in words})


@pytest.fixture
def shared_word_batch():
    return [
        LabeledPair("hot", "cold", 1),
        LabeledPair("cold", "icy", 0),
        LabeledPair("big", "small", 1),
    ]
