import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src"))

from common.args import ExperimentConfig  # noqa: E402
from common.loadData import to_arrays  # noqa: E402
from common.synthdata import gen_classification, gen_segmentation, split  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def classification_samples():
    return gen_classification(n=120, groups=8, rho=0.25, kind="label-noise", seed=3, image_size=8)


@pytest.fixture(scope="session")
def segmentation_samples():
    return gen_segmentation(n=60, groups=6, rho=0.3, kind="mask-dropout", seed=5, image_size=8)


@pytest.fixture
def classification_splits(classification_samples):
    train, val, holdout = split(classification_samples, (0.6, 0.2, 0.2), seed=0)
    return to_arrays(train), to_arrays(val), to_arrays(holdout)


def tiny_config(**sections) -> ExperimentConfig:
    """Smallest config that still runs every stage."""
    config = ExperimentConfig().update_from_dict({
        "data": {"n": 96, "groups": 6, "rho": 0.25, "image_size": 8, "seed": 2},
        "env": {"batch_size": 6},
        "rl": {"max_iterations": 2, "steps_per_episode": 2, "updates_per_iteration": 1, "critic_batch": 2,
               "critic_samples_per_transition": 3},
        "eval": {"tensorboard": False, "silent": True, "diagnostic_samples": 8},
    })
    return config.update_from_dict(sections).validate()


@pytest.fixture
def make_config():
    return tiny_config
