import numpy as np
import pytest

from neurosig.synth import GeneratorConfig, generate_cohort

SMALL = dict(n_subjects=10, T=8, dims=(5, 5, 5), n_target_voxels=6, n_alternate_voxels=6, k_true=3)


@pytest.fixture(scope="session")
def small():
    """A 10-subject cohort small enough for unit tests, with its ground truth."""
    return generate_cohort(GeneratorConfig(**SMALL, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
