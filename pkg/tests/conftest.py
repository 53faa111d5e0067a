import numpy as np
import pytest

import placemap as pm


def unit_rows(X):
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def random_unit_rows(rng, count, dim):
    return unit_rows(rng.standard_normal((count, dim)))


@pytest.fixture(scope="session")
def small_world():
    """A small synthetic reference/query split shared by read-only tests."""
    cfg = pm.SynthConfig(
        seed=7,
        dimension=32,
        num_places=12,
        conditions=2,
        shared_frac=0.5,
        noise_sigma=0.1,
        query_mode="intermediate",
        queries_per_place=2,
    )
    refs, queries, gt = pm.generate(cfg)
    return refs, queries, gt


@pytest.fixture(scope="session")
def small_map(small_world):
    refs, _, _ = small_world
    return pm.build_map(refs, pm.MapBuildConfig())
