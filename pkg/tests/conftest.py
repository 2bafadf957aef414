import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from kogt.graph import SkeletonGraph, load_skeleton

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@st.composite
def trees(draw, min_nodes=1, max_nodes=20):
    """Random labelled trees: uniform parent attachment, then a random relabelling."""
    l = draw(st.integers(min_nodes, max_nodes))
    parents = [draw(st.integers(0, i - 1)) for i in range(1, l)]
    perm = draw(st.permutations(range(l)))
    edges = tuple((perm[i], perm[p]) for i, p in zip(range(1, l), parents))
    return SkeletonGraph(l, edges)


def random_tree(rng: np.random.Generator, l: int) -> SkeletonGraph:
    perm = rng.permutation(l)
    return SkeletonGraph(l, tuple((int(perm[i]), int(perm[rng.integers(0, i)])) for i in range(1, l)))


def chain(l: int) -> SkeletonGraph:
    return SkeletonGraph(l, tuple((i, i + 1) for i in range(l - 1)))


@pytest.fixture(scope="session")
def h36m():
    return load_skeleton("h36m16")


@pytest.fixture(scope="session")
def hand():
    return load_skeleton("hand21")
