import numpy as np
import pytest

from graphenergy import GraphSpec, random_graph


@pytest.fixture
def tiny_spec():
    # 64 labelled states at n=3: enumerable by brute force
    return GraphSpec(n_max=3, l_node=2, l_edge=2)


@pytest.fixture
def small_spec():
    return GraphSpec(n_max=4, l_node=3, l_edge=3)


def random_graphs(spec, count, rng, n=None):
    return [
        random_graph(spec, n if n else int(rng.integers(1, spec.n_max + 1)), rng)
        for _ in range(count)
    ]
