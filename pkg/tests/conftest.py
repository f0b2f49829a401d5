"""Shared fixtures: the built-in nets are expensive enough to build once."""

import numpy as np
import pytest

from snnconv import (
    FixtureSpec,
    build_fixture,
    fold_batchnorm,
    normalize_weights,
    sample_activation_stats,
)


def converted_for(fixture, bias_rule="max_out"):
    folded = fold_batchnorm(fixture.graph)
    stats = sample_activation_stats(folded, fixture.samples)
    return normalize_weights(folded, stats, bias_rule=bias_rule)


@pytest.fixture(scope="session")
def f1():
    return build_fixture(FixtureSpec("f1"))


@pytest.fixture(scope="session")
def f2():
    return build_fixture(FixtureSpec("f2"))


@pytest.fixture(scope="session")
def f3():
    return build_fixture(FixtureSpec("f3"))


@pytest.fixture(scope="session")
def f1_converted(f1):
    return converted_for(f1)


@pytest.fixture(scope="session")
def f2_converted(f2):
    return converted_for(f2)


@pytest.fixture(scope="session")
def f3_converted(f3):
    return converted_for(f3)


def identity_graph(shape=(1, 1, 8)):
    """Smallest runnable net: input -> 1x1 identity conv -> relu -> output."""
    from snnconv import LayerSpec, ModelGraph

    return ModelGraph(
        [
            LayerSpec("in", "input"),
            LayerSpec(
                "c", "conv", ("in",),
                weights=np.eye(shape[0], dtype=np.float32).reshape(
                    shape[0], shape[0], 1, 1
                ),
                bias=np.zeros(shape[0], dtype=np.float32),
            ),
            LayerSpec("r", "relu", ("c",)),
            LayerSpec("out", "output", ("r",)),
        ],
        shape,
    )


def unit_stats(graph):
    """All-ones NormStats for a graph (identity normalization)."""
    from snnconv import NormStats

    return NormStats(
        {lid: np.ones(graph.shapes[lid][0]) for lid in graph.by_id}
    )
