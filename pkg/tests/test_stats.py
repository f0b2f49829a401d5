"""Activation-maxima sampling: floors, per-channel maxima, monotonicity."""

import numpy as np
import pytest

from snnconv import (
    EPSILON_STAT,
    NormStats,
    ValidationError,
    ann_forward,
    sample_activation_stats,
)

from conftest import identity_graph


def test_zero_sample_floors_every_stat():
    g = identity_graph((2, 3, 3))
    stats = sample_activation_stats(g, np.zeros((1, 2, 3, 3), dtype=np.float32))
    for lid in ("c", "r", "out"):
        assert np.array_equal(stats.for_layer(lid), np.full(2, EPSILON_STAT))


def test_single_sample_records_channel_maxima():
    g = identity_graph((2, 3, 3))
    x = np.random.default_rng(3).uniform(0, 1, (2, 3, 3)).astype(np.float32)
    stats = sample_activation_stats(g, x)
    want = x.max(axis=(1, 2)).astype(np.float64)
    assert np.allclose(stats.for_layer("out"), want)


def test_two_samples_mix_per_channel_maxima():
    g = identity_graph((2, 2, 2))
    a = np.zeros((2, 2, 2), dtype=np.float32)
    b = np.zeros((2, 2, 2), dtype=np.float32)
    a[1, 0, 0] = 0.9  # sample a dominates channel 1
    b[0, 1, 1] = 0.7  # sample b dominates channel 0
    stats = sample_activation_stats(g, np.stack([a, b]))
    assert np.allclose(stats.for_layer("out"), [0.7, 0.9])


def test_adding_a_sample_never_decreases(f3):
    from snnconv import fold_batchnorm

    g = fold_batchnorm(f3.graph)
    base = sample_activation_stats(g, f3.samples[:8])
    more = sample_activation_stats(g, f3.samples)
    for lid in base.max_out:
        assert (more.for_layer(lid) >= base.for_layer(lid)).all(), lid


def test_input_layer_fixed_at_one(f1):
    from snnconv import fold_batchnorm

    stats = sample_activation_stats(fold_batchnorm(f1.graph), f1.samples)
    assert np.array_equal(stats.for_layer("in"), np.ones(3))


def test_stats_computed_on_nonneg_part(f1):
    # a conv's entry must equal its relu's entry: both read the positive part
    from snnconv import fold_batchnorm

    g = fold_batchnorm(f1.graph)
    stats = sample_activation_stats(g, f1.samples[:4])
    for l in g.layers:
        if l.kind == "relu":
            pred = g.predecessor(l.id)
            assert np.array_equal(stats.for_layer(l.id), stats.for_layer(pred.id)), l.id


def test_empty_sample_stack_rejected():
    g = identity_graph((1, 2, 2))
    with pytest.raises(ValidationError, match=r"\(N, C, H, W\)"):
        sample_activation_stats(g, np.zeros((0, 1, 2, 2), dtype=np.float32))


def test_sample_shape_mismatch_rejected():
    g = identity_graph((1, 2, 2))
    with pytest.raises(ValidationError, match="does not match"):
        sample_activation_stats(g, np.zeros((1, 1, 3, 3), dtype=np.float32))


class TestNormStats:
    def test_rejects_nonpositive(self):
        with pytest.raises(ValidationError, match="positive"):
            NormStats({"c": np.array([1.0, 0.0])})

    def test_rejects_non_vector(self):
        with pytest.raises(ValidationError, match="1-d"):
            NormStats({"c": np.ones((2, 2))})

    def test_missing_layer_named_in_error(self):
        stats = NormStats({"c": np.ones(2)})
        with pytest.raises(ValidationError, match="'elsewhere'"):
            stats.for_layer("elsewhere")

    def test_check_against_flags_wrong_channel_count(self):
        g = identity_graph((2, 2, 2))
        stats = NormStats({lid: np.ones(2) for lid in g.by_id} | {"c": np.ones(3)})
        with pytest.raises(ValidationError, match="expected 2"):
            stats.check_against(g)

    def test_max_in_is_predecessor_max_out(self, f3):
        from snnconv import fold_batchnorm

        g = fold_batchnorm(f3.graph)
        stats = sample_activation_stats(g, f3.samples)
        assert np.array_equal(stats.max_in(g, "c2"), stats.for_layer("c1_r"))
