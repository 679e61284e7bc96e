import time

import numpy as np
import pytest
from scipy.stats import chisquare

from engine.graph import build_hetero
from engine.sampling import (
    ConditionalNoise,
    build_alias,
    conditional_noise,
    connected_negative_rate,
    edge_sampler,
    make_rng,
    reject_positives,
    sample,
    unigram_noise,
)
from models import BipartiteGraph, CategoryPrior, NodeKind, ValidationError


def _graph(context, target, weight, n_context, n_target):
    return BipartiteGraph("bu", NodeKind.POI, NodeKind.USER, n_context, n_target, context, target, weight)


def test_alias_singleton():
    table = build_alias([1])
    rng = make_rng(3)
    assert all(sample(table, rng) == 0 for _ in range(20))


def test_alias_uniform():
    table = build_alias([1, 1, 1, 1])
    np.testing.assert_array_equal(table.prob, np.ones(4))


def test_alias_reconstruction_exact():
    table = build_alias([5, 3, 2])
    np.testing.assert_allclose(table.masses(), [0.5, 0.3, 0.2], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_alias_reconstruction_random_weights(seed):
    weights = make_rng(seed).gamma(0.5, size=50)
    np.testing.assert_allclose(build_alias(weights).masses(), weights / weights.sum(), atol=1e-12)


@pytest.mark.parametrize("weights", [[], [1, -1], [0, 0], [np.nan, 1]])
def test_alias_rejects_bad_weights(weights):
    with pytest.raises(ValidationError):
        build_alias(weights)


def test_uniform_draw_frequencies():
    draws = build_alias([1, 1, 1, 1]).draw(make_rng(0), 1_000_000)
    freq = np.bincount(draws, minlength=4) / len(draws)
    assert np.all(np.abs(freq - 0.25) < 0.002)


def test_draws_pass_chisquare():
    n = 1_000_000
    draws = build_alias([5, 3, 2]).draw(make_rng(1), n)
    observed = np.bincount(draws, minlength=3)
    assert chisquare(observed, np.array([0.5, 0.3, 0.2]) * n).pvalue > 0.001


def test_scalar_sample_matches_table():
    table = build_alias([5, 3, 2])
    rng = make_rng(2)
    draws = np.array([sample(table, rng) for _ in range(30_000)])
    observed = np.bincount(draws, minlength=3)
    assert chisquare(observed, np.array([0.5, 0.3, 0.2]) * len(draws)).pvalue > 0.001


def test_edge_sampler_masses(toy_data):
    g = build_hetero(toy_data).g_bu
    np.testing.assert_allclose(edge_sampler(g).masses(), g.weight / 8.0, atol=1e-12)
    np.testing.assert_allclose(
        edge_sampler(_graph([0, 1], [0, 0], [3, 1], 2, 1)).masses(), [0.75, 0.25], atol=1e-12
    )


def test_edge_sampler_empty():
    with pytest.raises(ValidationError):
        edge_sampler(_graph([], [], [], 2, 2))


def test_unigram_noise_powers():
    g = _graph([0, 1], [0, 0], [16, 1], 2, 1)
    np.testing.assert_allclose(unigram_noise(g).distribution(0), [8 / 9, 1 / 9], atol=1e-12)
    g = _graph([0, 1, 2], [0, 0, 0], [81, 16, 1], 3, 1)
    np.testing.assert_allclose(unigram_noise(g).distribution(0), np.array([27, 8, 1]) / 36, atol=1e-12)


def test_unigram_noise_equal_degrees():
    g = _graph([0, 1, 2, 2], [0, 0, 0, 1], [2, 2, 1, 1], 3, 2)
    noise = unigram_noise(g)
    np.testing.assert_allclose(noise.distribution(0), np.full(3, 1 / 3), atol=1e-12)
    np.testing.assert_array_equal(noise.distribution(0), noise.distribution(1))


def test_conditional_noise_example():
    # contexts deg [4, 2, 2]; target 0 has w [2, 0, 1]
    g = _graph([0, 0, 1, 2, 2], [0, 1, 1, 0, 1], [2, 2, 2, 1, 1], 3, 2)
    prior = CategoryPrior({"Academic": 0.5, "Residential": 1.0})
    noise = conditional_noise(g, prior, ["Academic", "Residential", "Residential"])
    np.testing.assert_allclose(noise.masses(0), [0.75, 1.0, 0.5], atol=1e-12)
    np.testing.assert_allclose(noise.distribution(0), [1 / 3, 4 / 9, 2 / 9], atol=1e-12)


def test_conditional_noise_saturation():
    g = _graph([0, 1], [0, 1], [3, 3], 2, 2)
    noise = conditional_noise(g, CategoryPrior({}), [None, None])
    assert noise.masses(0).tolist() == [0.0, 1.0]
    assert noise.distribution(0).tolist() == [0.0, 1.0]


def test_conditional_noise_falls_back_to_unigram(caplog):
    # target 0 touches both contexts with their whole degree
    g = _graph([0, 1], [0, 0], [2, 3], 2, 1)
    noise = conditional_noise(g, CategoryPrior({}), [None, None])
    expected = np.power([2.0, 3.0], 0.75)
    np.testing.assert_allclose(noise.distribution(0), expected / expected.sum(), atol=1e-12)
    assert "touches every context" in caplog.text


def test_conditional_noise_keeps_non_neighbours():
    # context 2 is not adjacent to target 0 and keeps mass 1
    g = _graph([0, 1, 2], [0, 0, 1], [2, 3, 1], 3, 2)
    noise = conditional_noise(g, CategoryPrior({}), [None, None, None])
    np.testing.assert_allclose(noise.distribution(0), [0.0, 0.0, 1.0], atol=1e-12)


def test_conditional_noise_needs_categories():
    g = _graph([0], [0], [1], 2, 1)
    with pytest.raises(ValidationError):
        ConditionalNoise(g, CategoryPrior({}), [None])


def test_conditional_draws_pass_chisquare():
    # 5 POIs x 4 users
    rng = make_rng(11)
    dense = rng.integers(0, 4, size=(5, 4)).astype(float)
    dense[dense.sum(axis=1) == 0, 0] = 1
    context, target = np.nonzero(dense)
    g = _graph(context, target, dense[context, target], 5, 4)
    cats = ["Academic", "Residential", "Academic", "Auxiliary", "Administration"]
    prior = CategoryPrior({"Academic": 0.4, "Residential": 0.3, "Auxiliary": 0.2, "Administration": 0.1})
    noise = conditional_noise(g, prior, cats)

    for j in range(4):
        direct = np.ones(5)
        for i in range(5):
            if dense[i, j] > 0:
                direct[i] = max(0.0, 1 - dense[i, j] / dense[i].sum() * prior[cats[i]])
        expected = direct / direct.sum()
        np.testing.assert_allclose(noise.distribution(j), expected, atol=1e-12)

    n = 1_000_000
    draws = noise.draw(0, n, make_rng(5))
    expected = noise.distribution(0) * n
    support = expected > 0
    observed = np.bincount(draws, minlength=5)
    assert observed[~support].sum() == 0
    assert chisquare(observed[support], expected[support]).pvalue > 0.001


def test_reject_positives_removes_collisions():
    g = _graph([0, 1, 2], [0, 0, 0], [1, 1, 1], 3, 1)
    noise = unigram_noise(g)
    rng = make_rng(4)
    negatives = noise.draw_many(np.zeros(500, dtype=np.int64), 5, rng)
    positives = np.ones(500, dtype=np.int64)
    cleaned = reject_positives(noise, negatives, positives, np.zeros(500, dtype=np.int64), rng)
    assert not (cleaned == 1).any()


def test_reject_positives_gives_up():
    g = _graph([0], [0], [1], 1, 1)
    noise = unigram_noise(g)
    cleaned = reject_positives(noise, np.zeros((3, 2), dtype=np.int64), np.zeros(3), np.zeros(3, dtype=np.int64), make_rng(0))
    assert (cleaned == -1).all()


def test_connected_negative_rate_bounds():
    g = _graph([0, 1, 2], [0, 0, 1], [1, 1, 1], 3, 2)
    rate_unigram = connected_negative_rate(g, unigram_noise(g), 20_000, make_rng(0))
    rate_conditional = connected_negative_rate(
        g, conditional_noise(g, CategoryPrior({}), [None] * 3), 20_000, make_rng(0)
    )
    assert 0 < rate_unigram < 1
    assert rate_conditional < rate_unigram


def test_same_seed_same_stream():
    table = build_alias([1, 2, 3, 4])
    np.testing.assert_array_equal(table.draw(make_rng(9), 100), table.draw(make_rng(9), 100))


def test_alias_throughput():
    table = build_alias(make_rng(0).random(1000))
    rng = make_rng(1)
    start = time.perf_counter()
    table.draw(rng, 2_000_000)
    elapsed = time.perf_counter() - start
    assert 2_000_000 / elapsed >= 1_000_000
