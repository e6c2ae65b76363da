import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fairir import exposure
from fairir.rin import RelatedItemNetwork

positive = st.floats(0.01, 10)


def random_rin(draw_seed, m, k):
    rng = np.random.default_rng(draw_seed)
    return RelatedItemNetwork(np.array([rng.choice(np.delete(np.arange(m), i), k, replace=False) for i in range(m)]))


def test_mutual_cycle():
    for alpha in (0.05, 0.15, 0.9):
        e = exposure.observed_exposure(RelatedItemNetwork([[1], [0]]), alpha)
        np.testing.assert_allclose(e.values, [0.5, 0.5], atol=1e-12)


def test_pure_teleport():
    net = RelatedItemNetwork([[1, 2], [0, 2], [0, 1], [0, 1]])
    np.testing.assert_allclose(exposure.observed_exposure(net, 1.0).values, 0.25, atol=1e-15)


def test_three_cycle_uniform():
    e = exposure.observed_exposure(RelatedItemNetwork([[1], [2], [0]]), 0.15)
    # oracle: leading eigenvector of the dense Google matrix
    p = np.zeros((3, 3))
    p[[1, 2, 0], [0, 1, 2]] = 1
    g = 0.85 * p + 0.15 / 3
    w, v = np.linalg.eig(g)
    oracle = np.real(v[:, np.argmax(np.real(w))])
    oracle /= oracle.sum()
    np.testing.assert_allclose(e.values, oracle, atol=1e-9)
    np.testing.assert_allclose(e.values, 1 / 3, atol=1e-9)


def test_matches_dense_eigenvector_with_dangling():
    adj = np.array([[1, 2], [2, -1], [-1, -1], [0, 1]])
    e = exposure.observed_exposure(RelatedItemNetwork(adj), 0.2, tol=1e-14, max_iter=5000)
    m = 4
    g = np.zeros((m, m))
    for i, row in enumerate(adj):
        nb = row[row >= 0]
        if len(nb):
            g[nb, i] += 0.8 / len(nb)
            g[:, i] += 0.2 / m
        else:
            g[:, i] += 1 / m
    w, v = np.linalg.eig(g)
    oracle = np.real(v[:, np.argmax(np.real(w))])
    np.testing.assert_allclose(e.values, oracle / oracle.sum(), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(3, 40), st.floats(0.01, 1.0))
def test_observed_normalised_and_floor(seed, m, alpha):
    k = min(3, m - 1)
    e = exposure.observed_exposure(random_rin(seed, m, k), alpha)
    assert abs(e.values.sum() - 1) < 1e-9
    assert (e.values >= alpha / m - 1e-12).all()


def test_regular_symmetric_graph_uniform():
    m, k = 12, 4
    adj = np.array([[(i + d) % m for d in (1, 2, m - 1, m - 2)] for i in range(m)])
    np.testing.assert_allclose(exposure.observed_exposure(RelatedItemNetwork(adj)).values, 1 / m, atol=1e-10)


def test_desired_examples():
    np.testing.assert_allclose(exposure.desired_exposure([0.1, 0.2, 0.3, 0.4], 1.0).values, 0.25)
    q = np.array([0.1, 0.2, 0.7])
    np.testing.assert_array_equal(exposure.desired_exposure(q, 0.0).values, q)
    np.testing.assert_allclose(exposure.desired_exposure([0.8, 0.2], 0.5).values, [0.65, 0.35], atol=1e-12)


def test_desired_rejects_unnormalised():
    with pytest.raises(ValueError):
        exposure.desired_exposure([0.5, 0.6], 0.5)
    with pytest.raises(ValueError):
        exposure.desired_exposure([0.5, 0.5], 1.5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 20), elements=positive), st.lists(st.floats(0, 1), min_size=2, max_size=6))
def test_desired_monotone_toward_uniform(raw, betas):
    q = raw / raw.sum()
    dists = [np.abs(exposure.desired_exposure(q, b).values - 1 / len(q)).max() for b in sorted(betas)]
    assert all(b <= a + 1e-15 for a, b in zip(dists, dists[1:]))


def test_kl_examples():
    assert exposure.exp_bias([0.2, 0.8], [0.2, 0.8]) == 0
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert exposure.exp_bias([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected, abs=1e-12)
    assert exposure.exp_bias([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.1438, abs=1e-4)


def test_kl_zero_observed_terms():
    assert exposure.exp_bias([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))


def test_kl_requires_positive_desired():
    with pytest.raises(ValueError):
        exposure.exp_bias([0.5, 0.5], [1.0, 0.0])


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, 6, elements=positive), arrays(np.float64, 6, elements=positive))
def test_kl_nonnegative_zero_iff_equal(a, b):
    p, q = a / a.sum(), b / b.sum()
    kl = exposure.exp_bias(p, q)
    assert kl >= 0
    assert exposure.exp_bias(p, p) < 1e-12
    if np.abs(p - q).max() > 1e-6:
        assert kl > 0


def test_categorize_examples():
    e = np.array([0.25, 0.25, 0.5])
    assert exposure.categorize(e, e).shares["adequate"] == 100
    # 0.6 / 0.4 = 1.5 and 0.4 / 0.5 = 0.8 exactly in binary floating point
    labels = exposure.categorize([0.6, 0.4], [0.4, 0.5], 0.2).labels
    assert labels.tolist() == ["over", "adequate"]
    assert exposure.categorize([0.1], [0.2]).labels.tolist() == ["under"]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=positive), st.floats(0, 1))
def test_categorize_partition(raw, eps):
    p = raw / raw.sum()
    q = np.full(len(p), 1 / len(p))
    cat = exposure.categorize(p, q, eps)
    assert set(cat.labels) <= {"over", "adequate", "under"}
    assert sum(cat.shares.values()) == pytest.approx(100)


def test_lorenz_examples():
    assert exposure.lorenz_share(np.full(8, 0.125), 0.25) == pytest.approx(0.25)
    assert exposure.lorenz_share([1.0, 0, 0, 0], 0.25) == 1.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=positive))
def test_lorenz_monotone(raw):
    fracs = np.linspace(0.05, 1, 20)
    shares = [exposure.lorenz_share(raw, f) for f in fracs]
    assert all(b >= a - 1e-12 for a, b in zip(shares, shares[1:]))
    assert shares[-1] == pytest.approx(1.0)


def test_csv_roundtrip(tmp_path):
    e = exposure.ExposureDistribution([0.2, 0.3, 0.5], "observed")
    exposure.write_exposure_csv(tmp_path / "e.csv", e, ["a", "b", "c"])
    ids, values = exposure.read_exposure_csv(tmp_path / "e.csv")
    assert ids == ["a", "b", "c"] and np.array_equal(values, e.values)
    exposure.write_lorenz_csv(tmp_path / "l.csv", e)
    assert len((tmp_path / "l.csv").read_text().splitlines()) == 102
