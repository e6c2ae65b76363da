import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fairir import fair_sim, rin
from fairir.embed import EmbeddingMatrix, cosine_sim

vec = arrays(np.float64, 4, elements=st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3))


def test_equal_desired_is_cosine():
    assert fair_sim.fair_similarity([1, 2], [2, 1], 0.3, 0.3) == pytest.approx(cosine_sim([1, 2], [2, 1]))


def test_hand_value():
    x, y = [1.0, 0.0], [0.8, 0.6]  # cosine 0.8
    assert fair_sim.fair_similarity(x, y, 0.5, 0.3) == pytest.approx(0.6550, abs=1e-4)
    assert fair_sim.fair_similarity(x, y, 0.5, 0.3) == pytest.approx(0.8 * math.exp(-0.2), abs=1e-12)


def test_selection_flips():
    # unit rows with cos(0,1) = 0.9 and cos(0,2) = 0.85
    a1, a2 = math.acos(0.9), math.acos(0.85)
    rows = np.array([[1, 0, 0], [math.cos(a1), math.sin(a1), 0], [math.cos(a2), 0, math.sin(a2)]])
    assert rin.top_k_neighbors(rows, 1).adjacency[0].tolist() == [1]
    net = fair_sim.build_fair_sim_rin(EmbeddingMatrix(rows, kind="svd"), [0.5, 0.1, 0.5], 1)
    assert net.adjacency[0].tolist() == [2]
    assert net.provenance == "fairir_sim"


def test_uniform_desired_identical_to_vanilla(synth_matrix):
    from fairir import embed

    emb = embed.svd_embed(synth_matrix[0], dims=16)
    m = emb.n_items
    vanilla = rin.top_k_neighbors(emb, 10)
    fair = fair_sim.build_fair_sim_rin(emb, np.full(m, 1 / m), 10)
    assert np.array_equal(vanilla.adjacency, fair.adjacency)


@settings(max_examples=80, deadline=None)
@given(vec, vec, st.floats(0, 1), st.floats(0, 1))
def test_discount_properties(x, y, a, b):
    c = cosine_sim(x, y)
    f = fair_sim.fair_similarity(x, y, a, b)
    assert abs(f) <= abs(c) + 1e-15
    assert f == fair_sim.fair_similarity(y, x, b, a)
    if a == b:
        assert f == pytest.approx(c)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 1), st.floats(0, 0.5), st.floats(0.001, 0.5))
def test_strictly_decreasing_in_gap(cos, gap, extra):
    x = [1.0, 0.0]
    y = [cos, math.sqrt(1 - cos * cos)]
    near = fair_sim.fair_similarity(x, y, 0.0, gap)
    far = fair_sim.fair_similarity(x, y, 0.0, gap + extra)
    assert far < near


def test_kernel_matches_scalar(rng):
    rows = rng.normal(size=(8, 3))
    ed = rng.dirichlet(np.ones(8))
    dense = fair_sim.fair_kernel(rows, ed)(rows, np.arange(8))
    for i in range(8):
        for j in range(8):
            assert dense[i, j] == pytest.approx(fair_sim.fair_similarity(rows[i], rows[j], ed[i], ed[j]), abs=1e-12)
