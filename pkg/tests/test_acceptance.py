"""Acceptance gate: one pass/fail line per criterion in the terminal summary.

Criteria 1 to 5 need the Amazon 5-core "Cell Phones and Accessories" reviews, which
are not bundled. Point ``FAIRIR_AMAZON_REVIEWS`` at the review file (JSON lines) and
optionally ``FAIRIR_AMAZON_META`` at the product metadata with categories;
``FAIRIR_AMAZON_OUT`` keeps the pipeline artifacts between runs. Without the data
those criteria are reported as NOT RUN (skipped), never as passed.
"""

import csv
import io
import json
import os
from pathlib import Path

import numpy as np
import pytest

from fairir import evaluate, exposure, fair_nbr, fair_rl, fair_sim, pipeline, rin
from fairir.corpus import ItemCatalog
from fairir.rin import RelatedItemNetwork

from conftest import read_tree, record
from test_fair_nbr import straight_line_algorithm
from test_rin import _cosines, brute_force_top_k

AMAZON_REVIEWS = os.environ.get("FAIRIR_AMAZON_REVIEWS")
ALL = ("vanilla", "concat", "rl", "sim", "nbr")


def check(criterion, fn, *args):
    try:
        detail = fn(*args)
    except AssertionError as exc:
        record(criterion, "FAIL", str(exc).splitlines()[0] if str(exc) else "")
        raise
    except pytest.skip.Exception as exc:
        record(criterion, "NOT RUN (skipped)", str(exc))
        raise
    record(criterion, "PASS", detail or "")


# ---------------------------------------------------------------------------
# Amazon-backed criteria


@pytest.fixture(scope="module")
def amazon_run(tmp_path_factory):
    if not AMAZON_REVIEWS:
        return None
    out = Path(os.environ.get("FAIRIR_AMAZON_OUT") or tmp_path_factory.mktemp("amazon"))
    data = {
        "out": str(out), "betas": [0.0, 1.0], "methods": list(ALL),
        "dataset": {"format": "amazon", "ratings": AMAZON_REVIEWS, "labels": os.environ.get("FAIRIR_AMAZON_META", ""),
                    "labels_format": "amazon"},
    }
    cfg = pipeline.config_from_dict(data)
    p = pipeline.Pipeline(cfg)
    p.run("all")
    return p


def _reports(p):
    return {(r.provenance, r.beta): r for r in p.load_reports()}


def _need(run):
    if run is None:
        pytest.skip("FAIRIR_AMAZON_REVIEWS not set; Amazon 5-core data not available")


def _criterion_1(run):
    _need(run)
    r = _reports(run)
    van, sim, rl_, nbr = (r[(p, 0.0)] for p in ("vanilla_svd", "fairir_sim", "fairir_rl", "fairir_nbr"))
    assert van.exp_bias >= 0.8, f"vanilla ExpBias {van.exp_bias:.3f} < 0.8"
    assert van.under >= 60, f"vanilla under-exposed {van.under:.1f}% < 60%"
    assert nbr.exp_bias <= 0.01, f"nbr ExpBias {nbr.exp_bias:.4f} > 0.01"
    assert nbr.adequate >= 99, f"nbr adequate {nbr.adequate:.1f}% < 99%"
    assert rl_.exp_bias <= 0.5 * van.exp_bias, f"rl ExpBias {rl_.exp_bias:.3f} > half of vanilla {van.exp_bias:.3f}"
    assert sim.exp_bias <= van.exp_bias, f"sim ExpBias {sim.exp_bias:.3f} > vanilla {van.exp_bias:.3f}"
    assert van.exp_bias > sim.exp_bias > rl_.exp_bias > nbr.exp_bias, "ordering vanilla > sim > rl > nbr violated"
    return f"ExpBias vanilla {van.exp_bias:.3f}, sim {sim.exp_bias:.3f}, rl {rl_.exp_bias:.3f}, nbr {nbr.exp_bias:.4f}"


def _criterion_2(p):
    m = len(p._load_snapshot()[1].labels)
    van, _ = rin.load_rin(p.rin_path("vanilla"))
    sim, _ = rin.load_rin(p.rin_path("sim", 1.0))
    assert np.array_equal(van.adjacency, sim.adjacency), "sim RIN at beta=1 differs from vanilla"
    nbr, _ = rin.load_rin(p.rin_path("nbr", 1.0))
    bias = exposure.exp_bias(exposure.observed_exposure(nbr), np.full(m, 1 / m))
    assert bias <= 1e-3, f"nbr ExpBias against uniform {bias:.2e} > 1e-3"
    return f"sim == vanilla, nbr ExpBias {bias:.2e}"


def _criterion_3(run):
    _need(run)
    r = _reports(run)
    van, sim, nbr = (r[(p, 0.0)] for p in ("vanilla_svd", "fairir_sim", "fairir_nbr"))
    if van.label_overlap is None:
        pytest.skip("no category labels; set FAIRIR_AMAZON_META")
    assert nbr.label_overlap >= 0.9 * van.label_overlap, f"nbr {nbr.label_overlap:.3f} < 90% of {van.label_overlap:.3f}"
    assert sim.label_overlap >= 0.95 * van.label_overlap, f"sim {sim.label_overlap:.3f} < 95% of {van.label_overlap:.3f}"
    return f"category overlap vanilla {van.label_overlap:.3f}, nbr {nbr.label_overlap:.3f}, sim {sim.label_overlap:.3f}"


def _criterion_4(run):
    _need(run)
    r = _reports(run)
    van, nbr = r[("vanilla_svd", 0.0)], r[("fairir_nbr", 0.0)]
    assert abs(nbr.like_overlap - van.like_overlap) <= 0.05, f"like overlap {nbr.like_overlap:.3f} vs {van.like_overlap:.3f}"
    return f"like overlap vanilla {van.like_overlap:.3f}, nbr {nbr.like_overlap:.3f}"


def _criterion_5(run):
    _need(run)
    van = _reports(run)[("vanilla_svd", 0.0)]
    assert van.lorenz_top25 >= 0.60, f"top-25% share {van.lorenz_top25:.3f} < 0.60"
    return f"top-25% share {van.lorenz_top25:.3f}"


def test_criterion_1_table_ii_direction(amazon_run):
    check("1 (Amazon ExpBias direction)", _criterion_1, amazon_run)


def test_criterion_2_beta_degeneration_synthetic(synthetic_run):
    check("2 (beta=1 degeneration, synthetic)", _criterion_2, pipeline.Pipeline(synthetic_run["cfg"]))


def test_criterion_2_beta_degeneration_amazon(amazon_run):
    def run():
        _need(amazon_run)
        return _criterion_2(amazon_run)

    check("2 (beta=1 degeneration, Amazon)", run)


def test_criterion_3_relatedness_cost(amazon_run):
    check("3 (category overlap cost)", _criterion_3, amazon_run)


def test_criterion_4_like_overlap(amazon_run):
    check("4 (like overlap preserved)", _criterion_4, amazon_run)


def test_criterion_5_lorenz(amazon_run):
    check("5 (Lorenz concentration)", _criterion_5, amazon_run)


# ---------------------------------------------------------------------------
# criterion 6: known values


def _known_values():
    assert abs(exposure.exp_bias([0.5, 0.5], [0.25, 0.75]) - 0.1438) <= 1e-4
    labels = [frozenset({"Action", "Adventure", "Fantasy"}), frozenset({"Action", "Adventure", "Drama"})]
    cat = ItemCatalog(["Avatar", "Gladiator"], labels, np.ones(2), np.ones(2))
    assert abs(evaluate.label_overlap(RelatedItemNetwork([[1], [-1]]), cat) - 2 / 3) < 1e-15
    assert fair_nbr.borda_aggregate([1, 2, 3], [2, 1, 3]) == [1, 2, 3]
    assert fair_nbr.borda_aggregate([1, 2, 3], [3, 2, 1]) == [1, 2, 3]
    e = exposure.observed_exposure(RelatedItemNetwork([[1], [2], [0]]), 0.15)
    assert np.abs(e.values - 1 / 3).max() <= 1e-9
    assert abs(fair_sim.fair_similarity([1.0, 0.0], [0.8, 0.6], 0.5, 0.3) - 0.6550) <= 1e-4
    np.testing.assert_allclose(exposure.desired_exposure([0.8, 0.2], 0.5).values, [0.65, 0.35], atol=1e-12)
    return "KL 0.1438, overlap 2/3, Borda, 3-cycle, 0.6550, [0.65, 0.35]"


def test_criterion_6_known_values():
    check("6 (known-value unit suite)", _known_values)


# ---------------------------------------------------------------------------
# criterion 7: properties on the synthetic 200-item set


def _exposure_and_kl(run):
    p = pipeline.Pipeline(run["cfg"])
    for path in sorted((run["out"] / "rin").glob("*.tsv")):
        net, _ = rin.load_rin(path)
        e = exposure.observed_exposure(net).values
        assert abs(e.sum() - 1) < 1e-9 and (e >= 0.15 / len(e) - 1e-12).all(), path.name
        ed = exposure.desired_exposure(p._quality(p._load_snapshot()[0]), 0.25)
        assert exposure.exp_bias(e, ed) > 0 and exposure.exp_bias(e, e) == 0
    return "all pipeline RINs"


def _nbr_in_degree(run):
    cfg = run["cfg"]
    p = pipeline.Pipeline(cfg)
    matrix, _ = p._load_snapshot()
    emb = p._load_embedding()
    for beta in cfg.betas:
        ed = exposure.desired_exposure(p._quality(matrix), beta)
        net = fair_nbr.fair_neighbor_selection(emb, ed, cfg.k)
        indeg, cap = rin.in_degree(net), net.meta["capacity"]
        assert indeg.sum() == matrix.n_items * cfg.k
        if net.meta["overflow"]:
            assert set(np.flatnonzero(indeg > cap)) <= set(net.meta["overflow"])
        else:
            assert np.array_equal(indeg, cap)
    return "4 beta values"


def _memberships_and_gradient():
    rng = np.random.default_rng(7)
    x, xs, v = rng.normal(size=(10, 4)), rng.normal(size=(10, 4)), rng.normal(size=(3, 4))
    u = fair_rl.memberships(x, v)
    assert np.abs(u.sum(axis=1) - 1).max() <= 1e-6 and u.min() >= 0
    pairs = np.array([(i, j) for i in range(10) for j in range(10) if i != j])
    _, grad = fair_rl.rl_loss_and_grad(v, x, xs, 1.0, 0.5, pairs)
    numeric = np.zeros_like(v)
    for idx in np.ndindex(v.shape):
        up, down = v.copy(), v.copy()
        up[idx] += 1e-6
        down[idx] -= 1e-6
        numeric[idx] = (fair_rl.rl_loss(x, xs, up, 1.0, 0.5) - fair_rl.rl_loss(x, xs, down, 1.0, 0.5)) / 2e-6
    rel = np.linalg.norm(grad - numeric) / np.linalg.norm(numeric)
    assert rel <= 1e-4, f"relative gradient error {rel:.2e}"
    return f"gradient relative error {rel:.1e}"


def _top_k_oracle(run):
    p = pipeline.Pipeline(run["cfg"])
    rows = p._load_embedding().rows
    assert len(rows) <= 200
    got = rin.top_k_neighbors(rows, 10).adjacency
    assert np.array_equal(got, brute_force_top_k(_cosines(rows), 10))
    return f"M = {len(rows)}"


def _algorithm_oracle():
    rng = np.random.default_rng(3)
    for m, k in ((50, 10), (50, 3), (20, 4), (7, 2)):
        rows = rng.normal(size=(m, 5))
        desired = rng.dirichlet(np.full(m, 0.5))
        unit = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        sim = unit @ unit.T
        net = fair_nbr.fair_neighbor_selection(rows, desired, k, kernel=lambda _r, block: sim[block])
        expected, cap = straight_line_algorithm(sim.tolist(), desired.tolist(), k)
        assert net.adjacency.tolist() == expected and net.meta["capacity"].tolist() == cap
    return "M in {50, 20, 7}"


def _strip_runtime(obj):
    if isinstance(obj, dict):
        return {k: _strip_runtime(v) for k, v in obj.items() if k not in ("runtime_s", "out")}
    if isinstance(obj, list):
        return [_strip_runtime(v) for v in obj]
    return obj


def _normalise(name: str, blob: bytes):
    if name.endswith(".json"):
        return _strip_runtime(json.loads(blob))
    if name == "report.csv":
        rows = list(csv.DictReader(io.StringIO(blob.decode())))
        return [{k: v for k, v in row.items() if k != "runtime_s"} for row in rows]
    if name.endswith(".tsv"):
        head, _, body = blob.decode().partition("\n")
        return _strip_runtime(json.loads(head[1:])), body
    return blob


def _bit_reproducible(run, tmp_path):
    cfg = pipeline.config_from_dict({**run["cfg"].to_dict(), "out": str(tmp_path)})
    pipeline.Pipeline(cfg).run("all")
    a, b = read_tree(run["out"]), read_tree(tmp_path)
    assert a.keys() == b.keys()
    diff = [name for name in a if _normalise(name, a[name]) != _normalise(name, b[name])]
    assert not diff, f"artifacts differ: {diff[:5]}"
    return f"{len(a)} artifacts identical (runtime fields excluded)"


def test_criterion_7_exposure_and_kl(synthetic_run):
    check("7a (exposure normalisation, KL >= 0)", _exposure_and_kl, synthetic_run)


def test_criterion_7_nbr_in_degree(synthetic_run):
    check("7b (nbr in-degree = capacity, sum = M*k)", _nbr_in_degree, synthetic_run)


def test_criterion_7_memberships_gradient():
    check("7c (memberships stochastic, gradient vs finite differences)", _memberships_and_gradient)


def test_criterion_7_top_k_oracle(synthetic_run):
    check("7d (top-k brute-force oracle)", _top_k_oracle, synthetic_run)


def test_criterion_7_algorithm_oracle():
    check("7e (selection loop straight-line oracle)", _algorithm_oracle)


def test_criterion_7_bit_reproducible(synthetic_run, tmp_path):
    check("7f (deterministic pipeline bit-reproducible)", _bit_reproducible, synthetic_run, tmp_path)
