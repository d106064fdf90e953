import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drdl.evaluation import (
    REPORT_COLUMNS,
    average_precision,
    cmc,
    cmc_svg,
    distance_matrix,
    evaluate,
    evaluate_features,
    mean_ap,
    rank_gallery,
    report_csv,
)
from drdl.model import DrdlModel, ModelConfig


def brute_force(dist, qp, gp, qc, gc, junk=True, max_rank=None):
    """Sort with python tuples, filter junk by hand, count hits one by one."""
    firsts, aps = [], []
    for i in range(len(qp)):
        ranked = sorted(range(len(gp)), key=lambda j: (dist[i][j], j))
        if junk:
            ranked = [j for j in ranked if not (gp[j] == qp[i] and gc[j] == qc[i]) and gp[j] != -1]
        hits = [r for r, j in enumerate(ranked) if gp[j] == qp[i]]
        if not hits:
            continue
        firsts.append(hits[0])
        aps.append(sum((k + 1) / (r + 1) for k, r in enumerate(hits)) / len(hits))
    n = max_rank or len(gp)
    curve = [sum(f <= k for f in firsts) / len(firsts) if firsts else 0.0 for k in range(n)]
    return curve, (sum(aps) / len(aps) if aps else 0.0)


def random_instance(rng, n_q=None, n_g=None):
    n_q = n_q or int(rng.integers(1, 20))
    n_g = n_g or int(rng.integers(1, 101))
    ids = int(rng.integers(1, 8))
    dim = int(rng.integers(1, 5))
    # coarse grid features so distance ties are common
    qf = rng.integers(0, 3, size=(n_q, dim)).astype(float)
    gf = rng.integers(0, 3, size=(n_g, dim)).astype(float)
    return (
        qf,
        gf,
        rng.integers(0, ids, n_q),
        rng.integers(-1, ids, n_g),
        rng.integers(0, 3, n_q),
        rng.integers(0, 3, n_g),
    )


def test_distance_examples():
    assert distance_matrix([[0.0, 0.0]], [[3.0, 4.0]])[0, 0] == 5.0
    assert distance_matrix([[1.5, -2.0]], [[1.5, -2.0]])[0, 0] == 0.0
    rng = np.random.default_rng(0)
    q, g = rng.normal(size=(5, 3)), rng.normal(size=(7, 3))
    d = distance_matrix(q, g)
    for i in range(5):
        for j in range(7):
            assert d[i, j] == pytest.approx(math.sqrt(sum((a - b) ** 2 for a, b in zip(q[i], g[j]))), rel=1e-14)
    with pytest.raises(ValueError):
        distance_matrix(q, rng.normal(size=(2, 4)))


def test_cmc_first_relevant_at_rank_three():
    dist = np.array([[0.1, 0.2, 0.3, 0.4]])
    r = rank_gallery(dist, [1], [5, 6, 1, 1], [0], [1, 1, 1, 1])
    np.testing.assert_array_equal(cmc(r, 4), [0.0, 0.0, 1.0, 1.0])


def test_all_nearest_neighbours_relevant():
    dist = np.array([[0.0, 1.0], [1.0, 0.0]])
    r = rank_gallery(dist, [0, 1], [0, 1], [0, 0], [1, 1])
    assert cmc(r, 1)[0] == 1.0


def test_hand_checked_average_precision():
    assert average_precision(np.array([True, False, True, False])) == pytest.approx(0.833333, abs=1e-6)
    assert average_precision(np.array([True, True, False])) == 1.0


def test_junk_and_unmatched_queries():
    dist = np.array([[0.0, 0.1, 0.2, 0.3], [0.0, 0.1, 0.2, 0.3]])
    # query 0: gallery item 0 same id and camera (junk), item 1 pid -1 (junk), item 2 relevant
    # query 1: identity absent from gallery
    r = rank_gallery(dist, [4, 9], [4, -1, 4, 2], [0, 0], [0, 1, 1, 1])
    assert r.queries[0].order.tolist() == [2, 3]
    assert r.queries[0].relevant.tolist() == [True, False]
    assert r.queries[1].num_relevant == 0
    assert cmc(r, 2)[0] == 1.0
    assert mean_ap(r) == 1.0
    without = rank_gallery(dist, [4, 9], [4, -1, 4, 2], [0, 0], [0, 1, 1, 1], junk=False)
    assert without.queries[0].order.tolist() == [0, 1, 2, 3]


def test_ties_broken_by_gallery_index():
    r = rank_gallery(np.zeros((1, 4)), [0], [1, 0, 2, 0], [0], [1, 1, 1, 1])
    assert r.queries[0].order.tolist() == [0, 1, 2, 3]


def test_oracle_equivalence_200_instances():
    rng = np.random.default_rng(123)
    for _ in range(200):
        qf, gf, qp, gp, qc, gc = random_instance(rng)
        dist = distance_matrix(qf, gf)
        ranks = rank_gallery(dist, qp, gp, qc, gc)
        curve, m_ap = brute_force(dist.tolist(), qp.tolist(), gp.tolist(), qc.tolist(), gc.tolist(), max_rank=len(gp))
        np.testing.assert_allclose(cmc(ranks, len(gp)), curve, rtol=0, atol=1e-12)
        assert abs(mean_ap(ranks) - m_ap) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_bounded_and_cmc_monotone(seed):
    qf, gf, qp, gp, qc, gc = random_instance(np.random.default_rng(seed))
    rep = evaluate_features(qf, gf, qp, gp, qc, gc)
    for v in (rep.rank1, rep.rank5, rep.rank10, rep.mAP, rep.chance):
        assert 0.0 <= v <= 1.0
    assert rep.rank1 <= rep.rank5 <= rep.rank10
    assert np.all(np.diff(rep.cmc_curve) >= 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_isometry_invariance(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(6, 4))
    g = rng.normal(size=(30, 4))
    qp, gp = rng.integers(0, 4, 6), rng.integers(0, 4, 30)
    qc, gc = rng.integers(0, 2, 6), rng.integers(0, 2, 30)
    rot, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    shift = rng.normal(size=4)
    a = evaluate_features(q, g, qp, gp, qc, gc)
    b = evaluate_features(q @ rot + shift, g @ rot + shift, qp, gp, qc, gc)
    np.testing.assert_allclose(a.cmc_curve, b.cmc_curve, atol=1e-12)
    assert a.mAP == pytest.approx(b.mAP, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_junk_removal_keeps_relative_order(seed):
    qf, gf, qp, gp, qc, gc = random_instance(np.random.default_rng(seed))
    dist = distance_matrix(qf, gf)
    full = rank_gallery(dist, qp, gp, qc, gc, junk=False)
    kept = rank_gallery(dist, qp, gp, qc, gc, junk=True)
    for a, b in zip(full, kept):
        allowed = set(b.order.tolist())
        assert [j for j in a.order.tolist() if j in allowed] == b.order.tolist()


def test_self_retrieval_of_separable_features():
    feats = np.repeat(np.eye(4) * 10, 2, axis=0)
    pids = np.repeat(np.arange(4), 2)
    cams = np.zeros(8, dtype=int)
    rep = evaluate_features(feats, feats, pids, pids, cams, cams, junk=False, exclude_self=True)
    assert rep.rank1 == 1.0 and rep.mAP == 1.0


def test_random_model_is_near_chance(tiny_domains, tiny_spaces):
    _, tgt = tiny_domains
    q, g = tgt.splits["query"], tgt.splits["gallery"]
    r1, chance = [], []
    for seed in range(6):
        m = DrdlModel(q.label_spaces, ModelConfig(image_shape=q.shape, seed=seed))
        rep = evaluate(m, q, g, "style")
        r1.append(rep.rank1)
        chance.append(rep.chance)
    # chance from counts: relevant / valid gallery items over each query
    fr = []
    for pid, cam in zip(q.pids, q.cams):
        valid = ~((g.pids == pid) & (g.cams == cam)) & (g.pids != -1)
        fr.append(np.sum(valid & (g.pids == pid)) / np.sum(valid))
    assert np.mean(chance) == pytest.approx(np.mean(fr), abs=1e-12)
    assert abs(np.mean(r1) - np.mean(chance)) < 0.35


def test_report_csv_columns_and_svg():
    rng = np.random.default_rng(1)
    qf, gf, qp, gp, qc, gc = random_instance(rng, 5, 40)
    rep = evaluate_features(qf, gf, qp, gp, qc, gc, feature_source="style")
    rows = list(csv.DictReader(io.StringIO(report_csv([rep]))))
    assert list(rows[0]) == REPORT_COLUMNS
    assert rows[0]["feature"] == "style"
    svg = cmc_svg(rep.cmc_curve)
    assert svg.startswith("<svg") and "<polyline" in svg and svg.count(",") >= len(rep.cmc_curve)
