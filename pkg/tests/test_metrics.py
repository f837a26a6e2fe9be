"""Metrics against brute-force oracles, plus embedding behaviour."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    oracle_consistency,
    oracle_diversity,
    oracle_max_packing,
    oracle_scores,
    oracle_uniqueness,
    random_instance,
)
from veinsynth.metrics import (
    EmbedConfig,
    MetricConfig,
    MetricError,
    class_centers,
    embed,
    evaluate_features,
    histogram_edges,
    intra_consistency,
    intra_diversity,
    score_distributions,
    uniqueness,
)

# ---------------------------------------------------------------------------
# uniqueness


def test_uniqueness_all_far_apart():
    eye = np.eye(5)
    assert uniqueness([eye[i] for i in range(5)]).u_class == 1.0


def test_uniqueness_identical_centres():
    v = np.array([0.6, 0.8])
    res = uniqueness([v, v, v, v])
    assert res.u_class == 0.25 and res.unique == [0]


def test_uniqueness_six_points_matches_exhaustive_packing():
    # angles chosen so some neighbours fall inside r = 0.2 (about 36.9 deg)
    angles = [0, 20, 45, 90, 100, 200]
    pts = [np.array([math.cos(math.radians(a)), math.sin(math.radians(a))]) for a in angles]
    res = uniqueness(pts, MetricConfig(r=0.2))
    # greedy in id order keeps 0, 45, 90, 200
    assert res.unique == [0, 2, 3, 5]
    assert res.size == oracle_max_packing([p.tolist() for p in pts], 0.2)


def test_uniqueness_greedy_order_is_class_id():
    a = np.array([1.0, 0.0])
    b = np.array([math.cos(0.5), math.sin(0.5)])  # d(a, b) ~ 0.12
    c = np.array([math.cos(1.0), math.sin(1.0)])  # d(b, c) ~ 0.12, d(a, c) ~ 0.46
    assert uniqueness([a, b, c]).unique == [0, 2]
    assert uniqueness([b, a, c]).unique == [0]


# ---------------------------------------------------------------------------
# consistency and diversity


def test_consistency_single_sample_classes():
    rng = np.random.default_rng(1)
    assert intra_consistency([x for x in random_instance(rng, 6, [1] * 6)]) == 1.0


def test_consistency_one_outlier():
    base = np.array([1.0, 0.0, 0.0])
    samples = np.tile(base, (10, 1))
    samples[3] = [0.0, 0.0, 1.0]
    # centre stays close to base; the outlier is about 0.99 away from it
    assert intra_consistency([samples]) == pytest.approx(0.9)


def test_diversity_identical_samples_zero():
    v = np.tile(np.array([0.0, 1.0]), (4, 1))
    assert intra_diversity([v, v]) == 0.0
    assert intra_diversity([v, v], mode="printed") == 1.0


def test_diversity_all_pairs_far():
    assert intra_diversity([np.eye(3), np.eye(3)]) == 1.0


def _from_distances(d01, d02, d12):
    """Three unit vectors with the given pairwise cosine distances."""
    G = np.array([[1, 1 - d01, 1 - d02], [1 - d01, 1, 1 - d12], [1 - d02, 1 - d12, 1]])
    w, V = np.linalg.eigh(G)
    assert w.min() > -1e-12, "distances not realizable by unit vectors"
    return V * np.sqrt(np.clip(w, 0, None))


def test_diversity_hand_example():
    """Pair distances {0.1, 0.3, 0.5} and {0.1, 0.1, x > r} at r = 0.2 give 0.5.

    Three unit vectors cannot realize {0.1, 0.1, 0.9} (the angles break the
    triangle inequality), so x = 0.35 stands in; only which side of r each
    distance lies on matters.
    """
    c1 = _from_distances(0.1, 0.3, 0.5)
    c2 = _from_distances(0.1, 0.35, 0.1)
    for c, want in ((c1, [0.1, 0.3, 0.5]), (c2, [0.1, 0.35, 0.1])):
        got = [1 - c[0] @ c[1], 1 - c[0] @ c[2], 1 - c[1] @ c[2]]
        assert np.allclose(got, want)
    d = intra_diversity([c1, c2], MetricConfig(r=0.2))
    assert d == pytest.approx(0.5)
    assert d == pytest.approx(oracle_diversity([c1.tolist(), c2.tolist()], 0.2))


def test_diversity_unequal_sizes_rejected():
    with pytest.raises(MetricError):
        intra_diversity([np.eye(3), np.eye(3)[:2]])
    with pytest.raises(MetricError):
        intra_diversity([np.eye(3)[:1], np.eye(3)[:1]])


# ---------------------------------------------------------------------------
# scores


def test_scores_single_class_flagged():
    s = score_distributions([np.eye(3)])
    assert s.single_class and len(s.impostor) == 0
    assert s.genuine_stats.count == 3


def test_scores_one_hot_classes():
    classes = [np.tile(np.eye(4)[c], (3, 1)) for c in range(4)]
    s = score_distributions(classes)
    assert s.genuine_hist[-1] == 12 and s.genuine_hist.sum() == 12
    zero_bin = int(np.searchsorted(s.edges, 0.0, side="right")) - 1
    assert s.impostor_hist[zero_bin] == s.impostor_hist.sum() == 6 * 9


def test_histogram_edges():
    e = histogram_edges(0.01)
    assert len(e) == 201 and e[0] == -1.0 and e[-1] == pytest.approx(1.0)


def test_impostor_sampling_seeded_and_drawn_from_exact_set():
    rng = np.random.default_rng(7)
    classes = random_instance(rng, 5, [5] * 5)
    exact = score_distributions(classes).impostor
    cfg = MetricConfig(impostor_cap=50, seed=3)
    a = score_distributions(classes, cfg)
    b = score_distributions(classes, cfg)
    assert a.impostor_sampled and len(a.impostor) == 50
    assert np.array_equal(a.impostor, b.impostor)
    for v in a.impostor:
        assert np.min(np.abs(exact - v)) < 1e-12


# ---------------------------------------------------------------------------
# oracle equivalence and properties on random small instances


def _check_against_oracles(classes, r):
    cfg = MetricConfig(r=r)
    lists = [c.tolist() for c in classes]
    u, acc = oracle_uniqueness(lists, r)
    res = uniqueness(classes, cfg)
    assert res.u_class == u and res.unique == acc
    assert intra_consistency(classes, cfg) == oracle_consistency(lists, r)
    if len({len(c) for c in classes}) == 1 and len(classes[0]) >= 2:
        assert intra_diversity(classes, cfg) == pytest.approx(oracle_diversity(lists, r), abs=1e-12)
        assert intra_diversity(classes, cfg, "printed") == pytest.approx(oracle_diversity(lists, r, True), abs=1e-12)
    g, i, gh, ih = oracle_scores(lists)
    s = score_distributions(classes, cfg)
    assert np.allclose(np.sort(s.genuine), np.sort(g), atol=1e-12)
    assert np.allclose(np.sort(s.impostor), np.sort(i), atol=1e-12)
    assert s.genuine_hist.tolist() == gh and s.impostor_hist.tolist() == ih


@settings(max_examples=150, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    n_classes=st.integers(1, 5),
    sizes=st.lists(st.integers(1, 5), min_size=5, max_size=5),
    equal=st.booleans(),
    r=st.sampled_from([0.05, 0.2, 0.5, 1.0]),
)
def test_metrics_match_oracles(seed, n_classes, sizes, equal, r):
    rng = np.random.default_rng(seed)
    if equal:
        sizes = [max(2, sizes[0])] * 5
    _check_against_oracles(random_instance(rng, n_classes, sizes), r)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 5))
def test_metric_ranges_and_monotonicity(seed, n):
    rng = np.random.default_rng(seed)
    classes = random_instance(rng, 4, [n] * 4, dim=3)
    prev = None
    for r in (1.5, 1.0, 0.5, 0.2, 0.05):  # decreasing r
        cfg = MetricConfig(r=r)
        u = uniqueness(classes, cfg).u_class
        c = intra_consistency(classes, cfg)
        d = intra_diversity(classes, cfg)
        assert 1 / 4 <= u <= 1 and 0 <= c <= 1 and 0 <= d <= 1
        if prev is not None:
            assert u >= prev[0] and c <= prev[1] and d >= prev[2]
        prev = (u, c, d)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_permutation_invariance_within_classes(seed):
    rng = np.random.default_rng(seed)
    classes = random_instance(rng, 3, [4, 4, 4])
    shuffled = [c[rng.permutation(len(c))] for c in classes]
    assert uniqueness(classes).unique == uniqueness(shuffled).unique
    assert intra_consistency(classes) == intra_consistency(shuffled)
    assert intra_diversity(classes) == pytest.approx(intra_diversity(shuffled), abs=1e-12)


def test_class_centers_unit_norm():
    rng = np.random.default_rng(0)
    cen = class_centers(random_instance(rng, 3, [3, 3, 3]))
    assert np.allclose(np.linalg.norm(cen, axis=1), 1.0)


def test_metric_config_validation():
    for bad in (dict(r=0), dict(r=2), dict(diversity_mode="other"), dict(impostor_cap=0), dict(bin_width=0.03)):
        with pytest.raises(MetricError):
            MetricConfig(**bad)


def test_report_sections():
    rng = np.random.default_rng(2)
    rep = evaluate_features(random_instance(rng, 3, [3, 3, 3], dim=8))
    text = rep.to_text()
    for section in ("[uniqueness]", "[consistency]", "[diversity]", "[scores]", "[histogram]"):
        assert section in text
    assert "D_intra[all,prose]" in text and "D_intra[all,printed]" in text


# ---------------------------------------------------------------------------
# embedding


@pytest.fixture(scope="module")
def centre_views():
    """Centre-view ROI crops of 200 generated identities (100 disjoint pairs)."""
    from veinsynth.pipeline import PipelineConfig, build_identity, make_sample
    from veinsynth.renderer import quantize

    cfg = PipelineConfig()
    out = []
    for i in range(200):
        ident = build_identity(99, i, cfg)
        j = next(k for k, p in enumerate(ident.plan.samples) if p.is_geometric_identity)
        out.append(quantize(make_sample(ident, j, cfg, ("roi",)).roi_image))
    return out


def test_embed_unit_norm_and_deterministic(centre_views):
    f = embed(centre_views[0])
    assert f.shape == (512,)
    assert abs(np.linalg.norm(f) - 1) < 1e-6 and np.isfinite(f).all()
    assert np.array_equal(f, embed(centre_views[0].copy()))
    assert 1 - f @ embed(centre_views[0]) == pytest.approx(0.0, abs=1e-12)


def test_embed_gain_invariance(centre_views):
    for img in centre_views[:20]:
        x = img.astype(np.float64) / 255
        f = embed(x)
        for gain in (0.7, 1.3):
            assert 1 - f @ embed(np.clip(gain * x, 0, 1)) <= 0.05


def test_embed_distinct_identities_exceed_r(centre_views):
    feats = [embed(img) for img in centre_views]
    d = [1 - feats[2 * k] @ feats[2 * k + 1] for k in range(100)]
    assert min(d) > 0.2, min(d)


def test_embed_rejects_wrong_shape():
    with pytest.raises(MetricError):
        embed(np.zeros((300, 600), np.uint8))
    with pytest.raises(MetricError):
        embed(np.zeros((200, 600), np.uint8))


def test_embed_config_dim():
    img = np.random.default_rng(0).integers(0, 255, (200, 600), dtype=np.uint8)
    assert embed(img, EmbedConfig(dim=64)).shape == (64,)
