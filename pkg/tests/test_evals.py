import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iakrec.evals import (
    MetricError,
    auc,
    binned_mi,
    histogram2d,
    item_decile_click_distribution,
    kl_empirical,
    report_from_scores,
    score_label_decile_kl,
    sym_kl,
)


def brute_force_auc(scores, labels):
    """O(n^2) oracle: fraction of (pos, neg) pairs ranked correctly, ties
    counting half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        return None
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


class TestAUC:
    def test_perfect_ranking(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_ties_is_half(self):
        assert auc([0.3] * 6, [0, 1, 0, 1, 0, 1]) == 0.5

    def test_hand_example(self):
        assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75, abs=1e-15)

    def test_single_class_reported_absent(self):
        assert auc([0.1, 0.2], [1, 1]) is None

    def test_rejects_bad_labels(self):
        with pytest.raises(MetricError):
            auc([0.1, 0.2], [0, 2])

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_brute_force_with_ties(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(10, 400))
        # quantize so ties actually occur
        scores = np.round(rng.random(n), 2)
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        assert auc(scores, labels) == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(data=st.data())
    def test_property_matches_brute_force(self, data):
        n = data.draw(st.integers(min_value=2, max_value=60))
        scores = data.draw(
            st.lists(st.floats(min_value=0, max_value=1, width=32), min_size=n, max_size=n)
        )
        labels = data.draw(st.lists(st.integers(min_value=0, max_value=1), min_size=n, max_size=n))
        expected = brute_force_auc(scores, labels)
        got = auc(scores, labels)
        if expected is None:
            assert got is None
        else:
            assert got == pytest.approx(expected, abs=1e-12)


class TestBinnedMI:
    def test_independent_uniform_is_near_zero(self):
        rng = np.random.default_rng(0)
        x = rng.random(10**5)
        y = rng.random(10**5)
        assert binned_mi(x, y, bins=10) <= 0.01

    def test_identity_mapping_is_ln_bins(self):
        rng = np.random.default_rng(1)
        x = rng.random(20000)
        assert binned_mi(x, x, bins=10) == pytest.approx(math.log(10), rel=0.01)

    def test_negation_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=5000)
        assert binned_mi(x, -x) == pytest.approx(binned_mi(x, x), rel=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=4000)
        y = x + rng.normal(size=4000)
        assert binned_mi(x, y) == pytest.approx(binned_mi(y, x), abs=1e-12)

    def test_non_negative(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            x = rng.normal(size=500)
            y = rng.normal(size=500)
            assert binned_mi(x, y) >= -1e-12

    def test_multivariate_averages_over_dims(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3000, 4))
        y = np.stack([x.mean(axis=1), rng.normal(size=3000)], axis=1)
        per_dim = [binned_mi(x, y[:, j]) for j in range(2)]
        assert binned_mi(x, y) == pytest.approx(np.mean(per_dim), abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(MetricError):
            binned_mi([], [])

    def test_constant_signal_carries_no_information(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=1000)
        assert binned_mi(x, np.zeros(1000)) == pytest.approx(0.0, abs=1e-12)


class TestHistogram2D:
    def test_marginals_consistent(self):
        rng = np.random.default_rng(0)
        h = histogram2d(rng.normal(size=1000), rng.normal(size=1000), bins=8)
        assert h.total == 1000
        np.testing.assert_allclose(h.marginal_x.sum(), 1000)
        np.testing.assert_allclose(h.marginal_y.sum(), 1000)


class TestKLEmpirical:
    def test_identical_histograms_are_zero(self):
        p = np.array([0.2, 0.5, 0.3])
        assert kl_empirical(p, p) == pytest.approx(0.0, abs=1e-6)
        assert kl_empirical(p, p) >= 0.0

    def test_point_mass_vs_uniform(self):
        assert kl_empirical([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-6)

    def test_asymmetry_witnessed(self):
        p = np.array([0.9, 0.1])
        q = np.array([0.5, 0.5])
        assert kl_empirical(p, q) != kl_empirical(q, p)

    def test_mismatched_bins_rejected(self):
        with pytest.raises(MetricError):
            kl_empirical([1.0, 0.0], [1.0, 0.0, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(
        p=st.lists(st.floats(min_value=0, max_value=10), min_size=2, max_size=12),
        q=st.lists(st.floats(min_value=0, max_value=10), min_size=2, max_size=12),
    )
    def test_non_negative_for_smoothed_inputs(self, p, q):
        p, q = np.array(p), np.array(q)
        if len(p) != len(q) or p.sum() == 0:
            return
        assert kl_empirical(p, q) >= 0.0

    def test_sym_kl_symmetric(self):
        p = np.array([0.7, 0.2, 0.1])
        q = np.array([0.1, 0.3, 0.6])
        assert sym_kl(p, q) == pytest.approx(sym_kl(q, p), abs=1e-15)


class TestDiagnostics:
    def test_decile_distribution_sums_to_one(self):
        rng = np.random.default_rng(0)
        items = rng.integers(0, 50, size=5000)
        clicks = rng.integers(0, 2, size=5000)
        dist, deciles = item_decile_click_distribution(items, clicks)
        assert dist.sum() == pytest.approx(1.0)
        assert len(dist) == 10
        assert deciles.max() == 9

    def test_score_label_kl_drops_when_scores_match_labels(self):
        rng = np.random.default_rng(1)
        items = rng.integers(0, 40, size=4000)
        rate = (items % 7) / 14.0
        labels = (rng.random(4000) < rate).astype(float)
        matched = score_label_decile_kl(rate, labels, items)
        flat = score_label_decile_kl(np.full(4000, 0.5), labels, items)
        assert matched < flat


def test_report_from_scores():
    from iakrec.models import EncodedBatch

    n = 10
    enc = EncodedBatch(
        user=np.zeros(n, dtype=np.int64), item=np.zeros(n, dtype=np.int64),
        scene=np.zeros(n, dtype=np.int64), region=np.zeros(n, dtype=np.int64),
        period=np.zeros(n, dtype=np.int64), features=np.zeros((n, 4), dtype=np.int64),
        history=np.full((n, 5), -1, dtype=np.int64),
        click=np.array([1, 1, 0, 0, 0, 0, 0, 0, 0, 0], dtype=float),
        purchase=np.zeros(n),
    )
    rep = report_from_scores(np.linspace(0, 1, n)[::-1], np.linspace(0, 1, n), enc, "ds", "m", seed=3)
    assert rep.ctr_auc == 1.0
    assert rep.ctcvr_auc is None  # no purchase positives
    assert rep.n_pos_ctr == 2 and rep.n_neg_ctr == 8
    assert rep.seed == 3
