import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flora.metrics import (MetricError, ScoreSet, compute_eer, compute_fa_at_fr, det_points,
                           summarize)


def brute_force(pos, neg, fr_target=0.10):
    """O(n^2) sweep: every candidate threshold, rates counted with explicit loops."""
    cands = [-np.inf] + sorted(set(pos) | set(neg)) + [np.inf]
    best = None
    fa_min = None
    for t in cands:
        fr = sum(1 for p in pos if p < t) / len(pos)
        fa = sum(1 for n in neg if n >= t) / len(neg)
        gap = abs(fa - fr)
        if best is None or gap < best[0]:
            best = (gap, (fa + fr) / 2)
        if fr <= fr_target and (fa_min is None or fa < fa_min):
            fa_min = fa
    return best[1], fa_min


def test_worked_example():
    s = ScoreSet.from_pairs([0.9, 0.4], [0.6, 0.1])
    assert compute_eer(s) == 0.5
    # FR <= 0.1 forces every positive accepted: threshold <= 0.4, so FA >= 0.5
    assert compute_fa_at_fr(s) == 0.5


def test_perfect_and_inverted():
    assert compute_eer(ScoreSet.from_pairs([0.8, 0.9], [0.1, 0.2])) == 0.0
    assert compute_eer(ScoreSet.from_pairs([0.1, 0.2], [0.8, 0.9])) == 1.0
    assert compute_fa_at_fr(ScoreSet.from_pairs([0.8, 0.9], [0.1, 0.2])) == 0.0


def test_matches_brute_force_on_1000_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n_pos, n_neg = rng.integers(1, 26, size=2)
        # coarse grid so ties are common
        pos = np.round(rng.normal(0.6, 0.2, n_pos), 1)
        neg = np.round(rng.normal(0.4, 0.2, n_neg), 1)
        s = ScoreSet.from_pairs(pos, neg)
        eer, fa = brute_force(pos.tolist(), neg.tolist())
        assert compute_eer(s) == eer
        assert compute_fa_at_fr(s) == fa


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30),
       st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_strictly_monotone_transform_invariance(pos, neg):
    s = ScoreSet.from_pairs(pos, neg)
    # transforms that stay strictly increasing in floating point: power-of-two
    # scaling and the dense rank
    uniq = np.unique(s.scores)
    for f in (lambda x: 8.0 * np.asarray(x), lambda x: np.searchsorted(uniq, x) - 3.0):
        t = ScoreSet.from_pairs(f(pos), f(neg))
        assert compute_eer(s) == compute_eer(t)
        assert compute_fa_at_fr(s) == compute_fa_at_fr(t)


def test_det_points_staircase():
    s = ScoreSet.from_pairs([0.9, 0.4], [0.6, 0.1])
    pts = det_points(s)
    assert pts[0] == (-np.inf, 0.0, 1.0) and pts[-1] == (np.inf, 1.0, 0.0)
    frs = [p[1] for p in pts]
    fas = [p[2] for p in pts]
    assert frs == sorted(frs) and fas == sorted(fas, reverse=True)


def test_errors():
    with pytest.raises(MetricError):
        compute_eer(ScoreSet([0.1, 0.2], [1, 1]))
    with pytest.raises(MetricError):
        ScoreSet([0.1, 0.2], [1])


def test_summarize_keys():
    out = summarize(ScoreSet.from_pairs([0.9], [0.1]))
    assert out == {"eer": 0.0, "fa_at_10": 0.0, "n": 2}
