"""Detection metrics: EER, false-accept rate at a false-reject target, DET staircase.

Conventions: a trial is accepted when ``score >= threshold``. FR(t) is the
fraction of positives scoring below ``t``; FA(t) the fraction of negatives at
or above ``t``. Thresholds are every distinct score plus -inf and +inf.
"""
from dataclasses import dataclass

import numpy as np

from . import _kernels


class MetricError(ValueError):
    pass


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise MetricError("scores and labels must be equal-length 1-D sequences")

    @classmethod
    def from_pairs(cls, pos, neg):
        pos, neg = np.asarray(pos, float), np.asarray(neg, float)
        return cls(np.concatenate([pos, neg]),
                   np.concatenate([np.ones(pos.size, int), np.zeros(neg.size, int)]))

    def split(self):
        pos = self.scores[self.labels == 1]
        neg = self.scores[self.labels == 0]
        if pos.size == 0 or neg.size == 0:
            raise MetricError("need at least one positive and one negative trial")
        return pos, neg


def _rates(s):
    pos, neg = s.split()
    thresholds = np.concatenate([[-np.inf], np.unique(s.scores), [np.inf]])
    n_fr, n_fa = _kernels.sweep_counts(np.sort(pos), np.sort(neg), thresholds)
    return thresholds, n_fr / pos.size, n_fa / neg.size


def compute_eer(s):
    """Midpoint (FA+FR)/2 at the threshold minimising |FA-FR|; lowest threshold wins ties."""
    _, fr, fa = _rates(s)
    i = int(np.argmin(np.abs(fa - fr)))
    return float((fa[i] + fr[i]) / 2)


def compute_fa_at_fr(s, fr_target=0.10):
    """Smallest FA over thresholds whose FR does not exceed ``fr_target``."""
    _, fr, fa = _rates(s)
    ok = fr <= fr_target
    return float(fa[ok].min())


def det_points(s):
    """(threshold, FR, FA) at every threshold in increasing order, endpoints included."""
    t, fr, fa = _rates(s)
    return list(zip(t.tolist(), fr.tolist(), fa.tolist()))


def summarize(s, fr_target=0.10):
    return {"eer": compute_eer(s), "fa_at_10": compute_fa_at_fr(s, fr_target), "n": int(s.scores.size)}
