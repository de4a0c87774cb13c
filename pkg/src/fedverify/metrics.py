"""Verification metrics on embedding distances.

A pair is accepted when its distance is <= the threshold. Candidate
thresholds are -inf, the midpoints between consecutive distinct distances,
and +inf; every threshold-scanning metric uses exactly that set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import nn


class ScoredPair(NamedTuple):
    distance: float
    y: int


@dataclass
class RoundRecord:
    round: int
    accuracy: float
    mean_loss: float
    eer: float
    far: float
    frr: float
    threshold: float
    skipped: bool = False


def _arrays(scored) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scored, tuple) and len(scored) == 2 and isinstance(scored[0], np.ndarray):
        d, y = scored
    else:
        d = np.array([s.distance for s in scored], dtype=np.float64)
        y = np.array([s.y for s in scored], dtype=int)
    d = np.asarray(d, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("scored pairs must contain both matches and non-matches")
    return d, y


def score_pairs(model, params, pairs) -> list[ScoredPair]:
    """Euclidean embedding distance for each pair (eval mode, no dropout)."""
    if not pairs:
        return []
    # eval pairs reuse images heavily, so embed each distinct array once
    slot: dict[int, int] = {}
    images = []
    for p in pairs:
        for img in (p.a, p.b):
            if id(img) not in slot:
                slot[id(img)] = len(images)
                images.append(img)
    emb = nn.embed(model, params, np.stack(images))
    a = emb[[slot[id(p.a)] for p in pairs]]
    b = emb[[slot[id(p.b)] for p in pairs]]
    dist = np.sqrt(np.sum((a - b) ** 2, axis=1))
    return [ScoredPair(float(d), int(p.y)) for d, p in zip(dist, pairs)]


def candidate_thresholds(distances) -> np.ndarray:
    u = np.unique(np.asarray(distances, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def _rates(d, y, thresholds):
    pos = np.sort(d[y == 1])
    neg = np.sort(d[y == 0])
    accepted_pos = np.searchsorted(pos, thresholds, side="right")
    accepted_neg = np.searchsorted(neg, thresholds, side="right")
    far = accepted_neg / len(neg)
    frr = (len(pos) - accepted_pos) / len(pos)
    correct = accepted_pos + (len(neg) - accepted_neg)
    return far, frr, correct / len(d)


def far_frr(scored, threshold: float) -> tuple[float, float]:
    d, y = _arrays(scored)
    far, frr, _ = _rates(d, y, np.array([threshold], dtype=np.float64))
    return float(far[0]), float(frr[0])


def roc_curve(scored) -> list[tuple[float, float]]:
    """(FAR, TPR) points from the lowest to the highest candidate threshold."""
    d, y = _arrays(scored)
    far, frr, _ = _rates(d, y, candidate_thresholds(d))
    return [(float(f), float(1.0 - r)) for f, r in zip(far, frr)]


def auc(curve: Sequence[tuple[float, float]]) -> float:
    x = np.array([p[0] for p in curve])
    t = np.array([p[1] for p in curve])
    return float(np.sum(np.diff(x) * (t[1:] + t[:-1]) / 2.0))


def eer(scored) -> tuple[float, float]:
    """Equal error rate and the threshold where |FAR - FRR| is smallest.

    The EER reported is (FAR + FRR) / 2 at that threshold; ties go to the
    lower threshold.
    """
    d, y = _arrays(scored)
    th = candidate_thresholds(d)
    far, frr, _ = _rates(d, y, th)
    k = int(np.argmin(np.abs(far - frr)))  # argmin returns the first, i.e. lowest, threshold
    return float((far[k] + frr[k]) / 2.0), float(th[k])


def verification_accuracy(scored, threshold_policy: str = "eer_threshold") -> tuple[float, float]:
    """Fraction of pairs classified correctly, and the threshold used."""
    d, y = _arrays(scored)
    if threshold_policy == "eer_threshold":
        _, t = eer((d, y))
        _, _, acc = _rates(d, y, np.array([t]))
        return float(acc[0]), t
    if threshold_policy == "best_accuracy":
        th = candidate_thresholds(d)
        _, _, acc = _rates(d, y, th)
        k = int(np.argmax(acc))
        return float(acc[k]), float(th[k])
    raise ValueError(f"unknown threshold policy {threshold_policy!r}")


def evaluate(model, params, pairs, threshold_policy="eer_threshold", round_index=0):
    """Score the eval pairs and summarise them into a RoundRecord."""
    scored = score_pairs(model, params, pairs)
    d, y = _arrays(scored)
    e, _ = eer((d, y))
    acc, t = verification_accuracy((d, y), threshold_policy)
    far, frr = far_frr((d, y), t)
    hinge = np.maximum(0.0, model.margin - d)
    loss = float(np.mean(np.where(y == 1, d**2, hinge**2)))
    return RoundRecord(round_index, acc, loss, e, far, frr, t), scored


# ---------------------------------------------------------------------------
# Brute-force oracles, O(n^2), used by the tests and the metrics-oracle command
# ---------------------------------------------------------------------------


def brute_rates(scored, threshold):
    """Count accept/reject decisions one pair at a time."""
    fa = tr = n_pos = n_neg = 0
    for dist, label in scored:
        accept = dist <= threshold
        if label == 1:
            n_pos += 1
            tr += not accept
        else:
            n_neg += 1
            fa += accept
    return fa / n_neg, tr / n_pos


def brute_thresholds(scored):
    values = sorted({float(s[0]) for s in scored})
    return [-np.inf] + [(values[i] + values[i + 1]) / 2.0 for i in range(len(values) - 1)] + [np.inf]


def brute_sweep(scored):
    """Per threshold: (threshold, FAR, FRR, accuracy)."""
    out = []
    n = len(scored)
    for t in brute_thresholds(scored):
        far, frr = brute_rates(scored, t)
        correct = sum(1 for dist, label in scored if (dist <= t) == (label == 1))
        out.append((t, far, frr, correct / n))
    return out


def brute_roc(scored):
    return [(far, 1.0 - frr) for _, far, frr, _ in brute_sweep(scored)]


def brute_eer(scored):
    best = None
    for t, far, frr, _ in brute_sweep(scored):
        gap = abs(far - frr)
        if best is None or gap < best[0]:
            best = (gap, (far + frr) / 2.0, t)
    return best[1], best[2]


def brute_accuracy(scored, threshold_policy="eer_threshold"):
    sweep = brute_sweep(scored)
    if threshold_policy == "eer_threshold":
        _, t = brute_eer(scored)
        return next(acc for th, _, _, acc in sweep if th == t), t
    best = None
    for t, _, _, acc in sweep:
        if best is None or acc > best[0]:
            best = (acc, t)
    return best
