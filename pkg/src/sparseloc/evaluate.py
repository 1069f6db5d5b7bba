"""Localisation extraction, point matching and recovery metrics."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

__all__ = [
    "Localization",
    "MatchResult",
    "Metrics",
    "UndefinedMetricError",
    "extract_localizations",
    "match_points",
    "brute_force_match_cost",
    "compute_metrics",
    "GREEDY_THRESHOLD",
]

GREEDY_THRESHOLD = 500


class UndefinedMetricError(ValueError):
    """Raised when a metric has no meaningful value (e.g. NMSE against an all-zero truth)."""


@dataclass(frozen=True)
class Localization:
    position: tuple[float, float]
    intensity: float
    frame_id: int | None = None


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)  # (pred_index, truth_index, distance)
    unmatched_pred: int = 0
    unmatched_truth: int = 0
    greedy: bool = False

    @property
    def true_positives(self) -> int:
        return len(self.pairs)

    def __add__(self, other: "MatchResult") -> "MatchResult":
        # pooled counts across frames; pair indices are no longer meaningful
        return MatchResult(self.pairs + other.pairs, self.unmatched_pred + other.unmatched_pred,
                           self.unmatched_truth + other.unmatched_truth,
                           self.greedy or other.greedy)


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    jaccard: float
    rmse_loc: float
    nmse: float = float("nan")

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "jaccard": self.jaccard,
                "rmse_loc": self.rmse_loc, "nmse": self.nmse}


_EIGHT = np.ones((3, 3), dtype=bool)


def extract_localizations(grid, threshold: float = 0.0, min_separation: float = 0.0,
                          frame_id: int | None = None) -> list[Localization]:
    """One localisation per 8-connected blob of pixels above ``threshold``.

    Positions are intensity-weighted centroids in ``(row, col)`` pixel units.
    Blobs whose centroids lie closer than ``min_separation`` are merged
    (weighted by blob intensity) until no such pair remains.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    grid = np.asarray(grid, dtype=np.float64)
    mask = grid > threshold
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    weights = np.asarray(ndimage.sum(grid, labels, idx), dtype=np.float64)
    centers = np.array(ndimage.center_of_mass(grid, labels, idx), dtype=np.float64).reshape(n, 2)
    if min_separation > 0 and n > 1:
        centers, weights = _merge_close(centers, weights, min_separation)
    return [Localization((float(c[0]), float(c[1])), float(w), frame_id)
            for c, w in zip(centers, weights)]


def _merge_close(centers, weights, min_sep):
    centers = [c for c in centers]
    weights = list(weights)
    while len(centers) > 1:
        tree = cKDTree(np.array(centers))
        pairs = tree.query_pairs(min_sep, output_type="ndarray")
        if len(pairs) == 0:
            break
        d = np.linalg.norm(np.array(centers)[pairs[:, 0]] - np.array(centers)[pairs[:, 1]], axis=1)
        i, j = pairs[np.argmin(d)]
        w = weights[i] + weights[j]
        merged = (centers[i] * weights[i] + centers[j] * weights[j]) / w
        for k in sorted((i, j), reverse=True):
            del centers[k], weights[k]
        centers.append(merged)
        weights.append(w)
    return np.array(centers), np.array(weights)


def _as_points(points) -> np.ndarray:
    if len(points) == 0:
        return np.zeros((0, 2))
    if isinstance(points[0], Localization):
        return np.array([p.position for p in points], dtype=np.float64)
    return np.asarray(points, dtype=np.float64)[:, :2]


def match_points(pred, truth, radius: float) -> MatchResult:
    """One-to-one matching of predictions to truth within ``radius``.

    Up to ``GREEDY_THRESHOLD`` points per side the assignment maximises the
    number of matches and, among those, minimises total distance.  Larger
    sets fall back to greedy nearest-first matching (``result.greedy``).
    """
    if not radius > 0:
        raise ValueError("radius must be > 0")
    p = _as_points(pred)
    t = _as_points(truth)
    if len(p) == 0 or len(t) == 0:
        return MatchResult([], len(p), len(t))
    if max(len(p), len(t)) > GREEDY_THRESHOLD:
        pairs = _greedy(p, t, radius)
        greedy = True
    else:
        pairs = _optimal(p, t, radius)
        greedy = False
    return MatchResult(pairs, len(p) - len(pairs), len(t) - len(pairs), greedy)


def _optimal(p, t, radius):
    d = np.linalg.norm(p[:, None, :] - t[None, :, :], axis=2)
    feasible = d <= radius
    if not feasible.any():
        return []
    # every feasible match is worth more than any total distance, so the
    # solver maximises the match count first
    big = radius * (min(len(p), len(t)) + 1)
    cost = np.where(feasible, d - big, 0.0)
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c), float(d[r, c])) for r, c in zip(rows, cols) if feasible[r, c]]


def _greedy(p, t, radius):
    tree_t = cKDTree(t)
    tree_p = cKDTree(p)
    sdm = tree_p.sparse_distance_matrix(tree_t, radius, output_type="ndarray")
    order = np.argsort(sdm["v"], kind="stable")
    used_p, used_t, pairs = set(), set(), []
    for k in order:
        i, j, dist = int(sdm["i"][k]), int(sdm["j"][k]), float(sdm["v"][k])
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        pairs.append((i, j, dist))
    return pairs


def brute_force_match_cost(pred, truth, radius: float) -> tuple[int, float]:
    """Exhaustive reference for small sets: (max match count, min total distance at that count)."""
    p = _as_points(pred)
    t = _as_points(truth)
    if len(p) > len(t):
        p, t = t, p
    best = (0, 0.0)
    d = np.linalg.norm(p[:, None, :] - t[None, :, :], axis=2) if len(p) and len(t) else None
    if d is None:
        return best
    # each short-side point either picks a distinct long-side partner or stays unmatched (-1)
    for choice in itertools.product(range(-1, len(t)), repeat=len(p)):
        taken = [c for c in choice if c >= 0]
        if len(taken) != len(set(taken)):
            continue
        if any(c >= 0 and d[i, c] > radius for i, c in enumerate(choice)):
            continue
        count = len(taken)
        total = sum(d[i, c] for i, c in enumerate(choice) if c >= 0)
        if count > best[0] or (count == best[0] and total < best[1]):
            best = (count, total)
    return best


def compute_metrics(match: MatchResult, pred_grid=None, truth_grid=None) -> Metrics:
    """Detection and localisation metrics; NMSE only when both grids are given."""
    tp = match.true_positives
    fp = match.unmatched_pred
    fn = match.unmatched_truth
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    jaccard = tp / (tp + fp + fn) if tp + fp + fn else 0.0
    dists = np.array([pr[2] for pr in match.pairs], dtype=np.float64)
    rmse = float(np.sqrt(np.mean(dists ** 2))) if len(dists) else 0.0
    nmse = float("nan")
    if pred_grid is not None and truth_grid is not None:
        pg = np.asarray(pred_grid, dtype=np.float64)
        tg = np.asarray(truth_grid, dtype=np.float64)
        if pg.shape != tg.shape:
            raise ValueError(f"grid shapes differ: {pg.shape} vs {tg.shape}")
        denom = float(np.sum(tg * tg))
        if denom == 0.0:
            raise UndefinedMetricError("NMSE is undefined for an all-zero truth grid")
        nmse = float(np.sum((pg - tg) ** 2) / denom)
    return Metrics(precision, recall, jaccard, rmse, nmse)
