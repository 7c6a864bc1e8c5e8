"""Uses of the ledger: heatmaps, segmentation scoring, head retrieval, group accuracy."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from clipdecomp.decomposition import (
    DecomposedRepresentation,
    _check_layer_head,
    head_contributions,
    token_contributions,
)
from clipdecomp.kernel import ACCUM, DimensionError


@dataclass(frozen=True, eq=False)
class Heatmap:
    grid: np.ndarray  # (h_p, w_p), class token excluded
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.asarray(self.grid).ndim != 2:
            raise DimensionError(f"heatmap grid must be 2-D, got shape {np.shape(self.grid)}")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.grid.shape)

    def to_json(self) -> dict:
        return {
            "shape": list(self.grid.shape),
            "data": [float(x) for x in np.asarray(self.grid, dtype=ACCUM).ravel()],
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, data: dict) -> Heatmap:
        grid = np.asarray(data["data"], dtype=ACCUM).reshape(data["shape"])
        return cls(grid, dict(data.get("meta", {})))


@dataclass(frozen=True)
class SegmentationMetrics:
    pixel_accuracy: float
    mIoU: float
    mAP: float

    def to_json(self) -> dict:
        return {"pixel_accuracy": self.pixel_accuracy, "mIoU": self.mIoU, "mAP": self.mAP}


@dataclass(frozen=True)
class RetrievalResult:
    ids: list[str]
    scores: list[float]
    indices: list[int]

    def to_json(self) -> dict:
        return {
            "results": [
                {"rank": r, "index": i, "id": s, "score": v}
                for r, (i, s, v) in enumerate(zip(self.indices, self.ids, self.scores))
            ]
        }


def _direction(text_dir) -> np.ndarray:
    v = np.asarray(text_dir, dtype=ACCUM)
    if v.ndim != 1:
        raise DimensionError(f"text direction must be a vector, got shape {v.shape}")
    return v


def token_heatmap(d: DecomposedRepresentation, text_dir) -> Heatmap:
    """Score of every image patch along ``text_dir``: ``<c_token^i, t>`` for i = 1..N."""
    v = _direction(text_dir)
    scores = token_contributions(d)[1:].astype(ACCUM) @ v
    return Heatmap(scores.reshape(d.grid), {"image_id": d.image_id})


def joint_heatmap(d: DecomposedRepresentation, l: int, h: int, text_dir) -> Heatmap:
    """Per-head patch scores ``<c_{i,l,h}, t>`` for i = 1..N."""
    _check_layer_head(d, l, h)
    v = _direction(text_dir)
    scores = d.msa_terms[1:, l, h, :].astype(ACCUM) @ v
    return Heatmap(scores.reshape(d.grid), {"image_id": d.image_id, "layer": l, "head": h})


def class_heatmaps(d: DecomposedRepresentation, directions: np.ndarray) -> np.ndarray:
    """Token heatmaps for many directions at once, ``(k, h_p, w_p)``."""
    dirs = np.asarray(directions, dtype=ACCUM)
    scores = token_contributions(d)[1:].astype(ACCUM) @ dirs.T
    return scores.T.reshape(len(dirs), *d.grid)


def bias_normalize(h: Heatmap, class_heatmaps: Sequence[Heatmap]) -> Heatmap:
    """Subtract the elementwise mean of ``class_heatmaps`` from ``h``."""
    if len(class_heatmaps) == 0:
        raise ValueError("need at least one class heatmap")
    stack = np.stack([np.asarray(c.grid, dtype=ACCUM) for c in class_heatmaps])
    if stack.shape[1:] != h.grid.shape:
        raise DimensionError(f"class heatmaps have shape {stack.shape[1:]}, heatmap {h.grid.shape}")
    return Heatmap(np.asarray(h.grid, dtype=ACCUM) - stack.mean(axis=0), dict(h.meta))


def binarize(h: Heatmap, threshold: float | None = None) -> np.ndarray:
    """Foreground mask; default threshold is the heatmap's own mean (``>=``)."""
    g = np.asarray(h.grid, dtype=ACCUM)
    t = g.mean() if threshold is None else threshold
    return g >= t


def upsample(grid: np.ndarray, factor: int, mode: str = "nearest") -> np.ndarray:
    """Patch grid to pixel grid. ``bilinear`` samples at pixel centers, edges clamped."""
    g = np.asarray(grid)
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if mode == "nearest":
        return np.repeat(np.repeat(g, factor, axis=0), factor, axis=1)
    if mode != "bilinear":
        raise ValueError(f"unknown upsample mode {mode!r}")
    g = g.astype(ACCUM)
    hp, wp = g.shape

    def coords(n):
        x = (np.arange(n * factor) + 0.5) / factor - 0.5
        x = np.clip(x, 0, n - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, x - lo

    r0, r1, fr = coords(hp)
    c0, c1, fc = coords(wp)
    top = g[r0][:, c0] * (1 - fc) + g[r0][:, c1] * fc
    bot = g[r1][:, c0] * (1 - fc) + g[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the precision-recall curve, trapezoidal rule.

    One curve point per distinct score threshold, plus the (recall 0,
    precision 1) start point. Returns 0 when there are no positives.
    """
    s = np.asarray(scores, dtype=ACCUM).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    pos = int(y.sum())
    if pos == 0:
        return 0.0
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    recall = np.r_[0.0, tp[last] / pos]
    precision = np.r_[1.0, tp[last] / (tp[last] + fp[last])]
    return float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2.0))


def _confusion(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-class (background, foreground) intersection and union counts."""
    inter = np.array([np.sum(~pred & ~gt), np.sum(pred & gt)], dtype=np.int64)
    union = np.array([np.sum(~pred | ~gt), np.sum(pred | gt)], dtype=np.int64)
    return np.stack([inter, union])


def _mean_iou(inter: np.ndarray, union: np.ndarray) -> float:
    """Mean of the per-class IoUs, rounded once from the exact rational value.

    A class absent from both prediction and ground truth counts as a perfect match.
    """
    ious = [Fraction(int(i), int(u)) if u > 0 else Fraction(1) for i, u in zip(inter, union)]
    return float(sum(ious) / len(ious))


def seg_metrics(
    scores: Heatmap,
    mask: np.ndarray,
    gt: np.ndarray,
    patch_upsample: int,
    mode: str = "nearest",
) -> SegmentationMetrics:
    """Pixel accuracy, mean foreground/background IoU and AP of one prediction."""
    pred, cont, gt = _pixel_predictions(scores, mask, gt, patch_upsample, mode)
    inter, union = _confusion(pred, gt)
    return SegmentationMetrics(
        pixel_accuracy=float(np.mean(pred == gt)),
        mIoU=_mean_iou(inter, union),
        mAP=average_precision(cont, gt),
    )


def _pixel_predictions(scores, mask, gt, factor, mode):
    gt = np.asarray(gt).astype(bool)
    mask = np.asarray(mask).astype(bool)
    grid = np.asarray(scores.grid, dtype=ACCUM)
    if mask.shape != grid.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match heatmap {grid.shape}")
    expected = (grid.shape[0] * factor, grid.shape[1] * factor)
    if gt.shape != expected:
        raise DimensionError(f"ground truth shape {gt.shape}, expected {expected} for upsample {factor}")
    if mode == "nearest":
        pred = upsample(mask, factor)
    else:
        # binarize the interpolated scores at the threshold implied by the patch mask
        cont = upsample(grid, factor, mode)
        thresh = grid[mask].min() if mask.any() else np.inf
        pred = cont >= thresh
    return pred, upsample(grid, factor, mode), gt


@dataclass
class SegmentationAccumulator:
    """Dataset-level scores: pixel counts and IoU pooled over images, AP averaged."""

    correct: int = 0
    labeled: int = 0
    inter: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=np.int64))
    union: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=np.int64))
    aps: list = field(default_factory=list)

    def add(self, scores: Heatmap, mask: np.ndarray, gt: np.ndarray, factor: int, mode: str = "nearest"):
        pred, cont, gt = _pixel_predictions(scores, mask, gt, factor, mode)
        self.correct += int(np.sum(pred == gt))
        self.labeled += gt.size
        inter, union = _confusion(pred, gt)
        self.inter += inter
        self.union += union
        self.aps.append(average_precision(cont, gt))

    def result(self) -> SegmentationMetrics:
        if not self.aps:
            raise ValueError("no images accumulated")
        return SegmentationMetrics(
            pixel_accuracy=self.correct / self.labeled,
            mIoU=_mean_iou(self.inter, self.union),
            mAP=float(np.mean(self.aps)),
        )


def retrieve_by_head(
    query: DecomposedRepresentation,
    gallery: Sequence[DecomposedRepresentation],
    l: int,
    h: int,
    k: int,
) -> RetrievalResult:
    """Top-``k`` gallery items by raw inner product of head ``(l, h)`` contributions."""
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    if not 1 <= k <= len(gallery):
        raise ValueError(f"k={k} outside 1..{len(gallery)}")
    _check_layer_head(query, l, h)
    q = head_contributions(query)[l, h].astype(ACCUM)
    feats = np.stack([head_contributions(g)[l, h] for g in gallery]).astype(ACCUM)
    return rank_by_inner_product(q, feats, [g.image_id for g in gallery], k)


def rank_by_inner_product(q: np.ndarray, feats: np.ndarray, ids: Sequence[str], k: int) -> RetrievalResult:
    scores = feats @ q
    order = np.argsort(-scores, kind="stable")[:k]
    return RetrievalResult(
        ids=[ids[i] for i in order],
        scores=[float(scores[i]) for i in order],
        indices=[int(i) for i in order],
    )


def worst_group_accuracy(
    predictions: Sequence[int],
    labels: Sequence[int],
    groups: Sequence,
    all_groups: Sequence | None = None,
) -> tuple[float, dict]:
    """Minimum per-group accuracy, plus the per-group table.

    If ``all_groups`` is given, every listed group must have at least one
    sample; an empty group has no defined accuracy and raises ``ValueError``.
    """
    if not len(predictions) == len(labels) == len(groups):
        raise ValueError("predictions, labels and groups must have equal length")
    if len(groups) == 0:
        raise ValueError("no samples")
    if all_groups is not None:
        missing = sorted({str(g) for g in all_groups} - {str(g) for g in groups})
        if missing:
            raise ValueError(f"groups with no samples: {', '.join(missing)}")
    table: dict = {}
    for p, y, g in zip(predictions, labels, groups):
        hit, n = table.get(g, (0, 0))
        table[g] = (hit + int(p == y), n + 1)
    per_group = {g: hit / n for g, (hit, n) in sorted(table.items(), key=lambda kv: str(kv[0]))}
    return min(per_group.values()), per_group
