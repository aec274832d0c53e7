"""Threshold-free localization metrics and diagnostic statistics.

Boxes are half-open pixel rectangles ``[x0, x1) x [y0, y1)``.  Maps are
binarized as ``H >= tau`` over the grid ``tau_t = t / T``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .exceptions import InvalidArgumentError

DEFAULT_DELTAS = (0.3, 0.5, 0.7)

_STRUCTURE = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


@dataclass(frozen=True)
class BBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def valid(self) -> bool:
        return 0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


def tight_box(mask: np.ndarray) -> BBox:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise InvalidArgumentError("tight box of an empty mask")
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def threshold_grid(n: int = 100) -> np.ndarray:
    if n < 1:
        raise InvalidArgumentError(f"threshold grid needs at least one point, got {n}")
    return np.arange(n) / n


def extract_boxes(
    heatmap: np.ndarray, tau: float, connectivity: int = 8, largest_only: bool = False
) -> list[BBox]:
    """Tight boxes of the connected components of ``heatmap >= tau``."""
    if connectivity not in _STRUCTURE:
        raise InvalidArgumentError(f"connectivity must be 4 or 8, got {connectivity}")
    binary = np.asarray(heatmap) >= tau
    labels, n = ndimage.label(binary, structure=_STRUCTURE[connectivity])
    if n == 0:
        return []
    slices = ndimage.find_objects(labels)
    if largest_only:
        sizes = np.bincount(labels.ravel())[1:]
        slices = [slices[int(np.argmax(sizes))]]
    return [BBox(sx.start, sy.start, sx.stop, sy.stop) for sy, sx in slices]


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def best_iou(pred: Sequence[BBox], gts: Sequence[BBox]) -> float:
    return max((iou(p, g) for p in pred for g in gts), default=0.0)


def _as_boxes(gts) -> list[BBox]:
    if isinstance(gts, BBox):
        return [gts]
    out = [g if isinstance(g, BBox) else BBox(*g) for g in gts]
    if not out:
        raise InvalidArgumentError("every image needs at least one ground-truth box")
    return out


def _map_values(m) -> np.ndarray:
    return np.asarray(getattr(m, "values", m), dtype=np.float64)


@dataclass
class EvalResult:
    thresholds: np.ndarray
    deltas: tuple
    curves: dict  # delta -> accuracy per threshold
    maxboxacc: dict  # delta -> max accuracy
    best_tau: dict  # delta -> argmax threshold
    pxap: Optional[float] = None
    best_iou: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def maxboxacc_v2(self) -> float:
        return float(np.mean([self.maxboxacc[d] for d in self.deltas]))

    def to_dict(self) -> dict:
        out = {f"maxboxacc_{int(round(d * 100)):03d}": float(self.maxboxacc[d]) for d in self.deltas}
        out["maxboxacc_v2"] = self.maxboxacc_v2
        out["pxap"] = None if self.pxap is None else float(self.pxap)
        out["best_tau_per_delta"] = {f"{d:.2f}": float(self.best_tau[d]) for d in self.deltas}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def curves_csv(self) -> str:
        head = "tau," + ",".join(f"acc_{d:.2f}" for d in self.deltas)
        lines = [head]
        for t, tau in enumerate(self.thresholds):
            lines.append(f"{tau!r}," + ",".join(repr(float(self.curves[d][t])) for d in self.deltas))
        return "\n".join(lines) + "\n"


def best_iou_table(
    maps, gts, grid: np.ndarray, connectivity: int = 8, largest_only: bool = False
) -> np.ndarray:
    """Best IoU per (image, threshold) between extracted and GT boxes."""
    out = np.zeros((len(maps), len(grid)))
    increasing = bool(np.all(np.diff(grid) > 0))
    for i, (m, g) in enumerate(zip(maps, gts)):
        h = _map_values(m)
        gt = _as_boxes(g)
        for t, tau in enumerate(grid):
            boxes = extract_boxes(h, tau, connectivity, largest_only)
            if not boxes and increasing:
                # no later (higher) threshold can yield boxes either
                break
            out[i, t] = best_iou(boxes, gt)
    return out


def max_box_acc(
    maps,
    gts,
    deltas: Sequence[float] = DEFAULT_DELTAS,
    grid: Optional[np.ndarray] = None,
    connectivity: int = 8,
    largest_only: bool = False,
) -> EvalResult:
    """GT-known box accuracy per threshold and its maximum, for each IoU level."""
    if len(maps) != len(gts):
        raise InvalidArgumentError(f"{len(maps)} maps but {len(gts)} ground-truth entries")
    if len(maps) == 0:
        raise InvalidArgumentError("no images to evaluate")
    grid = threshold_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    table = best_iou_table(maps, gts, grid, connectivity, largest_only)
    deltas = tuple(float(d) for d in deltas)
    curves, best, taus = {}, {}, {}
    for d in deltas:
        correct = (table >= d).sum(axis=0)
        curves[d] = correct / len(maps)
        k = int(np.argmax(correct))
        best[d] = float(curves[d][k])
        taus[d] = float(grid[k])
    return EvalResult(grid, deltas, curves, best, taus, best_iou=table)


def pr_counts(maps, gt_masks, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Per-threshold (#predicted, #true positive) pooled over all pixels, and #positives."""
    pred = np.zeros(len(grid), dtype=np.int64)
    tp = np.zeros(len(grid), dtype=np.int64)
    pos = 0
    for m, gm in zip(maps, gt_masks):
        h = _map_values(m)
        gm = np.asarray(gm).astype(bool)
        if gm.shape != h.shape:
            raise InvalidArgumentError(f"mask {gm.shape} and map {h.shape} differ in resolution")
        # number of thresholds each pixel clears: tau_t <= h  <=>  t < k
        k = np.searchsorted(grid, h.ravel(), side="right")
        hist_all = np.bincount(k, minlength=len(grid) + 1)
        hist_pos = np.bincount(k[gm.ravel()], minlength=len(grid) + 1)
        pred += hist_all[::-1].cumsum()[::-1][1:]
        tp += hist_pos[::-1].cumsum()[::-1][1:]
        pos += int(gm.sum())
    return pred, tp, pos


def _ap_from_counts(pred, tp, pos) -> float:
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred > 0, tp / np.maximum(pred, 1), 0.0)
    recall = tp / pos
    nxt = np.append(recall[1:], 0.0)
    return float(np.sum(precision * (recall - nxt)))


def pxap(maps, gt_masks, grid: Optional[np.ndarray] = None, per_image: bool = False) -> float:
    """Area under the pixel precision-recall curve over the threshold grid."""
    if len(maps) != len(gt_masks):
        raise InvalidArgumentError(f"{len(maps)} maps but {len(gt_masks)} masks")
    grid = threshold_grid() if grid is None else np.sort(np.asarray(grid, dtype=np.float64))
    if per_image:
        scores = []
        for m, gm in zip(maps, gt_masks):
            pred, tp, pos = pr_counts([m], [gm], grid)
            if pos == 0:
                raise InvalidArgumentError("an image has an empty ground-truth mask")
            scores.append(_ap_from_counts(pred, tp, pos))
        return float(np.mean(scores))
    pred, tp, pos = pr_counts(maps, gt_masks, grid)
    if pos == 0:
        raise InvalidArgumentError("ground-truth masks contain no positive pixels")
    return _ap_from_counts(pred, tp, pos)


def topk_correct(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    logits = np.asarray(logits)
    if k < 1 or k > logits.shape[1]:
        raise InvalidArgumentError(f"k={k} outside [1, {logits.shape[1]}]")
    # stable ordering: ties resolved toward the lower class id
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == np.asarray(labels)[:, None]).any(axis=1)


def topk_loc_from(
    maps, gts, labels, classifier_logits, k: int, tau: float, delta: float = 0.5,
    connectivity: int = 8, largest_only: bool = False,
) -> float:
    """Fraction of images with the GT class in the top-k and a box at IoU >= delta."""
    hit_cls = topk_correct(classifier_logits, labels, k)
    hits = 0
    for ok, m, g in zip(hit_cls, maps, gts):
        if ok and best_iou(extract_boxes(_map_values(m), tau, connectivity, largest_only), _as_boxes(g)) >= delta:
            hits += 1
    return hits / len(maps)


def topk_loc(loc_model, classifier_model, split, k: int = 1, grid=None, use_predicted_class: bool = False) -> float:
    """Top-k localization with a separately trained classifier.

    The box threshold is the dataset-level optimum of MaxBoxAcc at IoU 0.5
    for ``loc_model``'s GT-class maps.
    """
    from .cam import compute_maps
    from .nets import predict_logits

    if loc_model.n_classes != classifier_model.n_classes:
        raise InvalidArgumentError(
            f"class spaces differ: {loc_model.n_classes} vs {classifier_model.n_classes}"
        )
    grid = threshold_grid() if grid is None else grid
    gt_maps = compute_maps(loc_model, split.images, split.labels)
    tau = max_box_acc(gt_maps, split.boxes, deltas=(0.5,), grid=grid).best_tau[0.5]
    logits = predict_logits(classifier_model, split.images)
    maps = gt_maps
    if use_predicted_class:
        maps = compute_maps(loc_model, split.images, np.argmax(logits, axis=1))
    return topk_loc_from(maps, split.boxes, split.labels, logits, k, tau)


def bg_proportion(pred: BBox, gt_region) -> float:
    """Fraction of the predicted box's pixels outside the GT region (mask or box)."""
    if isinstance(gt_region, BBox):
        inside = 0
        iw = min(pred.x1, gt_region.x1) - max(pred.x0, gt_region.x0)
        ih = min(pred.y1, gt_region.y1) - max(pred.y0, gt_region.y0)
        if iw > 0 and ih > 0:
            inside = iw * ih
        return 1.0 - inside / pred.area
    mask = np.asarray(gt_region).astype(bool)
    window = mask[pred.y0 : pred.y1, pred.x0 : pred.x1]
    return 1.0 - window.sum() / pred.area


def feature_dispersion(features: np.ndarray, labels) -> tuple[float, float]:
    """Mean and std over classes of the population std of distances to the class centroid."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim == 1:
        features = features[:, None]
    per_class = []
    for c in np.unique(labels):
        fc = features[labels == c]
        if len(fc) < 2:
            raise InvalidArgumentError(f"class {c} has fewer than 2 samples")
        d = np.linalg.norm(fc - fc.mean(axis=0), axis=1)
        per_class.append(d.std())
    per_class = np.asarray(per_class)
    return float(per_class.mean()), float(per_class.std())


__all__ = [
    "BBox",
    "DEFAULT_DELTAS",
    "EvalResult",
    "best_iou",
    "bg_proportion",
    "extract_boxes",
    "feature_dispersion",
    "iou",
    "max_box_acc",
    "pxap",
    "threshold_grid",
    "tight_box",
    "topk_correct",
    "topk_loc",
    "topk_loc_from",
]
