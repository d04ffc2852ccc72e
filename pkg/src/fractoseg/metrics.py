"""Confusion counting, IoU, F-beta and pixel accuracy.

Undefined ratios (0/0) are returned as None rather than 0, and serialized as
JSON null.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .optim import BACKGROUND, CLASS_NAMES, INTERGRANULAR, VOID

NUM_CLASSES = len(CLASS_NAMES)


@dataclass
class ConfusionCounts:
    """Rows are ground-truth classes, columns are predicted classes."""

    matrix: np.ndarray = field(default_factory=lambda: np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def tp(self, c: int) -> int:
        return int(self.matrix[c, c])

    def fp(self, c: int) -> int:
        return int(self.matrix[:, c].sum() - self.matrix[c, c])

    def fn(self, c: int) -> int:
        return int(self.matrix[c, :].sum() - self.matrix[c, c])

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.matrix + other.matrix)

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        self.matrix += other.matrix
        return self


def accumulate(gt: np.ndarray, pred: np.ndarray, evaluable: np.ndarray | None = None,
               exclude_void: bool = False, num_classes: int = NUM_CLASSES) -> ConfusionCounts:
    """Count (gt, pred) pixel pairs.

    A pixel counts iff it is evaluable and, when `exclude_void` is set, its
    ground truth is neither unlabeled (255) nor background (0). Without
    exclusion, unlabeled ground truth is counted as background.
    """
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"ground truth {gt.shape} and prediction {pred.shape} differ in shape")
    keep = np.ones(gt.shape, dtype=bool) if evaluable is None else np.asarray(evaluable, dtype=bool)
    if keep.shape != gt.shape:
        raise ValueError(f"evaluable mask {keep.shape} does not match {gt.shape}")
    if exclude_void:
        keep = keep & (gt != VOID) & (gt != BACKGROUND)
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    g[g == VOID] = BACKGROUND
    if g.size and (g.max() >= num_classes or g.min() < 0):
        raise ValueError(f"ground-truth ids outside 0..{num_classes - 1} (or 255)")
    if p.size and (p.max() >= num_classes or p.min() < 0):
        raise ValueError(f"predicted ids outside 0..{num_classes - 1}")
    flat = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionCounts(flat.reshape(num_classes, num_classes))


def iou(counts: ConfusionCounts, c: int) -> float | None:
    tp, fp, fn = counts.tp(c), counts.fp(c), counts.fn(c)
    denom = tp + fp + fn
    return None if denom == 0 else tp / denom


def present_classes(counts: ConfusionCounts) -> list[int]:
    return [c for c in range(counts.num_classes) if counts.matrix[c].sum() > 0]


def mean_iou(counts: ConfusionCounts) -> float | None:
    """Unweighted mean of IoU over classes present in the ground truth."""
    vals = [iou(counts, c) for c in present_classes(counts)]
    return None if not vals else float(np.mean(vals))


def f_beta(tp: int, fp: int, fn: int, beta: float = 1.0) -> float | None:
    b2 = beta * beta
    denom = (1 + b2) * tp + b2 * fn + fp
    return None if denom == 0 else (1 + b2) * tp / denom


def f_measure(counts: ConfusionCounts, positive_class: int = INTERGRANULAR, beta: float = 1.0) -> float | None:
    """F-beta with `positive_class` against every other predicted/true class."""
    c = positive_class
    return f_beta(counts.tp(c), counts.fp(c), counts.fn(c), beta)


def accuracy(counts: ConfusionCounts) -> float | None:
    total = counts.total
    return None if total == 0 else float(np.trace(counts.matrix)) / total


# ---------------------------------------------------------------- reports


@dataclass
class VariantReport:
    per_class_iou: dict[str, float | None]
    mean_iou: float | None
    f_beta: float | None
    accuracy: float | None
    evaluated_pixels: int
    exclude_void: bool
    confusion: list[list[int]]
    per_image_mean_iou: float | None = None

    @classmethod
    def from_counts(cls, counts: ConfusionCounts, exclude_void: bool, positive_class: int, beta: float,
                    per_image: list[ConfusionCounts] | None = None) -> "VariantReport":
        per_img = None
        if per_image:
            vals = [m for m in (mean_iou(c) for c in per_image) if m is not None]
            per_img = float(np.mean(vals)) if vals else None
        return cls(
            per_class_iou={CLASS_NAMES[c]: iou(counts, c) for c in range(counts.num_classes)},
            mean_iou=mean_iou(counts),
            f_beta=f_measure(counts, positive_class, beta),
            accuracy=accuracy(counts),
            evaluated_pixels=counts.total,
            exclude_void=exclude_void,
            confusion=counts.matrix.tolist(),
            per_image_mean_iou=per_img,
        )


@dataclass
class EvalReport:
    with_void: VariantReport
    void_excluded: VariantReport
    beta: float = 1.0
    positive_class: str = CLASS_NAMES[INTERGRANULAR]
    brightness_threshold: int | None = None
    image_count: int = 0
    area_fractions: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        def fmt(v):
            return "undefined" if v is None else f"{v:.4f}"

        lines = [
            f"images: {self.image_count}   brightness threshold: {self.brightness_threshold}   "
            f"F-beta: beta={self.beta:g}, positive={self.positive_class}",
            f"{'metric':<26}{'with void':>14}{'void excluded':>16}",
        ]
        rows = [(f"IoU {name}", self.with_void.per_class_iou[name], self.void_excluded.per_class_iou[name])
                for name in CLASS_NAMES]
        rows += [
            ("mean IoU (pooled)", self.with_void.mean_iou, self.void_excluded.mean_iou),
            ("mean IoU (per image)", self.with_void.per_image_mean_iou, self.void_excluded.per_image_mean_iou),
            ("F-beta", self.with_void.f_beta, self.void_excluded.f_beta),
            ("pixel accuracy", self.with_void.accuracy, self.void_excluded.accuracy),
        ]
        for label, a, b in rows:
            lines.append(f"{label:<26}{fmt(a):>14}{fmt(b):>16}")
        lines.append(f"{'evaluated pixels':<26}{self.with_void.evaluated_pixels:>14}"
                     f"{self.void_excluded.evaluated_pixels:>16}")
        return "\n".join(lines)


def evaluate_pair_set(pairs, brightness_threshold: int | None = None, positive_class: int = INTERGRANULAR,
                      beta: float = 1.0) -> EvalReport:
    """Pool confusion counts over (gt, pred[, image]) pairs, then compute ratios.

    When `brightness_threshold` is set, each pair must carry its 8-bit image and
    pixels brighter than the threshold are dropped.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate_pair_set needs at least one pair")
    totals = {False: ConfusionCounts(), True: ConfusionCounts()}
    per_image: dict[bool, list[ConfusionCounts]] = {False: [], True: []}
    for pair in pairs:
        gt, pred = pair[0], pair[1]
        evaluable = None
        if brightness_threshold is not None:
            image = pair[2] if len(pair) > 2 else None
            if image is None:
                raise ValueError("brightness masking needs the image for every pair")
            evaluable = np.asarray(image) <= brightness_threshold
        for ex in (False, True):
            c = accumulate(gt, pred, evaluable, exclude_void=ex)
            totals[ex].merge(c)
            per_image[ex].append(c)
    return EvalReport(
        with_void=VariantReport.from_counts(totals[False], False, positive_class, beta, per_image[False]),
        void_excluded=VariantReport.from_counts(totals[True], True, positive_class, beta, per_image[True]),
        beta=beta,
        positive_class=CLASS_NAMES[positive_class],
        brightness_threshold=brightness_threshold,
        image_count=len(pairs),
    )

