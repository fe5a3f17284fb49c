"""Foreground IoU and Dice."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, truth) -> ConfusionCounts:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    for label, arr in (("prediction", pred), ("truth", truth)):
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{label} must contain only labels 0 and 1")
    p = pred.astype(bool)
    t = truth.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def iou_dice(c: ConfusionCounts) -> tuple[float, float]:
    """(IoU, Dice) of the foreground class; an image with no foreground in
    either prediction or truth scores (1.0, 1.0)."""
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0, 1.0
    return c.tp / denom, 2 * c.tp / (2 * c.tp + c.fp + c.fn)


@dataclass
class MetricsReport:
    names: list[str] = field(default_factory=list)
    counts: list[ConfusionCounts] = field(default_factory=list)

    def add(self, name: str, counts: ConfusionCounts) -> None:
        self.names.append(name)
        self.counts.append(counts)

    @property
    def per_image(self) -> list[tuple[float, float]]:
        return [iou_dice(c) for c in self.counts]

    @property
    def mean(self) -> tuple[float, float]:
        scores = np.array(self.per_image, dtype=np.float64)
        return float(scores[:, 0].mean()), float(scores[:, 1].mean())

    @property
    def pooled(self) -> tuple[float, float]:
        total = sum(self.counts, ConfusionCounts())
        return iou_dice(total)

    def to_tsv(self) -> str:
        lines = ["image\tiou\tdice"]
        for name, (iou, dice) in zip(self.names, self.per_image):
            lines.append(f"{name}\t{iou:.6f}\t{dice:.6f}")
        lines.append("MEAN\t{:.6f}\t{:.6f}".format(*self.mean))
        lines.append("POOLED\t{:.6f}\t{:.6f}".format(*self.pooled))
        return "\n".join(lines) + "\n"


def predict_labels(model, images: np.ndarray) -> np.ndarray:
    """Eval-mode argmax labels for an (n, c, h, w) batch."""
    model.set_mode("eval")
    return model.forward(images).argmax(axis=1)


def evaluate(model, samples) -> MetricsReport:
    """Score ``samples``, an iterable of ``(name, image (c,h,w), mask (h,w))``."""
    report = MetricsReport()
    for name, image, mask in samples:
        pred = predict_labels(model, image[None])[0]
        report.add(str(name), confusion(pred, mask))
    if not report.counts:
        raise ValueError("cannot evaluate an empty test set")
    return report
