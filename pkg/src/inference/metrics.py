"""
Confusion-matrix segmentation metrics and their reports
"""
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional

import numpy as np

from src.errors import DimensionError, UndefinedMetricError
from src.models.schemas import IGNORE

logger = logging.getLogger(__name__)


@dataclass
class SegMetrics:
    confusion: np.ndarray  # rows: truth, cols: prediction
    per_class_iou: np.ndarray  # nan where the union is empty
    miou: float

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    @property
    def pixels(self) -> int:
        return int(self.confusion.sum())

    @classmethod
    def from_confusion(cls, confusion: np.ndarray) -> "SegMetrics":
        confusion = np.asarray(confusion, dtype=np.int64)
        tp = np.diag(confusion).astype(np.float64)
        fp = confusion.sum(axis=0) - tp
        fn = confusion.sum(axis=1) - tp
        union = tp + fp + fn
        iou = np.full(len(tp), np.nan)
        np.divide(tp, union, out=iou, where=union > 0)
        if not (union > 0).any():
            raise UndefinedMetricError("mIoU undefined: no valid pixels in any class")
        return cls(confusion=confusion, per_class_iou=iou, miou=float(np.nanmean(iou)))


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    valid = truth != IGNORE
    t = truth[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if t.size and (t.max() >= num_classes or p.max() >= num_classes or p.min() < 0):
        raise DimensionError(f"labels outside 0..{num_classes - 1}")
    counts = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def compute_miou(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> SegMetrics:
    return SegMetrics.from_confusion(confusion_matrix(pred, truth, num_classes))


def accumulate_metrics(parts: Iterable[SegMetrics]) -> SegMetrics:
    """metrics of the union of all pixels, not a mean of per-scene mIoUs"""
    total: Optional[np.ndarray] = None
    for part in parts:
        total = part.confusion.copy() if total is None else total + part.confusion
    if total is None:
        raise UndefinedMetricError("no metrics to accumulate")
    return SegMetrics.from_confusion(total)


def relative_improvement(iou_relay: float, iou_sw: float) -> float:
    """share of the sliding-window IoU error removed: (relay - sw) / (1 - sw)"""
    if iou_sw >= 1.0:
        raise UndefinedMetricError(f"relative improvement undefined for baseline IoU {iou_sw}")
    return (iou_relay - iou_sw) / (1.0 - iou_sw)


def per_class_relative_improvement(relay: SegMetrics, sw: SegMetrics) -> Dict[int, float]:
    out = {}
    for k, (a, b) in enumerate(zip(relay.per_class_iou, sw.per_class_iou)):
        if math.isnan(a) or math.isnan(b) or b >= 1.0:
            continue
        out[k] = relative_improvement(float(a), float(b))
    return out


def write_report(metrics: SegMetrics, out_dir: Path, extra: Optional[Dict[str, str]] = None) -> Path:
    """report.txt (key=value) plus per_class.csv"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = dict(extra or {})
    lines["miou"] = f"{metrics.miou:.6f}"
    lines["pixels"] = str(metrics.pixels)
    lines["num_classes"] = str(metrics.num_classes)
    for k, iou in enumerate(metrics.per_class_iou):
        lines[f"class.{k}.iou"] = "nan" if math.isnan(iou) else f"{iou:.6f}"
    report = out_dir / "report.txt"
    report.write_text("".join(f"{key}={value}\n" for key, value in lines.items()))

    conf = metrics.confusion
    tp = np.diag(conf)
    with open(out_dir / "per_class.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "iou", "tp", "fp", "fn"])
        for k in range(metrics.num_classes):
            iou = metrics.per_class_iou[k]
            writer.writerow([
                k, "nan" if math.isnan(iou) else f"{iou:.6f}",
                int(tp[k]), int(conf[:, k].sum() - tp[k]), int(conf[k, :].sum() - tp[k]),
            ])
    logger.info(f"Wrote metrics report to {report}")
    return report
