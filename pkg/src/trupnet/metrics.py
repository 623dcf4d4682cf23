"""Segmentation metrics (dice, IoU, recall, precision, F2) and the FPS
harness. Metrics are computed per image from pixel confusion counts and
averaged arithmetically; eps guards make empty-vs-empty images score 1.
"""

import time
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor

METRIC_EPS = 1e-7


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def binary_counts(pred_mask, gt_mask):
    """Pixel confusion counts (TP, FP, FN, TN) for two binary masks."""
    p = _as_array(pred_mask)
    g = _as_array(gt_mask)
    if p.shape != g.shape:
        raise ShapeError(f"binary_counts: shapes {p.shape} vs {g.shape}")
    for name, arr in (("pred", p), ("gt", g)):
        if not np.all((arr == 0) | (arr == 1)):
            raise ContractError(f"binary_counts: {name} mask is not binary")
    pb = p.astype(bool)
    gb = g.astype(bool)
    tp = int(np.count_nonzero(pb & gb))
    fp = int(np.count_nonzero(pb & ~gb))
    fn = int(np.count_nonzero(~pb & gb))
    tn = int(np.count_nonzero(~pb & ~gb))
    return tp, fp, fn, tn


def metrics_from_counts(tp: int, fp: int, fn: int):
    """(dice, iou, recall, precision, f2) from confusion counts."""
    if tp < 0 or fp < 0 or fn < 0:
        raise ContractError("confusion counts must be non-negative")
    e = METRIC_EPS
    dice = (2.0 * tp + e) / (2.0 * tp + fp + fn + e)
    iou = (tp + e) / (tp + fp + fn + e)
    recall = (tp + e) / (tp + fn + e)
    precision = (tp + e) / (tp + fp + e)
    f2 = (5.0 * precision * recall + e) / (4.0 * precision + recall + e)
    return dice, iou, recall, precision, f2


@dataclass
class ImageMetrics:
    image_id: str
    dice: float
    iou: float
    recall: float
    precision: float
    f2: float


@dataclass
class AggregateMetrics:
    mdsc: float
    miou: float
    recall: float
    precision: float
    f2: float


@dataclass
class MetricReport:
    per_image: list
    aggregate: AggregateMetrics
    n_images: int

    def write_csv(self, path) -> None:
        lines = ["image,dice,iou,recall,precision,f2"]
        for m in self.per_image:
            lines.append(
                f"{m.image_id},{m.dice:.6f},{m.iou:.6f},{m.recall:.6f},{m.precision:.6f},{m.f2:.6f}"
            )
        a = self.aggregate
        lines.append(f"AGGREGATE,{a.mdsc:.6f},{a.miou:.6f},{a.recall:.6f},{a.precision:.6f},{a.f2:.6f}")
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")


def evaluate_dataset(model, samples, threshold: float | None = None) -> MetricReport:
    """Per-image metrics via predict_mask, then arithmetic-mean aggregates."""
    samples = list(samples)
    if not samples:
        raise ContractError("evaluate_dataset: dataset is empty")
    per_image = []
    for s in samples:
        x = Tensor(s.image.data[np.newaxis])
        pred = model.predict_mask(x, threshold)
        tp, fp, fn, _ = binary_counts(pred.data[0], s.mask.data)
        dice, iou, recall, precision, f2 = metrics_from_counts(tp, fp, fn)
        per_image.append(ImageMetrics(s.id, dice, iou, recall, precision, f2))
    agg = AggregateMetrics(
        mdsc=float(np.mean([m.dice for m in per_image], dtype=np.float64)),
        miou=float(np.mean([m.iou for m in per_image], dtype=np.float64)),
        recall=float(np.mean([m.recall for m in per_image], dtype=np.float64)),
        precision=float(np.mean([m.precision for m in per_image], dtype=np.float64)),
        f2=float(np.mean([m.f2 for m in per_image], dtype=np.float64)),
    )
    return MetricReport(per_image=per_image, aggregate=agg, n_images=len(per_image))


@dataclass
class FpsStats:
    n_frames: int
    total_seconds: float
    fps: float
    per_frame_ms: list

    def to_text(self) -> str:
        ms = np.asarray(self.per_frame_ms, dtype=np.float64)
        return (
            f"n_frames={self.n_frames}\n"
            f"total_seconds={self.total_seconds:.6f}\n"
            f"fps={self.fps:.4f}\n"
            f"p50_ms={np.percentile(ms, 50):.4f}\n"
            f"p95_ms={np.percentile(ms, 95):.4f}\n"
        )


def measure_fps(forward_fn, input_shape, n_warmup: int = 10, n_timed: int = 100, clock=time.perf_counter) -> FpsStats:
    """Time ``n_timed`` single-input forwards after ``n_warmup`` untimed ones.

    ``total_seconds`` is the sum of per-frame durations, so gaps between
    frames (and the warmup) never count. The clock is injectable for
    testing and must be monotonic.
    """
    if n_timed < 1:
        raise ContractError("measure_fps needs n_timed >= 1")
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(0.0, 1.0, size=input_shape).astype(np.float32))
    for _ in range(n_warmup):
        forward_fn(x)
    per_frame_ms = []
    for _ in range(n_timed):
        t0 = clock()
        forward_fn(x)
        t1 = clock()
        if t1 < t0:
            raise ContractError("measure_fps: clock went backwards")
        per_frame_ms.append((t1 - t0) * 1000.0)
    total_seconds = sum(per_frame_ms) / 1000.0
    return FpsStats(
        n_frames=n_timed,
        total_seconds=total_seconds,
        fps=n_timed / total_seconds,
        per_frame_ms=per_frame_ms,
    )
