"""Prediction decoding, confusion-matrix accumulation, and mIoU reporting.

Single-task metrics restrict the prediction to one stage's class channels;
cross-task metrics decide among the union of all classes learned so far.
For multi-head (model-based) snapshots the per-head softmax groups are
concatenated without renormalization before the argmax, which is precisely
why separately trained heads score poorly across tasks.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from multiprocessing.pool import ThreadPool

import numpy as np

from . import tensor as T
from .losses import IGNORE
from .model import Model, ModelSnapshot

METRIC_COLUMNS = ("task1", "task2", "task1u2", "task3", "task1u2u3")


class ConfusionMatrix:
    """Square count matrix over a fixed ordered class list."""

    def __init__(self, classes):
        self.classes = tuple(classes)
        self.index = {c: i for i, c in enumerate(self.classes)}
        # one spill column for predictions outside the class set, which then
        # count as false negatives of the truth class but never false positives
        n = len(self.classes)
        self.counts = np.zeros((n, n + 1), dtype=np.int64)

    def accumulate(self, truth: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        """Add counts; IGNORE and out-of-set truth pixels are skipped."""
        if truth.shape != pred.shape:
            raise ValueError("truth and prediction extents differ")
        valid = (truth != IGNORE) & np.isin(truth, self.classes)
        if not valid.any():
            return self
        n = len(self.classes)
        lookup = np.vectorize(lambda v: self.index.get(v, n), otypes=[np.int64])
        t = lookup(truth[valid])
        p = lookup(pred[valid])
        self.counts += np.bincount(t * (n + 1) + p,
                                   minlength=n * (n + 1)).reshape(n, n + 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.classes != self.classes:
            raise ValueError("confusion matrices cover different class lists")
        self.counts += other.counts
        return self

    def total(self) -> int:
        return int(self.counts.sum())


def per_class_iou(cm: ConfusionMatrix) -> dict[int, float | None]:
    """IoU per class; None where the class occurs in neither truth nor prediction."""
    n = len(cm.classes)
    tp = np.diag(cm.counts[:, :n])
    fp = cm.counts[:, :n].sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    out: dict[int, float | None] = {}
    for i, cls in enumerate(cm.classes):
        union = int(tp[i] + fp[i] + fn[i])
        out[cls] = None if union == 0 else float(tp[i]) / union
    return out


def miou(cm: ConfusionMatrix, subset=None) -> float | None:
    """Mean IoU over the subset, excluding classes absent from truth and prediction."""
    subset = cm.classes if subset is None else tuple(subset)
    if not subset:
        raise ValueError("mIoU over an empty class subset")
    ious = per_class_iou(cm)
    vals = [ious[c] for c in subset if ious[c] is not None]
    if not vals:
        return None
    return float(np.mean(vals))


def restricted_argmax(logits, class_list, class_subset) -> np.ndarray:
    """Per-pixel argmax over only the subset's channels, mapped to class ids.

    Ties break toward the lower channel index. Adding a constant to all
    logits of a pixel cannot change the result.
    """
    arr = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    subset = [c for c in class_list if c in set(class_subset)]
    if not subset:
        raise ValueError("empty class subset")
    idx = [list(class_list).index(c) for c in subset]
    winner = np.argmax(arr[idx], axis=0)
    return np.asarray(subset, dtype=np.int64)[winner]


# -- snapshot evaluation --------------------------------------------------


@dataclass
class IoUReport:
    per_class: dict[int, float | None]
    by_subset: dict[str, float | None]
    pixel_counts: dict[str, int] = field(default_factory=dict)


def _softmax_np(logits: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def predict(snap: ModelSnapshot, images: np.ndarray, class_subset) -> np.ndarray:
    """Class-id prediction maps [N,H,W] for a batch of float [N,3,H,W] inputs.

    Per head: softmax over that head's channel group, keep the channels of
    the requested classes, concatenate across heads, argmax.
    """
    model = Model.from_snapshot(snap)
    wanted = set(class_subset)
    groups: list[np.ndarray] = []
    classes: list[int] = []
    with T.no_grad():
        for head, head_cls in enumerate(snap.head_classes):
            keep = [i for i, c in enumerate(head_cls) if c in wanted]
            if not keep:
                continue
            probs = _softmax_np(model.forward(images, head=head).data, axis=1)
            groups.append(probs[:, keep])
            classes.extend(head_cls[i] for i in keep)
    if not classes:
        raise ValueError("snapshot predicts none of the requested classes")
    stacked = np.concatenate(groups, axis=1)
    return np.asarray(classes, dtype=np.int64)[np.argmax(stacked, axis=1)]


def _eval_threads() -> int:
    raw = os.environ.get("CILSEG_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def confusion_for_subset(snap: ModelSnapshot, images: list[np.ndarray],
                         labels: list[np.ndarray], class_subset,
                         batch: int = 8) -> ConfusionMatrix:
    """Confusion matrix of a snapshot over a list of uint8 images/labels."""
    from .data import to_input  # local import: data depends on this module too

    subset = tuple(class_subset)
    chunks = [(i, min(i + batch, len(images))) for i in range(0, len(images), batch)]

    def run(span):
        lo, hi = span
        x = np.stack([to_input(img) for img in images[lo:hi]])
        preds = predict(snap, x, subset)
        cm = ConfusionMatrix(subset)
        for k in range(hi - lo):
            cm.accumulate(labels[lo + k], preds[k])
        return cm

    threads = _eval_threads()
    if threads > 1 and len(chunks) > 1:
        parts = ThreadPool(threads).map(run, chunks)
    else:
        parts = [run(c) for c in chunks]
    total = ConfusionMatrix(subset)
    for part in parts:
        total.merge(part)
    return total


def metric_subsets(plan_partition, stages_done: int) -> dict[str, tuple[int, ...]]:
    """Which metric columns exist after `stages_done` stages, and their classes."""
    s1, s2, s3 = (tuple(p) for p in plan_partition)
    cols: dict[str, tuple[int, ...]] = {}
    if stages_done >= 2:
        cols["task1"] = s1
        cols["task2"] = s2
        cols["task1u2"] = s1 + s2
    if stages_done >= 3:
        cols["task3"] = s3
        cols["task1u2u3"] = s1 + s2 + s3
    return cols


def evaluate_snapshot(snap: ModelSnapshot, images: list[np.ndarray],
                      labels: list[np.ndarray], plan_partition,
                      stages_done: int, columns=None) -> IoUReport:
    """Single-task and cross-task mIoU of one snapshot on a test set."""
    available = metric_subsets(plan_partition, stages_done)
    if columns is None:
        columns = tuple(available)
    missing = [c for c in columns if c not in available]
    if missing:
        raise ValueError(f"metrics {missing} not defined after stage {stages_done}")
    by_subset: dict[str, float | None] = {}
    pixel_counts: dict[str, int] = {}
    per_class: dict[int, float | None] = {}
    for col in columns:
        cm = confusion_for_subset(snap, images, labels, available[col])
        by_subset[col] = miou(cm)
        pixel_counts[col] = cm.total()
        per_class.update(per_class_iou(cm))
    return IoUReport(per_class, by_subset, pixel_counts)


def snapshot_image_miou(snap: ModelSnapshot, image: np.ndarray,
                        labels: np.ndarray, class_subset) -> float | None:
    """Per-image mIoU of a snapshot, restricted to the given classes."""
    from .data import to_input

    subset = tuple(class_subset)
    x = to_input(image)[None]
    pred = predict(snap, x, subset)[0]
    cm = ConfusionMatrix(subset).accumulate(labels, pred)
    return miou(cm)
