"""Segmentation losses and masking rules for staged class-incremental training.

All losses operate on one image: a label map over some class universe and
probability maps shaped [C,H,W]. Pixel sets follow the stage protocol: plain
cross-entropy averages over labeled pixels only, distillation averages over
all pixels (the teacher labels everything), and masked distillation averages
over the pixels its binary mask selects.

Composites return a LossResult carrying the differentiable total, the named
terms, and diagnostic flags for degenerate inputs (empty masks, no labeled
pixels, skipped memory term). Natural log with a 1e-12 clamp everywhere;
base-2 log only inside the entropy weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

IGNORE = 255


@dataclass
class LabelMap:
    values: np.ndarray  # [H,W] int, IGNORE = 255
    class_universe: frozenset[int]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)
        self.class_universe = frozenset(self.class_universe)
        present = set(np.unique(self.values)) - {IGNORE}
        if not present <= self.class_universe:
            raise ValueError(
                f"labels {sorted(present - self.class_universe)} outside the class universe")

    @property
    def labeled(self) -> np.ndarray:
        return self.values != IGNORE

    def labeled_count(self) -> int:
        return int(self.labeled.sum())


@dataclass
class ProbMap:
    values: Tensor  # [C,H,W]
    class_list: tuple[int, ...]
    normalized: bool = True

    def __post_init__(self):
        if not isinstance(self.values, Tensor):
            self.values = Tensor(self.values)
        self.class_list = tuple(self.class_list)
        if self.values.data.ndim != 3:
            raise ValueError("ProbMap expects [C,H,W] values")
        if self.values.shape[0] != len(self.class_list):
            raise ValueError("one channel per class required")
        if self.normalized:
            sums = self.values.data.sum(axis=0)
            if np.abs(sums - 1.0).max() > 1e-9:
                raise ValueError("per-pixel probabilities do not sum to 1")

    @property
    def spatial(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def channel_of(self, cls: int) -> int:
        return self.class_list.index(cls)


@dataclass
class PixelMask:
    values: np.ndarray  # [H,W] of {0,1}

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.isin(self.values, (0.0, 1.0)).all():
            raise ValueError("mask values must be 0 or 1")


@dataclass
class WeightMap:
    values: np.ndarray  # [H,W] nonnegative

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if (self.values < 0).any():
            raise ValueError("pixel weights must be nonnegative")


@dataclass
class LossResult:
    value: Tensor
    terms: dict[str, Tensor] = field(default_factory=dict)
    flags: tuple[str, ...] = ()


def _zero() -> Tensor:
    return Tensor(0.0)


def _one_hot(labels: LabelMap, probs: ProbMap) -> np.ndarray:
    if not labels.class_universe <= set(probs.class_list):
        missing = sorted(labels.class_universe - set(probs.class_list))
        raise ValueError(f"label classes {missing} have no probability channel")
    c = len(probs.class_list)
    h, w = labels.values.shape
    onehot = np.zeros((c, h, w))
    for cls in labels.class_universe:
        onehot[probs.channel_of(cls)][labels.values == cls] = 1.0
    return onehot


# -- primitive losses --------------------------------------------------------


def cross_entropy(labels: LabelMap, probs: ProbMap) -> LossResult:
    """Mean negative log-probability of the true class over labeled pixels."""
    if labels.values.shape != probs.spatial:
        raise ValueError("label map and probability map extents differ")
    onehot = _one_hot(labels, probs)
    n = labels.labeled_count()
    if n == 0:
        return LossResult(_zero(), flags=("no-labeled-pixels",))
    picked = T.tsum(T.mul(Tensor(onehot), T.log(probs.values)))
    return LossResult(T.scale(picked, -1.0 / n))


def kd_loss(teacher: ProbMap, student: ProbMap) -> LossResult:
    """Distillation cross-entropy averaged over every pixel."""
    if teacher.class_list != student.class_list:
        raise ValueError("teacher and student class lists differ")
    if teacher.spatial != student.spatial:
        raise ValueError("teacher and student extents differ")
    h, w = teacher.spatial
    total = T.tsum(T.mul(teacher.values, T.log(student.values)))
    return LossResult(T.scale(total, -1.0 / (h * w)))


def masked_kd_loss(teacher: ProbMap, student: ProbMap,
                   mu: PixelMask, alpha: WeightMap) -> LossResult:
    """Distillation restricted to mask pixels, weighted per pixel by alpha."""
    if teacher.class_list != student.class_list:
        raise ValueError("teacher and student class lists differ")
    if not teacher.spatial == student.spatial == mu.values.shape == alpha.values.shape:
        raise ValueError("probability maps, mask, and weights must share extents")
    n_mu = int(mu.values.sum())
    if n_mu == 0:
        return LossResult(_zero(), flags=("empty-mask",))
    weight = (alpha.values * mu.values)[None, :, :]
    total = T.tsum(T.mul(T.mul(Tensor(weight), teacher.values), T.log(student.values)))
    return LossResult(T.scale(total, -1.0 / n_mu))


def entropy_weights(teacher: ProbMap) -> WeightMap:
    """Per-pixel weight 1 + H2(teacher distribution), with 0*log2(0) := 0."""
    p = teacher.values.data
    plogp = np.where(p > 0, p * np.log2(np.maximum(p, 1e-300)), 0.0)
    return WeightMap(1.0 - plogp.sum(axis=0))


# -- masks and slices ---------------------------------------------------------


def mask_old_labeled(labels: LabelMap, old_classes) -> PixelMask:
    """1 where the pixel carries an old-class label, 0 otherwise."""
    return PixelMask(np.isin(labels.values, list(old_classes)).astype(np.float64))


def mask_not_new_labeled(labels: LabelMap, new_classes) -> PixelMask:
    """0 where the pixel carries a new-class label, 1 otherwise (incl. IGNORE)."""
    return PixelMask(1.0 - np.isin(labels.values, list(new_classes)).astype(np.float64))


def slice_probs(joint: ProbMap, subset) -> ProbMap:
    """Channel slice of a joint probability map, deliberately unnormalized."""
    subset = list(subset)
    if not set(subset) <= set(joint.class_list):
        raise ValueError("subset classes missing from the joint class list")
    idx = sorted(joint.channel_of(c) for c in subset)
    if idx != list(range(idx[0], idx[0] + len(idx))):
        raise ValueError("subset channels must form one contiguous block")
    classes = tuple(joint.class_list[i] for i in idx)
    return ProbMap(T.narrow(joint.values, 0, idx[0], len(idx)), classes, normalized=False)


def _ones(shape) -> WeightMap:
    return WeightMap(np.ones(shape))


# -- method objectives --------------------------------------------------------


def loss_ss(labels_all: LabelMap, student_probs: ProbMap) -> LossResult:
    """Single-stage upper bound: plain cross-entropy over the full universe."""
    return cross_entropy(labels_all, student_probs)


def loss_ft_fe(labels_new: LabelMap, head2_probs: ProbMap) -> LossResult:
    """FE and FT share this objective; they differ only in what is trainable."""
    return cross_entropy(labels_new, head2_probs)


def loss_lwof(labels_new: LabelMap, teacher1_probs: ProbMap,
              student_probs_s1: ProbMap, student_probs_s2: ProbMap) -> LossResult:
    """Cross-entropy on the new classes plus distillation on the old group.

    Both student maps are separate softmaxes over their own channel group.
    """
    ce = cross_entropy(labels_new, student_probs_s2)
    kd = kd_loss(teacher1_probs, student_probs_s1)
    return LossResult(T.add(ce.value, kd.value),
                      terms={"ce_new": ce.value, "kd_old": kd.value},
                      flags=ce.flags + kd.flags)


def loss_lwm(labels_new: LabelMap | None, labels_memory: LabelMap | None,
             teacher1_probs: ProbMap, teacher2new_probs: ProbMap,
             student_joint_probs: ProbMap,
             student_probs_s1: ProbMap, student_probs_s2: ProbMap) -> LossResult:
    """Four-term memory objective.

    Cross-entropy over the new-class slice of the joint softmax (current-stage
    images, labels_new) and over the old-class slice (memory images,
    labels_memory), plus two distillation terms against the old-class teacher
    and the auxiliary new-class teacher on separate group softmaxes. An image
    contributes the CE terms matching the labels it arrives with; a missing
    memory term is flagged, not an error.
    """
    s1 = teacher1_probs.class_list
    s2 = teacher2new_probs.class_list
    terms: dict[str, Tensor] = {}
    flags: list[str] = []
    if labels_new is not None:
        ce_new = cross_entropy(labels_new, slice_probs(student_joint_probs, s2))
        terms["ce_new"] = ce_new.value
        flags += list(ce_new.flags)
    else:
        terms["ce_new"] = _zero()
    if labels_memory is not None:
        ce_mem = cross_entropy(labels_memory, slice_probs(student_joint_probs, s1))
        terms["ce_memory"] = ce_mem.value
        flags += list(ce_mem.flags)
    else:
        terms["ce_memory"] = _zero()
        flags.append("memory-term-skipped")
    kd_old = kd_loss(teacher1_probs, student_probs_s1)
    kd_new = kd_loss(teacher2new_probs, student_probs_s2)
    terms["kd_old"] = kd_old.value
    terms["kd_new"] = kd_new.value
    total = T.add(T.add(terms["ce_new"], terms["ce_memory"]),
                  T.add(kd_old.value, kd_new.value))
    return LossResult(total, terms=terms, flags=tuple(flags))


def loss_michieli(labels_all: LabelMap, teacher1_probs: ProbMap,
                  student_joint_probs: ProbMap, alpha: WeightMap | None = None) -> LossResult:
    """Joint cross-entropy plus distillation masked to old-labeled pixels.

    The weight mask is fixed to 1 for this method; passing one is an error.
    """
    if alpha is not None:
        raise ValueError("this objective fixes all pixel weights to 1")
    s1 = teacher1_probs.class_list
    ce = cross_entropy(labels_all, student_joint_probs)
    mu = mask_old_labeled(labels_all, s1)
    mkd = masked_kd_loss(teacher1_probs, slice_probs(student_joint_probs, s1),
                         mu, _ones(mu.values.shape))
    return LossResult(T.add(ce.value, mkd.value),
                      terms={"ce_all": ce.value, "mkd_old": mkd.value},
                      flags=ce.flags + mkd.flags)


def loss_cil(labels_new: LabelMap, teacher1_probs: ProbMap,
             student_joint_probs: ProbMap, use_entropy_weights: bool) -> LossResult:
    """New-class cross-entropy plus distillation on all not-new-labeled pixels.

    Needs no old labels at all: the old-class slice of the joint softmax is
    matched to the teacher wherever no new-class label exists. The optional
    entropy weights emphasize pixels where the teacher is uncertain and apply
    only inside the masked distillation term.
    """
    s1 = teacher1_probs.class_list
    s2 = tuple(c for c in student_joint_probs.class_list if c not in s1)
    if labels_new.class_universe & set(s1):
        raise ValueError("labels for old classes are not allowed in this objective")
    ce = cross_entropy(labels_new, slice_probs(student_joint_probs, s2))
    mu_bar = mask_not_new_labeled(labels_new, s2)
    alpha = entropy_weights(teacher1_probs) if use_entropy_weights \
        else _ones(mu_bar.values.shape)
    mkd = masked_kd_loss(teacher1_probs, slice_probs(student_joint_probs, s1),
                         mu_bar, alpha)
    return LossResult(T.add(ce.value, mkd.value),
                      terms={"ce_new": ce.value, "mkd_old": mkd.value},
                      flags=ce.flags + mkd.flags)
