"""Optimizer, learning-rate schedule, and the staged incremental protocol.

A stage trains exactly the method's trainable parameter set; teachers are
snapshots evaluated under no_grad and never modified. Batch losses are the
arithmetic mean of per-image losses, each image normalized by its own pixel
sets. The learning rate follows a polynomial decay stepped per optimizer
step. Everything is seeded; identical (plan, configs, seeds) reproduce
byte-identical snapshots.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import tensor as T
from .data import MemoryStore, StagePlan, Subset, augment, select_memory, to_input
from .model import (Model, ModelSnapshot, NetConfig, build,
                    extend_for_model_based_stage, extend_for_teacher_stage,
                    trainable_set)

METHODS = ("ss", "ft", "fe", "lwof", "lwm", "michieli", "cil", "cil-now")
TEACHER_BASED = ("lwof", "lwm", "michieli", "cil", "cil-now")
MODEL_BASED = ("ft", "fe")


def poly_lr(lr0: float, t: int, total: int, power: float = 0.9) -> float:
    """Polynomially decayed learning rate: lr0 * (1 - t/total)^power."""
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr0 * (1.0 - t / total) ** power


class Adam:
    """Adam with classic L2 weight decay folded into the gradient."""

    def __init__(self, params: dict[str, T.Tensor], trainable: frozenset[str],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 3e-4):
        self.params = {n: p for n, p in params.items() if n in trainable}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / c1
            vhat = self.v[name] / c2
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass(frozen=True)
class StageConfig:
    method: str
    epochs: int = 30
    batch_size: int = 6
    lr0: float = 5e-4
    power: float = 0.9
    seed: int = 0
    weight_decay: float = 3e-4
    entropy_weights: bool = True
    memory_budget: int = 20
    crop_size: tuple[int, int] | None = None
    flip: bool = True

    def __post_init__(self):
        if self.method not in METHODS and self.method != "supervised":
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TrainReport:
    method: str
    stage_tag: str
    seed: int
    epoch_losses: list[float] = field(default_factory=list)
    epoch_lrs: list[float] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps({
            "method": self.method, "stage_tag": self.stage_tag, "seed": self.seed,
            "epoch_losses": self.epoch_losses, "epoch_lrs": self.epoch_lrs,
            "flags": self.flags, "wall_time": self.wall_time,
        }, indent=2)


@dataclass
class TrainItem:
    image: np.ndarray          # uint8 [H,W,3]
    labels: np.ndarray         # uint8 [H,W]
    classes: tuple[int, ...]   # label universe of this item
    origin: str = "new"        # "new" | "memory"


def _teacher_probs(snap: ModelSnapshot, x: np.ndarray) -> np.ndarray:
    model = Model.from_snapshot(snap)
    with T.no_grad():
        logits = model.forward(x).data
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _image_probmap(batched: T.Tensor, i: int, classes, normalized=True) -> L.ProbMap:
    one = T.narrow(batched, 0, i, 1)
    chw = T.reshape(one, one.shape[1:])
    return L.ProbMap(chw, tuple(classes), normalized=normalized)


def _batch_loss(method: str, model: Model, head: int, x: T.Tensor,
                items: list[TrainItem], teachers: list[ModelSnapshot],
                entropy_flag: bool) -> L.LossResult:
    n = len(items)
    logits = model.forward(x, head=head)
    classes = tuple(model.head_classes[head])
    flags: list[str] = []

    if method in ("supervised", "ss", "ft", "fe"):
        probs = T.softmax_channels(logits)
        per_image = []
        for i, item in enumerate(items):
            pm = _image_probmap(probs, i, classes)
            res = L.cross_entropy(L.LabelMap(item.labels, frozenset(item.classes)), pm)
            per_image.append(res.value)
            flags += list(res.flags)
        total = per_image[0]
        for v in per_image[1:]:
            total = T.add(total, v)
        return L.LossResult(T.scale(total, 1.0 / n), flags=tuple(flags))

    old_classes = tuple(teachers[0].class_list)
    n_old = len(old_classes)
    new_classes = classes[n_old:]
    t1 = _teacher_probs(teachers[0], x.data)

    per_image = []
    if method == "lwof":
        s1 = T.softmax(T.narrow(logits, 1, 0, n_old), axis=1)
        s2 = T.softmax(T.narrow(logits, 1, n_old, len(new_classes)), axis=1)
        for i, item in enumerate(items):
            res = L.loss_lwof(
                L.LabelMap(item.labels, frozenset(item.classes)),
                L.ProbMap(t1[i], old_classes),
                _image_probmap(s1, i, old_classes),
                _image_probmap(s2, i, new_classes))
            per_image.append(res.value)
            flags += list(res.flags)
    elif method == "lwm":
        t2new = _teacher_probs(teachers[1], x.data)
        joint = T.softmax_channels(logits)
        s1 = T.softmax(T.narrow(logits, 1, 0, n_old), axis=1)
        s2 = T.softmax(T.narrow(logits, 1, n_old, len(new_classes)), axis=1)
        for i, item in enumerate(items):
            lab = L.LabelMap(item.labels, frozenset(item.classes))
            res = L.loss_lwm(
                lab if item.origin == "new" else None,
                lab if item.origin == "memory" else None,
                L.ProbMap(t1[i], old_classes),
                L.ProbMap(t2new[i], new_classes),
                _image_probmap(joint, i, classes),
                _image_probmap(s1, i, old_classes),
                _image_probmap(s2, i, new_classes))
            per_image.append(res.value)
            flags += list(res.flags)
    elif method == "michieli":
        joint = T.softmax_channels(logits)
        for i, item in enumerate(items):
            res = L.loss_michieli(
                L.LabelMap(item.labels, frozenset(item.classes)),
                L.ProbMap(t1[i], old_classes),
                _image_probmap(joint, i, classes))
            per_image.append(res.value)
            flags += list(res.flags)
    elif method in ("cil", "cil-now"):
        joint = T.softmax_channels(logits)
        use_weights = entropy_flag and method == "cil"
        for i, item in enumerate(items):
            res = L.loss_cil(
                L.LabelMap(item.labels, frozenset(item.classes)),
                L.ProbMap(t1[i], old_classes),
                _image_probmap(joint, i, classes),
                use_entropy_weights=use_weights)
            per_image.append(res.value)
            flags += list(res.flags)
    else:
        raise ValueError(f"unknown method {method!r}")

    total = per_image[0]
    for v in per_image[1:]:
        total = T.add(total, v)
    return L.LossResult(T.scale(total, 1.0 / n), flags=tuple(flags))


def train_stage(model: Model, teachers: list[ModelSnapshot],
                items: list[TrainItem], config: StageConfig,
                head: int | None = None, stage_tag: str = "") -> tuple[ModelSnapshot, TrainReport]:
    """Run one training stage and return the resulting frozen snapshot."""
    start = time.monotonic()
    method = config.method
    _check_teacher_arity(method, teachers)
    if head is None:
        head = len(model.head_classes) - 1 if method in MODEL_BASED else 0
    partition = model.partition()
    trainable = trainable_set(method, partition)
    # freeze everything else so backward skips the frozen subgraph entirely
    for name, p in model.params.items():
        p.requires_grad = name in trainable
    adam = Adam(model.params, trainable, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)

    n = len(items)
    batches_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * batches_per_epoch
    report = TrainReport(method=method, stage_tag=stage_tag, seed=config.seed)
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_lr = 0.0
        for b in range(batches_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            batch = []
            for i in idx:
                it = items[i]
                img, lab = augment(it.image, it.labels, int(rng.integers(2 ** 63)),
                                   crop_size=config.crop_size, flip=config.flip)
                batch.append(TrainItem(img, lab, it.classes, it.origin))
            x = T.Tensor(np.stack([to_input(it.image) for it in batch]))
            res = _batch_loss(method, model, head, x, batch, teachers,
                              config.entropy_weights)
            loss = float(res.value.data)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            for name in trainable:
                model.params[name].zero_grad()
            res.value.backward()
            lr = poly_lr(config.lr0, step, total_steps, config.power)
            adam.step(lr)
            for flag in res.flags:
                if flag not in report.flags:
                    report.flags.append(flag)
            epoch_loss += loss
            epoch_lr += lr
            step += 1
        report.epoch_losses.append(epoch_loss / batches_per_epoch)
        report.epoch_lrs.append(epoch_lr / batches_per_epoch)
    for p in model.params.values():
        p.requires_grad = True
    report.wall_time = time.monotonic() - start
    return model.snapshot(stage_tag), report


def _check_teacher_arity(method: str, teachers) -> None:
    need = {"lwm": 2}.get(method, 1 if method in TEACHER_BASED else 0)
    if len(teachers) != need:
        raise ValueError(f"method {method!r} needs {need} teacher(s), got {len(teachers)}")


# -- multi-stage protocol -------------------------------------------------


def _items_from_subset(sub: Subset, classes, use_full: bool = False,
                       restrict_to=None) -> list[TrainItem]:
    items = []
    for i in range(len(sub)):
        lab = sub.full_labels[i] if use_full else sub.labels[i]
        if restrict_to is not None:
            lab = np.where(np.isin(lab, list(restrict_to)), lab, L.IGNORE).astype(np.uint8)
        items.append(TrainItem(sub.images[i], lab, tuple(classes)))
    return items


def _memory_items(store: MemoryStore, classes) -> list[TrainItem]:
    return [TrainItem(img, lab, tuple(classes), origin="memory")
            for img, lab in zip(store.images, store.labels)]


def run_protocol(method: str, subsets: dict[str, Subset], plan: StagePlan,
                 stage_configs: list[StageConfig],
                 net: NetConfig | None = None,
                 ) -> tuple[list[ModelSnapshot], list[TrainReport]]:
    """T1 -> T2 -> T3 for one method (or the single-stage upper bound)."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    parts = [tuple(p) for p in plan.class_partition]
    base = net or NetConfig(class_count=len(parts[0]))

    if method == "ss":
        cfg = stage_configs[0]
        universe = plan.universe
        items = []
        for name in ("d1", "d2", "d3"):
            items += _items_from_subset(subsets[name], universe, use_full=True)
        model = build(NetConfig(class_count=len(universe),
                                input_channels=base.input_channels,
                                base_width=base.base_width, depth=base.depth),
                      cfg.seed, head_classes=[list(universe)])
        snap, rep = train_stage(model, [], items, cfg, stage_tag="ss")
        return [snap], [rep]

    snapshots: list[ModelSnapshot] = []
    reports: list[TrainReport] = []

    # stage T1: plain supervision on D1/S1, identical for every method
    cfg1 = stage_configs[0]
    sup1 = StageConfig(method="supervised", epochs=cfg1.epochs,
                       batch_size=cfg1.batch_size, lr0=cfg1.lr0, power=cfg1.power,
                       seed=cfg1.seed, weight_decay=cfg1.weight_decay,
                       crop_size=cfg1.crop_size, flip=cfg1.flip)
    model = build(NetConfig(class_count=len(parts[0]),
                            input_channels=base.input_channels,
                            base_width=base.base_width, depth=base.depth),
                  cfg1.seed, head_classes=[list(parts[0])])
    snap, rep = train_stage(model, [], _items_from_subset(subsets["d1"], parts[0]),
                            sup1, stage_tag="t1")
    snapshots.append(snap)
    reports.append(rep)

    for k in (1, 2):
        if k >= len(stage_configs):
            break
        cfg = stage_configs[k]
        new_classes = list(parts[k])
        sub = subsets[f"d{k + 1}"]
        prev = snapshots[-1]
        tag = f"t{k + 1}"
        if method in MODEL_BASED:
            model = extend_for_model_based_stage(prev, new_classes, cfg.seed)
            items = _items_from_subset(sub, new_classes)
            snap, rep = train_stage(model, [], items, cfg, stage_tag=tag)
        else:
            model = extend_for_teacher_stage(prev, new_classes, cfg.seed)
            teachers = [prev]
            if method == "lwm":
                aux_cfg = StageConfig(method="supervised", epochs=cfg.epochs,
                                      batch_size=cfg.batch_size, lr0=cfg.lr0,
                                      power=cfg.power, seed=cfg.seed + 1,
                                      weight_decay=cfg.weight_decay,
                                      crop_size=cfg.crop_size, flip=cfg.flip)
                aux_model = build(NetConfig(class_count=len(new_classes),
                                            input_channels=base.input_channels,
                                            base_width=base.base_width,
                                            depth=base.depth),
                                  aux_cfg.seed, head_classes=[new_classes])
                aux_snap, aux_rep = train_stage(
                    aux_model, [], _items_from_subset(sub, new_classes),
                    aux_cfg, stage_tag=f"{tag}-aux")
                reports.append(aux_rep)
                teachers.append(aux_snap)
                store = select_memory(subsets["d1"], snapshots[0],
                                      min(cfg.memory_budget, len(subsets["d1"])))
                items = (_items_from_subset(sub, new_classes)
                         + _memory_items(store, parts[0]))
            elif method == "michieli":
                union = [c for p in parts[:k + 1] for c in p]
                items = _items_from_subset(sub, union, use_full=True,
                                           restrict_to=union)
            else:  # lwof, cil, cil-now
                items = _items_from_subset(sub, new_classes)
            snap, rep = train_stage(model, teachers, items, cfg, stage_tag=tag)
        snapshots.append(snap)
        reports.append(rep)
    return snapshots, reports
