"""Synthetic stage-partitioned segmentation data, augmentation, and memory.

Scenes are layered: horizontal background bands drawn from the texture
classes, overlaid with geometric foreground shapes (circles, bars,
triangles) in class-correlated colors, plus additive pixel noise. Class
pixel frequencies therefore differ wildly between background and shape
classes, which is exactly the regime where per-pixel teacher-uncertainty
weighting matters.

Each training subset Dk keeps labels only for its own stage classes Sk;
everything else becomes IGNORE. The test subset keeps labels for the full
universe, and the full label maps are also retained per training image for
the single-stage upper bound and for methods needing old-class labels.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import evaluation
from .losses import IGNORE, LabelMap
from .model import ModelSnapshot

_SUBSET_NAMES = ("d1", "d2", "d3", "test")
_MAX_RESAMPLE = 20


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple[int, int] = (64, 64)
    class_universe: tuple[int, ...] = tuple(range(9))
    background_classes: tuple[int, ...] = (0, 1, 2)
    shapes_per_image: tuple[int, int] = (5, 9)
    noise_level: float = 10.0

    def __post_init__(self):
        if not set(self.background_classes) <= set(self.class_universe):
            raise ValueError("background classes must belong to the class universe")
        if IGNORE in self.class_universe:
            raise ValueError(f"class id {IGNORE} is reserved for IGNORE")

    @property
    def shape_classes(self) -> tuple[int, ...]:
        return tuple(c for c in self.class_universe if c not in self.background_classes)


@dataclass(frozen=True)
class StagePlan:
    class_partition: tuple[tuple[int, ...], ...]  # (S1, S2, S3)
    sizes: tuple[int, int, int, int]  # |D1|, |D2|, |D3|, |test|
    seed: int = 0

    def __post_init__(self):
        seen: set[int] = set()
        for part in self.class_partition:
            if seen & set(part):
                raise ValueError("stage class subsets must be pairwise disjoint")
            seen |= set(part)
        if any(n < 1 for n in self.sizes):
            raise ValueError("every subset needs at least one image")

    @property
    def universe(self) -> tuple[int, ...]:
        out: list[int] = []
        for part in self.class_partition:
            out.extend(part)
        return tuple(out)

    def to_json(self) -> str:
        return json.dumps({
            "class_partition": [list(p) for p in self.class_partition],
            "sizes": list(self.sizes),
            "seed": self.seed,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "StagePlan":
        d = json.loads(text)
        return cls(tuple(tuple(p) for p in d["class_partition"]),
                   tuple(d["sizes"]), d["seed"])


def default_plan(seed: int = 0) -> StagePlan:
    return StagePlan(((0, 1, 2), (3, 4, 5), (6, 7, 8)), (120, 120, 120, 60), seed)


@dataclass
class Subset:
    name: str
    images: list[np.ndarray]       # uint8 [H,W,3]
    labels: list[np.ndarray]       # uint8 [H,W], stage-restricted
    full_labels: list[np.ndarray]  # uint8 [H,W], full universe

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class MemoryStore:
    indices: list[int]
    images: list[np.ndarray]
    labels: list[np.ndarray]
    scores: dict[int, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)


def _palette(universe) -> dict[int, np.ndarray]:
    colors = {}
    n = len(universe)
    for i, cls in enumerate(universe):
        hue = i / n
        val = 0.95 if i % 2 == 0 else 0.55
        rgb = colorsys.hsv_to_rgb(hue, 0.85, val)
        colors[cls] = np.array(rgb) * 255.0
    return colors


def _paint_shape(canvas, labels, kind, cls, color, rng):
    h, w = labels.shape
    size = int(rng.integers(h // 8, h // 4 + 1))
    cy = int(rng.integers(size, h - size))
    cx = int(rng.integers(size, w - size))
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:  # circle
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
    elif kind == 1:  # bar
        thick = max(4, (2 * size) // 3)
        horizontal = rng.integers(0, 2)
        if horizontal:
            mask = (np.abs(yy - cy) <= thick // 2) & (np.abs(xx - cx) <= size)
        else:
            mask = (np.abs(xx - cx) <= thick // 2) & (np.abs(yy - cy) <= size)
    else:  # triangle
        mask = (yy >= cy - size) & (yy <= cy + size) & \
               (np.abs(xx - cx) <= (yy - (cy - size)) / 2)
    canvas[mask] = color
    labels[mask] = cls


def _render_scene(spec: SceneSpec, rng: np.random.Generator,
                  favored: tuple[int, ...] = ()) -> tuple[np.ndarray, np.ndarray]:
    h, w = spec.image_size
    palette = _palette(spec.class_universe)
    canvas = np.zeros((h, w, 3))
    labels = np.zeros((h, w), dtype=np.uint8)

    bg = list(spec.background_classes)
    rng.shuffle(bg)
    cuts = np.sort(rng.integers(h // 6, h - h // 6, size=len(bg) - 1)) if len(bg) > 1 else []
    bounds = [0, *cuts, h]
    for cls, top, bottom in zip(bg, bounds[:-1], bounds[1:]):
        canvas[top:bottom] = palette[cls]
        labels[top:bottom] = cls

    shape_classes = spec.shape_classes
    favored_shapes = tuple(c for c in favored if c in shape_classes)
    n_shapes = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    for _ in range(n_shapes):
        if favored_shapes and rng.random() < 0.6:
            cls = int(rng.choice(favored_shapes))
        else:
            cls = int(rng.choice(shape_classes))
        kind = shape_classes.index(cls) % 3
        _paint_shape(canvas, labels, kind, cls, palette[cls], rng)

    noise = rng.normal(0.0, spec.noise_level, size=canvas.shape)
    image = np.clip(canvas + noise, 0, 255).astype(np.uint8)
    return image, labels


def relabel_for_stage(full_labels: LabelMap, stage_classes) -> LabelMap:
    """Keep labels of the stage's classes, turn everything else to IGNORE."""
    keep = np.isin(full_labels.values, list(stage_classes))
    values = np.where(keep, full_labels.values, IGNORE).astype(np.uint8)
    return LabelMap(values, frozenset(stage_classes))


def _restrict(values: np.ndarray, classes) -> np.ndarray:
    return np.where(np.isin(values, list(classes)), values, IGNORE).astype(np.uint8)


def generate(spec: SceneSpec, plan: StagePlan) -> dict[str, Subset]:
    """Deterministically render the four subsets of the stage protocol."""
    if set(plan.universe) - set(spec.class_universe):
        raise ValueError("plan references classes outside the scene universe")
    subsets: dict[str, Subset] = {}
    for si, name in enumerate(_SUBSET_NAMES):
        count = plan.sizes[si]
        stage_classes = plan.universe if name == "test" else plan.class_partition[si]
        for attempt in range(_MAX_RESAMPLE):
            images, labels, fulls = [], [], []
            for idx in range(count):
                ss = np.random.SeedSequence([plan.seed, si, idx, attempt])
                rng = np.random.default_rng(ss)
                favored = () if name == "test" else tuple(stage_classes)
                img, full = _render_scene(spec, rng, favored)
                images.append(img)
                fulls.append(full)
                labels.append(_restrict(full, stage_classes))
            if name == "test":
                # test set only needs every class to occur somewhere
                present = set(np.unique(np.stack(labels)))
                if set(stage_classes) <= present:
                    break
            else:
                cover = _average_coverage(labels, stage_classes)
                if all(cover[c] >= 0.05 for c in stage_classes):
                    break
        else:
            raise RuntimeError(
                f"subset {name}: could not reach 5% average coverage for "
                f"classes {stage_classes} after {_MAX_RESAMPLE} attempts")
        subsets[name] = Subset(name, images, labels, fulls)
    return subsets


def _average_coverage(labels: list[np.ndarray], classes) -> dict[int, float]:
    total = sum(lab.size for lab in labels)
    return {c: sum(int((lab == c).sum()) for lab in labels) / total for c in classes}


# -- augmentation -------------------------------------------------------------


def augment(image: np.ndarray, labels: np.ndarray, seed: int,
            crop_size: tuple[int, int] | None = None,
            flip: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Synchronized random crop and horizontal flip; labels never interpolated."""
    rng = np.random.default_rng(seed)
    h, w = labels.shape
    if crop_size is not None:
        ch, cw = crop_size
        if ch > h or cw > w:
            raise ValueError(f"crop {crop_size} larger than image {h}x{w}")
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        image = image[top:top + ch, left:left + cw]
        labels = labels[top:top + ch, left:left + cw]
    if flip and rng.random() < 0.5:
        image = image[:, ::-1]
        labels = labels[:, ::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


# -- memory selection ---------------------------------------------------------


def select_memory(d1: Subset, model_t1: ModelSnapshot, budget: int,
                  stage_classes=None) -> MemoryStore:
    """Pick the budgeted most valuable first-stage images.

    Proxy importance score: labeled-pixel fraction times (1 - the first-stage
    model's own per-image mIoU on that image), so densely labeled images the
    model still struggles with rank highest. Ties break toward lower index.
    """
    if budget > len(d1):
        raise ValueError("memory budget exceeds the first training subset")
    if stage_classes is None:
        stage_classes = model_t1.head_classes[0]
    scores: dict[int, float] = {}
    for idx in range(len(d1)):
        scores[idx] = memory_score(d1.images[idx], d1.labels[idx],
                                   model_t1, stage_classes)
    order = sorted(range(len(d1)), key=lambda i: (-scores[i], i))[:budget]
    order.sort()
    return MemoryStore(indices=order,
                       images=[d1.images[i] for i in order],
                       labels=[d1.labels[i] for i in order],
                       scores=scores)


def memory_score(image: np.ndarray, labels: np.ndarray,
                 model_t1: ModelSnapshot, stage_classes) -> float:
    frac = float((labels != IGNORE).mean())
    if frac == 0.0:
        return 0.0
    miou = evaluation.snapshot_image_miou(model_t1, image, labels, stage_classes)
    if miou is None:
        miou = 0.0
    return frac * (1.0 - miou)


# -- disk layout --------------------------------------------------------------


def to_input(image: np.ndarray) -> np.ndarray:
    """uint8 [H,W,3] image to float [3,H,W] in [0,1]."""
    return image.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_dataset(root, subsets: dict[str, Subset], plan: StagePlan) -> None:
    root = Path(root)
    for name, sub in subsets.items():
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for idx in range(len(sub)):
            Image.fromarray(sub.images[idx], mode="RGB").save(d / f"img_{idx}.png")
            Image.fromarray(sub.labels[idx], mode="L").save(d / f"lab_{idx}.png")
            if sub.full_labels:
                Image.fromarray(sub.full_labels[idx], mode="L").save(d / f"full_{idx}.png")
    (root / "plan.json").write_text(plan.to_json() + "\n")


def load_dataset(root) -> tuple[dict[str, Subset], StagePlan | None]:
    """Directory adapter: reads any dataset in the img_/lab_ PNG layout."""
    root = Path(root)
    plan = None
    plan_path = root / "plan.json"
    if plan_path.exists():
        plan = StagePlan.from_json(plan_path.read_text())
    subsets: dict[str, Subset] = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        images, labels, fulls = [], [], []
        idx = 0
        while (d / f"img_{idx}.png").exists():
            images.append(np.asarray(Image.open(d / f"img_{idx}.png").convert("RGB")))
            labels.append(np.asarray(Image.open(d / f"lab_{idx}.png").convert("L")))
            full_path = d / f"full_{idx}.png"
            if full_path.exists():
                fulls.append(np.asarray(Image.open(full_path).convert("L")))
            idx += 1
        if images:
            subsets[d.name] = Subset(d.name, images, labels, fulls)
    return subsets, plan
