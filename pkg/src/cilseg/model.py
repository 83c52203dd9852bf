"""Small encoder-decoder segmentation network with per-stage head management.

The encoder halves the spatial resolution once per stage (two 3x3 convs, the
second with stride 2); each decoder head mirrors it with nearest-neighbor x2
upsampling followed by a 3x3 conv, closed by a 1x1 projection onto that
head's class channels. Teacher-style extension rebuilds the whole network
with a wider single head; model-based extension keeps the trained weights
and bolts on a freshly initialized extra decoder head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .serialize import load_arrays, save_arrays


@dataclass(frozen=True)
class NetConfig:
    class_count: int
    input_channels: int = 3
    base_width: int = 16
    depth: int = 3
    extra_decoder_heads: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2 ** d for d in range(self.depth)]


@dataclass
class ParamPartition:
    encoder: frozenset[str]
    decoders: list[frozenset[str]]

    def all_names(self) -> frozenset[str]:
        names = set(self.encoder)
        for d in self.decoders:
            names |= d
        return frozenset(names)


@dataclass
class ModelSnapshot:
    """Frozen parameters plus the class list each head's channels stand for."""

    parameters: dict[str, np.ndarray]
    head_classes: list[list[int]]
    config: NetConfig
    stage_tag: str = ""

    @property
    def class_list(self) -> list[int]:
        out: list[int] = []
        for h in self.head_classes:
            out.extend(h)
        return out

    def save(self, path) -> None:
        path = Path(path)
        save_arrays(path, self.parameters)
        lines = [
            f"stage_tag: {self.stage_tag}",
            f"input_channels: {self.config.input_channels}",
            f"base_width: {self.config.base_width}",
            f"depth: {self.config.depth}",
            f"heads: {len(self.head_classes)}",
        ]
        for k, classes in enumerate(self.head_classes):
            lines.append(f"head{k}_classes: {','.join(str(c) for c in classes)}")
        path.with_suffix(path.suffix + ".meta").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ModelSnapshot":
        path = Path(path)
        params = load_arrays(path)
        meta: dict[str, str] = {}
        for line in path.with_suffix(path.suffix + ".meta").read_text().splitlines():
            if line.strip():
                key, _, val = line.partition(":")
                meta[key.strip()] = val.strip()
        heads = int(meta["heads"])
        head_classes = []
        for k in range(heads):
            raw = meta[f"head{k}_classes"]
            head_classes.append([int(c) for c in raw.split(",")] if raw else [])
        config = NetConfig(
            class_count=len(head_classes[0]),
            input_channels=int(meta["input_channels"]),
            base_width=int(meta["base_width"]),
            depth=int(meta["depth"]),
            extra_decoder_heads=heads - 1,
        )
        return cls(params, head_classes, config, meta.get("stage_tag", ""))


def _conv_param_shapes(config: NetConfig) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    cin = config.input_channels
    for d, w in enumerate(config.widths):
        shapes[f"enc{d}.conv1.w"] = (w, cin, 3, 3)
        shapes[f"enc{d}.conv1.b"] = (w,)
        shapes[f"enc{d}.conv2.w"] = (w, w, 3, 3)
        shapes[f"enc{d}.conv2.b"] = (w,)
        cin = w
    return shapes


def _decoder_param_shapes(config: NetConfig, head: int, class_count: int) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    widths = config.widths
    cin = widths[-1]
    for d in range(config.depth):
        cout = widths[config.depth - 2 - d] if d < config.depth - 1 else config.base_width
        shapes[f"dec{head}.up{d}.w"] = (cout, cin, 3, 3)
        shapes[f"dec{head}.up{d}.b"] = (cout,)
        cin = cout
    shapes[f"dec{head}.final.w"] = (class_count, cin, 1, 1)
    shapes[f"dec{head}.final.b"] = (class_count,)
    return shapes


def _he_init(rng: np.random.Generator, shapes: dict[str, tuple]) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params


class Model:
    def __init__(self, config: NetConfig, head_classes: list[list[int]],
                 parameters: dict[str, np.ndarray]):
        if len(head_classes) != config.extra_decoder_heads + 1:
            raise ValueError("one class list per decoder head required")
        self.config = config
        self.head_classes = [list(h) for h in head_classes]
        self.params = {name: T.Tensor(arr.copy(), requires_grad=True)
                       for name, arr in parameters.items()}

    # -- construction --------------------------------------------------

    @classmethod
    def from_snapshot(cls, snap: ModelSnapshot) -> "Model":
        return cls(snap.config, snap.head_classes, snap.parameters)

    def snapshot(self, stage_tag: str = "") -> ModelSnapshot:
        return ModelSnapshot(
            parameters={n: p.data.copy() for n, p in self.params.items()},
            head_classes=[list(h) for h in self.head_classes],
            config=self.config,
            stage_tag=stage_tag,
        )

    # -- structure -------------------------------------------------------

    def partition(self) -> ParamPartition:
        enc = frozenset(n for n in self.params if n.startswith("enc"))
        decs = []
        for k in range(len(self.head_classes)):
            decs.append(frozenset(n for n in self.params if n.startswith(f"dec{k}.")))
        return ParamPartition(enc, decs)

    # -- forward --------------------------------------------------------

    def forward(self, images, head: int = 0) -> T.Tensor:
        x = images if isinstance(images, T.Tensor) else T.Tensor(images)
        n, c, h, w = x.shape
        step = 2 ** self.config.depth
        if h % step or w % step:
            raise ValueError(f"image extents {h}x{w} not divisible by {step}")
        if c != self.config.input_channels:
            raise ValueError(f"expected {self.config.input_channels} input channels, got {c}")
        for d in range(self.config.depth):
            # downsample first so both convs of the scale run at the low resolution
            x = T.relu(T.conv2d(x, self.params[f"enc{d}.conv1.w"],
                                self.params[f"enc{d}.conv1.b"], stride=2, padding=1))
            x = T.relu(T.conv2d(x, self.params[f"enc{d}.conv2.w"],
                                self.params[f"enc{d}.conv2.b"], stride=1, padding=1))
        for d in range(self.config.depth):
            x = T.relu(T.conv2d(x, self.params[f"dec{head}.up{d}.w"],
                                self.params[f"dec{head}.up{d}.b"], stride=1, padding=1))
            x = T.upsample_nearest(x, 2)
        return T.conv2d(x, self.params[f"dec{head}.final.w"],
                        self.params[f"dec{head}.final.b"], stride=1, padding=0)


def build(config: NetConfig, seed: int, head_classes: list[list[int]] | None = None) -> Model:
    """Fresh model, deterministically He-initialized from the seed."""
    if head_classes is None:
        head_classes = [list(range(config.class_count))]
        head_classes += [[] for _ in range(config.extra_decoder_heads)]
    rng = np.random.default_rng(seed)
    shapes = _conv_param_shapes(config)
    for k, classes in enumerate(head_classes):
        count = len(classes) if classes else config.class_count
        shapes.update(_decoder_param_shapes(config, k, count))
    return Model(config, head_classes, _he_init(rng, shapes))


def extend_for_teacher_stage(prev: ModelSnapshot, new_classes: list[int], seed: int) -> Model:
    """Wider single-head model for the next teacher-based stage.

    All weights are re-randomized; only the output layout carries over: the
    old classes keep their channel positions, the new ones are appended.
    """
    if not new_classes:
        raise ValueError("new_classes must be non-empty")
    old = prev.class_list
    if set(new_classes) & set(old):
        raise ValueError("new classes overlap the classes already learned")
    classes = old + list(new_classes)
    config = NetConfig(
        class_count=len(classes),
        input_channels=prev.config.input_channels,
        base_width=prev.config.base_width,
        depth=prev.config.depth,
    )
    return build(config, seed, head_classes=[classes])


def extend_for_model_based_stage(prev: ModelSnapshot, new_classes: list[int], seed: int) -> Model:
    """Copy encoder and existing heads bit-exact, add one fresh decoder head."""
    if not new_classes:
        raise ValueError("new_classes must be non-empty")
    if set(new_classes) & set(prev.class_list):
        raise ValueError("new classes overlap the classes already learned")
    n_prev_heads = len(prev.head_classes)
    config = NetConfig(
        class_count=prev.config.class_count,
        input_channels=prev.config.input_channels,
        base_width=prev.config.base_width,
        depth=prev.config.depth,
        extra_decoder_heads=n_prev_heads,
    )
    rng = np.random.default_rng(seed)
    params = {n: a.copy() for n, a in prev.parameters.items()}
    params.update(_he_init(
        rng, _decoder_param_shapes(config, n_prev_heads, len(new_classes))))
    return Model(config, prev.head_classes + [list(new_classes)], params)


def trainable_set(method: str, partition: ParamPartition) -> frozenset[str]:
    """Which parameters a training stage is allowed to update."""
    m = method.lower()
    if m == "fe":
        return partition.decoders[-1]
    if m == "ft":
        return partition.encoder | partition.decoders[-1]
    return partition.all_names()
