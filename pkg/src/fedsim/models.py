"""Model descriptions, width pruning, initialisation and overlap maps.

A model is a flat sequence of layer descriptions (:class:`LayerSpec`) plus an
input shape and a class count.  Widths (dense units / conv channels) are the
only thing that varies between the differently-sized models handed to slow
clients: ``build_pruned_spec`` rescales every hidden width by a pruning rate
while the output layer always keeps ``class_count`` units.

Parameters are stored as a name -> float64 array mapping, where names follow
the ``layer{i}.weight`` / ``layer{i}.bias`` convention.  Because a pruned
model keeps the *leading* units/channels of every hidden layer, each of its
parameter tensors corresponds to a prefix block of the matching full-width
tensor; :func:`overlap_map` records those prefix extents and
:func:`extract_overlap` / :func:`embed_overlap` move values in and out.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from fedsim.errors import DimensionError

LAYER_KINDS = ("dense", "conv", "relu", "maxpool", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a model.

    ``width`` is the resolved output size (dense units or conv channels) and
    is only meaningful for ``dense`` and ``conv`` layers.  ``base_width``
    remembers the width of the corresponding layer in the unpruned model so
    pruning is always computed relative to the full-width reference.
    """

    kind: str
    width: int | None = None
    base_width: int | None = None
    kernel: int = 3
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise DimensionError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class ModelSpec:
    """A full model: input shape, layer sequence, class count, pruning rate."""

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    class_count: int
    pruning_rate: float = 1.0


@dataclass
class ModelParams:
    """Parameter tensors keyed by ``layer{the layer index}.weight|bias``."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})


@dataclass(frozen=True)
class OverlapMap:
    """Prefix extents of a small model's tensors inside a larger one.

    ``extents[name]`` gives, per axis, the exclusive stop index of the shared
    block; the start is always 0 (pruned models keep leading units).
    """

    extents: dict[str, tuple[int, ...]]

    def slices(self, name: str) -> tuple[slice, ...]:
        return tuple(slice(0, stop) for stop in self.extents[name])


def layer_name(index: int, layer: LayerSpec) -> str:
    return f"layer{index}({layer.kind})"


def pruned_width(base_width: int, rate: float) -> int:
    """Width of a pruned layer: ``max(1, round(rate * base_width))``.

    Rounding is half-up so e.g. 0.5 * 5 -> 3, matching the convention that a
    pruning rate never removes more than its share of units.
    """

    return max(1, int(math.floor(rate * base_width + 0.5)))


def infer_layer_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Per-layer output shapes (excluding the batch axis).

    Raises :class:`DimensionError` naming the offending layer whenever the
    chain does not fit together (dense on unflattened input, pooling a map
    smaller than the window, and so on).
    """

    shapes: list[tuple[int, ...]] = []
    cur = tuple(int(d) for d in spec.input_shape)
    for i, layer in enumerate(spec.layers):
        name = layer_name(i, layer)
        if layer.kind == "dense":
            if len(cur) != 1:
                raise DimensionError(
                    f"{name}: dense layer needs a flat input, got shape {cur}"
                )
            if layer.width is None or layer.width < 1:
                raise DimensionError(f"{name}: dense layer has no width")
            cur = (layer.width,)
        elif layer.kind == "conv":
            if len(cur) != 3:
                raise DimensionError(
                    f"{name}: conv layer needs a (channels, h, w) input, got shape {cur}"
                )
            if layer.width is None or layer.width < 1:
                raise DimensionError(f"{name}: conv layer has no width")
            c, h, w = cur
            oh = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            ow = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            if oh < 1 or ow < 1:
                raise DimensionError(
                    f"{name}: kernel {layer.kernel} does not fit input {cur}"
                )
            cur = (layer.width, oh, ow)
        elif layer.kind == "maxpool":
            if len(cur) != 3:
                raise DimensionError(
                    f"{name}: maxpool needs a (channels, h, w) input, got shape {cur}"
                )
            c, h, w = cur
            oh = (h - layer.kernel) // layer.stride + 1
            ow = (w - layer.kernel) // layer.stride + 1
            if oh < 1 or ow < 1:
                raise DimensionError(
                    f"{name}: window {layer.kernel} does not fit input {cur}"
                )
            cur = (c, oh, ow)
        elif layer.kind == "flatten":
            cur = (int(np.prod(cur)),)
        elif layer.kind == "relu":
            pass
        shapes.append(cur)
    if not spec.layers:
        raise DimensionError("model has no layers")
    last = spec.layers[-1]
    if last.kind != "dense" or cur != (spec.class_count,):
        raise DimensionError(
            f"model must end in a dense layer with {spec.class_count} units, "
            f"got output shape {cur}"
        )
    return shapes


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Shapes of every learnable tensor, in layer order."""

    shapes: dict[str, tuple[int, ...]] = {}
    cur = tuple(int(d) for d in spec.input_shape)
    out_shapes = infer_layer_shapes(spec)
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            shapes[f"layer{i}.weight"] = (layer.width, cur[0])
            shapes[f"layer{i}.bias"] = (layer.width,)
        elif layer.kind == "conv":
            shapes[f"layer{i}.weight"] = (layer.width, cur[0], layer.kernel, layer.kernel)
            shapes[f"layer{i}.bias"] = (layer.width,)
        cur = out_shapes[i]
    return shapes


def param_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(spec).values())


def _final_dense_index(layers: tuple[LayerSpec, ...]) -> int:
    for i in range(len(layers) - 1, -1, -1):
        if layers[i].kind == "dense":
            return i
    raise DimensionError("model has no dense output layer")


def build_pruned_spec(base: ModelSpec, rate: float) -> ModelSpec:
    """A copy of ``base`` with every hidden width scaled by ``rate``.

    ``rate`` must lie in (0, 1].  Widths are computed from each layer's
    ``base_width`` (the unpruned reference), so re-pruning an already pruned
    spec with rate 1.0 restores the full model.  The output layer is never
    pruned: it always keeps ``class_count`` units.
    """

    if not (0.0 < rate <= 1.0):
        raise DimensionError(f"pruning rate must be in (0, 1], got {rate}")
    out_idx = _final_dense_index(base.layers)
    layers = []
    for i, layer in enumerate(base.layers):
        if layer.kind in ("dense", "conv") and i != out_idx:
            base_w = layer.base_width if layer.base_width is not None else layer.width
            layers.append(replace(layer, width=pruned_width(base_w, rate), base_width=base_w))
        else:
            layers.append(layer)
    spec = ModelSpec(
        input_shape=base.input_shape,
        layers=tuple(layers),
        class_count=base.class_count,
        pruning_rate=float(rate),
    )
    infer_layer_shapes(spec)  # validate eagerly
    return spec


def mlp_spec(input_shape: tuple[int, ...], hidden: tuple[int, ...], class_count: int) -> ModelSpec:
    """A fully connected network: (flatten ->) [dense, relu]* -> dense."""

    layers: list[LayerSpec] = []
    if len(input_shape) > 1:
        layers.append(LayerSpec(kind="flatten"))
    for h in hidden:
        layers.append(LayerSpec(kind="dense", width=int(h), base_width=int(h)))
        layers.append(LayerSpec(kind="relu"))
    layers.append(LayerSpec(kind="dense", width=class_count, base_width=class_count))
    spec = ModelSpec(tuple(int(d) for d in input_shape), tuple(layers), class_count)
    infer_layer_shapes(spec)
    return spec


def cnn_spec(
    input_shape: tuple[int, int, int],
    conv_channels: tuple[int, ...],
    class_count: int,
    kernel: int = 3,
    pool: int = 2,
    dense_width: int = 64,
) -> ModelSpec:
    """A small convnet: [conv, relu, maxpool]* -> flatten -> dense, relu -> dense."""

    layers: list[LayerSpec] = []
    for c in conv_channels:
        layers.append(
            LayerSpec(kind="conv", width=int(c), base_width=int(c), kernel=kernel, stride=1,
                      padding=kernel // 2)
        )
        layers.append(LayerSpec(kind="relu"))
        layers.append(LayerSpec(kind="maxpool", kernel=pool, stride=pool))
    layers.append(LayerSpec(kind="flatten"))
    layers.append(LayerSpec(kind="dense", width=int(dense_width), base_width=int(dense_width)))
    layers.append(LayerSpec(kind="relu"))
    layers.append(LayerSpec(kind="dense", width=class_count, base_width=class_count))
    spec = ModelSpec(tuple(int(d) for d in input_shape), tuple(layers), class_count)
    infer_layer_shapes(spec)
    return spec


def init_params(spec: ModelSpec, seed) -> ModelParams:
    """Seeded initial parameters.

    Weights are uniform on ``[-sqrt(6 / fan_in), +sqrt(6 / fan_in)]`` (fan_in
    is the input dimension for dense layers and ``in_channels * k * k`` for
    conv layers); biases start at zero.
    """

    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float64)
    return ModelParams(tensors)


def validate_params(spec: ModelSpec, params: ModelParams) -> None:
    """Check that ``params`` has exactly the tensors ``spec`` calls for."""

    expected = param_shapes(spec)
    for name, shape in expected.items():
        if name not in params.tensors:
            raise DimensionError(f"missing parameter tensor {name!r}")
        got = params.tensors[name].shape
        if tuple(got) != shape:
            raise DimensionError(
                f"{name}: expected shape {shape}, got {tuple(got)}"
            )
    extra = set(params.tensors) - set(expected)
    if extra:
        raise DimensionError(f"unexpected parameter tensors: {sorted(extra)}")


def overlap_map(large: ModelSpec, small: ModelSpec) -> OverlapMap:
    """Prefix extents of ``small``'s tensors inside ``large``'s tensors.

    Both specs must describe the same architecture (same layer kinds in the
    same order, same input shape and class count); ``small`` may not be wider
    than ``large`` anywhere.
    """

    if large.input_shape != small.input_shape or large.class_count != small.class_count:
        raise DimensionError("models do not share input shape / class count")
    if len(large.layers) != len(small.layers) or any(
        a.kind != b.kind for a, b in zip(large.layers, small.layers)
    ):
        raise DimensionError("models do not share a layer layout")
    large_shapes = param_shapes(large)
    small_shapes = param_shapes(small)
    extents: dict[str, tuple[int, ...]] = {}
    for name, small_shape in small_shapes.items():
        large_shape = large_shapes[name]
        for axis, (s, l) in enumerate(zip(small_shape, large_shape)):
            if s > l:
                raise DimensionError(
                    f"{name}: axis {axis} of the small model ({s}) exceeds the large model ({l})"
                )
        extents[name] = tuple(int(d) for d in small_shape)
    return OverlapMap(extents)


def extract_overlap(params: ModelParams, omap: OverlapMap) -> ModelParams:
    """The prefix block of every tensor, copied into a small model's params."""

    return ModelParams(
        {name: params.tensors[name][omap.slices(name)].copy() for name in omap.extents}
    )


def embed_overlap(large: ModelParams, small: ModelParams, omap: OverlapMap) -> ModelParams:
    """A copy of ``large`` with the shared prefix block replaced by ``small``."""

    out = large.copy()
    for name in omap.extents:
        out.tensors[name][omap.slices(name)] = small.tensors[name]
    return out


def flatten_params(spec: ModelSpec, params: ModelParams) -> np.ndarray:
    """All tensors concatenated into one float64 vector, in layer order."""

    validate_params(spec, params)
    return np.concatenate([params.tensors[name].ravel() for name in param_shapes(spec)])


def unflatten_params(spec: ModelSpec, vector: np.ndarray) -> ModelParams:
    """Inverse of :func:`flatten_params`."""

    vector = np.asarray(vector, dtype=np.float64).ravel()
    shapes = param_shapes(spec)
    total = sum(int(np.prod(s)) for s in shapes.values())
    if vector.size != total:
        raise DimensionError(
            f"parameter vector has {vector.size} entries, model needs {total}"
        )
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        tensors[name] = vector[offset : offset + size].reshape(shape).copy()
        offset += size
    return ModelParams(tensors)


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "input_shape": list(spec.input_shape),
        "class_count": spec.class_count,
        "pruning_rate": spec.pruning_rate,
        "layers": [
            {
                "kind": l.kind,
                "width": l.width,
                "base_width": l.base_width,
                "kernel": l.kernel,
                "stride": l.stride,
                "padding": l.padding,
            }
            for l in spec.layers
        ],
    }


def spec_from_dict(d: dict) -> ModelSpec:
    layers = tuple(
        LayerSpec(
            kind=l["kind"],
            width=l["width"],
            base_width=l["base_width"],
            kernel=l["kernel"],
            stride=l["stride"],
            padding=l["padding"],
        )
        for l in d["layers"]
    )
    return ModelSpec(
        input_shape=tuple(d["input_shape"]),
        layers=layers,
        class_count=int(d["class_count"]),
        pruning_rate=float(d["pruning_rate"]),
    )


def save_checkpoint(path, spec: ModelSpec, params: ModelParams) -> None:
    """Write spec + parameters to a single ``.npz`` file."""

    validate_params(spec, params)
    header = json.dumps({"format": "fedsim-checkpoint-v1", "spec": spec_to_dict(spec)})
    np.savez(path, __header__=np.array(header), **params.tensors)


def load_checkpoint(path) -> tuple[ModelSpec, ModelParams]:
    """Read a checkpoint written by :func:`save_checkpoint`."""

    with np.load(path, allow_pickle=False) as archive:
        header = json.loads(str(archive["__header__"]))
        if header.get("format") != "fedsim-checkpoint-v1":
            raise DimensionError(f"{path}: not a recognised checkpoint file")
        spec = spec_from_dict(header["spec"])
        tensors = {
            name: np.asarray(archive[name], dtype=np.float64)
            for name in archive.files
            if name != "__header__"
        }
    params = ModelParams(tensors)
    validate_params(spec, params)
    return spec, params
