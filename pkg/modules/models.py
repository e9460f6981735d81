"""
Models module for the ID pruning toolkit.
Layer descriptors, the Model container, shape inference, the declarative
architecture builder and the IDNET v1 model file format.
"""
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, ClassVar, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataFormatError, InvalidInputError, ShapeError, StructuralError
from .utils import atomic_write_bytes, atomic_write_text, dumps_json, log

IDNET_FORMAT = "IDNET"
IDNET_VERSION = 1
BLOB_SUFFIX = ".bin"


# =============================================================================
# LAYER DESCRIPTORS
# =============================================================================

@dataclass(frozen=True, eq=False)
class FullyConnected:
    """y = x @ weight + bias, weight is d_in x d_out (one column per neuron)."""

    weight: np.ndarray
    bias: np.ndarray
    kind: ClassVar[str] = "fc"
    ARRAYS: ClassVar[Tuple[str, ...]] = ("weight", "bias")
    HYPER: ClassVar[Tuple[str, ...]] = ()

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"fc weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def width(self) -> int:
        return int(self.weight.shape[1])


@dataclass(frozen=True, eq=False)
class Conv2d:
    """Weight layout [out_ch, in_ch, kh, kw]."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    kind: ClassVar[str] = "conv2d"
    ARRAYS: ClassVar[Tuple[str, ...]] = ("weight", "bias")
    HYPER: ClassVar[Tuple[str, ...]] = ("stride", "padding")

    def __post_init__(self):
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"conv2d weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"conv2d stride {self.stride} / padding {self.padding} invalid")

    @property
    def width(self) -> int:
        return int(self.weight.shape[0])


@dataclass(frozen=True, eq=False)
class MaxPool2d:
    size: int
    stride: int
    kind: ClassVar[str] = "maxpool2d"
    ARRAYS: ClassVar[Tuple[str, ...]] = ()
    HYPER: ClassVar[Tuple[str, ...]] = ("size", "stride")


@dataclass(frozen=True, eq=False)
class AvgPool2d:
    size: int
    stride: int
    kind: ClassVar[str] = "avgpool2d"
    ARRAYS: ClassVar[Tuple[str, ...]] = ()
    HYPER: ClassVar[Tuple[str, ...]] = ("size", "stride")


@dataclass(frozen=True, eq=False)
class Flatten:
    """Channel-major flatten: (C, H, W) -> C*H*W with the channel index slowest."""

    kind: ClassVar[str] = "flatten"
    ARRAYS: ClassVar[Tuple[str, ...]] = ()
    HYPER: ClassVar[Tuple[str, ...]] = ()


@dataclass(frozen=True, eq=False)
class ReLU:
    kind: ClassVar[str] = "relu"
    ARRAYS: ClassVar[Tuple[str, ...]] = ()
    HYPER: ClassVar[Tuple[str, ...]] = ()


@dataclass(frozen=True, eq=False)
class BatchNorm:
    """Inference-mode normalization over dim 1 (features or channels)."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5
    kind: ClassVar[str] = "batchnorm"
    ARRAYS: ClassVar[Tuple[str, ...]] = ("gamma", "beta", "mean", "var")
    HYPER: ClassVar[Tuple[str, ...]] = ("eps",)

    def __post_init__(self):
        shapes = {a.shape for a in (self.gamma, self.beta, self.mean, self.var)}
        if len(shapes) != 1 or self.gamma.ndim != 1:
            raise ShapeError("batchnorm parameter vectors must share one 1-D shape")
        if not np.all(self.var > 0):
            raise InvalidInputError("batchnorm variances must be positive")

    @property
    def width(self) -> int:
        return int(self.gamma.shape[0])


@dataclass(frozen=True, eq=False)
class ResidualStart:
    block_id: int
    kind: ClassVar[str] = "residual_start"
    ARRAYS: ClassVar[Tuple[str, ...]] = ()
    HYPER: ClassVar[Tuple[str, ...]] = ("block_id",)


@dataclass(frozen=True, eq=False)
class ResidualEnd:
    """Adds the input recorded at the matching ResidualStart."""

    block_id: int
    kind: ClassVar[str] = "residual_end"
    ARRAYS: ClassVar[Tuple[str, ...]] = ()
    HYPER: ClassVar[Tuple[str, ...]] = ("block_id",)


LAYER_TYPES = {
    cls.kind: cls for cls in (
        FullyConnected, Conv2d, MaxPool2d, AvgPool2d, Flatten, ReLU,
        BatchNorm, ResidualStart, ResidualEnd,
    )
}
WEIGHT_KINDS = ("fc", "conv2d")


def is_weight_layer(layer) -> bool:
    return layer.kind in WEIGHT_KINDS


# =============================================================================
# MODEL
# =============================================================================

@dataclass(frozen=True, eq=False)
class Model:
    layers: Tuple[Any, ...]
    name: str
    input_shape: Tuple[int, ...]
    num_classes: int
    provenance: Dict[str, Any] = field(default_factory=dict)

    def with_layers(self, layers: Sequence[Any]) -> "Model":
        return dataclasses.replace(self, layers=tuple(layers))

    def weight_layer_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if is_weight_layer(layer)]

    def widths(self) -> Dict[int, int]:
        return {i: self.layers[i].width for i in self.weight_layer_indices()}


def _shape_fc(layer, shape, idx):
    if len(shape) != 1 or shape[0] != layer.weight.shape[0]:
        raise ShapeError(
            f"layer {idx} (fc) expects ({layer.weight.shape[0]},) input, got {shape}"
        )
    return (layer.width,)


def _spatial(size, kernel, stride, padding, idx, kind):
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(f"layer {idx} ({kind}) leaves no spatial extent from size {size}")
    return out


def _shape_conv(layer, shape, idx):
    o, i, kh, kw = layer.weight.shape
    if len(shape) != 3 or shape[0] != i:
        raise ShapeError(f"layer {idx} (conv2d) expects {i} input channels, got shape {shape}")
    return (
        o,
        _spatial(shape[1], kh, layer.stride, layer.padding, idx, "conv2d"),
        _spatial(shape[2], kw, layer.stride, layer.padding, idx, "conv2d"),
    )


def _shape_pool(layer, shape, idx):
    if len(shape) != 3:
        raise ShapeError(f"layer {idx} ({layer.kind}) expects a (C, H, W) input, got {shape}")
    return (
        shape[0],
        _spatial(shape[1], layer.size, layer.stride, 0, idx, layer.kind),
        _spatial(shape[2], layer.size, layer.stride, 0, idx, layer.kind),
    )


def _shape_flatten(layer, shape, idx):
    return (int(np.prod(shape)),)


def _shape_same(layer, shape, idx):
    return shape


def _shape_batchnorm(layer, shape, idx):
    if shape[0] != layer.width:
        raise ShapeError(f"layer {idx} (batchnorm) has {layer.width} features, input has {shape[0]}")
    return shape


_SHAPE_RULES = {
    "fc": _shape_fc,
    "conv2d": _shape_conv,
    "maxpool2d": _shape_pool,
    "avgpool2d": _shape_pool,
    "flatten": _shape_flatten,
    "relu": _shape_same,
    "batchnorm": _shape_batchnorm,
    "residual_start": _shape_same,
    "residual_end": _shape_same,
}


def _check_residual(layer, idx, shape, stack):
    if layer.kind == "residual_start":
        if any(block_id == layer.block_id for block_id, _ in stack):
            raise StructuralError(f"layer {idx}: residual block {layer.block_id} opened twice")
        stack.append((layer.block_id, shape))
    elif layer.kind == "residual_end":
        if not stack or stack[-1][0] != layer.block_id:
            raise StructuralError(
                f"layer {idx}: residual end {layer.block_id} does not close the innermost block"
            )
        _, entry_shape = stack.pop()
        if entry_shape != shape:
            raise ShapeError(
                f"layer {idx}: residual block {layer.block_id} maps {entry_shape} to {shape}"
            )


def infer_shapes(model: Model) -> List[Tuple[int, ...]]:
    """Per-sample output shape of every layer; raises on any incompatibility."""
    shape = tuple(int(s) for s in model.input_shape)
    shapes = []
    stack: List[Tuple[int, Tuple[int, ...]]] = []
    for idx, layer in enumerate(model.layers):
        shape = tuple(_SHAPE_RULES[layer.kind](layer, shape, idx))
        _check_residual(layer, idx, shape, stack)
        shapes.append(shape)
    if stack:
        raise StructuralError(f"residual block {stack[-1][0]} is never closed")
    return shapes


def validate_model(model: Model) -> Model:
    shapes = infer_shapes(model)
    final = shapes[-1] if shapes else tuple(model.input_shape)
    if final != (model.num_classes,):
        raise ShapeError(
            f"model '{model.name}' produces {final} per sample, expected ({model.num_classes},)"
        )
    return model


# =============================================================================
# BUILDER
# =============================================================================

def _gaussian(rng, shape, fan_in, init_scale):
    return rng.standard_normal(shape) * (init_scale / np.sqrt(fan_in))


def _build_fc(spec, shape, rng, init_scale):
    d_in = int(np.prod(shape))
    out = int(spec["out"])
    return FullyConnected(
        weight=_gaussian(rng, (d_in, out), d_in, init_scale),
        bias=np.zeros(out),
    )


def _build_conv(spec, shape, rng, init_scale):
    kernel = int(spec.get("kernel", 3))
    out = int(spec["out"])
    fan_in = shape[0] * kernel * kernel
    return Conv2d(
        weight=_gaussian(rng, (out, shape[0], kernel, kernel), fan_in, init_scale),
        bias=np.zeros(out),
        stride=int(spec.get("stride", 1)),
        padding=int(spec.get("padding", 0)),
    )


def _build_pool(cls):
    def build(spec, shape, rng, init_scale):
        size = int(spec.get("size", 2))
        return cls(size=size, stride=int(spec.get("stride", size)))
    return build


def _build_batchnorm(spec, shape, rng, init_scale):
    c = shape[0]
    return BatchNorm(
        gamma=np.ones(c), beta=np.zeros(c), mean=np.zeros(c), var=np.ones(c),
        eps=float(spec.get("eps", 1e-5)),
    )


_BUILDERS = {
    "fc": _build_fc,
    "conv2d": _build_conv,
    "maxpool2d": _build_pool(MaxPool2d),
    "avgpool2d": _build_pool(AvgPool2d),
    "flatten": lambda spec, shape, rng, scale: Flatten(),
    "relu": lambda spec, shape, rng, scale: ReLU(),
    "batchnorm": _build_batchnorm,
}


def _expand_specs(specs, counter):
    """Flattens nested {"type": "residual", "layers": [...]} specs into markers."""
    flat = []
    for spec in specs:
        kind = spec.get("type")
        if kind == "residual":
            block_id = counter[0]
            counter[0] += 1
            flat.append(("residual_start", block_id))
            flat.extend(_expand_specs(spec.get("layers", []), counter))
            flat.append(("residual_end", block_id))
        elif kind in _BUILDERS:
            flat.append((kind, spec))
        else:
            raise InvalidInputError(f"unknown layer type '{kind}' in architecture")
    return flat


def build_model(arch_specs: Sequence[Dict[str, Any]], input_shape: Sequence[int],
                num_classes: int, seed: int = 0, init_scale: float = 1.0,
                name: str = "idnet") -> Model:
    """
    Builds a randomly initialized model from declarative layer specs, e.g.
    [{"type": "conv2d", "out": 8, "kernel": 3, "padding": 1}, {"type": "relu"},
     {"type": "residual", "layers": [...]}, {"type": "flatten"},
     {"type": "fc", "out": 10}].
    Weights are Gaussian with std = init_scale / sqrt(fan_in); biases start at 0.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in input_shape)
    layers: List[Any] = []
    for idx, (kind, payload) in enumerate(_expand_specs(arch_specs, [0])):
        if kind == "residual_start":
            layer: Any = ResidualStart(block_id=payload)
        elif kind == "residual_end":
            layer = ResidualEnd(block_id=payload)
        else:
            layer = _BUILDERS[kind](payload, shape, rng, init_scale)
        shape = tuple(_SHAPE_RULES[layer.kind](layer, shape, idx))
        layers.append(layer)
    model = Model(
        layers=tuple(layers), name=name, input_shape=tuple(int(s) for s in input_shape),
        num_classes=int(num_classes),
    )
    log(f"[Model] Built '{name}': {len(layers)} layers, widths {model.widths()}", "DEBUG")
    return validate_model(model)


# =============================================================================
# IDNET v1 I/O
# =============================================================================

def _layer_manifest(layer, offset):
    entry: Dict[str, Any] = {"kind": layer.kind}
    for hyper in layer.HYPER:
        entry[hyper] = getattr(layer, hyper)
    tensors = []
    for name in layer.ARRAYS:
        arr = getattr(layer, name)
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(arr.size) * 4
    entry["tensors"] = tensors
    return entry, offset


def _blob_path(path):
    return path + BLOB_SUFFIX


def save_model(model: Model, path: str, provenance: Optional[Dict[str, Any]] = None) -> None:
    """
    Writes `path` (JSON manifest) and `path + ".bin"` (little-endian float32
    tensors concatenated in manifest order, row-major).
    """
    validate_model(model)
    chunks = []
    layers = []
    offset = 0
    for layer in model.layers:
        entry, offset = _layer_manifest(layer, offset)
        layers.append(entry)
        for name in layer.ARRAYS:
            chunks.append(np.ascontiguousarray(getattr(layer, name), dtype="<f4").tobytes())
    blob = b"".join(chunks)
    manifest = {
        "format": IDNET_FORMAT,
        "version": IDNET_VERSION,
        "name": model.name,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "provenance": provenance if provenance is not None else model.provenance,
        "blob": os.path.basename(_blob_path(path)),
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "layers": layers,
    }
    atomic_write_bytes(_blob_path(path), blob)
    atomic_write_text(path, dumps_json(manifest))
    log(f"[Model] Saved '{model.name}' to {path} ({len(blob)} tensor bytes)", "DEBUG")


def read_manifest(path, file_format=IDNET_FORMAT, version=IDNET_VERSION):
    """Parses a JSON manifest and checks its format tag and version."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: manifest is not valid JSON ({e})") from e
    if not isinstance(manifest, dict) or manifest.get("format") != file_format:
        raise DataFormatError(f"{path}: not an {file_format} manifest")
    if manifest.get("version") != version:
        raise DataFormatError(f"{path}: unsupported {file_format} version {manifest.get('version')}")
    return manifest


def read_checked_blob(path, manifest) -> bytes:
    """Reads the blob a manifest names and verifies its size and SHA-256."""
    blob_path = os.path.join(os.path.dirname(path), manifest.get("blob", ""))
    if not os.path.isfile(blob_path):
        raise DataFormatError(f"{path}: tensor file {blob_path} is missing")
    with open(blob_path, "rb") as f:
        blob = f.read()
    if len(blob) != manifest.get("blob_bytes"):
        raise DataFormatError(
            f"{blob_path}: expected {manifest.get('blob_bytes')} bytes, found {len(blob)}"
        )
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise DataFormatError(f"{blob_path}: checksum mismatch")
    return blob


def _decode_layer(entry, blob, path, idx):
    cls = LAYER_TYPES.get(entry.get("kind"))
    if cls is None:
        raise DataFormatError(f"{path}: layer {idx} has unknown kind '{entry.get('kind')}'")
    kwargs = {hyper: entry[hyper] for hyper in cls.HYPER if hyper in entry}
    for tensor in entry.get("tensors", []):
        shape = tuple(tensor["shape"])
        count = int(np.prod(shape))
        start = int(tensor["offset"])
        if start + 4 * count > len(blob):
            raise DataFormatError(f"{path}: layer {idx} tensor '{tensor['name']}' overruns blob")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        if not np.all(np.isfinite(arr)):
            raise DataFormatError(f"{path}: layer {idx} tensor '{tensor['name']}' has non-finite values")
        kwargs[tensor["name"]] = arr.astype(np.float64).reshape(shape)
    try:
        return cls(**kwargs)
    except (TypeError, ShapeError, InvalidInputError) as e:
        raise DataFormatError(f"{path}: layer {idx} is malformed ({e})") from e


def load_model(path: str) -> Model:
    """Reads an IDNET v1 model; tensors are upcast to float64."""
    if not os.path.isfile(path):
        raise DataFormatError(f"{path}: model file not found")
    manifest = read_manifest(path)
    blob = read_checked_blob(path, manifest)
    try:
        layers = [
            _decode_layer(entry, blob, path, idx)
            for idx, entry in enumerate(manifest.get("layers", []))
        ]
        model = Model(
            layers=tuple(layers),
            name=manifest.get("name", "idnet"),
            input_shape=tuple(int(s) for s in manifest["input_shape"]),
            num_classes=int(manifest["num_classes"]),
            provenance=manifest.get("provenance") or {},
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"{path}: incomplete manifest ({e!r})") from e
    try:
        return validate_model(model)
    except (ShapeError, StructuralError) as e:
        raise DataFormatError(f"{path}: {e}") from e
