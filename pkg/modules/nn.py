"""
Minimal feedforward runtime: forward evaluation (torch, float64, CPU),
activation capture, channel reshaping, FLOPs accounting and batch-norm
absorption.
"""
import dataclasses
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError, ShapeError, StructuralError
from .models import FullyConnected, Model, infer_shapes, is_weight_layer
from .utils import log

DTYPE = torch.float64


def configure_threads(threads: Optional[int]) -> None:
    """Pins torch intra-op parallelism; one thread keeps runs bitwise reproducible."""
    if threads:
        torch.set_num_threads(int(threads))
        log(f"[Runtime] torch threads: {torch.get_num_threads()}", "DEBUG")


def layer_tensors(layer, requires_grad: bool = False) -> Dict[str, torch.Tensor]:
    tensors = {}
    for name in layer.ARRAYS:
        t = torch.tensor(getattr(layer, name), dtype=DTYPE)
        if requires_grad and name in ("weight", "bias"):
            t.requires_grad_(True)
        tensors[name] = t
    return tensors


# =============================================================================
# LAYER KERNELS
# =============================================================================

def _channel_view(vec: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    return vec.reshape((1, -1) + (1,) * (h.dim() - 2))


def _fc(layer, h, p, skips):
    return h @ p["weight"] + p["bias"]


def _conv(layer, h, p, skips):
    return F.conv2d(h, p["weight"], p["bias"], stride=layer.stride, padding=layer.padding)


def _maxpool(layer, h, p, skips):
    return F.max_pool2d(h, layer.size, layer.stride)


def _avgpool(layer, h, p, skips):
    return F.avg_pool2d(h, layer.size, layer.stride)


def _flatten(layer, h, p, skips):
    return h.reshape(h.shape[0], -1)


def _relu(layer, h, p, skips):
    return torch.relu(h)


def _batchnorm(layer, h, p, skips):
    scale = p["gamma"] / torch.sqrt(p["var"] + layer.eps)
    return (h - _channel_view(p["mean"], h)) * _channel_view(scale, h) + _channel_view(p["beta"], h)


def _residual_start(layer, h, p, skips):
    skips[layer.block_id] = h
    return h


def _residual_end(layer, h, p, skips):
    return h + skips.pop(layer.block_id)


_KERNELS = {
    "fc": _fc,
    "conv2d": _conv,
    "maxpool2d": _maxpool,
    "avgpool2d": _avgpool,
    "flatten": _flatten,
    "relu": _relu,
    "batchnorm": _batchnorm,
    "residual_start": _residual_start,
    "residual_end": _residual_end,
}


def propagate(layers: Sequence, h: torch.Tensor, params: Sequence[Dict[str, torch.Tensor]],
              upto: Optional[int] = None) -> torch.Tensor:
    """Runs layers[0..upto] on h; shared by inference and training."""
    last = len(layers) - 1 if upto is None else upto
    skips: Dict[int, torch.Tensor] = {}
    for idx in range(last + 1):
        layer = layers[idx]
        try:
            h = _KERNELS[layer.kind](layer, h, params[idx], skips)
        except RuntimeError as e:
            raise ShapeError(f"layer {idx} ({layer.kind}) rejected input of shape "
                             f"{tuple(h.shape)}: {e}") from e
    return h


def _as_batch(model: Model, x) -> torch.Tensor:
    arr = np.asarray(x, dtype=np.float64)
    expected = tuple(model.input_shape)
    if arr.shape[1:] != expected:
        raise ShapeError(f"layer 0 expects samples of shape {expected}, got {arr.shape[1:]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("input batch contains NaN or Inf entries")
    return torch.from_numpy(np.ascontiguousarray(arr))


# =============================================================================
# FORWARD EVALUATION
# =============================================================================

def forward_prefix(model: Model, x, upto_layer: int) -> np.ndarray:
    """Output of layer `upto_layer` (inclusive) for the batch x."""
    if not 0 <= upto_layer < len(model.layers):
        raise InvalidInputError(
            f"upto_layer {upto_layer} outside [0, {len(model.layers) - 1}]"
        )
    h = _as_batch(model, x)
    with torch.no_grad():
        params = [layer_tensors(layer) for layer in model.layers[:upto_layer + 1]]
        out = propagate(model.layers, h, params, upto=upto_layer)
    return out.numpy()


def forward(model: Model, x) -> np.ndarray:
    """Logits (or regression outputs) for the batch x."""
    if not model.layers:
        return np.asarray(x, dtype=np.float64).copy()
    return forward_prefix(model, x, len(model.layers) - 1)


def reshape_channels(z) -> np.ndarray:
    """
    (batch, C, H, W) -> (batch*H*W, C). Row index is (b*H + h)*W + w, so
    column c collects every spatial position of channel c across the batch.
    Inverse: unreshape_channels(mat, z.shape).
    """
    z = np.asarray(z)
    if z.ndim != 4:
        raise ShapeError(f"reshape_channels needs a 4-D tensor, got {z.ndim}-D")
    return z.transpose(0, 2, 3, 1).reshape(-1, z.shape[1])


def unreshape_channels(mat, shape: Sequence[int]) -> np.ndarray:
    b, c, h, w = shape
    mat = np.asarray(mat)
    if mat.shape != (b * h * w, c):
        raise ShapeError(f"matrix {mat.shape} cannot be folded back into {tuple(shape)}")
    return mat.reshape(b, h, w, c).transpose(0, 3, 1, 2)


# =============================================================================
# FLOPS
# =============================================================================

class FlopsReport(NamedTuple):
    per_layer: List[Tuple[int, int]]
    total: int


def count_flops(model: Model, input_shape: Optional[Sequence[int]] = None) -> FlopsReport:
    """Per-sample FLOPs; a multiply-add is 2, pooling and activations are free."""
    if input_shape is not None:
        model = dataclasses.replace(model, input_shape=tuple(input_shape))
    shapes = infer_shapes(model)
    per_layer = []
    for idx, layer in enumerate(model.layers):
        if layer.kind == "fc":
            flops = 2 * layer.weight.shape[0] * layer.weight.shape[1]
        elif layer.kind == "conv2d":
            o, i, kh, kw = layer.weight.shape
            _, h_out, w_out = shapes[idx]
            flops = 2 * kh * kw * i * o * h_out * w_out
        else:
            continue
        per_layer.append((idx, int(flops)))
    return FlopsReport(per_layer=per_layer, total=sum(f for _, f in per_layer))


def flops_reduction(before: FlopsReport, after: FlopsReport) -> float:
    """1 - after/before."""
    if before.total == 0:
        return 0.0
    return 1.0 - after.total / before.total


# =============================================================================
# BATCH-NORM ABSORPTION
# =============================================================================

def _fold_batchnorm(prev, bn):
    scale = bn.gamma / np.sqrt(bn.var + bn.eps)
    bias = (prev.bias - bn.mean) * scale + bn.beta
    if isinstance(prev, FullyConnected):
        weight = prev.weight * scale[None, :]
    else:
        weight = prev.weight * scale[:, None, None, None]
    return dataclasses.replace(prev, weight=weight, bias=bias)


def absorb_batchnorm(model: Model) -> Model:
    """Fuses every BatchNorm into the fc/conv layer immediately before it."""
    layers: List = []
    absorbed = 0
    for idx, layer in enumerate(model.layers):
        if layer.kind != "batchnorm":
            layers.append(layer)
            continue
        prev = layers[-1] if layers else None
        if prev is None or not is_weight_layer(prev) or prev.width != layer.width:
            raise StructuralError(
                f"layer {idx}: batchnorm has no fc/conv predecessor of width {layer.width}"
            )
        layers[-1] = _fold_batchnorm(prev, layer)
        absorbed += 1
    if absorbed:
        log(f"[Model] Absorbed {absorbed} batchnorm layer(s) into their predecessors")
    return model.with_layers(layers)
