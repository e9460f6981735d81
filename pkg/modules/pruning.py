"""
Structured pruning with interpolative decompositions.

Each prunable weight layer keeps the neurons/channels picked by an ID of its
(original-model) activations on the pruning set; the interpolation matrix T
is folded into the next weight layer so the kept units reproduce the dropped
ones. The magnitude baseline runs through the same driver with a 0/1
selection matrix in place of T.
"""
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, FrozenSet, List, NamedTuple, Optional, Tuple

import numpy as np

from . import config as cfg
from .errors import InvalidInputError, RankDeficiencyError, ShapeError, StructuralError
from .linalg import (
    Interpolation, RankCriterion, column_pivoted_qr, interpolative_decomposition,
    spectral_norm,
)
from .models import Model, infer_shapes, is_weight_layer, validate_model
from .nn import count_flops, forward_prefix, reshape_channels
from .utils import log, print_progress_bar

GROUP_KINDS = ("relu", "maxpool2d", "avgpool2d")
RESIDUAL_KINDS = ("residual_start", "residual_end")


# =============================================================================
# CONFIG & REPORTS
# =============================================================================

@dataclass(frozen=True, eq=False)
class PruneConfig:
    """
    Global rank policy (`fraction` alpha or `criterion`) with optional
    per-layer overrides keyed by model layer index. Exactly one global policy
    is required unless every prunable layer has an override.
    """

    pruning_set: np.ndarray
    fraction: Optional[float] = None
    criterion: Optional[RankCriterion] = None
    layer_fractions: Dict[int, float] = field(default_factory=dict)
    layer_criteria: Dict[int, RankCriterion] = field(default_factory=dict)
    skip_layers: FrozenSet[int] = frozenset()
    approximation_target: str = "original"
    pruning_set_source: str = cfg.PRUNE_POLICY

    def __post_init__(self):
        if len(self.pruning_set) < 1:
            raise InvalidInputError("pruning set must hold at least one sample")
        if self.fraction is not None and self.criterion is not None:
            raise InvalidInputError("give either a pruning fraction or a rank criterion, not both")
        for alpha in [self.fraction, *self.layer_fractions.values()]:
            if alpha is not None and not 0.0 <= alpha < 1.0:
                raise InvalidInputError(f"pruning fraction must lie in [0, 1), got {alpha}")
        if self.approximation_target != "original":
            raise InvalidInputError(
                f"approximation target '{self.approximation_target}' is not supported"
            )

    def criterion_for(self, idx: int, width: int) -> RankCriterion:
        if idx in self.layer_criteria:
            return self.layer_criteria[idx]
        alpha = self.layer_fractions.get(idx, self.fraction)
        if alpha is not None:
            return RankCriterion.fixed(kept_width(width, alpha))
        if self.criterion is not None:
            return self.criterion
        raise InvalidInputError(f"no rank policy for layer {idx}")


def kept_width(width: int, fraction: float) -> int:
    """k = max(1, ceil((1 - alpha) * width))."""
    return max(1, math.ceil(round((1.0 - fraction) * width, 9)))


@dataclass
class LayerReport:
    layer_index: int
    kind: str
    width_before: int
    width_after: int
    achieved_error: Optional[float]
    certified: bool
    t_norm: float
    criterion: str
    skipped: bool = False
    note: str = ""


CSV_HEADER = (
    "layer_index", "kind", "width_before", "width_after", "achieved_error",
    "certified", "t_norm", "criterion", "skipped", "note",
)


@dataclass
class PruneReport:
    method: str
    layers: List[LayerReport]
    flops_before: int
    flops_after: int
    pruning_set_size: int
    pruning_set_source: str
    theory: Optional[Dict[str, Any]] = None
    metrics: Dict[str, Any] = field(default_factory=dict)

    @property
    def flops_reduction(self) -> float:
        return 0.0 if self.flops_before == 0 else 1.0 - self.flops_after / self.flops_before

    def to_dict(self) -> Dict[str, Any]:
        out = dataclasses.asdict(self)
        out["flops_reduction"] = self.flops_reduction
        return out

    def csv_rows(self) -> List[Tuple[Any, ...]]:
        return [dataclasses.astuple(layer) for layer in self.layers]


class PairResult(NamedTuple):
    weight: np.ndarray
    bias: np.ndarray
    next_weight: np.ndarray
    next_bias: Optional[np.ndarray]
    interpolation: Interpolation
    note: str


# =============================================================================
# PRIMITIVES
# =============================================================================

def identity_interpolation(width: int) -> Interpolation:
    return Interpolation(indices=np.arange(width), t=np.eye(width), achieved_error=0.0, certified=True)


def selection_interpolation(indices, width: int) -> Interpolation:
    """0/1 T that keeps `indices` and drops the rest without correction."""
    indices = np.asarray(indices, dtype=np.int64)
    t = np.zeros((len(indices), width))
    t[np.arange(len(indices)), indices] = 1.0
    return Interpolation(indices=indices, t=t, achieved_error=float("nan"), certified=False)


def expand_flatten(t, spatial_size: int) -> np.ndarray:
    """T kron I_s, the interpolation over channel-major flattened features."""
    if spatial_size <= 0:
        raise InvalidInputError(f"spatial size must be positive, got {spatial_size}")
    return np.kron(np.asarray(t, dtype=np.float64), np.eye(spatial_size))


def fold_interpolation(t: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Left-multiplies the input dimension of fc (d_in x d_out) or conv ([o, i, kh, kw]) weights by T."""
    m = t.shape[1]
    if weight.ndim == 2:
        if weight.shape[0] != m:
            raise StructuralError(f"successor takes {weight.shape[0]} inputs, interpolation covers {m}")
        return t @ weight
    if weight.shape[1] != m:
        raise StructuralError(f"successor takes {weight.shape[1]} channels, interpolation covers {m}")
    return np.einsum("ji,oi...->oj...", t, weight)


def _padded_interpolation(mat: np.ndarray, k: int, rank: int) -> Interpolation:
    """
    Width-k ID of a matrix whose numerical rank is below k: the rank-r ID plus
    the next k - r pivot columns, which interpolate only themselves.
    """
    base = interpolative_decomposition(mat, RankCriterion.fixed(max(rank, 1)))
    taken = set(int(i) for i in base.indices)
    pivots = column_pivoted_qr(mat, max_steps=min(k, *mat.shape)).perm
    pool = [int(p) for p in pivots if int(p) not in taken]
    extra = np.array(pool[:k - len(taken)], dtype=np.int64)
    t = np.zeros((k, mat.shape[1]))
    t[:len(taken)] = base.t
    t[:len(taken), extra] = 0.0
    t[len(taken) + np.arange(len(extra)), extra] = 1.0
    return Interpolation(
        indices=np.concatenate([base.indices, extra]), t=t,
        achieved_error=base.achieved_error, certified=base.certified,
    )


def layer_interpolation(mat: np.ndarray, criterion: RankCriterion) -> Tuple[Interpolation, str]:
    """ID of an activation matrix (samples x units) under `criterion`, with the layer note."""
    width = mat.shape[1]
    note = ""
    if criterion.mode == "fixed":
        if criterion.k > width:
            note = f"requested k={criterion.k} clamped to width {width}"
            log(f"[Prune] {note}", "WARNING")
        if criterion.k >= width:
            return identity_interpolation(width), note or "kept full width"
    try:
        interp = interpolative_decomposition(mat, criterion)
        rank, k = interp.rank, interp.rank
        if criterion.mode == "fixed":
            k = int(criterion.k)
    except RankDeficiencyError as e:
        rank = e.numerical_rank
        k = int(criterion.k) if criterion.mode == "fixed" else e.requested_rank
    if rank < k:
        log(f"[Prune] Activations support rank {rank} < {k}; padding pivots", "DEBUG")
        interp = _padded_interpolation(mat, k, rank)
        note = f"numerical rank {rank}, padded to {k}"
    if interp.rank >= width:
        return identity_interpolation(width), "unprunable: accuracy needs full width"
    return interp, note


def _activation_matrix(z: np.ndarray) -> np.ndarray:
    return reshape_channels(z) if z.ndim == 4 else z.reshape(len(z), -1)


def prune_fc_pair(w, b, u, u_bias, z, criterion: RankCriterion) -> PairResult:
    """
    Prunes hidden layer (w: d x m, b: m) feeding u (m x c); z is m x n, one
    row of post-activation outputs per neuron.
    """
    w = np.asarray(w, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] != w.shape[1]:
        raise ShapeError(f"activations describe {z.shape[0]} neurons, layer has {w.shape[1]}")
    interp, note = layer_interpolation(z.T, criterion)
    return PairResult(
        weight=w[:, interp.indices],
        bias=np.asarray(b, dtype=np.float64)[interp.indices],
        next_weight=fold_interpolation(interp.t, np.asarray(u, dtype=np.float64)),
        next_bias=None if u_bias is None else np.asarray(u_bias, dtype=np.float64).copy(),
        interpolation=interp,
        note=note,
    )


def prune_conv_pair(w, b, u_next, z, criterion: RankCriterion, u_bias=None) -> PairResult:
    """
    Prunes the output channels of conv weights w ([m_c, c_in, kh, kw]); z is
    the (batch, m_c, h, w) activation after the layer's ReLU/pooling and
    u_next the successor weights consuming m_c channels.
    """
    w = np.asarray(w, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 4 or z.shape[1] != w.shape[0]:
        raise ShapeError(f"activation tensor {z.shape} does not match {w.shape[0]} channels")
    interp, note = layer_interpolation(reshape_channels(z), criterion)
    return PairResult(
        weight=w[interp.indices],
        bias=np.asarray(b, dtype=np.float64)[interp.indices],
        next_weight=fold_interpolation(interp.t, np.asarray(u_next, dtype=np.float64)),
        next_bias=None if u_bias is None else np.asarray(u_bias, dtype=np.float64).copy(),
        interpolation=interp,
        note=note,
    )


# =============================================================================
# LAYER PLAN
# =============================================================================

class LayerPlan(NamedTuple):
    index: int
    group_end: int
    successor: Optional[int]
    flatten_spatial: int
    forced_skip: str


def _group_end(layers, idx):
    end = idx
    while end + 1 < len(layers) and layers[end + 1].kind in GROUP_KINDS:
        end += 1
    return end


def _successor(layers, start, shapes):
    """Next weight layer after `start`, and the spatial size if a flatten sits in between."""
    spatial = 1
    for j in range(start + 1, len(layers)):
        kind = layers[j].kind
        if is_weight_layer(layers[j]):
            return j, spatial
        if kind == "flatten":
            prev = shapes[j - 1]
            spatial = int(np.prod(prev[1:])) if len(prev) == 3 else 1
        elif kind in RESIDUAL_KINDS:
            return None, spatial
    return None, spatial


def plan_layers(model: Model, skip_layers=frozenset()) -> List[LayerPlan]:
    """Groups each weight layer with its trailing ReLU/pooling and marks forced skips."""
    layers = model.layers
    shapes = infer_shapes(model)
    weight_idx = model.weight_layer_indices()
    plans = []
    for idx in weight_idx:
        end = _group_end(layers, idx)
        successor, spatial = _successor(layers, end, shapes)
        reason = ""
        if idx == weight_idx[-1]:
            reason = "final layer"
        elif end + 1 < len(layers) and layers[end + 1].kind in RESIDUAL_KINDS:
            reason = "feeds a residual connection"
        elif successor is None:
            reason = "no successor weight layer"
        elif idx in skip_layers:
            reason = "skip set"
        plans.append(LayerPlan(idx, end, successor, spatial, reason))
    return plans


# =============================================================================
# DRIVER
# =============================================================================

Selector = Callable[[LayerPlan, Any, RankCriterion], Tuple[Interpolation, str]]


def _check_prunable(model: Model):
    validate_model(model)
    if any(layer.kind == "batchnorm" for layer in model.layers):
        raise StructuralError("batchnorm layers must be absorbed before pruning")


def _select_units(layer, interp):
    if layer.kind == "fc":
        return dataclasses.replace(layer, weight=layer.weight[:, interp.indices], bias=layer.bias[interp.indices])
    return dataclasses.replace(layer, weight=layer.weight[interp.indices], bias=layer.bias[interp.indices])


def _report_row(plan, layer, interp, criterion, note):
    skipped = bool(plan.forced_skip)
    return LayerReport(
        layer_index=plan.index,
        kind=layer.kind,
        width_before=layer.width,
        width_after=interp.rank,
        achieved_error=float(interp.achieved_error) if np.isfinite(interp.achieved_error) else None,
        certified=bool(interp.certified),
        t_norm=spectral_norm(interp.t),
        criterion="skip" if criterion is None else criterion.describe(),
        skipped=skipped,
        note=plan.forced_skip or note,
    )


def _run_driver(model: Model, config: PruneConfig, method: str, selector: Selector) -> Tuple[Model, PruneReport]:
    _check_prunable(model)
    layers = list(model.layers)
    plans = plan_layers(model, frozenset(config.skip_layers))
    pending: Optional[np.ndarray] = None
    rows = []
    for n_done, plan in enumerate(plans, start=1):
        layer = layers[plan.index]
        if pending is not None:
            layer = dataclasses.replace(layer, weight=fold_interpolation(pending, layer.weight))
        criterion = None
        if plan.forced_skip:
            interp, note = identity_interpolation(layer.width), ""
        else:
            criterion = config.criterion_for(plan.index, layer.width)
            interp, note = selector(plan, model.layers[plan.index], criterion)
        layers[plan.index] = _select_units(layer, interp)
        rows.append(_report_row(plan, layer, interp, criterion, note))
        pending = None if plan.forced_skip else interp.t
        if pending is not None and plan.flatten_spatial > 1:
            pending = expand_flatten(pending, plan.flatten_spatial)
        print_progress_bar(n_done, len(plans), prefix="[Prune] ", suffix=f"layer {plan.index}")

    pruned = validate_model(dataclasses.replace(model, layers=tuple(layers), provenance={}))
    report = PruneReport(
        method=method,
        layers=rows,
        flops_before=count_flops(model).total,
        flops_after=count_flops(pruned).total,
        pruning_set_size=len(config.pruning_set),
        pruning_set_source=config.pruning_set_source,
    )
    log(f"[Prune] {method}: widths {model.widths()} -> {pruned.widths()}, "
        f"FLOPs reduction {report.flops_reduction:.1%}")
    return pruned, report


def prune_model(model: Model, config: PruneConfig) -> Tuple[Model, PruneReport]:
    """
    ID pruning front to back. Activations always come from the unmodified
    model; each layer's incoming weights absorb the previous layer's T.
    """
    x = np.asarray(config.pruning_set, dtype=np.float64)

    def select(plan: LayerPlan, original_layer, criterion):
        z = forward_prefix(model, x, plan.group_end)
        return layer_interpolation(_activation_matrix(z), criterion)

    return _run_driver(model, config, "id", select)


def magnitude_scores(layer) -> np.ndarray:
    """L1 norm of each unit's incoming weights plus |bias|."""
    if layer.kind == "fc":
        return np.abs(layer.weight).sum(axis=0) + np.abs(layer.bias)
    return np.abs(layer.weight).reshape(layer.width, -1).sum(axis=1) + np.abs(layer.bias)


def magnitude_prune_model(model: Model, config: PruneConfig) -> Tuple[Model, PruneReport]:
    """L1-norm baseline: keeps the k largest units of the original weights, no correction."""

    def select(plan: LayerPlan, original_layer, criterion):
        if criterion.mode != "fixed":
            raise InvalidInputError("magnitude pruning needs a fixed width per layer, not epsilon")
        width = original_layer.width
        k = min(int(criterion.k), width)
        if k >= width:
            return identity_interpolation(width), "kept full width"
        order = np.argsort(-magnitude_scores(original_layer), kind="stable")
        return selection_interpolation(np.sort(order[:k]), width), ""

    return _run_driver(model, config, "magnitude", select)
