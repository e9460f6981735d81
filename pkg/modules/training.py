"""
Training module for the ID pruning toolkit.
Mini-batch SGD (torch autograd, float64, CPU) with per-epoch exponential
learning-rate decay, evaluation, fine-tuning and finite-difference gradient
checks.
"""
import dataclasses
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import config as cfg
from .data import LabeledDataset
from .errors import InvalidInputError, ShapeError, TrainingError
from .models import Model
from .nn import DTYPE, layer_tensors, propagate
from .utils import log, print_progress_bar

EVAL_CHUNK = 2048
TRAINABLE = ("weight", "bias")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = cfg.TRAIN_EPOCHS
    batch_size: int = cfg.TRAIN_BATCH_SIZE
    lr: float = cfg.TRAIN_LR
    lr_decay: float = cfg.TRAIN_LR_DECAY
    loss: str = cfg.TRAIN_LOSS
    seed: int = 0
    init_scale: float = cfg.INIT_SCALE
    momentum: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidInputError(f"need epochs >= 0 and batch_size >= 1, got {self.epochs}/{self.batch_size}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise InvalidInputError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.lr <= 0.0 or self.momentum < 0.0:
            raise InvalidInputError(f"need lr > 0 and momentum >= 0, got {self.lr}/{self.momentum}")
        if self.loss not in _LOSSES:
            raise InvalidInputError(f"unknown loss '{self.loss}'")

    @classmethod
    def from_settings(cls, settings: Any, seed: int) -> "TrainConfig":
        """Builds from a config.TrainSettings section."""
        return cls(seed=seed, **dataclasses.asdict(settings))


class EpochStats(NamedTuple):
    epoch: int
    train_loss: float
    train_accuracy: float
    eval_loss: Optional[float]
    eval_accuracy: Optional[float]
    lr: float


@dataclass
class TrainLog:
    epochs: List[EpochStats] = field(default_factory=list)

    HEADER = EpochStats._fields

    def __len__(self):
        return len(self.epochs)

    def csv_rows(self):
        return [tuple(stats) for stats in self.epochs]


# =============================================================================
# LOSSES
# =============================================================================

def _cross_entropy(out: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(out, y)


def _squared(out: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean over samples of the squared Euclidean output error."""
    return ((out - y) ** 2).reshape(len(out), -1).sum(dim=1).mean()


_LOSSES = {"cross_entropy": _cross_entropy, "mse": _squared}


def _target_tensor(targets: np.ndarray, loss: str, out_dim: int) -> torch.Tensor:
    if loss == "cross_entropy":
        return torch.as_tensor(np.asarray(targets).reshape(-1), dtype=torch.long)
    y = np.asarray(targets)
    if np.issubdtype(y.dtype, np.integer) and y.ndim == 1 and out_dim > 1:
        y = np.eye(out_dim)[y]
    return torch.as_tensor(y.reshape(len(y), out_dim), dtype=DTYPE)


def _correct(out: torch.Tensor, targets: np.ndarray) -> int:
    """Top-1 hits; single-output models are scored by rounding to the nearest label."""
    if out.shape[1] > 1:
        labels = np.asarray(targets).reshape(-1)
        return int((out.argmax(dim=1).numpy() == labels).sum())
    pred = np.rint(out.detach().numpy().reshape(-1))
    return int((pred == np.rint(np.asarray(targets, dtype=np.float64).reshape(-1))).sum())


# =============================================================================
# EVALUATION
# =============================================================================

def _check_data(model: Model, data: LabeledDataset):
    if len(data) == 0:
        raise InvalidInputError(f"{data.split} dataset is empty")
    if tuple(data.inputs.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(
            f"layer 0 expects samples of shape {tuple(model.input_shape)}, "
            f"{data.split} data has {tuple(data.inputs.shape[1:])}"
        )


def _evaluate_params(layers, params, data: LabeledDataset, loss: str) -> Tuple[float, float]:
    total_loss = 0.0
    hits = 0
    with torch.no_grad():
        for start in range(0, len(data), EVAL_CHUNK):
            xb = torch.as_tensor(data.inputs[start:start + EVAL_CHUNK], dtype=DTYPE)
            yb_raw = data.targets[start:start + EVAL_CHUNK]
            out = propagate(layers, xb, params)
            yb = _target_tensor(yb_raw, loss, out.shape[1])
            total_loss += float(_LOSSES[loss](out, yb)) * len(xb)
            hits += _correct(out, yb_raw)
    return total_loss / len(data), hits / len(data)


def evaluate(model: Model, data: LabeledDataset, loss: str = cfg.TRAIN_LOSS) -> Tuple[float, float]:
    """(mean loss, top-1 accuracy) over the whole dataset."""
    _check_data(model, data)
    if loss not in _LOSSES:
        raise InvalidInputError(f"unknown loss '{loss}'")
    params = [layer_tensors(layer) for layer in model.layers]
    return _evaluate_params(model.layers, params, data, loss)


# =============================================================================
# TRAINING
# =============================================================================

def _trainable(params) -> List[torch.Tensor]:
    return [p[name] for p in params for name in TRAINABLE if name in p]


def _export(model: Model, params) -> Model:
    layers = []
    for layer, p in zip(model.layers, params):
        updates = {name: p[name].detach().numpy().copy() for name in TRAINABLE if name in p}
        layers.append(dataclasses.replace(layer, **updates) if updates else layer)
    return model.with_layers(layers)


def _run_epoch(layers, params, optimizer, data, config, rng, epoch):
    n = len(data)
    order = rng.permutation(n)
    loss_fn = _LOSSES[config.loss]
    total_loss = 0.0
    hits = 0
    for b, start in enumerate(range(0, n, config.batch_size)):
        idx = order[start:start + config.batch_size]
        xb = torch.as_tensor(data.inputs[idx], dtype=DTYPE)
        optimizer.zero_grad()
        out = propagate(layers, xb, params)
        loss = loss_fn(out, _target_tensor(data.targets[idx], config.loss, out.shape[1]))
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss {float(loss)} at epoch {epoch + 1}, batch {b + 1}; lower the learning rate"
            )
        loss.backward()
        optimizer.step()
        total_loss += float(loss) * len(idx)
        hits += _correct(out.detach(), data.targets[idx])
    return total_loss / n, hits / n


def train(model: Model, data: LabeledDataset, config: TrainConfig,
          eval_data: Optional[LabeledDataset] = None, tag: str = "Train") -> Tuple[Model, TrainLog]:
    """Plain mini-batch SGD; batches reshuffled every epoch from the seeded generator."""
    _check_data(model, data)
    if config.epochs == 0:
        return model, TrainLog()

    rng = np.random.default_rng(config.seed)
    params = [layer_tensors(layer, requires_grad=True) for layer in model.layers]
    optimizer = torch.optim.SGD(_trainable(params), lr=config.lr, momentum=config.momentum)
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=config.lr_decay)
    history = TrainLog()
    start_time = time.time()

    for epoch in range(config.epochs):
        lr = optimizer.param_groups[0]["lr"]
        train_loss, train_acc = _run_epoch(model.layers, params, optimizer, data, config, rng, epoch)
        scheduler.step()
        eval_loss = eval_acc = None
        if eval_data is not None:
            eval_loss, eval_acc = _evaluate_params(model.layers, params, eval_data, config.loss)
        history.epochs.append(EpochStats(epoch + 1, train_loss, train_acc, eval_loss, eval_acc, lr))
        print_progress_bar(
            epoch + 1, config.epochs, prefix=f"[{tag}] ",
            suffix=f"loss {train_loss:.4f}", elapsed=time.time() - start_time,
        )
        log(f"[{tag}] Epoch {epoch + 1}/{config.epochs}: loss={train_loss:.6f} acc={train_acc:.4f} "
            f"eval={eval_loss} lr={lr:.4g}", "DEBUG")
    return _export(model, params), history


def fine_tune(pruned: Model, data: LabeledDataset, config: TrainConfig,
              eval_data: Optional[LabeledDataset] = None) -> Tuple[Model, TrainLog]:
    """Short retraining of a pruned model; same contract as train()."""
    log(f"[FineTune] {config.epochs} epochs at lr {config.lr} (decay {config.lr_decay})")
    return train(pruned, data, config, eval_data=eval_data, tag="FineTune")


# =============================================================================
# GRADIENT CHECK
# =============================================================================

class GradientCheck(NamedTuple):
    per_parameter: Dict[str, float]
    max_error: float


def _batch_loss(layers, params, xb, yb, loss) -> float:
    with torch.no_grad():
        return float(_LOSSES[loss](propagate(layers, xb, params), yb))


def _check_entries(layers, params, tensor, grad, xb, yb, loss, entries, step):
    worst = 0.0
    flat = tensor.data.view(-1)
    for e in entries:
        original = float(flat[e])
        flat[e] = original + step
        plus = _batch_loss(layers, params, xb, yb, loss)
        flat[e] = original - step
        minus = _batch_loss(layers, params, xb, yb, loss)
        flat[e] = original
        numeric = (plus - minus) / (2.0 * step)
        analytic = float(grad[e])
        scale = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst


def gradient_check(model: Model, data: LabeledDataset, loss: str = "mse",
                   step: float = 1e-5, max_entries: int = 25, seed: int = 0) -> GradientCheck:
    """Largest relative gap between autograd and central differences, per parameter tensor."""
    _check_data(model, data)
    params = [layer_tensors(layer, requires_grad=True) for layer in model.layers]
    xb = torch.as_tensor(data.inputs, dtype=DTYPE)
    out = propagate(model.layers, xb, params)
    yb = _target_tensor(data.targets, loss, out.shape[1])
    _LOSSES[loss](out, yb).backward()

    rng = np.random.default_rng(seed)
    errors = {}
    for idx, p in enumerate(params):
        for name in TRAINABLE:
            if name not in p:
                continue
            tensor = p[name]
            grad = tensor.grad.detach().reshape(-1).clone()
            count = tensor.numel()
            entries = rng.choice(count, size=min(max_entries, count), replace=False)
            errors[f"layer{idx}.{name}"] = _check_entries(
                model.layers, params, tensor, grad, xb, yb, loss, entries, step
            )
    worst = max(errors.values()) if errors else 0.0
    log(f"[Train] Gradient check: max relative error {worst:.2e}", "DEBUG")
    return GradientCheck(per_parameter=errors, max_error=worst)
