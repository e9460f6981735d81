"""
Data module for the ID pruning toolkit.
IDX image/label files, dataset export, the synthetic circle dataset and
pruning-set splitting.
"""
import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .errors import DataFormatError, InvalidInputError
from .models import (
    BLOB_SUFFIX, FullyConnected, Model, ReLU, read_checked_blob, read_manifest, validate_model,
)
from .utils import atomic_write_bytes, atomic_write_text, dumps_json, log

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"

SPLITS = ("train", "test", "prune")
DATASET_FORMAT = "IDDATA"
DATASET_VERSION = 1


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    inputs: np.ndarray
    targets: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise InvalidInputError(
                f"{len(self.inputs)} inputs but {len(self.targets)} targets"
            )
        if self.split not in SPLITS:
            raise InvalidInputError(f"unknown split '{self.split}'")

    def __len__(self):
        return len(self.inputs)

    def subset(self, indices, split: Optional[str] = None) -> "LabeledDataset":
        return LabeledDataset(
            inputs=self.inputs[indices], targets=self.targets[indices],
            split=split or self.split,
        )


@dataclass(frozen=True, eq=False)
class PruningSet:
    """Unlabeled inputs; the ID never sees targets."""

    inputs: np.ndarray
    source: str = "held_out_from_test"

    def __len__(self):
        return len(self.inputs)


# =============================================================================
# IDX FILES
# =============================================================================

def _read_raw(path) -> bytes:
    if not os.path.isfile(path):
        raise DataFormatError(f"{path}: file not found")
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise DataFormatError(f"{path}: corrupt gzip stream ({e})") from e
    return raw


def _parse_idx(path, magic, n_dims) -> np.ndarray:
    raw = _read_raw(path)
    header_len = 4 * (1 + n_dims)
    if len(raw) < header_len:
        raise DataFormatError(f"{path}: truncated IDX header")
    found, *dims = struct.unpack(">" + "I" * (1 + n_dims), raw[:header_len])
    if found != magic:
        raise DataFormatError(
            f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}"
        )
    count = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) < count:
        raise DataFormatError(f"{path}: truncated, expected {count} bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, count=count).reshape(dims)


def load_idx(images_path: str, labels_path: str, flatten: bool = True,
             split: str = "train") -> LabeledDataset:
    """Reads an IDX image/label pair (optionally gzip-compressed); pixels scaled to [0, 1]."""
    images = _parse_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DataFormatError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels"
        )
    n, rows, cols = images.shape
    inputs = images.astype(np.float64) / 255.0
    inputs = inputs.reshape(n, rows * cols) if flatten else inputs.reshape(n, 1, rows, cols)
    log(f"[Data] Loaded {n} {split} samples of {rows}x{cols} from {images_path}")
    return LabeledDataset(inputs=inputs, targets=labels.astype(np.int64), split=split)


def _write_maybe_gzip(path, payload):
    if path.endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    atomic_write_bytes(path, payload)


def write_idx(images, labels, images_path: str, labels_path: str) -> None:
    """Writes uint8 images (n, rows, cols) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.shape != (images.shape[0],):
        raise InvalidInputError(f"images {images.shape} and labels {labels.shape} do not pair up")
    _write_maybe_gzip(
        images_path,
        struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes(),
    )
    _write_maybe_gzip(
        labels_path,
        struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes(),
    )


# =============================================================================
# DATASET EXPORT
# =============================================================================

def save_dataset(dataset: LabeledDataset, path: str,
                 provenance: Optional[Dict[str, Any]] = None) -> None:
    """
    Writes `path` (JSON manifest) and `path + ".bin"`: inputs then targets,
    both little-endian float64, row-major.
    """
    inputs = np.ascontiguousarray(dataset.inputs, dtype="<f8")
    targets = np.asarray(dataset.targets)
    integer_targets = np.issubdtype(targets.dtype, np.integer)
    blob = inputs.tobytes() + np.ascontiguousarray(targets, dtype="<f8").tobytes()
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "split": dataset.split,
        "inputs_shape": list(inputs.shape),
        "targets_shape": list(targets.shape),
        "targets_dtype": "int64" if integer_targets else "float64",
        "provenance": provenance or {},
        "blob": os.path.basename(path) + BLOB_SUFFIX,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    atomic_write_bytes(path + BLOB_SUFFIX, blob)
    atomic_write_text(path, dumps_json(manifest))
    log(f"[Data] Exported {len(dataset)} {dataset.split} samples to {path}", "DEBUG")


def _manifest_shape(manifest, key, path) -> Tuple[int, ...]:
    try:
        return tuple(int(s) for s in manifest[key])
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"{path}: manifest field '{key}' is missing or malformed") from e


def load_dataset(path: str) -> LabeledDataset:
    """Reads a dataset written by `save_dataset`."""
    if not os.path.isfile(path):
        raise DataFormatError(f"{path}: dataset file not found")
    manifest = read_manifest(path, DATASET_FORMAT, DATASET_VERSION)
    blob = read_checked_blob(path, manifest)
    x_shape = _manifest_shape(manifest, "inputs_shape", path)
    y_shape = _manifest_shape(manifest, "targets_shape", path)
    n_x, n_y = int(np.prod(x_shape)), int(np.prod(y_shape))
    if 8 * (n_x + n_y) != len(blob):
        raise DataFormatError(f"{path}: shapes {x_shape} and {y_shape} do not match {len(blob)} blob bytes")
    values = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise DataFormatError(f"{path}: dataset holds non-finite values")
    targets = values[n_x:].reshape(y_shape)
    if manifest.get("targets_dtype") == "int64":
        targets = targets.astype(np.int64)
    try:
        return LabeledDataset(inputs=values[:n_x].reshape(x_shape), targets=targets,
                              split=manifest.get("split", "train"))
    except InvalidInputError as e:
        raise DataFormatError(f"{path}: {e}") from e


# =============================================================================
# SYNTHETIC CIRCLE DATA
# =============================================================================

@dataclass(frozen=True)
class CircleSpec:
    """n points on the unit circle labeled by `num_vectors` random half-planes."""

    n: int
    num_vectors: int = 2
    seed: int = 0
    vector_seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.num_vectors < 1:
            raise InvalidInputError(f"circle spec needs n >= 1 and num_vectors >= 1, got {self}")


def circle_vectors(num_vectors: int, vector_seed: int = 0) -> np.ndarray:
    """Unit vectors, one per row."""
    angles = np.random.default_rng(vector_seed).uniform(0.0, 2.0 * np.pi, num_vectors)
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def circle_signs(num_vectors: int) -> np.ndarray:
    """+1, -1, +1, ... in draw order."""
    return np.where(np.arange(num_vectors) % 2 == 0, 1.0, -1.0)


def circle_labels(x, vectors) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    vectors = np.asarray(vectors, dtype=np.float64)
    hits = (x @ vectors.T > 0).astype(np.float64)
    return hits @ circle_signs(len(vectors))


def generate_circle(spec: CircleSpec, split: str = "train") -> LabeledDataset:
    """Regression targets of shape (n, 1) for squared loss."""
    rng = np.random.default_rng(spec.seed)
    phi = rng.uniform(0.0, 2.0 * np.pi, spec.n)
    x = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    labels = circle_labels(x, circle_vectors(spec.num_vectors, spec.vector_seed))
    return LabeledDataset(inputs=x, targets=labels.reshape(-1, 1), split=split)


def circle_pair_network(vectors, w: float = 100.0, delta: float = 1.0, b: float = 0.0) -> Model:
    """
    Hand-built width-2J ReLU network labeling circle data. Each vector gets a
    neuron pair with input weight w*v and biases -b + delta/2, -b - delta/2;
    the pair difference, scaled by sign/delta, is a step of height sign at
    cos(angle to v) = b/w.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    j = len(vectors)
    if w <= b or delta <= 0:
        raise InvalidInputError(f"pair construction needs w > b and delta > 0 (w={w}, b={b}, delta={delta})")
    weight = np.repeat(w * vectors.T, 2, axis=1)
    bias = np.tile([-b + delta / 2.0, -b - delta / 2.0], j)
    signs = np.repeat(circle_signs(j), 2) * np.tile([1.0, -1.0], j) / delta
    model = Model(
        layers=(
            FullyConnected(weight=weight, bias=bias),
            ReLU(),
            FullyConnected(weight=signs.reshape(-1, 1), bias=np.zeros(1)),
        ),
        name="circle_pairs",
        input_shape=(2,),
        num_classes=1,
    )
    return validate_model(model)


# =============================================================================
# SPLITTING
# =============================================================================

def split_pruning_set(train: LabeledDataset, test: LabeledDataset, prune_size: int,
                      policy: str = "held_out_from_test",
                      seed: int = 0) -> Tuple[LabeledDataset, LabeledDataset, PruningSet]:
    """Carves an unlabeled pruning set out of the test split (default) or the train split."""
    sources = {"held_out_from_test": test, "from_train": train}
    if policy not in sources:
        raise InvalidInputError(f"unknown pruning-set policy '{policy}'")
    source = sources[policy]
    if prune_size < 0 or (prune_size > 0 and prune_size >= len(source)):
        raise InvalidInputError(
            f"insufficient data: pruning set of {prune_size} from a {policy} pool of {len(source)}"
        )
    if prune_size == 0:
        return train, test, PruningSet(inputs=source.inputs[:0], source=policy)

    order = np.random.default_rng(seed).permutation(len(source))
    chosen = np.sort(order[:prune_size])
    rest = np.sort(order[prune_size:])
    prune = PruningSet(inputs=source.inputs[chosen].copy(), source=policy)
    remaining = source.subset(rest)
    log(f"[Data] Pruning set: {prune_size} samples {policy.replace('_', ' ')} "
        f"({len(remaining)} left in that split)")
    if policy == "held_out_from_test":
        return train, remaining, prune
    return remaining, test, prune

