"""
Configuration module for the ID pruning toolkit.
Holds the numerical and experimental defaults and loads run settings from
config.yaml (any JSON document is also accepted since JSON is valid YAML).
"""
import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

import yaml

from .errors import ConfigError


# =============================================================================
# CONSTANTS & DEFAULTS
# =============================================================================

LOG_FILE: Optional[str] = "id_prune.log"
DEBUG_LOGGING = False  # Controls detailed console output

# Linear algebra
SPECTRAL_TOL = 1e-6          # Relative tolerance of the power iteration
SPECTRAL_MAX_ITER = 1000
SINGULARITY_CUTOFF = 1e-14   # |r_kk| / |r_11| below this marks numerical rank
NORM_RECOMPUTE_RATIO = 0.1   # Downdated column norm vs last exact norm

# Training (initial networks)
TRAIN_EPOCHS = 50
TRAIN_BATCH_SIZE = 128
TRAIN_LR = 0.3
TRAIN_LR_DECAY = 0.9
TRAIN_LOSS = "cross_entropy"
INIT_SCALE = 1.0  # std = INIT_SCALE / sqrt(fan_in); no published value, a guess

# Fine-tuning (one hidden layer settings)
FINETUNE_EPOCHS = 10
FINETUNE_LR = 0.2
FINETUNE_LR_DECAY = 0.7

# Pruning
PRUNE_METHOD = "id"
PRUNE_FRACTION = 0.5
PRUNE_SET_SIZE = 1000
PRUNE_POLICY = "held_out_from_test"

# Risk bounds
THEORY_DELTA = 0.05
THEORY_ZETA = 1.0  # Uncalibrated: the constant is never pinned down

DEFAULT_CONFIG_PATH = "config.yaml"

PRUNE_METHODS = ("id", "magnitude")
PRUNE_POLICIES = ("held_out_from_test", "from_train")
DATA_SOURCES = ("circle", "idx")
LOSSES = ("cross_entropy", "mse")


# =============================================================================
# RUN SETTINGS
# =============================================================================

@dataclass
class DataSettings:
    source: str = "circle"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    flatten: bool = True
    circle_train_size: int = 2000
    circle_test_size: int = 2000
    circle_vectors: int = 2
    prune_set_size: int = PRUNE_SET_SIZE
    prune_policy: str = PRUNE_POLICY
    export: bool = False


@dataclass
class TrainSettings:
    epochs: int = TRAIN_EPOCHS
    batch_size: int = TRAIN_BATCH_SIZE
    lr: float = TRAIN_LR
    lr_decay: float = TRAIN_LR_DECAY
    loss: str = TRAIN_LOSS
    init_scale: float = INIT_SCALE
    momentum: float = 0.0


@dataclass
class PruneSettings:
    method: str = PRUNE_METHOD
    fraction: Optional[float] = PRUNE_FRACTION
    epsilon: Optional[float] = None
    certify: bool = False
    skip_layers: List[int] = field(default_factory=list)
    layer_fractions: Dict[int, float] = field(default_factory=dict)


@dataclass
class TheorySettings:
    delta: float = THEORY_DELTA
    zeta: float = THEORY_ZETA
    r0_estimate: Optional[float] = None


@dataclass
class RunConfig:
    """Fully resolved settings of one CLI invocation."""

    model_path: Optional[str] = None
    baseline_path: Optional[str] = None
    output_dir: str = "runs"
    seed: int = 0
    model_name: str = "idnet"
    architecture: List[Dict[str, Any]] = field(default_factory=list)
    data: DataSettings = field(default_factory=DataSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    finetune: TrainSettings = field(default_factory=lambda: TrainSettings(
        epochs=FINETUNE_EPOCHS, lr=FINETUNE_LR, lr_decay=FINETUNE_LR_DECAY
    ))
    prune: PruneSettings = field(default_factory=PruneSettings)
    theory: TheorySettings = field(default_factory=TheorySettings)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def digest(self) -> str:
        """sha256 of the canonical JSON form (output location excluded); recorded in every artifact."""
        content = self.to_dict()
        content.pop("output_dir")
        canonical = json.dumps(content, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# =============================================================================
# LOADING LOGIC
# =============================================================================

def _merge_section(settings: Any, section: Any, name: str) -> Any:
    """Returns a copy of a settings dataclass updated from a YAML mapping."""
    if section is None:
        return settings
    if not isinstance(section, dict):
        raise ConfigError(f"Section '{name}' must be a mapping.")
    known = {f.name for f in fields(settings)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in section '{name}': {', '.join(unknown)}")
    merged = copy.deepcopy(settings)
    for key, value in section.items():
        setattr(merged, key, value)
    return merged


def _load_logging_settings(conf: Dict[str, Any], logger_func: Any) -> None:
    global DEBUG_LOGGING, LOG_FILE
    if "debug_logging" in conf:
        DEBUG_LOGGING = bool(conf["debug_logging"])
    if "log_file" in conf:
        LOG_FILE = conf["log_file"] or None
        logger_func(f"[Config] Log file: {LOG_FILE}", "DEBUG")


def _load_top_level(run: RunConfig, conf: Dict[str, Any], logger_func: Any) -> None:
    for key in ("model_path", "baseline_path", "output_dir", "seed", "model_name"):
        if key in conf:
            setattr(run, key, conf[key])
    if "architecture" in conf:
        if not isinstance(conf["architecture"], list):
            raise ConfigError("'architecture' must be a list of layer mappings.")
        run.architecture = list(conf["architecture"])
        logger_func(f"[Config] Architecture: {len(run.architecture)} layer specs")


def _load_sections(run: RunConfig, conf: Dict[str, Any], logger_func: Any) -> None:
    run.data = _merge_section(run.data, conf.get("data"), "data")
    run.train = _merge_section(run.train, conf.get("train"), "train")
    run.finetune = _merge_section(run.finetune, conf.get("finetune"), "finetune")
    run.prune = _merge_section(run.prune, conf.get("prune"), "prune")
    run.theory = _merge_section(run.theory, conf.get("theory"), "theory")
    run.prune.layer_fractions = {
        int(k): float(v) for k, v in run.prune.layer_fractions.items()
    }
    logger_func(
        f"[Config] Data: {run.data.source} | Prune: {run.prune.method} "
        f"(fraction={run.prune.fraction}, epsilon={run.prune.epsilon})"
    )


def validate_run_config(run: RunConfig) -> RunConfig:
    """Checks enumerated fields; path existence is checked by each command."""
    if run.data.source not in DATA_SOURCES:
        raise ConfigError(f"data.source must be one of {DATA_SOURCES}, got '{run.data.source}'")
    if run.data.prune_policy not in PRUNE_POLICIES:
        raise ConfigError(f"data.prune_policy must be one of {PRUNE_POLICIES}")
    if run.prune.method not in PRUNE_METHODS:
        raise ConfigError(f"prune.method must be one of {PRUNE_METHODS}, got '{run.prune.method}'")
    for section in (run.train, run.finetune):
        if section.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got '{section.loss}'")
    if run.prune.fraction is None and run.prune.epsilon is None:
        raise ConfigError("prune needs either 'fraction' or 'epsilon'.")
    return run


def load_config(path: Optional[str], logger_func: Any) -> RunConfig:
    """Loads run settings from a YAML/JSON file, falling back to defaults."""
    run = RunConfig()
    config_path = path or DEFAULT_CONFIG_PATH
    if not os.path.exists(config_path):
        logger_func(
            f"[Config] {config_path} not found. Using internal defaults.",
            "WARNING"
        )
        return run

    try:
        with open(config_path, "r", encoding="utf-8") as f:
            conf = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse {config_path}: {e}") from e
    if not isinstance(conf, dict):
        raise ConfigError(f"{config_path} must contain a mapping at top level.")

    _load_logging_settings(conf, logger_func)
    _load_top_level(run, conf, logger_func)
    _load_sections(run, conf, logger_func)
    return validate_run_config(run)


_OVERRIDE_TARGETS = {
    "model": ("", "model_path"),
    "baseline": ("", "baseline_path"),
    "output_dir": ("", "output_dir"),
    "seed": ("", "seed"),
    "method": ("prune", "method"),
    "fraction": ("prune", "fraction"),
    "epsilon": ("prune", "epsilon"),
    "certify": ("prune", "certify"),
    "skip_layers": ("prune", "skip_layers"),
    "layer_fractions": ("prune", "layer_fractions"),
    "prune_set_size": ("data", "prune_set_size"),
    "prune_policy": ("data", "prune_policy"),
    "export_data": ("data", "export"),
    "epochs": ("train", "epochs"),
    "finetune_epochs": ("finetune", "epochs"),
}


def apply_overrides(run: RunConfig, overrides: Dict[str, Any], logger_func: Any) -> RunConfig:
    """Returns a copy of `run` with command-line flag values applied."""
    merged = copy.deepcopy(run)
    applied = []
    for flag, value in overrides.items():
        if value is None or flag not in _OVERRIDE_TARGETS:
            continue
        section, attr = _OVERRIDE_TARGETS[flag]
        target = getattr(merged, section) if section else merged
        setattr(target, attr, value)
        applied.append(flag)
    # An explicit epsilon switches the criterion away from the default fraction
    if overrides.get("epsilon") is not None and overrides.get("fraction") is None:
        merged.prune.fraction = None
    if applied:
        logger_func(f"[Config] Flag overrides: {', '.join(applied)}")
    return validate_run_config(merged)
