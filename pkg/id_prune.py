"""
ID Prune - Interpolative Decomposition Pruning Toolkit
======================================================
Structured pruning of feedforward networks with interpolative decompositions.

Commands:
- train     Train a model from the configured architecture and dataset
- prune     Prune a trained model (ID or magnitude baseline) and report
- finetune  Fine-tune a pruned model
- eval      Evaluate loss and accuracy on the test split
- flops     Count per-sample FLOPs (and the reduction against a baseline)
- inspect   Export per-layer rank-decay profiles of the activations

Every artifact records the config hash, seed and toolkit version.
"""

import os
import sys

# Ensure the root directory is in sys.path for internal module imports
sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))

import argparse  # noqa: E402

import numpy as np  # noqa: E402

from modules import __version__, config  # noqa: E402
from modules import data as datasets  # noqa: E402
from modules import nn, pruning, theory, training, utils  # noqa: E402
from modules.errors import ConfigError, IdPruneError  # noqa: E402
from modules.linalg import RankCriterion, singular_value_profile, spectral_norm  # noqa: E402
from modules.models import build_model, load_model, save_model  # noqa: E402
from modules.utils import log  # noqa: E402

MODEL_SUFFIX = ".idnet"
DATASET_SUFFIX = ".iddata"


# =============================================================================
# ARGUMENTS
# =============================================================================

def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _layer_fractions(text):
    pairs = {}
    for item in text.split(","):
        if not item.strip():
            continue
        key, _, value = item.partition("=")
        pairs[int(key)] = float(value)
    return pairs


def _common_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=config.DEFAULT_CONFIG_PATH, help="YAML/JSON run configuration")
    common.add_argument("--model", help="Input model (IDNET v1 manifest)")
    common.add_argument("--baseline", help="Baseline model for FLOPs comparison")
    common.add_argument("--output-dir", dest="output_dir", help="Directory for all artifacts")
    common.add_argument("--seed", type=int, help="Seed for data generation, splits and training")
    common.add_argument("--threads", type=int, default=1, help="torch threads (1 keeps runs bitwise reproducible)")
    common.add_argument("--method", choices=config.PRUNE_METHODS, help="Pruning method")
    common.add_argument("--fraction", type=float, help="Fraction alpha of units pruned per layer")
    common.add_argument("--epsilon", type=float, help="ID accuracy target instead of a fraction")
    common.add_argument("--certify", action="store_true", default=None,
                        help="Grow k until the exact trailing norm meets epsilon")
    common.add_argument("--skip-layers", dest="skip_layers", type=_int_list,
                        help="Comma-separated layer indices never pruned")
    common.add_argument("--layer-fractions", dest="layer_fractions", type=_layer_fractions,
                        help="Per-layer fractions, e.g. '0=0.25,3=0.5'")
    common.add_argument("--prune-set-size", dest="prune_set_size", type=int, help="Pruning-set sample count")
    common.add_argument("--prune-policy", dest="prune_policy", choices=config.PRUNE_POLICIES,
                        help="Where the pruning set is drawn from")
    common.add_argument("--epochs", type=int, help="Training (or fine-tuning) epochs")
    common.add_argument("--export-data", dest="export_data", action="store_true", default=None,
                        help="Also write the train and test splits as IDDATA files (train only)")
    return common


def build_parser():
    parser = argparse.ArgumentParser(
        description="Interpolative decomposition pruning toolkit"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_parser()
    for name, help_text in (
        ("train", "Train a model"),
        ("prune", "Prune a trained model"),
        ("finetune", "Fine-tune a pruned model"),
        ("eval", "Evaluate a model on the test split"),
        ("flops", "Count per-sample FLOPs"),
        ("inspect", "Export per-layer rank profiles"),
    ):
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def resolve_run_config(args):
    """Config file values overridden by explicit flags."""
    run = config.load_config(args.config, log)
    overrides = {
        key: getattr(args, key, None)
        for key in ("model", "baseline", "output_dir", "seed", "method", "fraction",
                    "epsilon", "certify", "skip_layers", "layer_fractions",
                    "prune_set_size", "prune_policy", "export_data")
    }
    overrides["finetune_epochs" if args.command == "finetune" else "epochs"] = args.epochs
    return config.apply_overrides(run, overrides, log)


# =============================================================================
# SHARED STEPS
# =============================================================================

class Run:
    """Resolved settings plus the provenance block stamped on every artifact."""

    def __init__(self, settings):
        self.settings = settings
        self.config_hash = settings.digest()
        self.provenance = utils.provenance(self.config_hash, settings.seed)
        self.pending = []

    def out_path(self, filename):
        return os.path.join(self.settings.output_dir, filename)

    def stage(self, writer, *args):
        """Queues an artifact; nothing is written until every computation succeeded."""
        self.pending.append((writer, args))

    def flush(self):
        utils.ensure_dir(self.settings.output_dir)
        for writer, args in self.pending:
            writer(*args)
            log(f"[Output] Wrote {args[1]}", "DEBUG")
        self.pending.clear()

    def stage_json(self, payload, filename):
        payload = dict(payload, provenance=self.provenance)
        self.stage(utils.write_json, payload, self.out_path(filename))

    def stage_csv(self, filename, header, rows):
        self.stage(_write_csv, self.provenance, self.out_path(filename), header, rows)


def _write_csv(meta, path, header, rows):
    utils.write_csv(path, header, rows, meta=meta)


def _require_file(path, what):
    if not path:
        raise ConfigError(f"{what} path is not set")
    if not os.path.isfile(path):
        raise ConfigError(f"{what} not found: {path}")


def validate_paths(settings, command):
    """Checks every input path before any work starts."""
    if settings.data.source == "idx" and command in ("train", "prune", "finetune", "eval", "inspect"):
        for attr in ("train_images", "train_labels", "test_images", "test_labels"):
            _require_file(getattr(settings.data, attr), f"data.{attr}")
    if command != "train":
        _require_file(settings.model_path, "model")
        _require_file(settings.model_path + ".bin", "model tensor file")
    if settings.baseline_path:
        _require_file(settings.baseline_path, "baseline model")


def load_datasets(settings):
    """(train, test, pruning set) per the data section."""
    data = settings.data
    if data.source == "circle":
        train = datasets.generate_circle(datasets.CircleSpec(
            n=data.circle_train_size, num_vectors=data.circle_vectors,
            seed=settings.seed, vector_seed=settings.seed,
        ), split="train")
        test = datasets.generate_circle(datasets.CircleSpec(
            n=data.circle_test_size, num_vectors=data.circle_vectors,
            seed=settings.seed + 1, vector_seed=settings.seed,
        ), split="test")
    else:
        train = datasets.load_idx(data.train_images, data.train_labels, data.flatten, "train")
        test = datasets.load_idx(data.test_images, data.test_labels, data.flatten, "test")
    return datasets.split_pruning_set(train, test, data.prune_set_size, data.prune_policy, settings.seed)


def _num_classes(train):
    if np.issubdtype(train.targets.dtype, np.integer):
        return int(train.targets.max()) + 1
    return int(np.prod(train.targets.shape[1:])) or 1


def _model_stem(path):
    base = os.path.basename(path)
    return base[:-len(MODEL_SUFFIX)] if base.endswith(MODEL_SUFFIX) else os.path.splitext(base)[0]


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_train(run):
    s = run.settings
    if not s.architecture:
        raise ConfigError("'architecture' is empty; nothing to train")
    train_set, test_set, _ = load_datasets(s)
    model = build_model(
        s.architecture, train_set.inputs.shape[1:], _num_classes(train_set),
        seed=s.seed, init_scale=s.train.init_scale, name=s.model_name,
    )
    tc = training.TrainConfig.from_settings(s.train, s.seed)
    log(f"[Train] {s.model_name}: {len(train_set)} samples, {tc.epochs} epochs, lr {tc.lr}")
    model, history = training.train(model, train_set, tc, eval_data=test_set)
    test_loss, test_acc = training.evaluate(model, test_set, tc.loss)
    log(f"[Train] Test loss {test_loss:.6f}, accuracy {test_acc:.4f}")
    run.stage(save_model, model, run.out_path(s.model_name + MODEL_SUFFIX), run.provenance)
    run.stage_csv(s.model_name + "_train_log.csv", training.TrainLog.HEADER, history.csv_rows())
    if s.data.export:
        for split in (train_set, test_set):
            run.stage(datasets.save_dataset, split,
                      run.out_path(f"{s.model_name}_{split.split}{DATASET_SUFFIX}"), run.provenance)


def build_prune_config(settings, pruning_set):
    p = settings.prune
    criterion = None
    fraction = p.fraction
    if p.epsilon is not None:
        criterion = RankCriterion.tolerance(p.epsilon, p.certify)
        fraction = None
    return pruning.PruneConfig(
        pruning_set=pruning_set.inputs,
        fraction=fraction,
        criterion=criterion,
        layer_fractions=dict(p.layer_fractions),
        skip_layers=frozenset(p.skip_layers),
        pruning_set_source=pruning_set.source,
    )


def _bound_report(settings, model, pruned, report, x):
    """Risk-bound quantities, for one-hidden-layer ID prunes only."""
    if report.method != "id" or [layer.kind for layer in model.layers] != ["fc", "relu", "fc"]:
        return None
    row = report.layers[0]
    epsilon = settings.prune.epsilon
    if epsilon is None:
        z_norm = spectral_norm(nn.forward_prefix(model, x, 1))
        epsilon = (row.achieved_error or 0.0) / z_norm if z_norm > 0 else 0.0
    bounds = theory.theorem1_report(
        model, pruned, x, epsilon, delta=settings.theory.delta, zeta=settings.theory.zeta,
        r0_estimate=settings.theory.r0_estimate, t_norm=row.t_norm,
    )
    return bounds.to_dict()


_PRUNERS = {"id": pruning.prune_model, "magnitude": pruning.magnitude_prune_model}


def cmd_prune(run):
    s = run.settings
    model = nn.absorb_batchnorm(load_model(s.model_path))
    _, test_set, pruning_set = load_datasets(s)
    prune_config = build_prune_config(s, pruning_set)
    log(f"[Prune] {s.prune.method} on {len(pruning_set)} pruning samples ({pruning_set.source})")
    pruned, report = _PRUNERS[s.prune.method](model, prune_config)

    loss = s.train.loss
    base_loss, base_acc = training.evaluate(model, test_set, loss)
    pruned_loss, pruned_acc = training.evaluate(pruned, test_set, loss)
    report.metrics = {
        "loss": loss, "baseline_test_loss": base_loss, "baseline_test_accuracy": base_acc,
        "pruned_test_loss": pruned_loss, "pruned_test_accuracy": pruned_acc,
    }
    report.theory = _bound_report(s, model, pruned, report, pruning_set.inputs)
    log(f"[Prune] Accuracy {base_acc:.4f} -> {pruned_acc:.4f} before fine-tuning; "
        f"FLOPs reduction {report.flops_reduction:.1%}")
    print(f"accuracy_before_ft={pruned_acc:.6f} baseline_accuracy={base_acc:.6f} "
          f"flops_reduction={report.flops_reduction:.6f}")

    stem = f"{_model_stem(s.model_path)}_{s.prune.method}"
    run.stage(save_model, pruned, run.out_path(stem + MODEL_SUFFIX), run.provenance)
    run.stage_json({"report": report.to_dict(), "config": s.to_dict()}, stem + "_report.json")
    run.stage_csv(stem + "_report.csv", pruning.CSV_HEADER, report.csv_rows())


def cmd_finetune(run):
    s = run.settings
    model = load_model(s.model_path)
    train_set, test_set, _ = load_datasets(s)
    tc = training.TrainConfig.from_settings(s.finetune, s.seed)
    before = training.evaluate(model, test_set, tc.loss)
    tuned, history = training.fine_tune(model, train_set, tc, eval_data=test_set)
    after = training.evaluate(tuned, test_set, tc.loss)
    log(f"[FineTune] Accuracy {before[1]:.4f} -> {after[1]:.4f}")
    print(f"accuracy_before_ft={before[1]:.6f} accuracy_after_ft={after[1]:.6f}")

    stem = _model_stem(s.model_path) + "_ft"
    run.stage(save_model, tuned, run.out_path(stem + MODEL_SUFFIX), run.provenance)
    run.stage_csv(stem + "_log.csv", training.TrainLog.HEADER, history.csv_rows())
    run.stage_json({
        "loss": tc.loss, "test_loss_before": before[0], "test_accuracy_before": before[1],
        "test_loss_after": after[0], "test_accuracy_after": after[1],
    }, stem + "_eval.json")


def cmd_eval(run):
    s = run.settings
    model = load_model(s.model_path)
    _, test_set, _ = load_datasets(s)
    loss, accuracy = training.evaluate(model, test_set, s.train.loss)
    print(f"loss={loss:.6f} accuracy={accuracy:.6f}")
    run.stage_json({"model": s.model_path, "loss_fn": s.train.loss, "loss": loss,
                    "accuracy": accuracy, "samples": len(test_set)},
                   _model_stem(s.model_path) + "_eval.json")


def cmd_flops(run):
    s = run.settings
    model = load_model(s.model_path)
    report = nn.count_flops(model)
    payload = {"model": s.model_path, "per_layer": report.per_layer, "total": report.total}
    line = f"flops={report.total}"
    if s.baseline_path:
        base = nn.count_flops(load_model(s.baseline_path))
        payload.update(baseline=s.baseline_path, baseline_total=base.total,
                       flops_reduction=nn.flops_reduction(base, report))
        line += f" baseline_flops={base.total} flops_reduction={payload['flops_reduction']:.6f}"
    print(line)
    run.stage_json(payload, _model_stem(s.model_path) + "_flops.json")


def cmd_inspect(run):
    s = run.settings
    model = nn.absorb_batchnorm(load_model(s.model_path))
    _, _, pruning_set = load_datasets(s)
    if len(pruning_set) == 0:
        raise ConfigError("inspect needs a nonempty pruning set (data.prune_set_size > 0)")
    stem = _model_stem(s.model_path)
    plans = pruning.plan_layers(model, frozenset(s.prune.skip_layers))
    for plan in plans:
        if plan.forced_skip:
            log(f"[Inspect] Layer {plan.index}: not prunable ({plan.forced_skip})", "DEBUG")
            continue
        z = nn.forward_prefix(model, pruning_set.inputs, plan.group_end)
        mat = nn.reshape_channels(z) if z.ndim == 4 else z
        profile = singular_value_profile(mat)
        if profile and profile[0].proxy == 0.0:
            log(f"[Inspect] Layer {plan.index}: activations are all zero on the pruning set", "WARNING")
        run.stage_csv(f"{stem}_profile_layer{plan.index}.csv",
                      ("k", "proxy", "trailing_norm"), [tuple(p) for p in profile])
        log(f"[Inspect] Layer {plan.index}: {len(profile)} profile points")


COMMANDS = {
    "train": cmd_train,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "flops": cmd_flops,
    "inspect": cmd_inspect,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        nn.configure_threads(args.threads)
        settings = resolve_run_config(args)
        validate_paths(settings, args.command)
        run = Run(settings)
        utils.print_banner(settings.seed, run.config_hash)
        COMMANDS[args.command](run)
        run.flush()
    except (IdPruneError, OSError) as e:
        log(f"[Error] {args.command}: {e}", "ERROR", to_console=False)
        print(f"error: {e}", file=sys.stderr)
        return 1
    log(f"[Done] {args.command} finished.")
    return 0


if __name__ == "__main__":
    sys.exit(main())
