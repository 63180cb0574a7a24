"""Command-line entry point.

Configuration precedence, lowest to highest: built-in defaults, the JSON file
given with ``--config``, then command-line flags.  Unknown configuration keys
are rejected.

Exit codes: 0 success, 2 usage, 3 validation (bad config or inputs), 4 runtime.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import dataset as ds
from .errors import (CheckpointError, ContractViolation, DatasetError, EvostackError,
                     ValidationError)
from .evolution import EvolutionConfig, FitnessCache, run_to_directory
from .fitness import CvEvaluator, CvTrainConfig, SyntheticEvaluator, SyntheticLandscape, head_for
from .genetic_ops import OperatorConfig
from .metrics import (ConfusionCounts, binary_metrics, multiclass_summary, write_comparison_csv,
                      write_metrics_csv)
from .nn.backbone import Backbone
from .nn.training import decisions
from .search_space import Chromosome, FixedHyperparams, SearchSpace, load_architecture
from .stacknet import (HyperGrid, MetaTrainConfig, StackNetModel, engineer_features, load_bundle,
                       predict, predict_batch, probability_matrix, save_bundle,
                       train_binary_models, train_meta)

logger = logging.getLogger("evostack")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4

_DESK_FIXED = FixedHyperparams(hidden_dim=32, embed_dim=64, image_size=32, patch_size=8,
                               channels=3)

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "jobs": 1,
    "synth": {"classes": 6, "items_per_class": 60, "image_size": 32, "channels": 3,
              "noise_level": 0.1, "class_names": None},
    "split": [0.5, 0.25, 0.25],
    "search_space": SearchSpace((2, 4), (8, 16), (0.1, 0.1), (1, 3), _DESK_FIXED).to_json(),
    "evolution": {"max_gens": 20, "pop_size": 6,
                  "operator_config": {"p_cross": 0.8, "p_mutate": 0.2,
                                      "mutation_type_probs": [0.7, 0.2, 0.1],
                                      "tournament_size": 2}},
    "landscape": {"target": [[4, 16, 0.1], [4, 8, 0.1], [4, 8, 0.1]],
                  "length_weight": 1.0, "gene_weight": 1.0},
    "cv_train": {"folds": 5, "epochs": 8, "learning_rate": 0.01, "momentum": 0.9,
                 "batch_size": 16},
    "hyper_grid": {"learning_rates": [0.01, 0.001], "momenta": [0.9], "batch_sizes": [16, 32],
                   "fold_counts": [5], "strategies": ["FU", "GU"]},
    "binary_epochs": 10,
    "meta_train": {"hidden": [1024, 512, 256], "learning_rate": 0.0005, "batch_size": 16,
                   "epochs": 60, "momentum": 0.9, "gamma": 2.0, "alpha": 1.0},
    "backbone": {"widths": [16, 32, 64, 128]},
}
# Values that are free-form rather than nested sections.
_LEAVES = {"synth.class_names", "landscape.target", "search_space.extra_choices"}


class UsageError(Exception):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    if not isinstance(override, dict):
        raise ValidationError(f"config section {path or '<root>'} must be an object")
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ValidationError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and where not in _LEAVES:
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_run_config(path: str | None, seed: int | None = None,
                    jobs: int | None = None) -> dict:
    """Defaults overlaid with the config file, then with flag values."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON: {exc}") from None
        cfg = _merge(cfg, user)
    if seed is not None:
        cfg["seed"] = seed
    if jobs is not None:
        cfg["jobs"] = jobs
    if not isinstance(cfg["seed"], int) or not 0 <= cfg["seed"] < 2**64:
        raise ValidationError("seed must be an unsigned 64-bit integer")
    if not isinstance(cfg["jobs"], int) or cfg["jobs"] < 1:
        raise ValidationError("jobs must be a positive integer")
    return cfg


# --- config section builders ---------------------------------------------------

def _space(cfg) -> SearchSpace:
    return SearchSpace.from_json(cfg["search_space"])


def _evolution(cfg, max_gens=None, pop_size=None) -> EvolutionConfig:
    e = cfg["evolution"]
    return EvolutionConfig(max_gens if max_gens is not None else e["max_gens"],
                           pop_size if pop_size is not None else e["pop_size"],
                           OperatorConfig(**{**e["operator_config"],
                                             "mutation_type_probs": tuple(
                                                 e["operator_config"]["mutation_type_probs"])}),
                           seed=cfg["seed"], parallel_evaluations=cfg["jobs"])


def _grid(cfg) -> HyperGrid:
    return HyperGrid(**{k: tuple(v) for k, v in cfg["hyper_grid"].items()})


def _meta_cfg(cfg, epochs=None) -> MetaTrainConfig:
    m = dict(cfg["meta_train"])
    if epochs is not None:
        m["epochs"] = epochs
    return MetaTrainConfig(**{**m, "hidden": tuple(m["hidden"])}, seed=cfg["seed"])


# --- helpers -------------------------------------------------------------------

def _prepare_output(path: Path, overwrite: bool) -> None:
    """Refuse to clobber a non-empty output directory unless asked to."""
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not overwrite:
            raise ValidationError(f"{path} already exists; pass --overwrite to replace it")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=False))


def _check_image_shape(data: ds.TensorDataset, fixed: FixedHyperparams) -> None:
    want = (fixed.channels, fixed.image_size, fixed.image_size)
    if data.images.shape[1:] != want:
        raise ValidationError(f"images are {data.images.shape[1:]}, architecture expects {want}")


def _load_arch(args) -> tuple[Chromosome, FixedHyperparams]:
    path = Path(args.arch)
    if path.is_dir():
        path = path / "best.arch.json"
    if not path.exists():
        raise ValidationError(f"architecture file {path} not found")
    return load_architecture(path)


# --- commands --------------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    s = dict(cfg["synth"])
    for flag, key in (("classes", "classes"), ("items_per_class", "items_per_class"),
                      ("image_size", "image_size"), ("channels", "channels"),
                      ("noise", "noise_level")):
        if getattr(args, flag) is not None:
            s[key] = getattr(args, flag)
    if s.get("class_names") is not None:
        s["class_names"] = tuple(s["class_names"])
    else:
        s.pop("class_names")
    if isinstance(s["items_per_class"], list):
        s["items_per_class"] = tuple(s["items_per_class"])
    spec = ds.SynthSpec(**s, seed=cfg["seed"])
    data = ds.synth_generate(spec)
    out = Path(args.out)
    _prepare_output(out, args.overwrite)
    summary = {"n": len(data), "channels": spec.channels, "height": spec.image_size,
               "width": spec.image_size, "classes": data.label_width,
               "counts": np.bincount(data.targets, minlength=data.label_width).tolist()}
    if args.split:
        fractions = [float(x) for x in args.split.split(",")] if args.split != "default" \
            else cfg["split"]
        names = ["train", "meta", "test"] if len(fractions) == 3 else \
            [f"part{i}" for i in range(len(fractions))]
        parts = ds.split_dataset(data, fractions, cfg["seed"])
        for name, part in zip(names, parts):
            ds.save(part, out / name)
        summary["splits"] = {name: len(part) for name, part in zip(names, parts)}
    else:
        ds.save(data, out)
    _print_json(summary)
    return EXIT_OK


def cmd_evolve(args, cfg) -> int:
    space = _space(cfg)
    ecfg = _evolution(cfg, args.generations, args.pop_size)
    if args.fitness == "synthetic":
        land = cfg["landscape"]
        target = Chromosome.from_tuples([tuple(g) for g in land["target"]])
        space.validate(target)
        evaluator = SyntheticEvaluator(SyntheticLandscape(target, land["length_weight"],
                                                          land["gene_weight"]), cfg["seed"])
    else:
        if not args.data:
            raise UsageError("--fitness cv requires --data")
        data = ds.load(args.data)
        c = cfg["cv_train"]
        tcfg = CvTrainConfig(c["folds"], c["epochs"], c["learning_rate"], c["momentum"],
                             c["batch_size"], head_for(data))
        evaluator = CvEvaluator(data, tcfg, space.fixed, seed=cfg["seed"])
    out = Path(args.out)
    _prepare_output(out, args.overwrite)
    cache = FitnessCache.load(args.cache) if args.cache else None
    snapshot = {k: cfg[k] for k in ("seed", "search_space", "evolution", "landscape", "cv_train")}
    snapshot["fitness"] = args.fitness
    snapshot["evolution"] = ecfg.to_json()
    # jobs only affects wall time; leave it out so snapshots match across worker counts
    snapshot["evolution"].pop("parallel_evaluations")
    best, history = run_to_directory(out, ecfg, space, evaluator, cache=cache, snapshot=snapshot)
    _print_json({"best_key": best.key, "best_fitness": best.fitness,
                 "generations": len(history) - 1, "run_dir": str(out)})
    return EXIT_OK


def cmd_train_binary(args, cfg) -> int:
    chromosome, fixed = _load_arch(args)
    data = ds.load(args.data)
    if data.target_kind != "single":
        raise ValidationError("stage-1 training needs a single-label dataset")
    _check_image_shape(data, fixed)
    out = Path(args.out)
    _prepare_output(out, args.overwrite)
    models = train_binary_models(chromosome, data, _grid(cfg), cfg["seed"], fixed=fixed,
                                 epochs=args.epochs or cfg["binary_epochs"], jobs=cfg["jobs"])
    save_bundle(StackNetModel(models), out)
    _print_json({"bundle": str(out), "classes": [
        {"class": r.class_id, "label": models.class_names[r.class_id],
         "best_model": r.config.label, "cv_f1": round(r.cv_score, 4)}
        for r in models.results]})
    return EXIT_OK


def cmd_train_meta(args, cfg) -> int:
    bundle = load_bundle(args.bundle)
    if (bundle.meta is not None or bundle.backbone is not None) and not args.overwrite:
        raise ValidationError(f"{args.bundle} already has a meta-classifier; "
                              "pass --overwrite to retrain it")
    data = ds.load(args.data)
    if data.label_width != bundle.binary.class_count:
        raise ValidationError(f"dataset has {data.label_width} classes, bundle has "
                              f"{bundle.binary.class_count}")
    backbone = Backbone(data.images.shape[1], tuple(cfg["backbone"]["widths"]), seed=cfg["seed"])
    features = engineer_features(bundle.binary, backbone, data.images)
    meta = train_meta(features, data.targets, _meta_cfg(cfg, args.epochs),
                      class_count=bundle.binary.class_count)
    save_bundle(StackNetModel(bundle.binary, backbone, meta), args.bundle)
    _print_json({"bundle": str(args.bundle), "feature_width": int(features.shape[1]),
                 "train_macro_f1": round(meta.train_macro_f1, 4)})
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    bundle = load_bundle(args.bundle, require_meta=True)
    first = bundle.binary.models[0]
    shape = (first.fixed.channels, first.fixed.image_size, first.fixed.image_size)
    image = ds.load_image(args.image, shape)
    class_id, conf = predict(bundle.binary, bundle.backbone, bundle.meta, image)
    _print_json({"class": class_id, "label": bundle.class_names[class_id],
                 "confidences": [float(v) for v in conf]})
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    bundle = load_bundle(args.bundle, require_meta=True)
    data = ds.load(args.data)
    c = bundle.binary.class_count
    if data.label_width != c:
        raise ValidationError(f"dataset has {data.label_width} classes, bundle has {c}")
    out = Path(args.out)
    _prepare_output(out, args.overwrite)
    y = data.targets
    rows = []
    for k, model in enumerate(bundle.binary.models):
        label = bundle.binary.results[k].config.label if bundle.binary.results else ""
        counts = ConfusionCounts.from_predictions(y == k, decisions(model, data.images))
        rows.append((bundle.class_names[k], label, binary_metrics(counts)))
    write_metrics_csv(out / "metrics.csv", rows)

    ids, _ = predict_batch(bundle.binary, bundle.backbone, bundle.meta, data.images)
    baseline = probability_matrix(bundle.binary, data.images).argmax(axis=1)
    stack = multiclass_summary(y, ids, c)
    argmax = multiclass_summary(y, baseline, c)
    write_comparison_csv(out / "comparison.csv", {"stacknet": stack, "argmax_p": argmax})
    summary = {"n": len(data), "stacknet_macro_f1": stack.f1, "argmax_p_macro_f1": argmax.f1,
               "stacknet_accuracy": stack.accuracy, "stacknet_mcc": stack.mcc}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    _print_json(summary)
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def _u64(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", help="JSON run configuration", **({} if not suppress else d))
    parser.add_argument("--seed", type=_u64, help="master seed (overrides config)",
                        **({} if not suppress else d))
    parser.add_argument("--jobs", type=_positive_int, help="worker threads",
                        **({} if not suppress else d))
    parser.add_argument("--overwrite", action="store_true", help="replace existing outputs",
                        **({} if not suppress else d))
    parser.add_argument("-v", "--verbose", action="count",
                        **({"default": 0} if not suppress else d))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evostack", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=_positive_int)
    p.add_argument("--items-per-class", type=_positive_int)
    p.add_argument("--image-size", type=_positive_int)
    p.add_argument("--channels", type=_positive_int)
    p.add_argument("--noise", type=float)
    p.add_argument("--split", nargs="?", const="default",
                   help="write stratified train/meta/test parts (fractions, e.g. 0.5,0.25,0.25)")

    p = add("evolve", cmd_evolve, "run the architecture search")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--fitness", choices=("synthetic", "cv"), default="synthetic")
    p.add_argument("--data", help="dataset directory for --fitness cv")
    p.add_argument("--generations", type=_positive_int)
    p.add_argument("--pop-size", type=_positive_int)
    p.add_argument("--cache", help="warm-start from a saved cache.json")

    p = add("train-binary", cmd_train_binary, "stage 1: per-class binary models")
    p.add_argument("--arch", required=True, help="best.arch.json or a run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="bundle directory")
    p.add_argument("--epochs", type=_positive_int)

    p = add("train-meta", cmd_train_meta, "stage 2: meta-classifier")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=_positive_int)

    p = add("predict", cmd_predict, "classify one raw float32 image")
    p.add_argument("--bundle", required=True)
    p.add_argument("--image", required=True, help="little-endian float32 C x H x W file")

    p = add("report", cmd_report, "per-class and comparison metrics on a labelled set")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, args.seed, args.jobs)
        return args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"evostack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, ContractViolation, DatasetError, CheckpointError) as exc:
        print(f"evostack: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EvostackError, OSError, FloatingPointError) as exc:
        print(f"evostack: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (TypeError, KeyError) as exc:
        # malformed config values surface here from dataclass constructors
        print(f"evostack: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
