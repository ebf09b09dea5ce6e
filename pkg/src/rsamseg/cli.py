"""Command-line entry point: prepare | train | eval | ablate | fewshot | predict.

Settings resolve in this order, later winning: built-in defaults, the
``--config`` file (YAML or JSON), command-line flags. Every command writes the
resolved settings to ``<out>/config.resolved.yaml``; passing that file back as
``--config`` repeats the run.

Exit codes: 0 success, 2 usage, 3 data or I/O, 4 runtime/training.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import yaml
from PIL import Image

from . import errors
from .data import (
    KINDS,
    SPLITS,
    DatasetManifest,
    binarize_label,
    fewshot_subset,
    prepare_manifest,
    read_raster,
    synthetic_fixture,
)
from .metrics import METRIC_NAMES, aggregate, confusion, write_report_csv
from .model import (
    ModelConfig,
    adapter_feature_parameter_count,
    adapter_scale_parameter_count,
    build,
    freeze_policy,
    load_checkpoint,
)
from .training import PatchCache, TrainConfig, evaluate, fit, predict_masks

log = logging.getLogger("rsamseg")

DATA_ROOT_ENV = "RSAMSEG_DATA_ROOT"
RESOLVED_CONFIG = "config.resolved.yaml"
DEFAULT_FRACTIONS = (0.01, 0.10, 0.30, 0.70)
ABLATION_VARIANTS = (
    ("full", {}),
    ("no_fpe", {"use_fpe": False}),
    ("no_fhfc", {"use_fhfc": False}),
    ("no_adapter_scale", {"use_adapter_scale": False}),
)


class UsageError(errors.RsamSegError):
    pass


# -- config handling -----------------------------------------------------------


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path} is not valid YAML/JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")
    return data


def resolve(args: argparse.Namespace) -> Dict[str, Any]:
    cfg = load_config_file(args.config)
    model = dict(cfg.get("model", {}))
    train = dict(cfg.get("train", {}))
    data = dict(cfg.get("data", {}))
    if args.seed is not None:
        model["seed"] = args.seed
        train["seed"] = args.seed
    if args.deterministic:
        train["deterministic"] = True
    for key in ("epochs", "batch_size", "lr_max"):
        value = getattr(args, key, None)
        if value is not None:
            train[key] = value
    for key in ("train_manifest", "eval_manifest"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = str(Path(value).resolve())
    resolved = {"model": model, "train": train, "data": data}
    # expand to every field so the snapshot does not depend on defaults
    resolved["model"] = model_config(resolved).to_dict()
    resolved["train"] = dataclasses.asdict(train_config(resolved))
    return resolved


def model_config(resolved: Dict[str, Any]) -> ModelConfig:
    return ModelConfig.from_dict(resolved["model"])


def train_config(resolved: Dict[str, Any]) -> TrainConfig:
    try:
        return TrainConfig(**resolved["train"])
    except TypeError as exc:
        raise UsageError(f"bad train config: {exc}") from exc


def prepare_out_dir(path: str, overwrite: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise UsageError(f"output directory {out} is not empty; pass --overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_resolved(out: Path, resolved: Dict[str, Any]) -> None:
    (out / RESOLVED_CONFIG).write_text(yaml.safe_dump(resolved, sort_keys=True), encoding="utf-8")


def _manifest(resolved: Dict[str, Any], key: str, required: bool = True) -> Optional[DatasetManifest]:
    path = resolved["data"].get(key)
    if path is None:
        if required:
            raise UsageError(f"no {key.replace('_', ' ')} given (config data.{key} or --{key.replace('_', '-')})")
        return None
    return DatasetManifest.load(path)


def _plot_lines(path: Path, series: Dict[str, Sequence[float]], xlabel: str, ylabel: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, ys in series.items():
        ax.plot(range(1, len(ys) + 1), ys, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_bars(path: Path, labels: Sequence[str], values: Sequence[float], ylabel: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(labels, values)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# -- commands --------------------------------------------------------------------


def cmd_prepare(args: argparse.Namespace) -> int:
    if args.kind not in KINDS:
        raise UsageError(f"unknown dataset kind {args.kind!r}; choose from {', '.join(KINDS)}")
    out = prepare_out_dir(args.out, args.overwrite)
    seed = args.seed if args.seed is not None else 0
    manifests: Dict[str, DatasetManifest] = {}
    if args.kind == "synthetic":
        manifests["train"] = synthetic_fixture(args.count, args.size, seed, "train")
        test_count = args.test_count if args.test_count is not None else max(1, args.count // 4)
        manifests["test"] = synthetic_fixture(test_count, args.size, seed + 1, "test")
        scene_total = args.count + test_count
    else:
        root = args.input or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise UsageError(f"--input is required (or set {DATA_ROOT_ENV})")
        if not Path(root).is_dir():
            raise errors.DataError(f"input directory {root} does not exist")
        scene_total = 0
        for split in SPLITS:
            if split == "test" and not any(Path(root).glob("test*")):
                continue
            manifests[split] = prepare_manifest(args.kind, root, split, args.patch_size)
            scene_total += len({r.scene_id for r in manifests[split].records})
    with open(out / "patch_index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "id", "scene_id", "row", "col", "size"])
        for split, manifest in manifests.items():
            manifest.save(out / f"{split}.jsonl")
            for r in manifest.records:
                w.writerow([split, r.record_id, r.scene_id, r.origin[0], r.origin[1], r.size])
    write_resolved(
        out,
        {
            "prepare": {
                "kind": args.kind,
                "input": args.input,
                "patch_size": args.patch_size,
                "count": args.count,
                "size": args.size,
                "seed": seed,
            },
            "data": {
                "train_manifest": str((out / "train.jsonl").resolve()),
                **({"eval_manifest": str((out / "test.jsonl").resolve())} if "test" in manifests else {}),
            },
        },
    )
    patches = sum(len(m) for m in manifests.values())
    print(f"scenes: {scene_total} patches: {patches} ({', '.join(f'{k}={len(v)}' for k, v in manifests.items())})")
    return 0


def _train_one(
    resolved: Dict[str, Any],
    train_manifest: DatasetManifest,
    eval_manifest: Optional[DatasetManifest],
    out: Optional[Path] = None,
    **flags: bool,
):
    config = model_config(resolved).with_flags(**flags) if flags else model_config(resolved)
    model = build(config)
    report = fit(model, train_manifest, eval_manifest, train_config(resolved), out)
    return model, report


def cmd_train(args: argparse.Namespace) -> int:
    resolved = resolve(args)
    train_manifest = _manifest(resolved, "train_manifest")
    eval_manifest = _manifest(resolved, "eval_manifest", required=False)
    out = prepare_out_dir(args.out, args.overwrite)
    write_resolved(out, resolved)
    model, report = _train_one(resolved, train_manifest, eval_manifest, out)
    _plot_lines(out / "loss_curve.png", {"train": report.epoch_losses}, "epoch", "BCE loss")
    (out / "summary.json").write_text(
        json.dumps(
            {
                "steps": report.steps,
                "final_loss": report.final_loss,
                "best_epoch": report.best_epoch,
                "wall_clock_s": report.wall_clock,
                "checkpoint": report.checkpoint,
            },
            indent=2,
        )
    )
    print(f"trained {report.steps} steps, final loss {report.final_loss:.5f}, checkpoint {report.checkpoint}")
    return 0


def _read_prediction(path: Path) -> np.ndarray:
    raw = np.asarray(read_raster(path))
    if raw.ndim == 3:
        raw = raw[..., 0]
    return binarize_label(raw)


def cmd_eval(args: argparse.Namespace) -> int:
    if bool(args.checkpoint) == bool(args.predictions):
        raise UsageError("give exactly one of --checkpoint or --predictions")
    manifest = DatasetManifest.load(args.manifest)
    out = prepare_out_dir(args.out, args.overwrite)
    cache = PatchCache(manifest)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        rows = evaluate(model, cache)
    else:
        pred_dir = Path(args.predictions)
        missing = [r.record_id for r in manifest.records if not (pred_dir / f"{r.record_id}.png").is_file()]
        if missing:
            raise errors.DataError(f"prediction set is missing ids: {', '.join(missing)}")
        rows = []
        for r in manifest.records:
            _, label = cache.get(r)
            if label is None:
                raise errors.DataError(f"record {r.record_id} has no ground truth")
            pred = _read_prediction(pred_dir / f"{r.record_id}.png")
            if pred.shape != label.shape:
                raise errors.DataError(f"prediction {r.record_id} has shape {pred.shape}, expected {label.shape}")
            rows.append((r.record_id, confusion(pred, label)))
    with open(out / "metrics.csv", "w", newline="") as fh:
        micro, macro = write_report_csv(fh, rows)
    write_resolved(
        out,
        {"eval": {"manifest": str(Path(args.manifest).resolve()), "checkpoint": args.checkpoint,
                  "predictions": args.predictions, "mode": args.mode}},
    )
    summary = micro if args.mode == "micro" else macro
    print(f"{args.mode}: " + " ".join(f"{k}={v:.4f}" for k, v in zip(METRIC_NAMES, summary.as_row())))
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    resolved = resolve(args)
    train_manifest = _manifest(resolved, "train_manifest")
    eval_manifest = _manifest(resolved, "eval_manifest", required=False)
    out = prepare_out_dir(args.out, args.overwrite)
    write_resolved(out, resolved)
    base = {"use_fpe": True, "use_fhfc": True, "use_adapter_scale": True}
    score_cache = PatchCache(eval_manifest or train_manifest)
    rows = []
    for name, flags in ABLATION_VARIANTS:
        model, report = _train_one(resolved, train_manifest, eval_manifest, None, **{**base, **flags})
        registry = freeze_policy(model)
        micro_counts = [c for _, c in evaluate(model, score_cache)]
        micro = aggregate(micro_counts, "micro")
        cfg = model.config
        rows.append(
            [
                name,
                cfg.use_fpe,
                cfg.use_fhfc,
                cfg.use_adapter_scale,
                registry.count(),
                registry.count(trainable=True),
                adapter_scale_parameter_count(cfg) if cfg.use_adapter_scale else 0,
                adapter_feature_parameter_count(cfg),
                repr(report.final_loss),
                report.order_digest,
                *(repr(v) for v in micro.as_row()),
            ]
        )
        print(f"{name}: params {registry.count()} final loss {report.final_loss:.5f} jaccard {micro.jaccard:.4f}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["variant", "use_fpe", "use_fhfc", "use_adapter_scale", "param_count", "trainable_count",
             "adapter_scale_params", "adapter_feature_params", "final_train_loss", "order_digest",
             *METRIC_NAMES]
        )
        w.writerows(rows)
    _plot_bars(out / "ablation_jaccard.png", [r[0] for r in rows], [float(r[10]) for r in rows], "Jaccard")
    return 0


def _parse_fractions(text: Optional[str]) -> List[float]:
    if text is None:
        return list(DEFAULT_FRACTIONS)
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --fractions {text!r}") from exc
    if not values or any(not 0.0 < v <= 1.0 for v in values):
        raise UsageError(f"fractions must lie in (0, 1], got {text!r}")
    return sorted(values)


def cmd_fewshot(args: argparse.Namespace) -> int:
    fractions = _parse_fractions(args.fractions)
    resolved = resolve(args)
    resolved["fewshot"] = {"fractions": fractions}
    train_manifest = _manifest(resolved, "train_manifest")
    eval_manifest = _manifest(resolved, "eval_manifest", required=False)
    out = prepare_out_dir(args.out, args.overwrite)
    write_resolved(out, resolved)
    seed = train_config(resolved).seed
    score_cache = PatchCache(eval_manifest or train_manifest)
    rows = []
    for fraction in fractions:
        subset = fewshot_subset(train_manifest, fraction, seed)
        (out / f"subset_{fraction:g}.txt").write_text("\n".join(subset.ids()) + "\n")
        model, report = _train_one(resolved, subset, eval_manifest, None)
        micro = aggregate([c for _, c in evaluate(model, score_cache)], "micro")
        rows.append([repr(fraction), len(subset), repr(report.final_loss), *(repr(v) for v in micro.as_row())])
        print(f"fraction {fraction:g}: {len(subset)} records, final loss {report.final_loss:.5f}, jaccard {micro.jaccard:.4f}")
    with open(out / "fewshot.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", "n_train", "final_train_loss", *METRIC_NAMES])
        w.writerows(rows)
    _plot_lines(out / "fewshot_jaccard.png", {"jaccard": [float(r[3]) for r in rows]}, "fraction index", "Jaccard")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.load(args.manifest)
    out = prepare_out_dir(args.out, args.overwrite)
    mask_dir = out / "masks"
    mask_dir.mkdir(exist_ok=True)
    cache = PatchCache(manifest)
    predictions = predict_masks(model, cache)
    for record, mask in predictions:
        Image.fromarray((mask * 255).astype(np.uint8)).save(mask_dir / f"{record.record_id}.png")
    if args.overlays:
        overlay_dir = out / "overlays"
        overlay_dir.mkdir(exist_ok=True)
        for record, mask in predictions:
            image, label = cache.get(record)
            panels = [("image", image.transpose(1, 2, 0)), ("prediction", mask)]
            if label is not None:
                panels.append(("ground truth", label))
            fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3))
            for ax, (title, arr) in zip(axes, panels):
                ax.imshow(arr, cmap=None if arr.ndim == 3 else "gray")
                ax.set_title(title)
                ax.axis("off")
            fig.tight_layout()
            fig.savefig(overlay_dir / f"{record.record_id}.png", dpi=80)
            plt.close(fig)
    write_resolved(
        out,
        {"predict": {"checkpoint": str(Path(args.checkpoint).resolve()),
                     "manifest": str(Path(args.manifest).resolve()), "overlays": args.overlays}},
    )
    print(f"wrote {len(predictions)} masks to {mask_dir}")
    return 0


# -- parser --------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--overwrite", action="store_true")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-manifest")
    p.add_argument("--eval-manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-max", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsamseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="tile a dataset into train/test manifests")
    _common(p)
    p.add_argument("--kind", required=True)
    p.add_argument("--input", help=f"dataset root (default: ${DATA_ROOT_ENV})")
    p.add_argument("--patch-size", type=int, default=1024)
    p.add_argument("--count", type=int, default=8, help="synthetic: training images")
    p.add_argument("--test-count", type=int, help="synthetic: test images")
    p.add_argument("--size", type=int, default=64, help="synthetic: image size")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fine-tune a model on a manifest")
    _common(p)
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a directory of masks")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="directory of <record_id>.png masks")
    p.add_argument("--mode", choices=("micro", "macro"), default="micro")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the four ablation variants")
    _common(p)
    _training_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("fewshot", help="train on nested fractions of the training set")
    _common(p)
    _training_flags(p)
    p.add_argument("--fractions", help="comma-separated, default 0.01,0.1,0.3,0.7")
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("predict", help="write binary mask images")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--overlays", action="store_true")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, errors.ConfigurationError, errors.ParameterError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (errors.DataError, errors.CheckpointError, errors.BackboneImportError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (errors.TrainingError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
