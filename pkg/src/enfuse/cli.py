"""Command-line pipeline driver.

Stages (pretrain -> finetune -> ensemble -> ablate / explain / oodtest) run
against a single output tree `<out>/<task>/<stage>/` with one manifest at the
root recording content hashes of everything each stage produced. Reruns with
an unchanged config skip completed stages; any hash mismatch blocks the
stages that depend on the damaged file.

Exit codes: 0 success, 2 config error, 3 stage failure, 4 integrity failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .classifiers import load_classifier, save_classifier
from .data import AugmentConfig, SplitSpec, make_synthetic_task, stratified_split, write_pnm
from .ensemble import (
    CLASSIFIER_ORDER,
    EnsembleModel,
    ablate,
    ablation_csv,
    evaluate,
    per_classifier_reports,
    train_ensemble,
    write_reports,
)
from .errors import ConfigError, EnfuseError, IntegrityError, InvalidArgumentError
from .explain import (
    _svg_document,
    grad_cam,
    render_confusion_svg,
    render_embedding_svg,
    render_saliency_ppm,
    select_background,
    shap_csv,
    shap_sampled,
    tsne_embed,
)
from .fusion import apply_transform, concat_features, load_transform, save_transform
from .nn import EncoderModel, accuracy
from .pretrain import (
    BackboneSpec,
    BaseModelRecord,
    ContrastiveConfig,
    build_backbone,
    extract_features,
    file_sha256,
    finetune_intermediate_tl,
    finetune_target_ssl,
    finetune_target_tl,
    load_record,
    pretrain_generic,
    pretrain_ssl,
    save_record,
)

TOOL_VERSION = "0.1.0"
VARIANTS = ("A", "B", "C")
BASE_MODEL_NAMES = tuple(f"{m}_{v}" for m in ("tl", "ssl") for v in VARIANTS)

# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

DEFAULTS: dict[str, dict[str, object]] = {
    "task": {
        "name": "synthetic-ladder",
    },
    "data": {
        "image_size": 16,
        "generic_per_class": 12,
        "intermediate_per_class": 15,
        "target_per_class": 20,
        "generic_noise": 0.0,
        "intermediate_noise": 0.03,
        "target_noise": 0.02,
        "target_param_shift": 0.04,
        "split_fraction": 0.8,
    },
    "pretrain": {
        "epochs": 30,
        "batch": 8,
        "lr": 0.01,
        "ssl_epochs": 8,
        "ssl_batch_pairs": 16,
        "ssl_lr": 0.01,
        "temperature": 0.5,
        "ssl_freeze_backbone": False,
        "augment_blur_kernel": 3,
    },
    "finetune": {
        "epochs": 30,
        "batch": 8,
        "lr": 0.01,
    },
    "fusion": {
        "method": "concat+ica",
        "k": 16,  # retained components; 0 = automatic (min(rows - 1, 128, cols))
    },
    "explain": {
        "instance": 0,
        "perplexity": 10.0,
        "tsne_iters": 500,
        "shap_samples": 2048,
    },
    "oodtest": {
        "kind": "binary",
        "per_class": 20,
        "noise": 0.05,
    },
}


def _coerce(section: str, key: str, raw: str):
    default = DEFAULTS[section][key]
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc
    return raw


def load_config(path: str | None) -> dict[str, dict[str, object]]:
    """Flat key=value config with [section] headers; unknown keys rejected."""
    config = {section: dict(values) for section, values in DEFAULTS.items()}
    if path is None:
        return config
    section = None
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in DEFAULTS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key = key.strip()
        if key not in DEFAULTS[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        config[section][key] = _coerce(section, key, value.strip())
    return config


def config_snapshot(config: dict, seed: int) -> dict[str, str]:
    flat = {"seed": str(seed)}
    for section in sorted(config):
        for key in sorted(config[section]):
            flat[f"{section}.{key}"] = str(config[section][key])
    return flat


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def _manifest_path(out: Path) -> Path:
    return out / "manifest.json"


def load_manifest(out: Path) -> dict:
    path = _manifest_path(out)
    if not path.exists():
        return {"version": TOOL_VERSION, "config": None, "stages": {}}
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable manifest {path}: {exc}") from exc


def save_manifest(out: Path, manifest: dict) -> None:
    _manifest_path(out).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def check_config_snapshot(manifest: dict, snapshot: dict) -> None:
    if manifest["config"] is None:
        manifest["config"] = snapshot
    elif manifest["config"] != snapshot:
        raise ConfigError(
            "output directory was produced with a different config/seed; "
            "use a fresh --out or the original settings")


def stage_complete(out: Path, manifest: dict, stage: str) -> bool:
    """True when the stage ran before and all its files still hash-match."""
    record = manifest["stages"].get(stage)
    if record is None:
        return False
    for rel, digest in sorted(record["files"].items()):
        path = out / rel
        if not path.exists():
            raise IntegrityError(f"stage {stage}: missing output file {rel}")
        if file_sha256(path) != digest:
            raise IntegrityError(f"stage {stage}: hash mismatch for {rel}")
    return True


def require_stage(out: Path, manifest: dict, stage: str) -> None:
    if not stage_complete(out, manifest, stage):
        raise EnfuseError(f"stage '{stage}' has not completed; run it first")


def record_stage(out: Path, manifest: dict, stage: str, files: list[Path]) -> None:
    manifest["stages"][stage] = {
        "files": {str(p.relative_to(out)): file_sha256(p) for p in sorted(files)},
    }
    save_manifest(out, manifest)


# ---------------------------------------------------------------------------
# Datasets (the default synthetic ladder)
# ---------------------------------------------------------------------------

def ladder_datasets(config: dict, seed: int):
    data = config["data"]
    size = (data["image_size"], data["image_size"])
    generic = make_synthetic_task("generic", data["generic_per_class"], size,
                                  data["generic_noise"], seed=seed + 101)
    intermediate = make_synthetic_task("shapes3", data["intermediate_per_class"],
                                       size, data["intermediate_noise"],
                                       seed=seed + 102)
    target = make_synthetic_task("shapes3", data["target_per_class"], size,
                                 data["target_noise"], seed=seed + 103,
                                 param_shift=data["target_param_shift"])
    return generic, intermediate, target


def target_split(config: dict, seed: int):
    _, _, target = ladder_datasets(config, seed)
    return stratified_split(target, SplitSpec(config["data"]["split_fraction"],
                                              seed=seed + 5))


def _task_dir(out: Path, config: dict, stage: str) -> Path:
    path = out / config["task"]["name"] / stage
    path.mkdir(parents=True, exist_ok=True)
    return path


def _spec(config: dict, variant: str) -> BackboneSpec:
    size = config["data"]["image_size"]
    return BackboneSpec(variant, (size, size))


def _save_base_model(model: EncoderModel, spec: BackboneSpec, method: str,
                     stages: list[str], stage_dir: Path, name: str) -> list[Path]:
    weights = stage_dir / f"{name}.weights"
    model.save(weights)
    record = BaseModelRecord(spec, method, stages=stages, weights_path=str(weights))
    manifest_file = stage_dir / f"{name}.record"
    save_record(record, manifest_file)
    return [weights, manifest_file]


def _load_base_model(stage_dir: Path, name: str) -> EncoderModel:
    load_record(stage_dir / f"{name}.record")  # verifies the weights hash
    return EncoderModel.load(stage_dir / f"{name}.weights")


# ---------------------------------------------------------------------------
# Stage commands
# ---------------------------------------------------------------------------

def cmd_pretrain(config: dict, seed: int, out: Path, manifest: dict) -> None:
    if stage_complete(out, manifest, "pretrain"):
        print("pretrain: up to date, skipping")
        return
    generic, intermediate, _ = ladder_datasets(config, seed)
    pre = config["pretrain"]
    stage_dir = _task_dir(out, config, "pretrain")
    files: list[Path] = []
    for i, variant in enumerate(VARIANTS):
        spec = _spec(config, variant)
        model = pretrain_generic(spec, generic, epochs=pre["epochs"],
                                 batch=pre["batch"], lr=pre["lr"],
                                 seed=seed + 10 + i)
        model = finetune_intermediate_tl(model, intermediate, epochs=pre["epochs"],
                                         batch=pre["batch"], lr=pre["lr"],
                                         seed=seed + 20 + i)
        files += _save_base_model(model, spec, "TL", ["generic", "intermediate"],
                                  stage_dir, f"tl_{variant}")
        print(f"pretrain: tl_{variant} done")
    cfg = ContrastiveConfig(
        temperature=pre["temperature"], batch_pairs=pre["ssl_batch_pairs"],
        augment=AugmentConfig(blur_kernel=pre["augment_blur_kernel"], seed=seed))
    for i, variant in enumerate(VARIANTS):
        spec = _spec(config, variant)
        model = pretrain_ssl(spec, intermediate, cfg, epochs=pre["ssl_epochs"],
                             lr=pre["ssl_lr"], seed=seed + 30 + i,
                             freeze_backbone=pre["ssl_freeze_backbone"])
        files += _save_base_model(model, spec, "SSL", ["ssl-pretrain"],
                                  stage_dir, f"ssl_{variant}")
        print(f"pretrain: ssl_{variant} done")
    record_stage(out, manifest, "pretrain", files)


def cmd_finetune(config: dict, seed: int, out: Path, manifest: dict) -> None:
    require_stage(out, manifest, "pretrain")
    if stage_complete(out, manifest, "finetune"):
        print("finetune: up to date, skipping")
        return
    train, test = target_split(config, seed)
    fin = config["finetune"]
    src_dir = _task_dir(out, config, "pretrain")
    stage_dir = _task_dir(out, config, "finetune")
    files: list[Path] = []
    log_lines = []
    for i, name in enumerate(BASE_MODEL_NAMES):
        method, variant = name.split("_")
        model = _load_base_model(src_dir, name)
        tuner = finetune_target_tl if method == "tl" else finetune_target_ssl
        model = tuner(model, train, epochs=fin["epochs"], batch=fin["batch"],
                      lr=fin["lr"], seed=seed + 40 + i)
        stages = model.meta.get("stages", []) or (
            ["generic", "intermediate", "target"] if method == "tl"
            else ["ssl-pretrain", "target"])
        files += _save_base_model(model, _spec(config, variant), method.upper(),
                                  stages, stage_dir, name)
        acc = accuracy(model, test)
        log_lines.append(f"{name} {method.upper()} {acc:.4f}")
        print(f"finetune: {name} test accuracy {acc:.4f}")
    log = stage_dir / "accuracy.log"
    log.write_text("\n".join(log_lines) + "\n")
    files.append(log)
    record_stage(out, manifest, "finetune", files)


def _load_target_models(out: Path, config: dict) -> list[tuple[str, EncoderModel]]:
    stage_dir = _task_dir(out, config, "finetune")
    return [(name, _load_base_model(stage_dir, name)) for name in BASE_MODEL_NAMES]


def cmd_ensemble(config: dict, seed: int, out: Path, manifest: dict) -> None:
    require_stage(out, manifest, "finetune")
    if stage_complete(out, manifest, "ensemble"):
        print("ensemble: up to date, skipping")
        return
    train, test = target_split(config, seed)
    models = _load_target_models(out, config)
    method = config["fusion"]["method"]
    k = config["fusion"]["k"] or None
    stage_dir = _task_dir(out, config, "ensemble")

    ensemble = train_ensemble(models, train, method=method, seed=seed, k=k)
    cm, report = evaluate(ensemble, models, test)
    per_clf = per_classifier_reports(ensemble, models, test)

    files = [stage_dir / f for f in write_reports(stage_dir, seed, cm, report, per_clf)]
    confusion_svg = stage_dir / f"confusion_seed{seed}.svg"
    render_confusion_svg(cm, confusion_svg, class_names=list(test.class_names))
    files.append(confusion_svg)

    # persist the fitted transform and classifiers
    transform_file = stage_dir / "transform.bin"
    save_transform(ensemble.transform, transform_file)
    files.append(transform_file)
    for kind, clf in zip(CLASSIFIER_ORDER, ensemble.classifiers):
        path = stage_dir / f"clf_{kind.lower()}.bin"
        save_classifier(clf, path)
        files.append(path)

    # stage comparison: base-model heads vs fused vs transformed vs voted
    concat_ensemble = train_ensemble(models, train, method="concat-only", seed=seed)
    _, concat_report = evaluate(concat_ensemble, models, test)
    lines = ["stage,name,accuracy"]
    for name, model in models:
        lines.append(f"base,{name},{accuracy(model, test):.6f}")
    lines.append(f"fused,concat-only,{concat_report.accuracy:.6f}")
    mean_clf = float(np.mean([r.accuracy for r in per_clf.values()]))
    lines.append(f"selected,{method},{mean_clf:.6f}")
    lines.append(f"voted,majority,{report.accuracy:.6f}")
    comparison = stage_dir / f"comparison_seed{seed}.csv"
    comparison.write_text("\n".join(lines) + "\n")
    files.append(comparison)

    print(f"ensemble: voted accuracy {report.accuracy:.4f} ({method})")
    record_stage(out, manifest, "ensemble", files)


def _render_ablation_svg(table, path) -> None:
    """Horizontal bars of voted-accuracy deltas per excluded base model."""
    width, row_h, margin = 420, 26, 90
    height = margin + row_h * len(table.rows) + 20
    mid = (width + margin) // 2
    scale = (width - margin - 40) / 2
    body = [f'<rect width="{width}" height="{height}" fill="white"/>',
            f'<line x1="{mid}" y1="{margin - 10}" x2="{mid}" '
            f'y2="{height - 10}" stroke="black"/>',
            f'<text x="{margin}" y="20" font-size="12" font-family="monospace">'
            f'voted-accuracy delta when excluding a base model</text>']
    peak = max(max(abs(r.delta_voted) for r in table.rows), 1e-9)
    for i, row in enumerate(table.rows):
        y = margin + i * row_h
        length = abs(row.delta_voted) / peak * scale
        x0 = mid - length if row.delta_voted < 0 else mid
        color = "#d62728" if row.delta_voted < 0 else "#2ca02c"
        body.append(f'<rect x="{x0:.1f}" y="{y}" width="{max(length, 0.5):.1f}" '
                    f'height="{row_h - 8}" fill="{color}"/>')
        body.append(f'<text x="8" y="{y + row_h - 12}" font-size="12" '
                    f'font-family="monospace">{row.excluded}</text>')
        body.append(f'<text x="{width - 70}" y="{y + row_h - 12}" font-size="11" '
                    f'font-family="monospace">{row.delta_voted:+.4f}</text>')
    with open(path, "w") as f:
        f.write(_svg_document(width, height, body))


def cmd_ablate(config: dict, seed: int, out: Path, manifest: dict) -> None:
    require_stage(out, manifest, "ensemble")
    if stage_complete(out, manifest, "ablate"):
        print("ablate: up to date, skipping")
        return
    train, test = target_split(config, seed)
    models = _load_target_models(out, config)
    table = ablate(models, train, test, method=config["fusion"]["method"],
                   seed=seed, k=config["fusion"]["k"] or None)
    stage_dir = _task_dir(out, config, "ablate")
    csv_file = stage_dir / f"ablation_seed{seed}.csv"
    csv_file.write_text(ablation_csv(table))
    svg_file = stage_dir / f"ablation_seed{seed}.svg"
    _render_ablation_svg(table, svg_file)
    for row in table.rows:
        print(f"ablate: without {row.excluded}: voted {row.voted_accuracy:.4f} "
              f"({row.delta_voted:+.4f})")
    record_stage(out, manifest, "ablate", [csv_file, svg_file])


def _rebuild_ensemble(out: Path, config: dict, models) -> EnsembleModel:
    stage_dir = _task_dir(out, config, "ensemble")
    transform = load_transform(stage_dir / "transform.bin")
    classifiers = [load_classifier(stage_dir / f"clf_{kind.lower()}.bin")
                   for kind in CLASSIFIER_ORDER]
    n_classes = classifiers[0].n_classes
    return EnsembleModel(classifiers, transform, [n for n, _ in models], n_classes)


def cmd_explain(config: dict, seed: int, out: Path, manifest: dict,
                what: str, instance: int | None = None) -> None:
    train, test = target_split(config, seed)
    exp = config["explain"]
    stage_dir = _task_dir(out, config, "explain")
    idx = exp["instance"] if instance is None else instance
    files: list[Path] = []
    if what == "gradcam":
        require_stage(out, manifest, "finetune")
        if not 0 <= idx < len(test):
            raise InvalidArgumentError(f"instance {idx} out of range")
        image = test.images[idx]
        target_class = int(test.labels[idx])
        for name, model in _load_target_models(out, config):
            sal = grad_cam(model, image, target_class, source_model=name)
            path = stage_dir / f"gradcam_{name}_i{idx}_seed{seed}.ppm"
            render_saliency_ppm(sal, path, image=image)
            files.append(path)
    elif what == "shap":
        require_stage(out, manifest, "ensemble")
        models = _load_target_models(out, config)
        ensemble = _rebuild_ensemble(out, config, models)
        train_parts = concat_features([extract_features(m, train) for _, m in models])
        test_parts = concat_features([extract_features(m, test) for _, m in models])
        fused_train = apply_transform(ensemble.transform, train_parts.matrix)
        fused_test = apply_transform(ensemble.transform, test_parts.matrix)
        if not 0 <= idx < len(fused_test.data):
            raise InvalidArgumentError(f"instance {idx} out of range")
        background = select_background(fused_train, n=10)
        explanation = shap_sampled(ensemble, fused_test.data[idx], background,
                                   n_samples=exp["shap_samples"], seed=seed)
        path = stage_dir / f"shap_i{idx}_seed{seed}.csv"
        path.write_text(shap_csv(explanation))
        files.append(path)
    elif what == "tsne":
        require_stage(out, manifest, "ensemble")
        models = _load_target_models(out, config)
        ensemble = _rebuild_ensemble(out, config, models)
        parts = concat_features([extract_features(m, test) for _, m in models])
        fused = apply_transform(ensemble.transform, parts.matrix)
        embedding = tsne_embed(fused, perplexity=exp["perplexity"],
                               iters=exp["tsne_iters"], seed=seed)
        path = stage_dir / f"tsne_seed{seed}.svg"
        render_embedding_svg(embedding, path, class_names=list(test.class_names))
        files.append(path)
    else:
        raise ConfigError(f"unknown explain target {what!r}")
    manifest["stages"].setdefault("explain", {"files": {}})
    record = manifest["stages"]["explain"]
    record["files"].update(
        {str(p.relative_to(out)): file_sha256(p) for p in sorted(files)})
    save_manifest(out, manifest)
    for path in files:
        print(f"explain: wrote {path.relative_to(out)}")


def cmd_oodtest(config: dict, seed: int, out: Path, manifest: dict) -> None:
    """Frozen foreign extractors on a new task vs randomly initialized ones."""
    require_stage(out, manifest, "finetune")
    ood = config["oodtest"]
    size = config["data"]["image_size"]
    dataset = make_synthetic_task(ood["kind"], ood["per_class"], (size, size),
                                  ood["noise"], seed=seed + 777)
    train, test = stratified_split(dataset, SplitSpec(
        config["data"]["split_fraction"], seed=seed + 6))
    method = config["fusion"]["method"]
    pretrained = _load_target_models(out, config)
    hashes_before = {name: file_sha256(_task_dir(out, config, "finetune") / f"{name}.weights")
                     for name in BASE_MODEL_NAMES}

    random_models = []
    for i, name in enumerate(BASE_MODEL_NAMES):
        variant = name.split("_")[1]
        rng = np.random.default_rng(seed + 900 + i)
        model = EncoderModel(build_backbone(_spec(config, variant), rng))
        model.meta["stage"] = "target"  # untrained baseline extractor
        random_models.append((name, model))

    results = {}
    for label, models in (("pretrained", pretrained), ("random", random_models)):
        ens = train_ensemble(models, train, method=method, seed=seed)
        _, report = evaluate(ens, models, test)
        results[label] = report.accuracy
    for name, digest in hashes_before.items():
        now = file_sha256(_task_dir(out, config, "finetune") / f"{name}.weights")
        if now != digest:
            raise IntegrityError(f"oodtest modified frozen weights {name}.weights")

    margin = results["pretrained"] - results["random"]
    stage_dir = _task_dir(out, config, "oodtest")
    path = stage_dir / f"oodtest_seed{seed}.csv"
    path.write_text("extractors,accuracy\n"
                    f"pretrained,{results['pretrained']:.6f}\n"
                    f"random,{results['random']:.6f}\n"
                    f"margin,{margin:.6f}\n")
    print(f"oodtest: pretrained {results['pretrained']:.4f} "
          f"vs random {results['random']:.4f} (margin {margin:+.4f})")
    manifest["stages"].setdefault("oodtest", {"files": {}})
    manifest["stages"]["oodtest"]["files"][str(path.relative_to(out))] = file_sha256(path)
    save_manifest(out, manifest)


def cmd_synth(config: dict, seed: int, out: Path, manifest: dict) -> None:
    """Write the synthetic ladder datasets to disk as PPM class directories."""
    if stage_complete(out, manifest, "synth"):
        print("synth: up to date, skipping")
        return
    stage_dir = _task_dir(out, config, "synth")
    files: list[Path] = []
    generic, intermediate, target = ladder_datasets(config, seed)
    for name, dataset in (("generic", generic), ("intermediate", intermediate),
                          ("target", target)):
        for cls, class_name in enumerate(dataset.class_names):
            class_dir = stage_dir / name / class_name
            class_dir.mkdir(parents=True, exist_ok=True)
            for i in np.flatnonzero(dataset.labels == cls):
                path = class_dir / f"{i:04d}.ppm"
                write_pnm(path, dataset.images[i])
                files.append(path)
        print(f"synth: wrote {name} ({len(dataset)} images)")
    record_stage(out, manifest, "synth", files)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enfuse",
        description="ensemble-over-fused-encoders pipeline")
    parser.add_argument("command",
                        choices=["pretrain", "finetune", "ensemble", "ablate",
                                 "explain", "oodtest", "synth", "all"])
    parser.add_argument("--config", default=None, help="key=value config file")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--out", default="runs", help="output directory")
    parser.add_argument("--what", default="gradcam",
                        choices=["gradcam", "shap", "tsne"],
                        help="explain subcommand target")
    parser.add_argument("--instance", type=int, default=None,
                        help="test-set index for explain")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.close(fd)
    except FileExistsError:
        print(f"error: {lock} exists (concurrent run?); remove it if stale",
              file=sys.stderr)
        return 3
    try:
        config = load_config(args.config)
        manifest = load_manifest(out)
        check_config_snapshot(manifest, config_snapshot(config, args.seed))
        save_manifest(out, manifest)
        steps = {
            "pretrain": lambda: cmd_pretrain(config, args.seed, out, manifest),
            "finetune": lambda: cmd_finetune(config, args.seed, out, manifest),
            "ensemble": lambda: cmd_ensemble(config, args.seed, out, manifest),
            "ablate": lambda: cmd_ablate(config, args.seed, out, manifest),
            "explain": lambda: cmd_explain(config, args.seed, out, manifest,
                                           args.what, instance=args.instance),
            "oodtest": lambda: cmd_oodtest(config, args.seed, out, manifest),
            "synth": lambda: cmd_synth(config, args.seed, out, manifest),
        }
        if args.command == "all":
            for stage in ("pretrain", "finetune", "ensemble", "ablate"):
                steps[stage]()
        else:
            steps[args.command]()
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return 4
    except EnfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    finally:
        if lock.exists():
            lock.unlink()


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
