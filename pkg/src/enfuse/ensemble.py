"""Stacking-style ensemble: five classifiers over fused features, majority vote.

Feature extraction uses the fine-tuned base encoders, fusion reuses the
train-fitted transform at test time, and the headline number is the voted
accuracy. Also houses the confusion-matrix metrics and the
leave-one-base-model-out ablation.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .classifiers import TrainedClassifier, fit_gbt, fit_gnb, fit_knn, fit_rf, fit_svm, predict
from .data import LabeledImageSet
from .errors import InvalidArgumentError
from .fusion import FusionTransform, apply_transform, concat_features, fuse_pipeline
from .pretrain import extract_features

CLASSIFIER_ORDER = ("SVM", "KNN", "GNB", "RF", "GBT")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """Row = true class, column = predicted class."""

    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def class_counts(self, cls: int) -> tuple[int, int, int, int]:
        """(TP, TN, FP, FN) for one class."""
        tp = int(self.counts[cls, cls])
        fn = int(self.counts[cls].sum()) - tp
        fp = int(self.counts[:, cls].sum()) - tp
        tn = self.total - tp - fn - fp
        return tp, tn, fp, fn


@dataclass
class MetricReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: list[dict] = field(default_factory=list)


def confusion_from_labels(true: np.ndarray, pred: np.ndarray,
                          n_classes: int) -> ConfusionMatrix:
    if len(true) != len(pred):
        raise InvalidArgumentError("label array length mismatch")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(true, pred):
        counts[t, p] += 1
    return ConfusionMatrix(counts)


def report_from_confusion(cm: ConfusionMatrix) -> MetricReport:
    per_class = []
    for cls in range(cm.n_classes):
        tp, tn, fp, fn = cm.class_counts(cls)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall else 0.0)
        per_class.append({"class": cls, "tp": tp, "tn": tn, "fp": fp, "fn": fn,
                          "precision": precision, "recall": recall, "f1": f1})
    accuracy = float(np.trace(cm.counts)) / cm.total if cm.total else 0.0
    return MetricReport(
        accuracy=accuracy,
        macro_precision=float(np.mean([c["precision"] for c in per_class])),
        macro_recall=float(np.mean([c["recall"] for c in per_class])),
        macro_f1=float(np.mean([c["f1"] for c in per_class])),
        per_class=per_class,
    )


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------

@dataclass
class EnsembleModel:
    classifiers: list[TrainedClassifier]  # fixed order: SVM, KNN, GNB, RF, GBT
    transform: FusionTransform
    base_names: list[str]
    n_classes: int
    weights: np.ndarray = None
    seed: int = 0

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.ones(len(self.classifiers))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.weights) != len(self.classifiers):
            raise InvalidArgumentError("one vote weight per classifier")
        if np.any(self.weights <= 0):
            raise InvalidArgumentError("vote weights must be positive")


def _as_pairs(base_models) -> list[tuple[str, object]]:
    if isinstance(base_models, dict):
        return list(base_models.items())
    return list(base_models)


def _extract_parts(base_models, dataset: LabeledImageSet):
    """Accept encoder models or bare callables (dataset -> FeatureMatrix)."""
    pairs = _as_pairs(base_models)
    names = [name for name, _ in pairs]
    parts = [model(dataset) if callable(model) else extract_features(model, dataset)
             for _, model in pairs]
    return names, parts


def majority_vote(predictions: list[np.ndarray],
                  weights: np.ndarray | None = None,
                  n_classes: int | None = None) -> np.ndarray:
    """Weighted plurality vote per sample; ties go to the lowest class index."""
    if not predictions:
        raise InvalidArgumentError("no predictions to vote over")
    preds = np.stack([np.asarray(p, dtype=np.int64) for p in predictions])
    if weights is None:
        weights = np.ones(len(preds))
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(preds):
        raise InvalidArgumentError("one weight per voter")
    if n_classes is None:
        n_classes = int(preds.max()) + 1
    n = preds.shape[1]
    tally = np.zeros((n, n_classes))
    for voter, weight in zip(preds, weights):
        tally[np.arange(n), voter] += weight
    return np.argmax(tally, axis=1)


def train_ensemble(base_models, train_set: LabeledImageSet,
                   method: str = "concat+ica", seed: int = 0,
                   k: int | None = None) -> EnsembleModel:
    """Extract, fuse, and fit the five classifiers on the training features."""
    names, parts = _extract_parts(base_models, train_set)
    fused, transform = fuse_pipeline(parts, method, k=k, names=names, seed=seed)
    x, y = fused.matrix.data, fused.matrix.labels
    n_classes = len(train_set.class_names)
    classifiers = [
        fit_svm(x, y),
        fit_knn(x, y),
        fit_gnb(x, y),
        fit_rf(x, y, seed=seed),
        fit_gbt(x, y),
    ]
    return EnsembleModel(classifiers, transform, names, n_classes, seed=seed)


def _transformed_features(model: EnsembleModel, base_models,
                          dataset: LabeledImageSet):
    names, parts = _extract_parts(base_models, dataset)
    if names != model.base_names:
        raise InvalidArgumentError("base models differ from the trained ensemble")
    fused = concat_features(parts, names=names)
    return apply_transform(model.transform, fused.matrix)


def predict_ensemble(model: EnsembleModel, base_models,
                     dataset: LabeledImageSet):
    """Per-classifier predictions plus the voted labels for a dataset."""
    features = _transformed_features(model, base_models, dataset)
    per_clf = [predict(clf, features.data) for clf in model.classifiers]
    voted = majority_vote(per_clf, model.weights, model.n_classes)
    return per_clf, voted


def evaluate(model: EnsembleModel, base_models,
             test_set: LabeledImageSet) -> tuple[ConfusionMatrix, MetricReport]:
    if len(test_set) == 0:
        raise InvalidArgumentError("empty evaluation set")
    _, voted = predict_ensemble(model, base_models, test_set)
    cm = confusion_from_labels(test_set.labels, voted, model.n_classes)
    return cm, report_from_confusion(cm)


def per_classifier_reports(model: EnsembleModel, base_models,
                           test_set: LabeledImageSet) -> dict[str, MetricReport]:
    per_clf, _ = predict_ensemble(model, base_models, test_set)
    out = {}
    for kind, preds in zip(CLASSIFIER_ORDER, per_clf):
        cm = confusion_from_labels(test_set.labels, preds, model.n_classes)
        out[kind] = report_from_confusion(cm)
    return out


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    excluded: str | None  # None = full ensemble
    classifier_accuracy: dict[str, float]
    mean_classifier_accuracy: float
    voted_accuracy: float
    delta_voted: float  # voted accuracy minus the full ensemble's


@dataclass
class AblationTable:
    full: AblationRow
    rows: list[AblationRow]


def _accuracy_row(excluded, model, base_models, test_set, baseline=None):
    per_clf, voted = predict_ensemble(model, base_models, test_set)
    true = test_set.labels
    clf_acc = {kind: float(np.mean(preds == true))
               for kind, preds in zip(CLASSIFIER_ORDER, per_clf)}
    voted_acc = float(np.mean(voted == true))
    delta = 0.0 if baseline is None else voted_acc - baseline
    return AblationRow(excluded, clf_acc,
                       float(np.mean(list(clf_acc.values()))), voted_acc, delta)


def ablate(base_models, train_set: LabeledImageSet, test_set: LabeledImageSet,
           method: str = "concat+ica", seed: int = 0,
           k: int | None = None) -> AblationTable:
    """Retrain without each base model in turn and compare voted accuracy."""
    pairs = _as_pairs(base_models)
    if len(pairs) < 2:
        raise InvalidArgumentError("ablation needs at least 2 base models")
    full_model = train_ensemble(pairs, train_set, method, seed=seed, k=k)
    full_row = _accuracy_row(None, full_model, pairs, test_set)
    rows = []
    for skip, _ in pairs:
        remaining = [(name, m) for name, m in pairs if name != skip]
        model = train_ensemble(remaining, train_set, method, seed=seed, k=k)
        rows.append(_accuracy_row(skip, model, remaining, test_set,
                                  baseline=full_row.voted_accuracy))
    return AblationTable(full_row, rows)


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def metrics_csv(cm: ConfusionMatrix, report: MetricReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", "tp", "tn", "fp", "fn", "precision", "recall", "f1"])
    for row in report.per_class:
        writer.writerow([row["class"], row["tp"], row["tn"], row["fp"], row["fn"],
                         f"{row['precision']:.6f}", f"{row['recall']:.6f}",
                         f"{row['f1']:.6f}"])
    writer.writerow([])
    writer.writerow(["accuracy", f"{report.accuracy:.6f}"])
    writer.writerow(["macro_precision", f"{report.macro_precision:.6f}"])
    writer.writerow(["macro_recall", f"{report.macro_recall:.6f}"])
    writer.writerow(["macro_f1", f"{report.macro_f1:.6f}"])
    writer.writerow([])
    writer.writerow(["confusion"] + [f"pred_{c}" for c in range(cm.n_classes)])
    for cls in range(cm.n_classes):
        writer.writerow([f"true_{cls}"] + list(cm.counts[cls]))
    return buf.getvalue()


def ablation_csv(table: AblationTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["excluded"] + list(CLASSIFIER_ORDER)
                    + ["mean_classifier", "voted", "delta_voted"])

    def emit(row: AblationRow):
        writer.writerow([row.excluded or "(none)"]
                        + [f"{row.classifier_accuracy[k]:.6f}" for k in CLASSIFIER_ORDER]
                        + [f"{row.mean_classifier_accuracy:.6f}",
                           f"{row.voted_accuracy:.6f}", f"{row.delta_voted:+.6f}"])

    emit(table.full)
    for row in table.rows:
        emit(row)
    return buf.getvalue()


def summary_text(report: MetricReport,
                 per_classifier: dict[str, MetricReport] | None = None) -> str:
    lines = [
        "ensemble evaluation",
        f"  voted accuracy : {report.accuracy:.4f}",
        f"  macro precision: {report.macro_precision:.4f}",
        f"  macro recall   : {report.macro_recall:.4f}",
        f"  macro F1       : {report.macro_f1:.4f}",
    ]
    if per_classifier:
        lines.append("  per-classifier accuracy:")
        for kind in CLASSIFIER_ORDER:
            if kind in per_classifier:
                lines.append(f"    {kind:<4}: {per_classifier[kind].accuracy:.4f}")
    return "\n".join(lines) + "\n"


def write_reports(out_dir, seed: int, cm: ConfusionMatrix, report: MetricReport,
                  per_classifier: dict[str, MetricReport] | None = None,
                  ablation: AblationTable | None = None) -> list[str]:
    """Emit CSV and text reports; file names carry the run seed."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    (out / f"metrics_seed{seed}.csv").write_text(metrics_csv(cm, report))
    written.append(f"metrics_seed{seed}.csv")
    (out / f"summary_seed{seed}.txt").write_text(summary_text(report, per_classifier))
    written.append(f"summary_seed{seed}.txt")
    if ablation is not None:
        (out / f"ablation_seed{seed}.csv").write_text(ablation_csv(ablation))
        written.append(f"ablation_seed{seed}.csv")
    return written
