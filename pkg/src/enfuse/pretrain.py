"""Two pre-training paths for the base encoders, plus feature extraction.

The transfer path runs generic -> intermediate -> target supervised
fine-tuning with progressively stronger freezing. The contrastive path
pre-trains on unlabeled images with the pair loss, then trains a fresh
classification head over a fully frozen backbone.

Three small conv backbone variants (A/B/C) with different depths stand in
for architecturally diverse production encoders.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .data import AugmentConfig, LabeledImageSet, random_transform
from .errors import InvalidArgumentError, InvalidStateError
from .features import FeatureMatrix
from .nn import (
    Conv2d,
    Dense,
    Dropout,
    EncoderModel,
    Flatten,
    GlobalAvgPool,
    MaxPool2d,
    OptimizerState,
    ReLU,
    Softmax,
    adam_step,
    images_to_batch,
    nt_xent_loss,
    train_supervised,
)

LATENT_DIM = 128
SSL_LR_DECAY_EPOCH = 40  # unconditional halving point during contrastive pre-training


@dataclass(frozen=True)
class BackboneSpec:
    variant: str  # "A" | "B" | "C"
    input_size: tuple[int, int] = (16, 16)
    in_channels: int = 3

    def __post_init__(self):
        if self.variant not in ("A", "B", "C"):
            raise InvalidArgumentError(f"unknown backbone variant {self.variant!r}")
        h, w = self.input_size
        pools = {"A": 2, "B": 2, "C": 3}[self.variant]
        if h % (2 ** pools) or w % (2 ** pools):
            raise InvalidArgumentError(
                f"input size {self.input_size} not divisible by the pooling factor")

    @property
    def feature_dim(self) -> int:
        return {"A": 16, "B": 20, "C": 24}[self.variant]


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.5
    batch_pairs: int = 64
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.temperature <= 0:
            raise InvalidArgumentError("temperature must be positive")
        if self.batch_pairs < 2:
            raise InvalidArgumentError("batch_pairs must be >= 2")


@dataclass
class BaseModelRecord:
    spec: BackboneSpec
    method: str  # "TL" | "SSL"
    stages: list[str] = field(default_factory=list)
    weights_path: str = ""

    def __post_init__(self):
        if self.method not in ("TL", "SSL"):
            raise InvalidArgumentError("method must be TL or SSL")

    @property
    def name(self) -> str:
        return f"{self.method.lower()}_{self.spec.variant}"


def build_backbone(spec: BackboneSpec, rng: np.random.Generator) -> list:
    c = spec.in_channels
    if spec.variant == "A":
        return [Conv2d(c, 8, 3, rng=rng), ReLU(), MaxPool2d(),
                Conv2d(8, 16, 3, rng=rng), ReLU(), MaxPool2d()]
    if spec.variant == "B":
        return [Conv2d(c, 8, 3, rng=rng), ReLU(),
                Conv2d(8, 12, 3, rng=rng), ReLU(), MaxPool2d(),
                Conv2d(12, 20, 3, rng=rng), ReLU(), MaxPool2d()]
    return [Conv2d(c, 6, 5, rng=rng), ReLU(), MaxPool2d(),
            Conv2d(6, 12, 3, rng=rng), ReLU(), MaxPool2d(),
            Conv2d(12, 16, 3, rng=rng), ReLU(),
            Conv2d(16, 24, 3, rng=rng), ReLU(), MaxPool2d()]


def make_classification_head(d_f: int, n_classes: int, rng: np.random.Generator) -> list:
    """Transfer-path head: pooled features through three tapering dense layers."""
    h1, h2 = max(d_f // 2, 4), max(d_f // 4, 4)
    return [GlobalAvgPool(), Flatten(),
            Dense(d_f, h1, rng=rng), ReLU(),
            Dense(h1, h2, rng=rng), ReLU(),
            Dense(h2, n_classes, rng=rng),
            Dropout(0.3), Softmax()]


def make_projection_head(d_f: int, rng: np.random.Generator, latent: int = LATENT_DIM) -> list:
    """Contrastive projection head: pooled features through two dense layers."""
    h1 = max(d_f // 2, 4)
    out = Dense(h1, latent, rng=rng)
    out.params["b"] += 0.01  # keep projections off the exact zero vector
    return [MaxPool2d(), GlobalAvgPool(), Flatten(),
            Dense(d_f, h1, rng=rng), ReLU(), out]


def make_ssl_classification_head(d_f: int, n_classes: int, rng: np.random.Generator) -> list:
    """Same two-dense layout as the projection head, with a softmax output."""
    h1 = max(d_f // 2, 4)
    return [MaxPool2d(), GlobalAvgPool(), Flatten(),
            Dense(d_f, h1, rng=rng), ReLU(),
            Dense(h1, n_classes, rng=rng), Softmax()]


def _first_block_end(backbone) -> int:
    """Index one past the first conv block (first MaxPool, or first ReLU)."""
    for i, layer in enumerate(backbone):
        if isinstance(layer, MaxPool2d):
            return i + 1
    return 2


# ---------------------------------------------------------------------------
# Transfer-learning path
# ---------------------------------------------------------------------------

def pretrain_generic(spec: BackboneSpec, generic_set: LabeledImageSet,
                     epochs: int = 50, batch: int = 64, seed: int = 0,
                     lr: float = 0.001) -> EncoderModel:
    """Supervised pre-training on the generic source task; head is discarded."""
    if generic_set.n_classes < 2:
        raise InvalidArgumentError("generic pre-training needs >= 2 classes")
    rng = np.random.default_rng(seed)
    model = EncoderModel(build_backbone(spec, rng),
                         make_classification_head(spec.feature_dim, generic_set.n_classes, rng))
    log = train_supervised(model, generic_set, epochs=epochs, batch=batch,
                           opt=OptimizerState(learning_rate=lr),
                           seed=int(rng.integers(2**31)))
    model.set_head(None)
    model.meta = {"variant": spec.variant, "stage": "generic", "train_log": log}
    return model


def finetune_intermediate_tl(model: EncoderModel, d_in: LabeledImageSet,
                             epochs: int = 50, batch: int = 64, seed: int = 0,
                             lr: float = 0.001) -> EncoderModel:
    """Retrain on the intermediate source task with the first conv block frozen."""
    if model.meta.get("stage") != "generic":
        raise InvalidStateError("intermediate fine-tuning needs a generic-stage model")
    rng = np.random.default_rng(seed)
    for layer in model.backbone:
        layer.trainable = True
    model.freeze_backbone(upto=_first_block_end(model.backbone))
    model.set_head(make_classification_head(model.feature_dim, d_in.n_classes, rng))
    log = train_supervised(model, d_in, epochs=epochs, batch=batch,
                           opt=OptimizerState(learning_rate=lr),
                           seed=int(rng.integers(2**31)))
    model.meta = dict(model.meta, stage="intermediate", train_log=log)
    return model


def finetune_target_tl(model: EncoderModel, d_tar_train: LabeledImageSet,
                       epochs: int = 50, batch: int = 64, seed: int = 0,
                       lr: float = 0.001) -> EncoderModel:
    """Target fine-tuning: only the final conv block and a fresh head train."""
    if model.meta.get("stage") != "intermediate":
        raise InvalidStateError("target fine-tuning needs an intermediate-stage model")
    rng = np.random.default_rng(seed)
    for layer in model.backbone:
        layer.trainable = True
    model.freeze_backbone(upto=model.last_conv_index())
    model.set_head(make_classification_head(model.feature_dim, d_tar_train.n_classes, rng))
    log = train_supervised(model, d_tar_train, epochs=epochs, batch=batch,
                           opt=OptimizerState(learning_rate=lr),
                           seed=int(rng.integers(2**31)))
    model.meta = dict(model.meta, stage="target", method="TL", train_log=log)
    return model


# ---------------------------------------------------------------------------
# Contrastive path
# ---------------------------------------------------------------------------

def pretrain_ssl(spec: BackboneSpec, images: np.ndarray | LabeledImageSet,
                 cfg: ContrastiveConfig, epochs: int = 50, seed: int = 0,
                 freeze_backbone: bool = False, lr: float = 0.001) -> EncoderModel:
    """Contrastive pre-training over two augmented views per image.

    `freeze_backbone` trains only the projection head (a literal reading of
    keeping the encoder frozen during pre-training); the default trains the
    whole stack, which is what makes the learned features useful.
    """
    if isinstance(images, LabeledImageSet):
        images = images.images
    images = np.asarray(images, dtype=np.float64)
    if len(images) < 2:
        raise InvalidArgumentError("contrastive pre-training needs >= 2 images")
    rng = np.random.default_rng(seed)
    model = EncoderModel(build_backbone(spec, rng),
                         make_projection_head(spec.feature_dim, rng))
    if freeze_backbone:
        model.freeze_backbone()
    opt = OptimizerState(learning_rate=lr)
    aug_rng = np.random.default_rng(int(rng.integers(2**31)))
    n = len(images)
    pairs = min(cfg.batch_pairs, n)
    log = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, pairs):
            idx = perm[start:start + pairs]
            if len(idx) < 2:
                continue
            views = []
            for i in idx:
                views.append(random_transform(images[i], cfg.augment, aug_rng))
                views.append(random_transform(images[i], cfg.augment, aug_rng))
            x = images_to_batch(np.stack(views))
            z = model.forward(x, training=True)
            loss, dz = nt_xent_loss(z, cfg.temperature)
            model.zero_grads()
            model.backward(dz)
            adam_step(opt, model.named_parameters(trainable_only=True),
                      model.named_grads(trainable_only=True))
            total += loss * len(idx)
            seen += len(idx)
        log.append(total / seen)
        if epoch + 1 == SSL_LR_DECAY_EPOCH:
            opt.learning_rate *= 0.5
    model.meta = {"variant": spec.variant, "stage": "ssl-pretrain", "train_log": log}
    return model


def finetune_target_ssl(model: EncoderModel, d_tar_train: LabeledImageSet,
                        epochs: int = 50, batch: int = 64, seed: int = 0,
                        lr: float = 0.001) -> EncoderModel:
    """Swap the projection head for a classification head; backbone stays frozen."""
    if model.meta.get("stage") != "ssl-pretrain":
        raise InvalidStateError("target fine-tuning needs a contrastively pre-trained model")
    rng = np.random.default_rng(seed)
    model.freeze_backbone()
    model.set_head(make_ssl_classification_head(model.feature_dim, d_tar_train.n_classes, rng))
    log = train_supervised(model, d_tar_train, epochs=epochs, batch=batch,
                           opt=OptimizerState(learning_rate=lr),
                           seed=int(rng.integers(2**31)))
    model.meta = dict(model.meta, stage="target", method="SSL", train_log=log)
    return model


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

def extract_features(model: EncoderModel, dataset: LabeledImageSet,
                     tap: str = "backbone") -> FeatureMatrix:
    """Per-image feature vectors at the requested tap point, labels carried through.

    "backbone" taps the pooled final conv maps; "penultimate" taps the
    activation entering the head's output layer. Dropout is off, so the
    result is a pure function of (weights, images).
    """
    if model.meta.get("stage") != "target":
        raise InvalidStateError("extract_features needs a target-stage model")
    x = images_to_batch(dataset.images)
    if tap == "backbone":
        rows = [model.features(x[s:s + 256]) for s in range(0, len(x), 256)]
    elif tap == "penultimate":
        dense_idx = [i for i, l in enumerate(model.head) if isinstance(l, Dense)]
        if not dense_idx:
            raise InvalidStateError("model head has no dense layers to tap")
        cut = dense_idx[-1]
        rows = []
        for s in range(0, len(x), 256):
            out = model.forward(x[s:s + 256], training=False, through_head=False)
            for layer in model.head[:cut]:
                out = layer.forward(out, training=False)
            rows.append(out)
    else:
        raise InvalidArgumentError(f"unknown tap {tap!r}")
    return FeatureMatrix(np.concatenate(rows), labels=dataset.labels.copy())


# ---------------------------------------------------------------------------
# Record manifests
# ---------------------------------------------------------------------------

def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_record(record: BaseModelRecord, path) -> None:
    # weights are referenced relative to the record file so the whole
    # output tree stays relocatable (and byte-identical across roots)
    weights_rel = os.path.relpath(record.weights_path, os.path.dirname(path) or ".")
    lines = [
        f"method={record.method}",
        f"variant={record.spec.variant}",
        f"input_size={record.spec.input_size[0]}x{record.spec.input_size[1]}",
        f"in_channels={record.spec.in_channels}",
        f"stages={','.join(record.stages)}",
        f"weights={weights_rel}",
        f"weights_sha256={file_sha256(record.weights_path)}",
    ]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_record(path) -> BaseModelRecord:
    fields = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                key, _, value = line.partition("=")
                fields[key] = value
    h, w = fields["input_size"].split("x")
    spec = BackboneSpec(fields["variant"], (int(h), int(w)), int(fields["in_channels"]))
    weights = fields["weights"]
    if not os.path.isabs(weights):
        weights = os.path.join(os.path.dirname(os.fspath(path)) or ".", weights)
    record = BaseModelRecord(spec, fields["method"],
                             stages=[s for s in fields["stages"].split(",") if s],
                             weights_path=weights)
    from .errors import IntegrityError

    if not os.path.exists(record.weights_path):
        raise IntegrityError(f"missing weights file {record.weights_path}")
    if file_sha256(record.weights_path) != fields["weights_sha256"]:
        raise IntegrityError(f"hash mismatch for {record.weights_path}")
    return record
