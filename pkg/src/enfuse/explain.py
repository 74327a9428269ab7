"""Model inspection: Grad-CAM saliency, Shapley attributions, t-SNE embeddings.

Grad-CAM explains the conv encoders at pixel level; SHAP explains the
classifier stage over fused features; t-SNE visualizes the fused feature
space. Renderers emit PPM heatmaps and standalone SVG figures, all
byte-deterministic.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .classifiers import TrainedClassifier, predict_proba
from .data import resize_bilinear, write_pnm
from .ensemble import ConfusionMatrix, EnsembleModel
from .errors import InvalidArgumentError, UnsupportedModelError
from .features import FeatureMatrix
from .nn.model import EncoderModel

SHAP_EXACT_MAX_FEATURES = 15


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------

@dataclass
class SaliencyMap:
    values: np.ndarray  # (H, W) in [0, 1]
    source_model: str
    target_class: int


def grad_cam(model: EncoderModel, image: np.ndarray, target_class: int,
             source_model: str = "") -> SaliencyMap:
    """Gradient-weighted activation map at the model's final conv layer.

    Channel weights are the spatial average of d(class score)/d(activation);
    the weighted sum is ReLU'd, bilinearly upsampled to the image size, and
    max-normalized (an all-zero map stays all-zero).
    """
    li = model.last_conv_index()  # raises on conv-free models
    image = np.asarray(image, dtype=np.float64)
    batch = image.transpose(2, 0, 1)[None]  # HWC -> NCHW
    logits = model.forward(batch, training=False, skip_final_softmax=True)
    if logits.ndim != 2:
        raise UnsupportedModelError("grad_cam needs a classification head")
    if not 0 <= target_class < logits.shape[1]:
        raise InvalidArgumentError(f"target class {target_class} out of range")
    # replay the prefix to recover the last conv layer's output activation
    act = batch
    for layer in model._active_stack[:li + 1]:
        act = layer.forward(act, training=False)
    dout = np.zeros_like(logits)
    dout[0, target_class] = 1.0
    grad = model.backward(dout, stop_at=li + 1)  # d score / d activation
    channel_w = grad[0].mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(channel_w, act[0], axes=1), 0.0)
    upsampled = resize_bilinear(cam[:, :, None], image.shape[:2])[:, :, 0]
    upsampled = np.maximum(upsampled, 0.0)
    peak = upsampled.max()
    if peak > 0:
        upsampled = upsampled / peak
    return SaliencyMap(upsampled, source_model, target_class)


# ---------------------------------------------------------------------------
# SHAP
# ---------------------------------------------------------------------------

@dataclass
class ShapExplanation:
    values: np.ndarray      # (D,) per-feature attribution
    base_value: float       # model output on the all-background instance
    model_output: float     # model output on the full instance
    stderr: np.ndarray | None = None  # sampled mode only


def _scalar_model(model, instance: np.ndarray):
    """Reduce a classifier to f: (n, D) -> (n,) scalar outputs.

    The explained quantity is the predicted probability of the class the
    model assigns to the full instance. Bare callables are passed through.
    """
    if isinstance(model, TrainedClassifier):
        cls = int(np.argmax(predict_proba(model, instance[None])[0]))
        return lambda x: predict_proba(model, x)[:, cls]
    if isinstance(model, EnsembleModel):
        def mean_proba(x):
            return np.mean([predict_proba(c, x) for c in model.classifiers], axis=0)
        cls = int(np.argmax(mean_proba(instance[None])[0]))
        return lambda x: mean_proba(x)[:, cls]
    if callable(model):
        return model
    raise InvalidArgumentError("model must be a classifier, ensemble, or callable")


def _coalition_matrix(masks: np.ndarray, instance, bg_mean) -> np.ndarray:
    return np.where(masks, instance, bg_mean)


def _background_mean(background) -> np.ndarray:
    data = background.data if isinstance(background, FeatureMatrix) else np.asarray(background)
    return np.atleast_2d(data).mean(axis=0)


def select_background(features: FeatureMatrix, n: int = 10) -> FeatureMatrix:
    """The n training rows closest to the feature-wise median (deterministic)."""
    median = np.median(features.data, axis=0)
    dist = np.linalg.norm(features.data - median, axis=1)
    order = np.argsort(dist, kind="stable")[:n]
    return FeatureMatrix(features.data[order],
                         labels=None if features.labels is None else features.labels[order],
                         sample_ids=features.sample_ids[order])


def shap_exact(model, instance: np.ndarray, background) -> ShapExplanation:
    """Exact Shapley values by enumerating all 2^D feature coalitions.

    "Without" a feature means replacing it by the background mean.
    """
    instance = np.asarray(instance, dtype=np.float64).ravel()
    d = len(instance)
    if d > SHAP_EXACT_MAX_FEATURES:
        raise InvalidArgumentError(
            f"{d} features exceeds the exact limit of {SHAP_EXACT_MAX_FEATURES}; "
            "use shap_sampled")
    f = _scalar_model(model, instance)
    bg_mean = _background_mean(background)
    n_sets = 1 << d
    masks = (np.arange(n_sets)[:, None] >> np.arange(d)) & 1
    vals = np.asarray(f(_coalition_matrix(masks.astype(bool), instance, bg_mean)),
                      dtype=np.float64)
    sizes = masks.sum(axis=1)
    fact = [math.factorial(i) for i in range(d + 1)]
    phi = np.zeros(d)
    for j in range(d):
        without_j = np.flatnonzero(masks[:, j] == 0)
        s = sizes[without_j]
        weight = np.array([fact[k] * fact[d - k - 1] / fact[d] for k in s])
        phi[j] = np.sum(weight * (vals[without_j | (1 << j)] - vals[without_j]))
    return ShapExplanation(phi, float(vals[0]), float(vals[-1]))


def shap_sampled(model, instance: np.ndarray, background,
                 n_samples: int = 2048, seed: int = 0) -> ShapExplanation:
    """Permutation-sampling Shapley estimate with exact local accuracy.

    The estimation residual is redistributed proportionally to |phi| so
    base + sum(phi) always equals the model output.
    """
    if n_samples <= 0:
        raise InvalidArgumentError("n_samples must be positive")
    instance = np.asarray(instance, dtype=np.float64).ravel()
    d = len(instance)
    f = _scalar_model(model, instance)
    bg_mean = _background_mean(background)
    rng = np.random.default_rng(seed)
    n_perms = max(1, n_samples // max(d, 1))
    contribs = np.zeros((n_perms, d))
    for p in range(n_perms):
        order = rng.permutation(d)
        masks = np.zeros((d + 1, d), dtype=bool)
        for step, feat in enumerate(order):
            masks[step + 1] = masks[step]
            masks[step + 1, feat] = True
        vals = np.asarray(f(_coalition_matrix(masks, instance, bg_mean)))
        contribs[p, order] = np.diff(vals)
    phi = contribs.mean(axis=0)
    stderr = contribs.std(axis=0) / np.sqrt(n_perms)
    base = float(f(bg_mean[None])[0])
    out = float(f(instance[None])[0])
    residual = (out - base) - phi.sum()
    mass = np.abs(phi).sum()
    phi = phi + residual * (np.abs(phi) / mass if mass > 1e-12 else np.full(d, 1.0 / d))
    return ShapExplanation(phi, base, out, stderr=stderr)


# ---------------------------------------------------------------------------
# t-SNE
# ---------------------------------------------------------------------------

@dataclass
class Embedding2D:
    coords: np.ndarray                 # (M, 2)
    labels: np.ndarray | None
    kl_divergence: float
    kl_log: list = field(default_factory=list)  # (iteration, KL) checkpoints


def _conditional_p(dist_sq: np.ndarray, perplexity: float, steps: int = 50,
                   tol: float = 1e-4) -> np.ndarray:
    """Per-row binary search for the bandwidth hitting the target perplexity."""
    n = dist_sq.shape[0]
    p = np.zeros((n, n))
    target_entropy = np.log(perplexity)
    for i in range(n):
        d = np.delete(dist_sq[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(steps):
            expd = np.exp(-(d - d.min()) * beta)
            total = expd.sum()
            row = expd / total
            entropy = -np.sum(row * np.log(np.maximum(row, 1e-300)))
            if abs(np.exp(entropy) - perplexity) < tol:
                break
            if entropy > target_entropy:  # too flat: increase beta
                lo = beta
                beta = beta * 2 if hi == np.inf else 0.5 * (lo + hi)
            else:
                hi = beta
                beta = 0.5 * (lo + hi)
        p[i, np.arange(n) != i] = row
    return p


def tsne_embed(x: FeatureMatrix, perplexity: float = 30.0, iters: int = 1000,
               seed: int = 0, learning_rate: float = 200.0) -> Embedding2D:
    """Exact-pairwise symmetric t-SNE with early exaggeration and momentum."""
    data = x.data
    n = len(data)
    if n < 4:
        raise InvalidArgumentError("t-SNE needs at least 4 rows")
    if n < 3 * perplexity:
        perplexity = max(1.0, (n - 1) / 3.0)
        warnings.warn(f"perplexity reduced to {perplexity:.1f} for {n} rows")
    sq_norms = np.sum(data * data, axis=1)
    dist_sq = np.maximum(sq_norms[:, None] + sq_norms[None] - 2 * data @ data.T, 0.0)
    np.fill_diagonal(dist_sq, 0.0)
    off_diag = ~np.eye(n, dtype=bool)
    dist_sq[off_diag] = np.maximum(dist_sq[off_diag], 1e-12)  # duplicate-row floor
    cond = _conditional_p(dist_sq, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, 1e-300)

    rng = np.random.default_rng(seed)
    y = rng.normal(scale=1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    kl_log = []
    exaggeration_until, momentum_switch = 250, 250
    for it in range(iters):
        p_eff = p * 12.0 if it < exaggeration_until else p
        ydiff_sq = np.sum(y * y, axis=1)
        num = 1.0 / (1.0 + np.maximum(
            ydiff_sq[:, None] + ydiff_sq[None] - 2 * y @ y.T, 0.0))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-300)
        pq = (p_eff - q) * num
        grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)
        momentum = 0.5 if it < momentum_switch else 0.8
        same_dir = np.sign(grad) == np.sign(velocity)
        gains = np.maximum(np.where(same_dir, gains * 0.8, gains + 0.2), 0.01)
        velocity = momentum * velocity - learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
        if (it + 1) % 50 == 0 or it == iters - 1:
            kl = float(np.sum(p * np.log(p / q)))
            kl_log.append((it + 1, kl))
    return Embedding2D(y, x.labels, kl_log[-1][1], kl_log)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def render_saliency_ppm(saliency: SaliencyMap, path,
                        image: np.ndarray | None = None) -> None:
    """P6 heatmap: red channel carries the saliency over a grayed-out image."""
    sal = saliency.values
    if image is None:
        gray = np.zeros_like(sal)
    else:
        gray = np.asarray(image, dtype=np.float64)
        if gray.ndim == 3:
            gray = gray.mean(axis=2)
    out = np.stack([np.maximum(gray * 0.5, sal),
                    gray * 0.5 * (1.0 - sal),
                    gray * 0.5 * (1.0 - sal)], axis=2)
    write_pnm(path, np.clip(out, 0.0, 1.0))


def _svg_document(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
            f'width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    return "\n".join([head] + body + ["</svg>"]) + "\n"


def render_embedding_svg(embedding: Embedding2D, path,
                         class_names: list[str] | None = None) -> None:
    """Scatter plot with per-class colors and a legend."""
    size, margin = 400, 40
    coords = embedding.coords
    lo = coords.min(axis=0)
    span = np.maximum(coords.max(axis=0) - lo, 1e-12)
    scaled = margin + (coords - lo) / span * (size - 2 * margin)
    labels = (embedding.labels if embedding.labels is not None
              else np.zeros(len(coords), dtype=int))
    body = [f'<rect width="{size}" height="{size}" fill="white"/>']
    for (px, py), label in zip(scaled, labels):
        color = PALETTE[int(label) % len(PALETTE)]
        body.append(f'<circle cx="{px:.2f}" cy="{size - py:.2f}" r="3" '
                    f'fill="{color}" fill-opacity="0.8"/>')
    for rank, cls in enumerate(np.unique(labels)):
        color = PALETTE[int(cls) % len(PALETTE)]
        name = (class_names[int(cls)] if class_names else f"class {int(cls)}")
        yy = 16 + 16 * rank
        body.append(f'<circle cx="{size - 110}" cy="{yy}" r="4" fill="{color}"/>')
        body.append(f'<text x="{size - 100}" y="{yy + 4}" font-size="12" '
                    f'font-family="monospace">{name}</text>')
    body.append(f'<text x="8" y="{size - 8}" font-size="11" font-family="monospace">'
                f'KL={embedding.kl_divergence:.4f}</text>')
    with open(path, "w") as f:
        f.write(_svg_document(size, size, body))


def render_confusion_svg(cm: ConfusionMatrix, path,
                         class_names: list[str] | None = None) -> None:
    """Count grid shaded by cell magnitude."""
    k = cm.n_classes
    cell, margin = 48, 56
    size = margin + k * cell + 16
    peak = max(int(cm.counts.max()), 1)
    body = [f'<rect width="{size}" height="{size}" fill="white"/>']
    for i in range(k):
        for j in range(k):
            count = int(cm.counts[i, j])
            shade = 255 - int(195 * count / peak)
            x0, y0 = margin + j * cell, margin + i * cell
            body.append(f'<rect x="{x0}" y="{y0}" width="{cell}" height="{cell}" '
                        f'fill="rgb({shade},{shade},255)" stroke="black"/>')
            body.append(f'<text x="{x0 + cell // 2}" y="{y0 + cell // 2 + 4}" '
                        f'font-size="14" text-anchor="middle" '
                        f'font-family="monospace">{count}</text>')
    for idx in range(k):
        name = class_names[idx] if class_names else str(idx)
        body.append(f'<text x="{margin + idx * cell + cell // 2}" y="{margin - 8}" '
                    f'font-size="12" text-anchor="middle" '
                    f'font-family="monospace">{name}</text>')
        body.append(f'<text x="{margin - 8}" y="{margin + idx * cell + cell // 2 + 4}" '
                    f'font-size="12" text-anchor="end" '
                    f'font-family="monospace">{name}</text>')
    body.append(f'<text x="{margin}" y="16" font-size="12" font-family="monospace">'
                f'rows: true / cols: predicted</text>')
    with open(path, "w") as f:
        f.write(_svg_document(size, size, body))


def shap_csv(explanation: ShapExplanation,
             feature_names: list[str] | None = None) -> str:
    lines = ["feature,phi"]
    for j, phi in enumerate(explanation.values):
        name = feature_names[j] if feature_names else f"f{j}"
        lines.append(f"{name},{phi:.10f}")
    lines.append(f"base_value,{explanation.base_value:.10f}")
    lines.append(f"model_output,{explanation.model_output:.10f}")
    return "\n".join(lines) + "\n"


def render(artifact, path, **kwargs) -> None:
    """Dispatch renderer: SaliencyMap -> PPM, Embedding2D / ConfusionMatrix -> SVG."""
    if isinstance(artifact, SaliencyMap):
        render_saliency_ppm(artifact, path, image=kwargs.get("image"))
    elif isinstance(artifact, Embedding2D):
        render_embedding_svg(artifact, path, class_names=kwargs.get("class_names"))
    elif isinstance(artifact, ConfusionMatrix):
        render_confusion_svg(artifact, path, class_names=kwargs.get("class_names"))
    else:
        raise InvalidArgumentError(f"no renderer for {type(artifact).__name__}")
