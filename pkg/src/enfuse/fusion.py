"""Feature fusion: concatenation plus PCA / FastICA / LDA transforms.

The production path concatenates per-encoder feature matrices and then
applies FastICA; the other transforms are kept for comparison experiments.
Fitted transforms freeze the training-set standardization statistics so
test-time application never re-estimates anything.
"""

from __future__ import annotations

import io
import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError, InvalidArgumentError
from .features import FeatureMatrix
from .linalg import eigh_symmetric, standardize, whiten

TRANSFORM_MAGIC = b"ETSEFT1\x00"
DEFAULT_ICA_DIM = 128


@dataclass
class FusionTransform:
    """A fitted linear transform: standardize with stored stats, then project."""

    kind: str  # "PCA" | "ICA" | "LDA" | "Identity"
    mean: np.ndarray
    std: np.ndarray
    components: np.ndarray  # (D_in, k)
    explained_variance_ratio: np.ndarray | None = None
    fit_fingerprint: str = ""

    @property
    def in_dim(self) -> int:
        return len(self.mean)

    @property
    def out_dim(self) -> int:
        return self.components.shape[1]


@dataclass
class FusedFeatures:
    matrix: FeatureMatrix
    source_map: list[tuple[str, int, int]]  # (source name, col start, col end)
    transform: FusionTransform | None = None


def _fingerprint(x: np.ndarray) -> str:
    import hashlib

    return hashlib.sha256(np.ascontiguousarray(x, dtype="<f8").tobytes()).hexdigest()[:16]


def concat_features(parts: list[FeatureMatrix], names: list[str] | None = None) -> FusedFeatures:
    """Append feature matrices column-wise, verifying row alignment."""
    if not parts:
        raise InvalidArgumentError("no feature matrices to concatenate")
    names = names or [f"part{i}" for i in range(len(parts))]
    first = parts[0]
    for part in parts[1:]:
        if part.n_rows != first.n_rows:
            raise InvalidArgumentError("row-count mismatch between feature matrices")
        if not np.array_equal(part.sample_ids, first.sample_ids):
            raise InvalidArgumentError("sample-id mismatch between feature matrices")
        if first.labels is not None and part.labels is not None \
                and not np.array_equal(part.labels, first.labels):
            raise InvalidArgumentError("label mismatch between feature matrices")
    source_map, start = [], 0
    for name, part in zip(names, parts):
        source_map.append((name, start, start + part.n_cols))
        start += part.n_cols
    data = np.concatenate([p.data for p in parts], axis=1)
    matrix = FeatureMatrix(data, labels=first.labels, sample_ids=first.sample_ids.copy())
    return FusedFeatures(matrix, source_map)


def elementwise_fuse(parts: list[FeatureMatrix], op: str = "add") -> FeatureMatrix:
    """Element-wise addition or multiplication of same-shaped feature matrices.

    Kept for experiments only; the production path uses concatenation.
    """
    if not parts:
        raise InvalidArgumentError("no feature matrices to fuse")
    shapes = {p.data.shape for p in parts}
    if len(shapes) != 1:
        raise InvalidArgumentError("element-wise fusion needs equal shapes")
    if op == "add":
        data = np.sum([p.data for p in parts], axis=0)
    elif op == "mul":
        data = np.prod([p.data for p in parts], axis=0)
    else:
        raise InvalidArgumentError(f"unknown element-wise op {op!r}")
    return FeatureMatrix(data, labels=parts[0].labels, sample_ids=parts[0].sample_ids.copy())


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

def fit_identity(x: FeatureMatrix) -> FusionTransform:
    """Standardization-only transform (the concat-only path)."""
    _, mean, std = standardize(x.data)
    return FusionTransform("Identity", mean, std, np.eye(x.n_cols),
                           fit_fingerprint=_fingerprint(x.data))


def fit_pca(x: FeatureMatrix, k: int) -> FusionTransform:
    scaled, mean, std = standardize(x.data)
    n, d = scaled.shape
    if not 1 <= k <= min(n - 1, d):
        raise InvalidArgumentError(f"k={k} out of range for {n}x{d} input")
    cov = scaled.T @ scaled / (n - 1)
    dec = eigh_symmetric(cov)
    eigvals = np.maximum(dec.eigenvalues, 0.0)
    ratios = eigvals[:k] / eigvals.sum() if eigvals.sum() > 0 else np.zeros(k)
    return FusionTransform("PCA", mean, std, dec.eigenvectors[:, :k].copy(),
                           explained_variance_ratio=ratios,
                           fit_fingerprint=_fingerprint(x.data))


def fit_ica(x: FeatureMatrix, k: int, max_iter: int = 500, tol: float = 1e-6,
            seed: int = 0) -> FusionTransform:
    """FastICA by deflation with the log-cosh (tanh) nonlinearity.

    Components are extracted one by one in whitened space with Gram-Schmidt
    decorrelation; non-convergence of a component is a warning, not an error.
    """
    scaled, mean, std = standardize(x.data)
    n, d = scaled.shape
    if not 1 <= k <= min(n - 1, d):
        raise InvalidArgumentError(f"k={k} out of range for {n}x{d} input")
    rank = np.linalg.matrix_rank(scaled, tol=1e-10)
    if k > rank:
        warnings.warn(f"input rank {rank} below requested k={k}; reducing")
        k = int(rank)
    xw, wh = whiten(scaled, k)  # (n, k), (k, d)
    rng = np.random.default_rng(seed)
    unmix = np.zeros((k, k))
    for comp in range(k):
        w = rng.normal(size=k)
        w /= np.linalg.norm(w)
        converged = False
        for _ in range(max_iter):
            wx = xw @ w
            g = np.tanh(wx)
            g_prime = 1.0 - g * g
            w_new = xw.T @ g / n - g_prime.mean() * w
            # decorrelate against already-found components
            w_new -= unmix[:comp].T @ (unmix[:comp] @ w_new)
            norm = np.linalg.norm(w_new)
            if norm < 1e-12:
                w_new = rng.normal(size=k)
                w_new -= unmix[:comp].T @ (unmix[:comp] @ w_new)
                norm = np.linalg.norm(w_new)
            w_new /= norm
            if abs(abs(np.dot(w_new, w)) - 1.0) < tol:
                w = w_new
                converged = True
                break
            w = w_new
        if not converged:
            warnings.warn(f"ICA component {comp} did not converge in {max_iter} iterations")
        unmix[comp] = w
    components = (unmix @ wh).T  # (d, k): standardized data @ components = sources
    t = FusionTransform("ICA", mean, std, components,
                        fit_fingerprint=_fingerprint(x.data))
    t.unmixing = unmix  # rows unit-norm in whitened space
    return t


def fit_lda(x: FeatureMatrix, k: int, gamma_scale: float = 1e-6) -> FusionTransform:
    """Fisher discriminant directions from the between/within scatter matrices."""
    if x.labels is None:
        raise InvalidArgumentError("LDA needs labelled features")
    scaled, mean, std = standardize(x.data)
    labels = x.labels
    classes = np.unique(labels)
    if k > len(classes) - 1 or k < 1:
        raise InvalidArgumentError(f"LDA k must be in [1, {len(classes) - 1}]")
    counts = np.array([(labels == c).sum() for c in classes])
    if np.any(counts < 2):
        raise InvalidArgumentError("every class needs >= 2 samples for LDA")
    d = scaled.shape[1]
    overall = scaled.mean(axis=0)
    s_w = np.zeros((d, d))
    s_b = np.zeros((d, d))
    for c, n_c in zip(classes, counts):
        rows = scaled[labels == c]
        mu = rows.mean(axis=0)
        centered = rows - mu
        s_w += centered.T @ centered
        diff = (mu - overall)[:, None]
        s_b += n_c * (diff @ diff.T)
    gamma = gamma_scale * np.trace(s_w) / d
    s_w += gamma * np.eye(d)
    # symmetric reformulation of the generalized eigenproblem
    dec_w = eigh_symmetric(s_w)
    inv_sqrt = dec_w.eigenvectors @ np.diag(1.0 / np.sqrt(np.maximum(dec_w.eigenvalues, 1e-300))) @ dec_w.eigenvectors.T
    m = inv_sqrt @ s_b @ inv_sqrt
    dec = eigh_symmetric((m + m.T) / 2)
    components = inv_sqrt @ dec.eigenvectors[:, :k]
    return FusionTransform("LDA", mean, std, components,
                           fit_fingerprint=_fingerprint(x.data))


def apply_transform(t: FusionTransform, x: FeatureMatrix) -> FeatureMatrix:
    if x.n_cols != t.in_dim:
        raise InvalidArgumentError(f"dim mismatch: transform takes {t.in_dim}, got {x.n_cols}")
    scaled = (x.data - t.mean) / t.std
    return FeatureMatrix(scaled @ t.components, labels=x.labels,
                         sample_ids=x.sample_ids.copy())


_METHODS = ("concat-only", "concat+pca", "concat+ica", "concat+lda")


def fuse_pipeline(parts: list[FeatureMatrix], method: str = "concat+ica",
                  k: int | None = None, names: list[str] | None = None,
                  seed: int = 0) -> tuple[FusedFeatures, FusionTransform]:
    """Concatenate parts and fit the chosen transform on the result.

    Default retained dimension is min(n_rows - 1, 128). The returned
    transform must be reused as-is on test features (no refitting).
    """
    if method not in _METHODS:
        raise InvalidArgumentError(f"unknown fusion method {method!r}")
    fused = concat_features(parts, names=names)
    x = fused.matrix
    if k is None:
        k = min(x.n_rows - 1, DEFAULT_ICA_DIM, x.n_cols)
    if method == "concat-only":
        t = fit_identity(x)
    elif method == "concat+pca":
        t = fit_pca(x, k)
    elif method == "concat+ica":
        t = fit_ica(x, k, seed=seed)
    else:
        t = fit_lda(x, min(k, len(np.unique(x.labels)) - 1))
    fused.transform = t
    fused.matrix = apply_transform(t, x)
    return fused, t


# ---------------------------------------------------------------------------
# Persistence (kind-tagged container, same framing as model weights)
# ---------------------------------------------------------------------------

def save_transform(t: FusionTransform, path) -> None:
    arrays = {"mean": t.mean, "std": t.std, "components": t.components}
    if t.explained_variance_ratio is not None:
        arrays["evr"] = np.asarray(t.explained_variance_ratio)
    header = {
        "kind": t.kind,
        "fingerprint": t.fit_fingerprint,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in sorted(arrays.items())],
    }
    buf = io.BytesIO()
    buf.write(TRANSFORM_MAGIC)
    hdr = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(hdr)))
    buf.write(hdr)
    for name, arr in sorted(arrays.items()):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_transform(path) -> FusionTransform:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != TRANSFORM_MAGIC:
        raise IntegrityError("bad transform magic bytes")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen].decode())
    offset = 12 + hlen
    arrays = {}
    for rec in header["arrays"]:
        shape = tuple(rec["shape"])
        size = int(np.prod(shape)) * 8
        arrays[rec["name"]] = np.frombuffer(blob[offset:offset + size], dtype="<f8").reshape(shape).copy()
        offset += size
    if offset != len(blob):
        raise IntegrityError("trailing bytes in transform file")
    return FusionTransform(header["kind"], arrays["mean"], arrays["std"],
                           arrays["components"],
                           explained_variance_ratio=arrays.get("evr"),
                           fit_fingerprint=header["fingerprint"])
