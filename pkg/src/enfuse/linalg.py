"""Dense linear-algebra helpers used by fusion, embedding, and classifier math.

All routines work on float64 numpy arrays. Eigendecompositions here are
always of symmetric covariance/scatter matrices, so only the symmetric
path is provided.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError

CONST_COLUMN_EPS = 1e-12
SYMMETRY_TOL = 1e-9


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues sorted descending with matching orthonormal eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def eigh_symmetric(a: np.ndarray) -> EigenDecomposition:
    """Eigendecomposition of a symmetric matrix.

    Eigenvalues come back sorted descending; each eigenvector column is
    normalized so its largest-magnitude entry is positive (deterministic
    sign convention).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidArgumentError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise InvalidArgumentError("matrix is not symmetric within tolerance")
    w, v = np.linalg.eigh(a)
    order = np.argsort(w)[::-1]
    w = w[order]
    v = v[:, order]
    for j in range(v.shape[1]):
        pivot = np.argmax(np.abs(v[:, j]))
        if v[pivot, j] < 0:
            v[:, j] = -v[:, j]
    return EigenDecomposition(eigenvalues=w, eigenvectors=v)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between two vectors, in [-1, 1]."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise InvalidArgumentError(f"length mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity undefined for zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def standardize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column-wise zero-mean unit-variance scaling.

    Constant columns (std below CONST_COLUMN_EPS) are mapped to zero and
    their std recorded as 1 so the transform stays invertible elsewhere.
    Returns (scaled, mean, std).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidArgumentError("standardize needs a 2-D matrix with at least 2 rows")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > CONST_COLUMN_EPS, std, 1.0)
    return (x - mean) / std, mean, std


def whiten(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """PCA-whiten a centered matrix down to k components.

    Returns (whitened, W) with whitened = x @ W.T and the sample covariance
    of the output equal to I_k.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if k > min(n - 1, d) or k < 1:
        raise InvalidArgumentError(f"k={k} out of range for {n}x{d} input")
    cov = x.T @ x / (n - 1)
    dec = eigh_symmetric(cov)
    lam = dec.eigenvalues[:k]
    if np.any(lam <= CONST_COLUMN_EPS):
        raise InvalidArgumentError(f"rank of input below k={k}")
    w = (dec.eigenvectors[:, :k] / np.sqrt(lam)).T
    return x @ w.T, w
