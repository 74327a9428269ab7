"""Five classical classifiers over fused feature vectors.

Each learner exposes a fit_* constructor returning a TrainedClassifier and
shares predict / predict_proba dispatch. All of them are deterministic given
(data, seed, hyperparameters): probability rows are valid distributions and
argmax ties break toward the lowest class index.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError, InvalidArgumentError, InvalidDatasetError

CLASSIFIER_MAGIC = b"ETSEFC1\x00"
KINDS = ("SVM", "KNN", "GNB", "RF", "GBT")


@dataclass
class Tree:
    """Flat decision/regression tree: node i is a leaf iff feature[i] < 0."""

    feature: np.ndarray    # (n_nodes,) int64, -1 for leaves
    threshold: np.ndarray  # (n_nodes,) float64
    left: np.ndarray       # (n_nodes,) int64 child index, -1 for leaves
    right: np.ndarray
    value: np.ndarray      # (n_nodes, width): class dist or 1-wide score

    def predict_value(self, x: np.ndarray) -> np.ndarray:
        out = np.empty((len(x), self.value.shape[1]))
        for i, row in enumerate(x):
            node = 0
            while self.feature[node] >= 0:
                if row[self.feature[node]] <= self.threshold[node]:
                    node = self.left[node]
                else:
                    node = self.right[node]
            out[i] = self.value[node]
        return out


@dataclass
class TrainedClassifier:
    kind: str
    n_classes: int
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    trees: list[Tree] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def _check_xy(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise InvalidArgumentError("x must be 2-D with one label per row")
    if len(x) == 0:
        raise InvalidDatasetError("empty training set")
    return x, y, int(y.max()) + 1


# ---------------------------------------------------------------------------
# Linear SVM (one-vs-rest hinge + L2, full-batch subgradient descent)
# ---------------------------------------------------------------------------

def fit_svm(x: np.ndarray, y: np.ndarray, c: float = 1.0, tol: float = 1e-3,
            max_iter: int = 10000) -> TrainedClassifier:
    """One-vs-rest linear SVM trained by deterministic subgradient descent.

    Objective per class: 0.5 ||w||^2 + C * mean(hinge). Iterations stop when
    the objective change drops below tol. Probabilities are a softmax over
    the per-class margins (the simplest monotone calibration).
    """
    x, y, k = _check_xy(x, y)
    if k < 2 or len(np.unique(y)) < 2:
        raise InvalidDatasetError("SVM needs at least 2 classes")
    n, d = x.shape
    w = np.zeros((k, d))
    b = np.zeros(k)
    iters_used = []
    for cls in range(k):
        sign = np.where(y == cls, 1.0, -1.0)
        wc = np.zeros(d)
        bc = 0.0
        prev_obj = np.inf
        for it in range(max_iter):
            margins = sign * (x @ wc + bc)
            viol = margins < 1.0
            obj = 0.5 * wc @ wc + c * np.maximum(0.0, 1.0 - margins).mean()
            if abs(prev_obj - obj) < tol:
                break
            prev_obj = obj
            lr = 1.0 / (1.0 + it)
            grad_w = wc - c * (sign[viol] @ x[viol]) / n
            grad_b = -c * sign[viol].sum() / n
            wc -= lr * grad_w
            bc -= lr * grad_b
        iters_used.append(it)
        w[cls], b[cls] = wc, bc
    return TrainedClassifier("SVM", k, arrays={"w": w, "b": b},
                             meta={"c": c, "tol": tol, "iters": iters_used})


# ---------------------------------------------------------------------------
# K-nearest neighbours (k=3, inverse-distance weights, brute force)
# ---------------------------------------------------------------------------

def fit_knn(x: np.ndarray, y: np.ndarray, k: int = 3) -> TrainedClassifier:
    x, y, n_classes = _check_xy(x, y)
    if len(x) < k:
        raise InvalidDatasetError(f"KNN needs at least k={k} training points")
    return TrainedClassifier("KNN", n_classes,
                             arrays={"x": x.copy(), "y": y.astype(np.float64)},
                             meta={"k": k})


def _knn_proba(clf: TrainedClassifier, q: np.ndarray) -> np.ndarray:
    train_x = clf.arrays["x"]
    train_y = clf.arrays["y"].astype(np.int64)
    k = clf.meta["k"]
    out = np.zeros((len(q), clf.n_classes))
    for i, row in enumerate(q):
        dist = np.linalg.norm(train_x - row, axis=1)
        exact = np.flatnonzero(dist == 0.0)
        if len(exact):
            out[i, train_y[exact[0]]] = 1.0
            continue
        nearest = np.argsort(dist, kind="stable")[:k]
        weights = 1.0 / (dist[nearest] + 1e-12)
        for j, wgt in zip(nearest, weights):
            out[i, train_y[j]] += wgt
        out[i] /= out[i].sum()
    return out


# ---------------------------------------------------------------------------
# Gaussian naive Bayes
# ---------------------------------------------------------------------------

def fit_gnb(x: np.ndarray, y: np.ndarray, var_smoothing: float = 1e-9) -> TrainedClassifier:
    x, y, k = _check_xy(x, y)
    classes = np.unique(y)
    for cls in classes:
        if (y == cls).sum() < 2:
            raise InvalidDatasetError("GNB needs >= 2 samples per class")
    theta = np.zeros((k, x.shape[1]))
    var = np.full((k, x.shape[1]), np.inf)
    priors = np.zeros(k)
    floor = var_smoothing * x.var(axis=0).max()
    for cls in classes:
        rows = x[y == cls]
        theta[cls] = rows.mean(axis=0)
        var[cls] = rows.var(axis=0) + floor
        priors[cls] = len(rows) / len(x)
    return TrainedClassifier("GNB", k,
                             arrays={"theta": theta, "var": var, "priors": priors},
                             meta={"var_smoothing": var_smoothing})


def _gnb_proba(clf: TrainedClassifier, q: np.ndarray) -> np.ndarray:
    theta, var, priors = clf.arrays["theta"], clf.arrays["var"], clf.arrays["priors"]
    with np.errstate(divide="ignore"):
        log_prior = np.log(priors)
    log_post = np.full((len(q), clf.n_classes), -np.inf)
    for cls in range(clf.n_classes):
        if priors[cls] == 0:
            continue
        diff = q - theta[cls]
        log_post[:, cls] = log_prior[cls] - 0.5 * np.sum(
            np.log(2 * np.pi * var[cls]) + diff * diff / var[cls], axis=1)
    log_post -= log_post.max(axis=1, keepdims=True)
    p = np.exp(log_post)
    return p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Shared tree builder
# ---------------------------------------------------------------------------

def _gini_splitter(n_classes):
    """Vectorized Gini split search over all candidate thresholds per feature."""
    def split(x, target, idx, features):
        labels = target[idx]
        onehot = np.zeros((len(idx), n_classes))
        onehot[np.arange(len(idx)), labels] = 1.0
        best = (None, 0.0, np.inf)
        n = len(idx)
        for f in features:
            vals = x[idx, f]
            order = np.argsort(vals, kind="stable")
            sv = vals[order]
            valid = sv[1:] != sv[:-1]
            if not valid.any():
                continue
            left = np.cumsum(onehot[order], axis=0)[:-1]   # counts below each cut
            right = left[-1] + onehot[order][-1] - left
            nl = np.arange(1, n)
            nr = n - nl
            gini_l = 1.0 - np.sum((left / nl[:, None]) ** 2, axis=1)
            gini_r = 1.0 - np.sum((right / nr[:, None]) ** 2, axis=1)
            score = np.where(valid, (nl * gini_l + nr * gini_r) / n, np.inf)
            pos = int(np.argmin(score))
            if score[pos] < best[2] - 1e-15:
                best = (f, 0.5 * (sv[pos] + sv[pos + 1]), score[pos])
        return best
    return split


def _sse_splitter(x, target, idx, features):
    """Vectorized squared-error split search on the residual column."""
    resid = target[idx, 0]
    best = (None, 0.0, np.inf)
    n = len(idx)
    for f in features:
        vals = x[idx, f]
        order = np.argsort(vals, kind="stable")
        sv = vals[order]
        valid = sv[1:] != sv[:-1]
        if not valid.any():
            continue
        r = resid[order]
        s1 = np.cumsum(r)[:-1]
        s2 = np.cumsum(r * r)[:-1]
        nl = np.arange(1, n)
        total1, total2 = r.sum(), (r * r).sum()
        sse_l = s2 - s1 * s1 / nl
        nr = n - nl
        sse_r = (total2 - s2) - (total1 - s1) ** 2 / nr
        score = np.where(valid, sse_l + sse_r, np.inf)
        pos = int(np.argmin(score))
        if score[pos] < best[2] - 1e-15:
            best = (f, 0.5 * (sv[pos] + sv[pos + 1]), score[pos])
    return best


def _is_pure(target_subset: np.ndarray) -> bool:
    col = target_subset[:, 0] if target_subset.ndim == 2 else target_subset
    return bool(col.max() - col.min() <= 1e-12)


def _grow_tree(x, target, idx, depth, rng, *, max_depth, min_split, n_feature_sub,
               leaf_value, splitter, nodes):
    node_id = len(nodes["feature"])
    for key in nodes:
        nodes[key].append(None)
    leaf = leaf_value(target[idx])
    splittable = (depth < max_depth and len(idx) >= min_split
                  and not _is_pure(target[idx]))
    chosen = (None, 0.0, np.inf)
    if splittable:
        d = x.shape[1]
        if n_feature_sub is not None and n_feature_sub < d:
            features = np.sort(rng.choice(d, size=n_feature_sub, replace=False))
        else:
            features = np.arange(d)
        chosen = splitter(x, target, idx, features)
    if chosen[0] is None:
        nodes["feature"][node_id] = -1
        nodes["threshold"][node_id] = 0.0
        nodes["left"][node_id] = -1
        nodes["right"][node_id] = -1
        nodes["value"][node_id] = leaf
        return node_id
    f, thr, _ = chosen
    mask = x[idx, f] <= thr
    nodes["feature"][node_id] = f
    nodes["threshold"][node_id] = thr
    nodes["value"][node_id] = leaf
    nodes["left"][node_id] = _grow_tree(x, target, idx[mask], depth + 1, rng,
                                        max_depth=max_depth, min_split=min_split,
                                        n_feature_sub=n_feature_sub,
                                        leaf_value=leaf_value, splitter=splitter,
                                        nodes=nodes)
    nodes["right"][node_id] = _grow_tree(x, target, idx[~mask], depth + 1, rng,
                                         max_depth=max_depth, min_split=min_split,
                                         n_feature_sub=n_feature_sub,
                                         leaf_value=leaf_value, splitter=splitter,
                                         nodes=nodes)
    return node_id


def _build_tree(x, target, idx, rng, *, max_depth, min_split, n_feature_sub,
                leaf_value, splitter) -> Tree:
    nodes = {"feature": [], "threshold": [], "left": [], "right": [], "value": []}
    _grow_tree(x, target, idx, 0, rng, max_depth=max_depth, min_split=min_split,
               n_feature_sub=n_feature_sub, leaf_value=leaf_value,
               splitter=splitter, nodes=nodes)
    return Tree(np.asarray(nodes["feature"], dtype=np.int64),
                np.asarray(nodes["threshold"], dtype=np.float64),
                np.asarray(nodes["left"], dtype=np.int64),
                np.asarray(nodes["right"], dtype=np.int64),
                np.stack([np.atleast_1d(v) for v in nodes["value"]]))


# ---------------------------------------------------------------------------
# Random forest
# ---------------------------------------------------------------------------

def fit_rf(x: np.ndarray, y: np.ndarray, n_trees: int = 100, max_depth: int = 10,
           min_split: int = 3, seed: int = 0) -> TrainedClassifier:
    """Bagged Gini trees with per-split feature subsampling of ceil(sqrt(D))."""
    x, y, k = _check_xy(x, y)
    if len(x) < 3:
        raise InvalidDatasetError("RF needs at least 3 samples")
    n, d = x.shape
    n_sub = int(np.ceil(np.sqrt(d)))

    def leaf_value(labels):
        counts = np.bincount(labels, minlength=k).astype(np.float64)
        return counts / counts.sum()

    splitter = _gini_splitter(k)
    trees = []
    for child in np.random.SeedSequence(seed).spawn(n_trees):
        rng = np.random.default_rng(child)
        idx = rng.integers(0, n, size=n)
        trees.append(_build_tree(x, y, idx, rng, max_depth=max_depth,
                                 min_split=min_split, n_feature_sub=n_sub,
                                 leaf_value=leaf_value, splitter=splitter))
    return TrainedClassifier("RF", k, trees=trees,
                             meta={"n_trees": n_trees, "max_depth": max_depth,
                                   "min_split": min_split, "seed": seed})


def _rf_proba(clf: TrainedClassifier, q: np.ndarray) -> np.ndarray:
    p = np.mean([t.predict_value(q) for t in clf.trees], axis=0)
    return p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Gradient-boosted trees (softmax cross-entropy, Newton leaf values)
# ---------------------------------------------------------------------------

def fit_gbt(x: np.ndarray, y: np.ndarray, eta: float = 0.9, max_depth: int = 10,
            rounds: int = 50, min_split: int = 2) -> TrainedClassifier:
    """Boosting with one regression tree per class per round.

    Trees fit the negative softmax cross-entropy gradient (the residual
    one-hot minus probability); leaf scores use the Newton step
    sum(residual) / sum(hessian). predict_proba is the softmax of the
    eta-scaled summed leaf scores.
    """
    x, y, k = _check_xy(x, y)
    if len(np.unique(y)) < 2:
        raise InvalidDatasetError("GBT needs at least 2 classes")
    n = len(x)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    scores = np.zeros((n, k))
    rng = np.random.default_rng(0)  # unused: no feature subsampling in GBT
    all_idx = np.arange(n)

    def leaf_value(t):
        grad, hess = t[:, 0].sum(), t[:, 1].sum()
        return np.array([grad / (hess + 1e-16)])

    trees: list[Tree] = []
    loss_log = []
    for _ in range(rounds):
        p = np.exp(scores - scores.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        for cls in range(k):
            residual = onehot[:, cls] - p[:, cls]
            hess = p[:, cls] * (1.0 - p[:, cls])
            target = np.stack([residual, hess], axis=1)
            tree = _build_tree(x, target, all_idx, rng, max_depth=max_depth,
                               min_split=min_split, n_feature_sub=None,
                               leaf_value=leaf_value, splitter=_sse_splitter)
            trees.append(tree)
            scores[:, cls] += eta * tree.predict_value(x)[:, 0]
        p = np.exp(scores - scores.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        loss_log.append(float(-np.log(p[np.arange(n), y] + 1e-300).mean()))
    return TrainedClassifier("GBT", k, trees=trees,
                             meta={"eta": eta, "max_depth": max_depth,
                                   "rounds": rounds, "min_split": min_split,
                                   "train_log_loss": loss_log})


def _gbt_proba(clf: TrainedClassifier, q: np.ndarray) -> np.ndarray:
    k, eta = clf.n_classes, clf.meta["eta"]
    scores = np.zeros((len(q), k))
    for i, tree in enumerate(clf.trees):
        scores[:, i % k] += eta * tree.predict_value(q)[:, 0]
    scores -= scores.max(axis=1, keepdims=True)
    p = np.exp(scores)
    return p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def predict_proba(clf: TrainedClassifier, q: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if clf.kind == "SVM":
        margins = q @ clf.arrays["w"].T + clf.arrays["b"]
        margins -= margins.max(axis=1, keepdims=True)
        p = np.exp(margins)
        return p / p.sum(axis=1, keepdims=True)
    if clf.kind == "KNN":
        return _knn_proba(clf, q)
    if clf.kind == "GNB":
        return _gnb_proba(clf, q)
    if clf.kind == "RF":
        return _rf_proba(clf, q)
    if clf.kind == "GBT":
        return _gbt_proba(clf, q)
    raise InvalidArgumentError(f"unknown classifier kind {clf.kind!r}")


def predict(clf: TrainedClassifier, q: np.ndarray) -> np.ndarray:
    return np.argmax(predict_proba(clf, q), axis=1)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _pack_trees(trees: list[Tree]) -> dict[str, np.ndarray]:
    if not trees:
        return {}
    offsets = np.cumsum([0] + [len(t.feature) for t in trees])
    return {
        "tree_offsets": offsets.astype(np.float64),
        "tree_feature": np.concatenate([t.feature for t in trees]).astype(np.float64),
        "tree_threshold": np.concatenate([t.threshold for t in trees]),
        "tree_left": np.concatenate([t.left for t in trees]).astype(np.float64),
        "tree_right": np.concatenate([t.right for t in trees]).astype(np.float64),
        "tree_value": np.concatenate([t.value for t in trees]),
    }


def _unpack_trees(arrays: dict[str, np.ndarray]) -> list[Tree]:
    if "tree_offsets" not in arrays:
        return []
    offsets = arrays["tree_offsets"].astype(np.int64)
    trees = []
    for a, b in zip(offsets[:-1], offsets[1:]):
        trees.append(Tree(arrays["tree_feature"][a:b].astype(np.int64),
                          arrays["tree_threshold"][a:b].copy(),
                          arrays["tree_left"][a:b].astype(np.int64),
                          arrays["tree_right"][a:b].astype(np.int64),
                          arrays["tree_value"][a:b].copy()))
    return trees


def save_classifier(clf: TrainedClassifier, path) -> None:
    arrays = dict(clf.arrays)
    arrays.update(_pack_trees(clf.trees))
    header = {
        "kind": clf.kind,
        "n_classes": clf.n_classes,
        "meta": clf.meta,
        "arrays": [{"name": n, "shape": list(np.asarray(a).shape)}
                   for n, a in sorted(arrays.items())],
    }
    buf = io.BytesIO()
    buf.write(CLASSIFIER_MAGIC)
    hdr = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(hdr)))
    buf.write(hdr)
    for name, arr in sorted(arrays.items()):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_classifier(path) -> TrainedClassifier:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CLASSIFIER_MAGIC:
        raise IntegrityError("bad classifier magic bytes")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen].decode())
    if header["kind"] not in KINDS:
        raise IntegrityError(f"unknown classifier kind {header['kind']!r}")
    offset = 12 + hlen
    arrays = {}
    for rec in header["arrays"]:
        shape = tuple(rec["shape"])
        size = int(np.prod(shape)) * 8
        arrays[rec["name"]] = np.frombuffer(
            blob[offset:offset + size], dtype="<f8").reshape(shape).copy()
        offset += size
    if offset != len(blob):
        raise IntegrityError("trailing bytes in classifier file")
    trees = _unpack_trees(arrays)
    plain = {n: a for n, a in arrays.items() if not n.startswith("tree_")}
    return TrainedClassifier(header["kind"], header["n_classes"],
                             arrays=plain, trees=trees, meta=header["meta"])
