"""Dataset ingestion, synthetic task generation, splitting, and augmentation.

Images are float64 arrays of shape (H, W, C) with values in [0, 1] and
C in {1, 3}. Only binary PGM (P5) and PPM (P6) files are read or written;
anything else should be converted externally.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgumentError, InvalidDatasetError


@dataclass
class LabeledImageSet:
    """A stack of same-shaped images with integer labels and class names."""

    images: np.ndarray  # (N, H, W, C)
    labels: np.ndarray  # (N,) int
    class_names: list[str]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InvalidArgumentError("images must be a (N,H,W,C) stack")
        if self.images.shape[3] not in (1, 3):
            raise InvalidArgumentError("channel count must be 1 or 3")
        if len(self.labels) != len(self.images):
            raise InvalidArgumentError("labels/images length mismatch")
        if len(self.labels) and self.labels.max() >= len(self.class_names):
            raise InvalidArgumentError("label out of range for class_names")

    def __len__(self):
        return len(self.images)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, idx) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.labels[idx], list(self.class_names))


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidArgumentError("train_fraction must be in (0, 1)")


@dataclass(frozen=True)
class AugmentConfig:
    rotation_degrees: tuple[float, float] = (-15.0, 15.0)
    zoom: tuple[float, float] = (0.8, 1.0)
    hflip: bool = True
    vflip: bool = True
    blur_kernel: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise InvalidArgumentError("blur_kernel must be odd and >= 1")
        lo, hi = self.zoom
        if not (0.0 < lo <= hi <= 2.0):
            raise InvalidArgumentError("zoom bounds must lie in (0, 2]")


# ---------------------------------------------------------------------------
# PGM / PPM I/O (binary P5 / P6, maxval <= 255)
# ---------------------------------------------------------------------------

def _read_pnm_header(f):
    """Read magic, width, height, maxval, skipping whitespace and # comments."""
    def token():
        tok = b""
        while True:
            ch = f.read(1)
            if ch == b"":
                raise InvalidArgumentError("truncated PNM header")
            if ch == b"#":
                while ch not in (b"\n", b""):
                    ch = f.read(1)
                continue
            if ch.isspace():
                if tok:
                    return tok
                continue
            tok += ch

    magic = token()
    width = int(token())
    height = int(token())
    maxval = int(token())
    return magic, width, height, maxval


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM/PPM file into an (H, W, C) float array in [0, 1]."""
    try:
        with open(path, "rb") as f:
            magic, w, h, maxval = _read_pnm_header(f)
            if magic not in (b"P5", b"P6"):
                raise InvalidArgumentError(f"unsupported PNM magic {magic!r}")
            if maxval > 255:
                raise InvalidArgumentError("only 8-bit PNM supported")
            channels = 1 if magic == b"P5" else 3
            raw = f.read(w * h * channels)
            if len(raw) != w * h * channels:
                raise InvalidArgumentError("truncated PNM pixel data")
    except OSError as exc:
        raise InvalidArgumentError(f"cannot read image {os.fspath(path)}: {exc}") from exc
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, channels)
    return arr.astype(np.float64) / maxval


def write_pnm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an (H, W, 1) or (H, W, 3) float image in [0, 1] as binary PGM/PPM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if c not in (1, 3):
        raise InvalidArgumentError("image must have 1 or 3 channels")
    magic = b"P5" if c == 1 else b"P6"
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


# ---------------------------------------------------------------------------
# Geometry: bilinear sampling with edge clamp
# ---------------------------------------------------------------------------

def _sample_bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample image at fractional (ys, xs) grids; coordinates clamp to edges."""
    h, w, _ = image.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize an (H, W, C) image to (new_h, new_w) with bilinear interpolation."""
    new_h, new_w = size
    h, w, _ = image.shape
    if (h, w) == (new_h, new_w):
        return image.copy()
    ys = (np.arange(new_h) + 0.5) * h / new_h - 0.5
    xs = (np.arange(new_w) + 0.5) * w / new_w - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return _sample_bilinear(image, grid_y, grid_x)


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center; out-of-range samples clamp to the edge."""
    h, w, _ = image.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    grid_y, grid_x = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    dy, dx = grid_y - cy, grid_x - cx
    # inverse rotation of output coordinates
    src_y = cy + np.cos(theta) * dy - np.sin(theta) * dx
    src_x = cx + np.sin(theta) * dy + np.cos(theta) * dx
    return _sample_bilinear(image, src_y, src_x)


def zoom(image: np.ndarray, factor: float) -> np.ndarray:
    """Scale about the center; factor < 1 magnifies the central region."""
    h, w, _ = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    grid_y, grid_x = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    src_y = cy + (grid_y - cy) * factor
    src_x = cx + (grid_x - cx) * factor
    return _sample_bilinear(image, src_y, src_x)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def vflip(image: np.ndarray) -> np.ndarray:
    return image[::-1].copy()


def box_blur(image: np.ndarray, kernel: int) -> np.ndarray:
    """Normalized box blur with edge-clamp padding; kernel must be odd."""
    if kernel < 1 or kernel % 2 == 0:
        raise InvalidArgumentError("kernel must be odd and >= 1")
    if kernel == 1:
        return image.copy()
    r = kernel // 2
    padded = np.pad(image, ((r, r), (r, r), (0, 0)), mode="edge")
    h, w, _ = image.shape
    out = np.zeros_like(image)
    for dy in range(kernel):
        for dx in range(kernel):
            out += padded[dy:dy + h, dx:dx + w]
    return out / (kernel * kernel)


def random_transform(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One random augmentation draw: rotation, zoom, optional flips, optional blur."""
    out = rotate(image, rng.uniform(*cfg.rotation_degrees))
    out = zoom(out, rng.uniform(*cfg.zoom))
    if cfg.hflip and rng.random() < 0.5:
        out = hflip(out)
    if cfg.vflip and rng.random() < 0.5:
        out = vflip(out)
    if rng.random() < 0.5:
        out = box_blur(out, cfg.blur_kernel)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Dataset operations
# ---------------------------------------------------------------------------

def load_image_dir(path: str | os.PathLike, size: tuple[int, int]) -> LabeledImageSet:
    """Load `<path>/<class_name>/*.pgm|*.ppm`, resizing everything to `size`.

    Class names are the subdirectory names, sorted lexicographically. If the
    directory mixes grayscale and color files, grayscale images are promoted
    to three channels.
    """
    root = os.fspath(path)
    class_names = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not class_names:
        raise InvalidDatasetError(f"no class subdirectories under {root}")
    images, labels = [], []
    for label, name in enumerate(class_names):
        class_dir = os.path.join(root, name)
        files = sorted(
            f for f in os.listdir(class_dir)
            if f.lower().endswith((".pgm", ".ppm"))
        )
        if not files:
            raise InvalidDatasetError(f"class directory {class_dir} holds no PGM/PPM files")
        for fname in files:
            img = read_pnm(os.path.join(class_dir, fname))
            images.append(resize_bilinear(img, size))
            labels.append(label)
    channels = max(img.shape[2] for img in images)
    if channels == 3:
        images = [np.repeat(im, 3, axis=2) if im.shape[2] == 1 else im for im in images]
    return LabeledImageSet(np.stack(images), np.array(labels), class_names)


def gray_to_3ch(dataset: LabeledImageSet) -> LabeledImageSet:
    """Replicate a single channel three times; no-op (with warning) on 3-channel input."""
    if dataset.images.shape[3] == 3:
        import warnings

        warnings.warn("dataset already has 3 channels; gray_to_3ch is a no-op")
        return dataset
    return replace(dataset, images=np.repeat(dataset.images, 3, axis=3))


def one_hot(label: int, n_classes: int) -> np.ndarray:
    if not 0 <= label < n_classes:
        raise InvalidArgumentError(f"label {label} out of range for {n_classes} classes")
    vec = np.zeros(n_classes)
    vec[label] = 1.0
    return vec


def one_hot_matrix(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidArgumentError("label out of range")
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def stratified_split(dataset: LabeledImageSet, spec: SplitSpec) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Deterministic train/test split.

    Stratified mode keeps per-class train counts within one sample of
    round(train_fraction * class size): per-class floor first, then one
    extra sample to the largest classes until the overall rounded target
    is met.
    """
    rng = np.random.default_rng(spec.seed)
    n = len(dataset)
    if not spec.stratified:
        perm = rng.permutation(n)
        n_train = int(round(spec.train_fraction * n))
        return dataset.subset(np.sort(perm[:n_train])), dataset.subset(np.sort(perm[n_train:]))

    counts = dataset.class_counts()
    if np.any(counts < 2):
        raise InvalidDatasetError("stratified split needs at least 2 samples per class")
    takes = np.floor(spec.train_fraction * counts).astype(int)
    leftover = int(round(spec.train_fraction * n)) - int(takes.sum())
    order = sorted(range(len(counts)), key=lambda c: (-counts[c], c))
    for c in order:
        if leftover <= 0:
            break
        if takes[c] < counts[c] - 1:
            takes[c] += 1
            leftover -= 1
    train_idx, test_idx = [], []
    for c in range(dataset.n_classes):
        members = np.flatnonzero(dataset.labels == c)
        perm = rng.permutation(len(members))
        train_idx.extend(members[perm[: takes[c]]])
        test_idx.extend(members[perm[takes[c]:]])
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(test_idx))


def augment_balance(train: LabeledImageSet, cfg: AugmentConfig) -> LabeledImageSet:
    """Grow every minority class to the size of the largest class.

    Originals are kept untouched; synthetic samples are random transforms
    of same-class originals, appended after the original block.
    """
    if len(train) == 0:
        raise InvalidDatasetError("cannot augment an empty training set")
    counts = train.class_counts()
    target = int(counts.max())
    rng = np.random.default_rng(cfg.seed)
    extra_images, extra_labels = [], []
    for c in range(train.n_classes):
        deficit = target - int(counts[c])
        if deficit <= 0:
            continue
        members = np.flatnonzero(train.labels == c)
        for i in range(deficit):
            src = train.images[members[i % len(members)]]
            extra_images.append(random_transform(src, cfg, rng))
            extra_labels.append(c)
    if not extra_images:
        return train
    return LabeledImageSet(
        np.concatenate([train.images, np.stack(extra_images)]),
        np.concatenate([train.labels, np.array(extra_labels)]),
        list(train.class_names),
    )


def augment_multiply(train: LabeledImageSet, factor: int, cfg: AugmentConfig) -> LabeledImageSet:
    """Append (factor - 1) random transforms of every sample (factor >= 1)."""
    if factor < 1:
        raise InvalidArgumentError("factor must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    extra_images, extra_labels = [], []
    for _ in range(factor - 1):
        for img, label in zip(train.images, train.labels):
            extra_images.append(random_transform(img, cfg, rng))
            extra_labels.append(label)
    if not extra_images:
        return train
    return LabeledImageSet(
        np.concatenate([train.images, np.stack(extra_images)]),
        np.concatenate([train.labels, np.array(extra_labels)]),
        list(train.class_names),
    )


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------

_MOTIFS = ("disk", "bar", "cross", "ring")
_TINTS = {
    "disk": (1.0, 0.7, 0.7),
    "bar": (0.7, 1.0, 0.7),
    "cross": (0.7, 0.7, 1.0),
    "ring": (1.0, 1.0, 0.7),
}
_TASK_MOTIFS = {
    "generic": ("disk", "bar", "cross", "ring"),
    "shapes4": ("disk", "bar", "cross", "ring"),
    "shapes3": ("disk", "bar", "cross"),
    "binary": ("disk", "bar"),
}


def _draw_motif(motif: str, size: tuple[int, int], rng: np.random.Generator,
                param_shift: float) -> np.ndarray:
    h, w = size
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    scale = min(h, w)
    cy = h / 2.0 + rng.uniform(-0.06, 0.06) * h
    cx = w / 2.0 + rng.uniform(-0.06, 0.06) * w
    r_base = (0.28 + param_shift) * scale
    thick = (0.10 + 0.5 * param_shift) * scale
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    if motif == "disk":
        mask = dist <= r_base
    elif motif == "bar":
        mask = (np.abs(yy - cy) <= thick) & (np.abs(xx - cx) <= r_base * 1.3)
    elif motif == "cross":
        arm = r_base * 1.15
        mask = ((np.abs(yy - cy) <= thick * 0.8) & (np.abs(xx - cx) <= arm)) | (
            (np.abs(xx - cx) <= thick * 0.8) & (np.abs(yy - cy) <= arm)
        )
    elif motif == "ring":
        mask = (dist <= r_base) & (dist >= r_base - thick)
    else:
        raise InvalidArgumentError(f"unknown motif {motif!r}")
    canvas = np.full((h, w), 0.15 + param_shift * 0.3)
    fg = 0.85 - param_shift * 0.2
    img = np.where(mask, fg, canvas)
    tint = np.array(_TINTS[motif])
    return img[:, :, None] * tint[None, None, :]


def make_synthetic_task(kind: str, n_per_class: int, size: tuple[int, int],
                        noise_std: float, seed: int, *, param_shift: float = 0.0) -> LabeledImageSet:
    """Generate a deterministic geometric-motif classification task.

    `param_shift` nudges motif geometry and palette, producing a related but
    distribution-shifted variant of the same task (used to stand in for a
    change of domain).
    """
    if kind not in _TASK_MOTIFS:
        raise InvalidArgumentError(f"unknown task kind {kind!r}")
    if n_per_class < 1:
        raise InvalidArgumentError("n_per_class must be >= 1")
    motifs = _TASK_MOTIFS[kind]
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label, motif in enumerate(motifs):
        for _ in range(n_per_class):
            img = _draw_motif(motif, size, rng, param_shift)
            if noise_std > 0:
                img = img + rng.normal(0.0, noise_std, img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(label)
    return LabeledImageSet(np.stack(images), np.array(labels), list(motifs))
