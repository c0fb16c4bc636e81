"""Datasets: IDX and CSV loaders, synthetic Gaussian blobs, seeded splits."""

import csv
import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "DEEPFOOL_DATA_DIR"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class Dataset:
    """Labelled samples stored as an ``(m, n)`` float64 matrix.

    ``ids`` identify samples across splits and permutations; reports are
    keyed on them.
    """

    x: np.ndarray
    y: np.ndarray
    n_classes: int
    ids: Optional[np.ndarray] = None
    feature_range: Optional[tuple] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64, order="C")
        y = np.array(self.y, dtype=np.int64)
        if x.ndim != 2:
            raise ValueError(f"samples must form a 2-D array, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValueError("label count differs from sample count")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples contain non-finite values")
        ids = np.arange(len(y)) if self.ids is None else np.array(self.ids, dtype=np.int64)
        if ids.shape != y.shape or len(np.unique(ids)) != len(ids):
            raise ValueError("sample ids must be unique, one per sample")
        for arr in (x, y, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "ids", ids)
        if self.feature_range is not None:
            object.__setattr__(self, "feature_range", tuple(map(float, self.feature_range)))

    def __len__(self):
        return len(self.y)

    @property
    def n_features(self):
        return self.x.shape[1]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.x[indices],
            self.y[indices],
            self.n_classes,
            self.ids[indices],
            self.feature_range,
            dict(self.metadata),
        )

    def replace(self, x=None, y=None):
        return Dataset(
            self.x if x is None else x,
            self.y if y is None else y,
            self.n_classes,
            self.ids,
            self.feature_range,
            dict(self.metadata),
        )

    def dynamic_range(self):
        if self.feature_range is not None:
            return self.feature_range[1] - self.feature_range[0]
        if len(self) == 0:
            return 1.0
        return float(self.x.max() - self.x.min())


# -- IDX ------------------------------------------------------------------------


def _read_bytes(path):
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".gz":
        data = gzip.decompress(data)
    return data


def _parse_idx(data, expected_magic, what):
    if len(data) < 4:
        raise DataFormatError(f"{what}: file too short for a header", 0)
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic != expected_magic:
        raise DataFormatError(
            f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0
        )
    ndim = magic & 0xFF
    if len(data) < 4 + 4 * ndim:
        raise DataFormatError(f"{what}: truncated dimension header", len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    start = 4 + 4 * ndim
    size = int(np.prod(dims))
    if len(data) - start < size:
        raise DataFormatError(
            f"{what}: payload truncated, need {size} bytes, have {len(data) - start}",
            len(data),
        )
    if len(data) - start > size:
        raise DataFormatError(f"{what}: unexpected trailing bytes", start + size)
    return dims, np.frombuffer(data, dtype=np.uint8, count=size, offset=start)


def load_idx(images_path, labels_path, n_classes=None):
    """Read an IDX image/label pair; pixels are scaled to ``[0, 1]``."""
    img_dims, pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    lbl_dims, labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    if img_dims[0] != lbl_dims[0]:
        raise DataFormatError(
            f"image count {img_dims[0]} differs from label count {lbl_dims[0]}", 4
        )
    count, rows, cols = img_dims
    x = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1 if y.size else 1
    return Dataset(
        x,
        y,
        n_classes,
        feature_range=(0.0, 1.0),
        metadata={"source": "idx", "image_shape": [rows, cols], "scale": "pixel/255"},
    )


def save_idx(dataset, images_path, labels_path, image_shape=None):
    """Write ``dataset`` as IDX; values must be multiples of 1/255 in [0, 1]."""
    n = dataset.n_features
    if image_shape is None:
        image_shape = dataset.metadata.get("image_shape")
    if image_shape is None:
        side = int(round(np.sqrt(n)))
        image_shape = (side, side) if side * side == n else (1, n)
    rows, cols = image_shape
    if rows * cols != n:
        raise ValueError(f"image shape {image_shape} does not hold {n} features")
    pixels = np.rint(dataset.x * 255.0)
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > 255:
        raise ValueError("IDX pixels must lie in [0, 1]")
    if dataset.y.size and dataset.y.max() > 255:
        raise ValueError("IDX labels must fit in one byte")
    m = len(dataset)
    Path(images_path).write_bytes(
        struct.pack(">IIII", IDX_IMAGES_MAGIC, m, rows, cols)
        + pixels.astype(np.uint8).tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, m) + dataset.y.astype(np.uint8).tobytes()
    )


# -- CSV ------------------------------------------------------------------------


def load_csv(path, n_classes=None):
    """Read ``label,f0,f1,...`` rows."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file", 0) from None
        if not header or header[0] != "label":
            raise DataFormatError(f"{path}: header must start with 'label'", 0)
        n = len(header) - 1
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != n + 1:
                raise DataFormatError(f"{path}:{lineno}: expected {n + 1} fields")
            try:
                ys.append(int(row[0]))
                xs.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    y = np.array(ys, dtype=np.int64)
    x = np.array(xs, dtype=np.float64).reshape(len(ys), n)
    if n_classes is None:
        n_classes = int(y.max()) + 1 if y.size else 1
    try:
        return Dataset(x, y, n_classes, metadata={"source": "csv"})
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def save_csv(dataset, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"f{i}" for i in range(dataset.n_features)])
        for xi, yi in zip(dataset.x, dataset.y):
            writer.writerow([int(yi)] + [repr(float(v)) for v in xi])


# -- synthetic ----------------------------------------------------------------------


def synth_blobs(
    n_features,
    n_classes,
    per_class,
    spread,
    seed=0,
    center_range=(0.0, 1.0),
    informative=None,
):
    """Isotropic Gaussian clusters around centers drawn uniformly in a box.

    With ``informative=k`` the centers differ only in the first ``k``
    features; the remaining ones share a single common center (noise is
    still added everywhere). Samples are ordered class by class.
    """
    if n_classes < 2:
        raise ConfigError("synthetic blobs need at least two classes")
    if spread < 0:
        raise ConfigError("spread must be >= 0")
    rng = np.random.default_rng(seed)
    lo, hi = center_range
    centers = rng.uniform(lo, hi, size=(n_classes, n_features))
    k = n_features if informative is None else int(informative)
    if not 1 <= k <= n_features:
        raise ConfigError("informative must lie in [1, n_features]")
    centers[:, k:] = centers[0, k:]
    noise = rng.standard_normal((n_classes, per_class, n_features))
    x = (centers[:, None, :] + spread * noise).reshape(-1, n_features)
    y = np.repeat(np.arange(n_classes), per_class)
    return Dataset(
        x,
        y,
        n_classes,
        metadata={
            "source": "blobs",
            "n_features": n_features,
            "per_class": per_class,
            "spread": spread,
            "seed": seed,
            "informative": k,
            "centers": centers.tolist(),
        },
    )


def split(dataset, fractions, seed=0):
    """Disjoint seeded random split; returns one dataset per fraction."""
    fractions = [float(f) for f in fractions]
    if not fractions or any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise ConfigError(f"fractions must be >= 0 and sum to at most 1: {fractions}")
    if not any(f > 0 for f in fractions):
        raise ConfigError("at least one fraction must be positive")
    m = len(dataset)
    order = np.random.default_rng(seed).permutation(m)
    counts = [int(np.floor(f * m + 1e-9)) for f in fractions]
    parts, start = [], 0
    for k in counts:
        parts.append(dataset.subset(np.sort(order[start : start + k])))
        start += k
    return tuple(parts)


# -- dataset specs -----------------------------------------------------------------


def _parse_params(text):
    params = {}
    if text:
        for item in text.split(","):
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"expected key=value, got {item!r}")
            params[key.strip()] = value.strip()
    return params


# desk-scale stand-in for MNIST: 784 features, 10 classes, 2500 samples
BLOB_DEFAULTS = {
    "n": 784, "c": 10, "per_class": 250, "spread": 0.2, "seed": 0, "informative": 96,
}


def resolve_dataset(spec, data_dir=None):
    """Load a dataset from a spec string.

    Returns ``(data, test)`` where ``test`` is ``None`` unless the source
    ships its own test split (MNIST). Accepted specs:

    * ``mnist`` - IDX files in ``data_dir`` or ``$DEEPFOOL_DATA_DIR``
    * ``idx:IMAGES,LABELS``
    * ``csv:PATH``
    * ``blobs`` or ``blobs:n=784,c=10,per_class=250,spread=0.2,seed=0,informative=96``
    """
    kind, _, rest = spec.partition(":")
    if kind == "mnist":
        root = Path(data_dir or os.environ.get(DATA_DIR_ENV, "."))
        parts = []
        for name in ("train", "test"):
            img, lbl = (_find(root, f) for f in MNIST_FILES[name])
            parts.append(load_idx(img, lbl, n_classes=10))
        return parts[0], parts[1]
    if kind == "idx":
        img, sep, lbl = rest.partition(",")
        if not sep:
            raise ConfigError("idx spec needs IMAGES,LABELS")
        return load_idx(_existing(img), _existing(lbl)), None
    if kind == "csv":
        return load_csv(_existing(rest)), None
    if kind == "blobs":
        params = dict(BLOB_DEFAULTS)
        given = _parse_params(rest)
        unknown = set(given) - set(params)
        if unknown:
            raise ConfigError(f"unknown blob parameters: {sorted(unknown)}")
        params.update(given)
        return (
            synth_blobs(
                int(params["n"]),
                int(params["c"]),
                int(params["per_class"]),
                float(params["spread"]),
                int(params["seed"]),
                informative=int(params["informative"]) or None,
            ),
            None,
        )
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _existing(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset file not found: {p}")
    return p


def _find(root, name):
    for candidate in (root / name, root / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"MNIST file {name} not found in {root}")
