"""Datasets, modality splits and the labeled / reference / evaluation protocol."""

from __future__ import annotations

import fnmatch
import gzip
import logging
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
STD_FLOOR = 1e-12

# (primary width, secondary width, classes)
DATASET_DIMS = {
    "mnist_half": (392, 392, 10),
    "activity": (208, 151, 4),
    "crop": (76, 98, 7),
}


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# ----------------------------------------------------------------------
# IDX
# ----------------------------------------------------------------------
def _open(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path, magic):
    """Raw unsigned-byte IDX array (images ``(n, rows, cols)`` or labels ``(n,)``)."""
    raw = _open(path)
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    found, count = struct.unpack(">II", raw[:8])
    if found != magic:
        raise DataError(f"{path}: magic {found}, expected {magic}")
    if magic == IMAGE_MAGIC:
        if len(raw) < 16:
            raise DataError(f"{path}: truncated header")
        rows, cols = struct.unpack(">II", raw[8:16])
        shape, offset = (count, rows, cols), 16
    else:
        shape, offset = (count,), 8
    expected = int(np.prod(shape))
    body = np.frombuffer(raw, dtype=np.uint8, offset=offset)
    if body.size < expected:
        raise DataError(f"{path}: truncated payload ({body.size} of {expected} bytes)")
    return body[:expected].reshape(shape)


def write_idx(path, array):
    """Write a uint8 array as IDX (3-d -> images, 1-d -> labels)."""
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim == 3:
        header = struct.pack(">IIII", IMAGE_MAGIC, *array.shape)
    elif array.ndim == 1:
        header = struct.pack(">II", LABEL_MAGIC, array.shape[0])
    else:
        raise DataError(f"IDX writer expects 1-d or 3-d arrays, got {array.ndim}-d")
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_idx_images(images_path, labels_path):
    """Flattened pixel rows scaled to ``[0, 1]`` and their labels."""
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return X, labels.astype(np.int64)


# ----------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class ModalDataset:
    name: str
    X_primary: np.ndarray
    Z_secondary: np.ndarray
    y: np.ndarray
    class_count: int
    standardize: bool = False
    source: str = ""

    def __post_init__(self):
        n = self.X_primary.shape[0]
        if self.Z_secondary.shape[0] != n or self.y.shape[0] != n:
            raise DataError("primary, secondary and label row counts differ")
        if n and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise DataError(f"labels outside [0, {self.class_count})")
        dims = DATASET_DIMS.get(self.name)
        if dims is not None:
            want = dims[:2]
            got = (self.X_primary.shape[1], self.Z_secondary.shape[1])
            if got != want:
                raise DataError(f"{self.name}: feature widths {got}, expected {want}")

    def __len__(self):
        return self.X_primary.shape[0]


def split_halves(X):
    """Upper and lower image halves: columns ``[0, w/2)`` and ``[w/2, w)``."""
    half = X.shape[1] // 2
    return X[:, :half], X[:, half:]


def mnist_half(X, y, source="idx"):
    upper, lower = split_halves(X)
    return ModalDataset("mnist_half", upper, lower, np.asarray(y), 10, source=source)


def load_mnist_subset():
    """The 5000-image MNIST sample bundled with ``mlxtend`` (pixel values 0-255)."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise DataError("mlxtend is not installed; pass IDX paths instead") from exc
    X, y = mnist_data()
    return X.astype(np.float64) / 255.0, y.astype(np.int64)


IDX_NAMES = (
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("train-images.idx3-ubyte", "train-labels.idx1-ubyte"),
)


def find_idx_files(directory):
    directory = Path(directory)
    for images, labels in IDX_NAMES:
        for suffix in ("", ".gz"):
            ip, lp = directory / (images + suffix), directory / (labels + suffix)
            if ip.exists() and lp.exists():
                return ip, lp
    return None


def load_mnist_half(images=None, labels=None, source="auto"):
    """MNIST split into upper (primary) and lower (reference) halves.

    ``source`` is ``idx`` (explicit paths or ``$ATTNPATCH_DATA_DIR/mnist``),
    ``mlxtend`` (bundled 5000-image sample) or ``auto`` (first that works).
    """
    if source in ("idx", "auto"):
        if images is None:
            base = os.environ.get("ATTNPATCH_DATA_DIR")
            found = find_idx_files(Path(base) / "mnist") if base else None
            if found:
                images, labels = found
        if images is not None:
            X, y = load_idx_images(images, labels)
            return mnist_half(X, y, source=f"idx:{images}")
        if source == "idx":
            raise DataError("no MNIST IDX files given or found under $ATTNPATCH_DATA_DIR/mnist")
    if source in ("mlxtend", "auto"):
        X, y = load_mnist_subset()
        log.info("using the 5000-image mlxtend MNIST sample")
        return mnist_half(X, y, source="mlxtend-5k")
    raise DataError(f"unknown MNIST source {source!r}")


# ----------------------------------------------------------------------
# delimited tables
# ----------------------------------------------------------------------
@dataclass
class TabularSchema:
    """Which columns of a delimited table form each modality.

    ``primary`` and ``secondary`` are lists of column names or
    shell-style patterns (``"f9[9]"``, ``"eda_*"``). ``classes`` maps raw
    label values (as strings) to class indices, in order.
    """

    name: str
    primary: list
    secondary: list
    label: str = "label"
    classes: list | None = None
    delimiter: str = ","

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _numbered(prefix, lo, hi):
    return [f"{prefix}{i}" for i in range(lo, hi + 1)]


SCHEMAS = {
    # UCI "crop mapping using fused optical-radar data": f1-f98 radar, f99-f174 optical
    "crop": TabularSchema(
        "crop",
        primary=_numbered("f", 99, 174),
        secondary=_numbered("f", 1, 98),
        label="label",
        classes=[str(i) for i in range(1, 8)],
    ),
    "activity": TabularSchema(
        "activity",
        primary=["eda_*"],
        secondary=["teb_*"],
        label="label",
        classes=["neutral", "mental", "emotional", "physical"],
    ),
}


def _select(header, patterns, what):
    chosen = []
    for pat in patterns:
        hits = [c for c in header if fnmatch.fnmatchcase(c, pat)]
        if not hits:
            raise DataError(f"{what} column {pat!r} not found in header")
        chosen.extend(h for h in hits if h not in chosen)
    return chosen


def load_csv_tabular(path, schema):
    """Load a delimited table with a header row into a :class:`ModalDataset`.

    Values are left raw; z-scoring happens in :func:`apply_split` using
    statistics from training/reference rows only.
    """
    if isinstance(schema, str):
        schema = SCHEMAS[schema]
    with open(path, newline="") as fh:
        lines = [ln.rstrip("\r\n") for ln in fh if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in lines[0].split(schema.delimiter)]
    if schema.label not in header:
        raise DataError(f"label column {schema.label!r} not found in header")
    prim = _select(header, schema.primary, "primary")
    sec = _select(header, schema.secondary, "secondary")
    col = {name: i for i, name in enumerate(header)}
    rows = [ln.split(schema.delimiter) for ln in lines[1:]]
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{r}: {len(row)} cells, header has {len(header)}")

    def numeric(names):
        idx = [col[n] for n in names]
        out = np.empty((len(rows), len(idx)))
        for r, row in enumerate(rows):
            for j, i in enumerate(idx):
                try:
                    out[r, j] = float(row[i])
                except ValueError:
                    raise DataError(
                        f"{path}:{r + 2}: non-numeric value {row[i]!r} in column {header[i]!r}"
                    ) from None
        return out

    raw_labels = [row[col[schema.label]].strip() for row in rows]
    classes = schema.classes or sorted(set(raw_labels))
    lookup = {c: i for i, c in enumerate(classes)}
    try:
        y = np.array([lookup[v] for v in raw_labels], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"unknown label value {exc.args[0]!r}") from None
    return ModalDataset(
        schema.name,
        numeric(prim),
        numeric(sec),
        y,
        len(classes),
        standardize=True,
        source=str(path),
    )


# ----------------------------------------------------------------------
# splits
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class SplitPlan:
    labeled_idx: np.ndarray
    reference_idx: np.ndarray
    eval_idx: np.ndarray
    seed: object = None


@dataclass(frozen=True)
class LabeledSet:
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.X.shape[0]


@dataclass(frozen=True)
class ReferenceSet:
    """Secondary-modality rows only; no labels and no primary features."""

    Z: np.ndarray

    def __len__(self):
        return self.Z.shape[0]


@dataclass(frozen=True)
class SplitData:
    labeled: LabeledSet
    reference: ReferenceSet
    eval: LabeledSet
    stats: dict = field(default_factory=dict)


def make_split(dataset, seed, n_labeled=200, n_reference=1000, stratify=False):
    """Disjoint labeled / reference / evaluation index sets, sampled without replacement."""
    n = len(dataset)
    if n < n_labeled + n_reference + 1:
        raise DataError(
            f"{dataset.name} has {n} rows; need at least {n_labeled + n_reference + 1}"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    if stratify:
        labeled = _stratified(dataset.y, perm, n_labeled, dataset.class_count)
        rest = perm[~np.isin(perm, labeled)]
    else:
        labeled, rest = perm[:n_labeled], perm[n_labeled:]
    reference = rest[:n_reference]
    evaluation = np.sort(rest[n_reference:])
    return SplitPlan(np.sort(labeled), np.sort(reference), evaluation, seed)


def _stratified(y, perm, k, classes):
    per_class = [perm[y[perm] == c] for c in range(classes)]
    quota = np.full(classes, k // classes)
    quota[: k - quota.sum()] += 1
    picked = np.concatenate([members[:q] for members, q in zip(per_class, quota)])
    if picked.size < k:
        extra = perm[~np.isin(perm, picked)][: k - picked.size]
        picked = np.concatenate([picked, extra])
    return picked


def _zscore(train_rows):
    mean = train_rows.mean(axis=0)
    std = train_rows.std(axis=0)
    std = np.where(std < STD_FLOOR, np.inf, std)
    return mean, std


def apply_split(dataset, plan):
    """Materialise a plan; tabular datasets are z-scored with non-eval statistics."""
    X_lab = dataset.X_primary[plan.labeled_idx]
    X_eval = dataset.X_primary[plan.eval_idx]
    Z_ref = dataset.Z_secondary[plan.reference_idx]
    stats = {}
    if dataset.standardize:
        # primary stats come from labeled rows, secondary from reference rows
        mx, sx = _zscore(X_lab)
        mz, sz = _zscore(Z_ref)
        X_lab, X_eval, Z_ref = (X_lab - mx) / sx, (X_eval - mx) / sx, (Z_ref - mz) / sz
        stats = {"primary_mean": mx, "primary_std": sx, "secondary_mean": mz, "secondary_std": sz}
    return SplitData(
        labeled=LabeledSet(X_lab, dataset.y[plan.labeled_idx]),
        reference=ReferenceSet(Z_ref),
        eval=LabeledSet(X_eval, dataset.y[plan.eval_idx]),
        stats=stats,
    )


def subsample(dataset, n, seed):
    """Random subset of ``n`` rows (for quick runs)."""
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), size=n, replace=False))
    return replace(
        dataset,
        X_primary=dataset.X_primary[idx],
        Z_secondary=dataset.Z_secondary[idx],
        y=dataset.y[idx],
    )
