"""Dataset ingestion, benchmark construction, and synthetic generators.

All splits and generators are deterministic given a seed; no statistic
computed on test rows ever reaches a fitted transform.
"""

import csv
import re
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from cance.errors import DataFormatError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
EMBEDDINGS_MAGIC = b"CEMB"
EMBEDDINGS_VERSION = 1


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    class_ids: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError("features must be a 2-D matrix")
        if not np.all(np.isfinite(self.features)):
            raise DataFormatError(f"dataset {self.name!r} contains non-finite values")
        for attr in ("labels", "class_ids"):
            vec = getattr(self, attr)
            if vec is not None:
                vec = np.asarray(vec, dtype=np.int64)
                if vec.shape != (self.features.shape[0],):
                    raise ShapeError(f"{attr} length != number of rows")
                setattr(self, attr, vec)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, idx: np.ndarray, name: str | None = None) -> "Dataset":
        return Dataset(
            self.features[idx],
            None if self.labels is None else self.labels[idx],
            None if self.class_ids is None else self.class_ids[idx],
            self.name if name is None else name,
        )


@dataclass
class SplitSpec:
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0,1), got {self.val_fraction}")


def split_train_val(dataset: Dataset, spec: SplitSpec,
                    rng: np.random.Generator):
    """Deterministic partition into (train, val); val gets the stated fraction."""
    order = rng.permutation(dataset.n)
    n_val = max(1, int(round(dataset.n * spec.val_fraction)))
    if n_val >= dataset.n:
        raise ShapeError("validation fraction leaves no training rows")
    return (
        dataset.take(order[n_val:], name=f"{dataset.name}/train"),
        dataset.take(order[:n_val], name=f"{dataset.name}/val"),
    )


# --------------------------------------------------------------------------
# file formats


def load_csv(path, feature_columns=None, label_column=None, class_column=None,
             name=None) -> Dataset:
    """Read a numeric CSV with a header row.

    Column roles are given by name; unlisted columns become features when
    `feature_columns` is None. Non-numeric cells are errors that cite the
    row and column.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for col in filter(None, (label_column, class_column)):
            if col not in header:
                raise DataFormatError(f"{path}: missing column {col!r}")
        if feature_columns is None:
            feature_columns = [
                h for h in header if h not in (label_column, class_column)
            ]
        else:
            for col in feature_columns:
                if col not in header:
                    raise DataFormatError(f"{path}: missing column {col!r}")
        index = {h: i for i, h in enumerate(header)}
        rows, labels, classes = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}: row {lineno} has {len(row)} fields, expected "
                    f"{len(header)}"
                )
            def cell(col):
                raw = row[index[col]]
                try:
                    return float(raw)
                except ValueError:
                    raise DataFormatError(
                        f"{path}: row {lineno}, column {col!r}: "
                        f"cannot parse {raw!r}"
                    ) from None
            rows.append([cell(c) for c in feature_columns])
            if label_column:
                labels.append(int(cell(label_column)))
            if class_column:
                classes.append(int(cell(class_column)))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset(
        np.array(rows, dtype=np.float64),
        np.array(labels) if label_column else None,
        np.array(classes) if class_column else None,
        name or str(path),
    )


def write_csv(path, dataset: Dataset, feature_prefix: str = "f") -> None:
    """Write a dataset with full float round-trip precision."""
    header = [f"{feature_prefix}{i}" for i in range(dataset.dim)]
    if dataset.labels is not None:
        header.append("label")
    if dataset.class_ids is not None:
        header.append("class")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.n):
            row = [repr(float(v)) for v in dataset.features[i]]
            if dataset.labels is not None:
                row.append(str(int(dataset.labels[i])))
            if dataset.class_ids is not None:
                row.append(str(int(dataset.class_ids[i])))
            writer.writerow(row)


def _read_be_u32(fh, path, what) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise DataFormatError(f"{path}: truncated {what}")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path, name=None) -> Dataset:
    """Read big-endian IDX image/label pairs; pixels scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        magic = _read_be_u32(fh, images_path, "magic")
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(
                f"{images_path}: image magic {magic:#010x}, "
                f"expected {IDX_IMAGES_MAGIC:#010x}"
            )
        count = _read_be_u32(fh, images_path, "count")
        rows = _read_be_u32(fh, images_path, "rows")
        cols = _read_be_u32(fh, images_path, "cols")
        payload = fh.read()
    if len(payload) != count * rows * cols:
        raise DataFormatError(
            f"{images_path}: payload holds {len(payload)} bytes, header "
            f"declares {count * rows * cols}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as fh:
        magic = _read_be_u32(fh, labels_path, "magic")
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(
                f"{labels_path}: label magic {magic:#010x}, "
                f"expected {IDX_LABELS_MAGIC:#010x}"
            )
        label_count = _read_be_u32(fh, labels_path, "count")
        label_payload = fh.read()
    if label_count != count:
        raise DataFormatError(
            f"label count {label_count} != image count {count}"
        )
    if len(label_payload) != label_count:
        raise DataFormatError(f"{labels_path}: truncated labels")
    return Dataset(
        pixels.astype(np.float64) / 255.0,
        class_ids=np.frombuffer(label_payload, dtype=np.uint8).astype(np.int64),
        name=name or str(images_path),
    )


def write_embeddings(path, dataset: Dataset) -> None:
    """Binary embedding container: header then little-endian float64 rows."""
    has_labels = dataset.class_ids is not None
    with open(path, "wb") as fh:
        fh.write(EMBEDDINGS_MAGIC)
        fh.write(struct.pack("<I", EMBEDDINGS_VERSION))
        fh.write(struct.pack("<QQB", dataset.n, dataset.dim, int(has_labels)))
        fh.write(np.ascontiguousarray(dataset.features, dtype="<f8").tobytes())
        if has_labels:
            fh.write(dataset.class_ids.astype("<i8").tobytes())


def load_embeddings(path, name=None) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != EMBEDDINGS_MAGIC:
            raise DataFormatError(f"{path}: not an embedding container")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != EMBEDDINGS_VERSION:
            raise DataFormatError(f"{path}: embedding format version {version}")
        n, dim, has_labels = struct.unpack("<QQB", fh.read(17))
        payload = fh.read(n * dim * 8)
        if len(payload) != n * dim * 8:
            raise DataFormatError(
                f"{path}: payload holds {len(payload)} bytes, header declares "
                f"{n * dim * 8}"
            )
        features = np.frombuffer(payload, dtype="<f8").reshape(n, dim)
        class_ids = None
        if has_labels:
            raw = fh.read(n * 8)
            if len(raw) != n * 8:
                raise DataFormatError(f"{path}: truncated labels")
            class_ids = np.frombuffer(raw, dtype="<i8").astype(np.int64)
    return Dataset(features.astype(np.float64), class_ids=class_ids,
                   name=name or str(path))


# --------------------------------------------------------------------------
# benchmark construction


def make_unimodal(dataset: Dataset, normal_class: int,
                  test_dataset: Dataset | None = None,
                  test_fraction: float = 0.2,
                  rng: np.random.Generator | None = None):
    """One class is normal, everything else an anomaly.

    With a separate `test_dataset`, its rows are labeled against the normal
    class; otherwise `dataset` is deterministically partitioned and the
    train side is filtered to the normal class.
    """
    return make_multimodal(dataset, [normal_class], test_dataset,
                           test_fraction, rng)


def make_multimodal(dataset: Dataset, normal_classes,
                    test_dataset: Dataset | None = None,
                    test_fraction: float = 0.2,
                    rng: np.random.Generator | None = None):
    normal_classes = sorted(set(int(c) for c in normal_classes))
    if not normal_classes:
        raise ValueError("need at least one normal class")
    if dataset.class_ids is None:
        raise ShapeError("dataset has no class ids")
    present = set(np.unique(dataset.class_ids).tolist())
    missing = [c for c in normal_classes if c not in present]
    if missing:
        raise ValueError(f"class(es) {missing} absent from {dataset.name!r}")
    if set(present) <= set(normal_classes):
        warnings.warn(
            "every class is declared normal; test labels will be all-normal",
            stacklevel=2,
        )

    if test_dataset is None:
        if rng is None:
            raise ValueError("need an rng to partition a single dataset")
        order = rng.permutation(dataset.n)
        n_test = max(1, int(round(dataset.n * test_fraction)))
        test_part = dataset.take(order[:n_test])
        train_part = dataset.take(order[n_test:])
    else:
        if test_dataset.class_ids is None:
            raise ShapeError("test dataset has no class ids")
        train_part, test_part = dataset, test_dataset

    normal_mask = np.isin(train_part.class_ids, normal_classes)
    train = Dataset(
        train_part.features[normal_mask],
        class_ids=train_part.class_ids[normal_mask],
        name=f"{dataset.name}/normal-train",
    )
    if train.n == 0:
        raise ValueError(f"no training rows in class(es) {normal_classes}")
    test = Dataset(
        test_part.features,
        labels=(~np.isin(test_part.class_ids, normal_classes)).astype(np.int64),
        class_ids=test_part.class_ids,
        name=f"{dataset.name}/test",
    )
    return train, test


# --------------------------------------------------------------------------
# normalization


class Normalizer:
    """Column transform fitted on training rows only."""

    def __init__(self, method: str = "zscore"):
        if method not in ("zscore", "minmax", "none"):
            raise ValueError(f"unknown normalization {method!r}")
        self.method = method
        self._shift = None
        self._scale = None

    def fit(self, dataset: Dataset) -> "Normalizer":
        x = dataset.features
        if self.method == "zscore":
            self._shift = x.mean(axis=0)
            scale = x.std(axis=0)
        elif self.method == "minmax":
            self._shift = x.min(axis=0)
            scale = x.max(axis=0) - x.min(axis=0)
        else:
            self._shift = np.zeros(x.shape[1])
            scale = np.ones(x.shape[1])
        # constant columns are centered but not divided
        self._scale = np.where(scale > 0.0, scale, 1.0)
        return self

    def transform(self, dataset: Dataset) -> Dataset:
        if self._shift is None:
            raise RuntimeError("normalizer not fitted")
        return Dataset(
            (dataset.features - self._shift) / self._scale,
            dataset.labels,
            dataset.class_ids,
            dataset.name,
        )


# --------------------------------------------------------------------------
# synthetic data

_PART_RE = re.compile(r"^\s*([a-z-]+)\s*(?:\(([^)]*)\))?\s*$")

SYNTH_KINDS = ("ring", "gaussian-mixture", "two-moons", "box", "offplane")


def _parse_part(text: str):
    m = _PART_RE.match(text)
    if not m:
        raise ValueError(f"cannot parse synthetic part {text!r}")
    kind, args = m.group(1), {}
    if kind not in SYNTH_KINDS:
        raise ValueError(
            f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}"
        )
    for piece in filter(None, (m.group(2) or "").split(",")):
        if "=" not in piece:
            raise ValueError(f"bad argument {piece!r} in {text!r}")
        key, value = piece.split("=", 1)
        args[key.strip()] = float(value)
    return kind, args


def _gen_ring(args, rng):
    n = int(args.pop("n", 1000))
    radius = args.pop("radius", 1.0)
    noise = args.pop("noise", 0.05)
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    r = radius + noise * rng.standard_normal(n)
    x = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    return x, np.zeros(n, dtype=np.int64)


def _gen_gaussian_mixture(args, rng):
    n = int(args.pop("n", 1000))
    k = int(args.pop("k", 3))
    dim = int(args.pop("dim", 2))
    spread = args.pop("spread", 3.0)
    std = args.pop("std", 0.5)
    centers = rng.uniform(-spread, spread, size=(k, dim))
    which = rng.integers(0, k, n)
    x = centers[which] + std * rng.standard_normal((n, dim))
    return x, np.zeros(n, dtype=np.int64)


def _gen_two_moons(args, rng):
    n = int(args.pop("n", 1000))
    noise = args.pop("noise", 0.05)
    n1 = n // 2
    t1 = rng.uniform(0.0, np.pi, n1)
    t2 = rng.uniform(0.0, np.pi, n - n1)
    upper = np.column_stack([np.cos(t1), np.sin(t1)])
    lower = np.column_stack([1.0 - np.cos(t2), 0.5 - np.sin(t2)])
    x = np.vstack([upper, lower]) + noise * rng.standard_normal((n, 2))
    return x, np.zeros(n, dtype=np.int64)


def _gen_box(args, rng):
    n = int(args.pop("n", 200))
    low = args.pop("low", -1.5)
    high = args.pop("high", 1.5)
    dim = int(args.pop("dim", 2))
    if high <= low:
        raise ValueError("box needs high > low")
    x = rng.uniform(low, high, size=(n, dim))
    return x, np.ones(n, dtype=np.int64)


def _gen_offplane(args, rng):
    """Points near a low-dimensional affine subspace, plus anomalies that
    share the in-plane distribution but carry an orthogonal offset."""
    n = int(args.pop("n", 1000))
    n_anom = int(args.pop("anomalies", 200))
    dim = int(args.pop("dim", 8))
    latent = int(args.pop("latent", 2))
    noise = args.pop("noise", 0.02)
    offset = args.pop("offset", 1.0)
    if latent >= dim:
        raise ValueError("offplane needs latent < dim")
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    plane, ortho = basis[:, :latent], basis[:, latent:]
    center = rng.uniform(-1.0, 1.0, dim)

    def embed(k, with_offset):
        z = rng.standard_normal((k, latent))
        x = center + z @ plane.T + noise * rng.standard_normal((k, dim))
        if with_offset:
            direction = rng.standard_normal((k, dim - latent))
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            x = x + offset * direction @ ortho.T
        return x

    x = np.vstack([embed(n, False), embed(n_anom, True)])
    labels = np.concatenate(
        [np.zeros(n, dtype=np.int64), np.ones(n_anom, dtype=np.int64)]
    )
    return x, labels


_GENERATORS = {
    "ring": _gen_ring,
    "gaussian-mixture": _gen_gaussian_mixture,
    "two-moons": _gen_two_moons,
    "box": _gen_box,
    "offplane": _gen_offplane,
}


def synth_generate(spec: str, rng: np.random.Generator, name=None) -> Dataset:
    """Generate a labeled dataset from a spec like
    "ring(n=2000, radius=1, noise=0.05) + box(n=500, low=-1.5, high=1.5)".

    Parts after the first are forced to anomaly label 1.
    """
    parts = [p for p in spec.split("+")]
    if not parts or not spec.strip():
        raise ValueError("empty synthetic spec")
    features, labels = [], []
    for i, text in enumerate(parts):
        kind, args = _parse_part(text)
        x, lab = _GENERATORS[kind](dict(args), rng)
        if i > 0:
            lab = np.ones(len(lab), dtype=np.int64)
        features.append(x)
        labels.append(lab)
    dims = {f.shape[1] for f in features}
    if len(dims) != 1:
        raise ValueError(f"synthetic parts have mismatched dims {sorted(dims)}")
    return Dataset(
        np.vstack(features), labels=np.concatenate(labels),
        name=name or spec.replace(" ", ""),
    )


def load_recipe_dataset(recipe_path, data_path) -> Dataset:
    """Build a labeled tabular benchmark from a versioned recipe file.

    The recipe names the label column, the values that count as normal and
    as anomalous (all other rows are dropped), and optional categorical
    encodings per column index. The raw file is headerless CSV.
    """
    import configparser

    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(recipe_path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise DataFormatError(f"cannot read recipe {recipe_path}: {exc}") from exc
    if "recipe" not in parser:
        raise DataFormatError(f"{recipe_path}: missing [recipe] section")
    section = parser["recipe"]
    label_col = section.getint("label_column")
    normal = {float(v) for v in section.get("normal_values", "").split(",") if v.strip()}
    anomaly = {float(v) for v in section.get("anomaly_values", "").split(",") if v.strip()}
    if not normal or not anomaly:
        raise DataFormatError(f"{recipe_path}: needs normal and anomaly values")
    categorical = {}
    if "categorical" in parser:
        for col, mapping in parser["categorical"].items():
            table = {}
            for pair in mapping.split(","):
                token, value = pair.split(":")
                table[token.strip()] = float(value)
            categorical[int(col)] = table

    features, labels = [], []
    with open(data_path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            values = []
            for col, raw in enumerate(row):
                raw = raw.strip()
                if col in categorical:
                    if raw not in categorical[col]:
                        raise DataFormatError(
                            f"{data_path}: row {lineno}, column {col}: "
                            f"unmapped category {raw!r}"
                        )
                    values.append(categorical[col][raw])
                    continue
                try:
                    values.append(float(raw))
                except ValueError:
                    raise DataFormatError(
                        f"{data_path}: row {lineno}, column {col}: "
                        f"cannot parse {raw!r}"
                    ) from None
            label_value = values[label_col]
            if label_value in normal:
                labels.append(0)
            elif label_value in anomaly:
                labels.append(1)
            else:
                continue
            features.append(
                [v for c, v in enumerate(values) if c != label_col]
            )
    if not features:
        raise DataFormatError(f"{data_path}: no rows matched the recipe")
    return Dataset(
        np.array(features, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64),
        name=section.get("name", str(data_path)),
    )


def split_labeled_benchmark(dataset: Dataset, test_fraction: float,
                            rng: np.random.Generator):
    """Split a labeled set so training sees only normal rows.

    Test receives the stated fraction of the normal rows plus every
    anomaly; train gets the remaining normals.
    """
    if dataset.labels is None:
        raise ShapeError("benchmark split needs binary labels")
    normal_idx = np.flatnonzero(dataset.labels == 0)
    anom_idx = np.flatnonzero(dataset.labels == 1)
    if normal_idx.size == 0:
        raise ValueError("no normal rows to train on")
    order = rng.permutation(normal_idx.size)
    n_test = max(1, int(round(normal_idx.size * test_fraction)))
    test_normals = normal_idx[order[:n_test]]
    train_normals = normal_idx[order[n_test:]]
    if train_normals.size == 0:
        raise ValueError("test fraction leaves no training rows")
    train = dataset.take(train_normals, name=f"{dataset.name}/train")
    test = dataset.take(
        np.concatenate([test_normals, anom_idx]), name=f"{dataset.name}/test"
    )
    return train, test
