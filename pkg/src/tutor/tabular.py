"""Tabular data model: schemas, CSV ingestion, one-hot encoding, splits and PCA.

Raw datasets keep categorical cells as integer level indices inside a float
matrix, so one array holds a whole table. Encoded matrices are the dense real
representation every density model and network consumes.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidCompression,
    MissingColumn,
    ParseError,
    ResultTooSmall,
    SchemaError,
    UnknownCategoryLevel,
)

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
ROLES = ("train", "validation", "test", "synthetic")
ZERO_VARIANCE_STD = 1e-12


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str = CONTINUOUS
    levels: tuple = ()

    @property
    def cardinality(self) -> int:
        return len(self.levels)

    @property
    def width(self) -> int:
        return 1 if self.kind == CONTINUOUS else len(self.levels)


@dataclass(frozen=True)
class ColumnBlock:
    """Maps one schema feature to the half-open encoded column range [start, stop)."""

    feature: int
    start: int
    stop: int


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple
    label: str
    classes: tuple

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "classes", tuple(str(c) for c in self.classes))
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        for f in self.features:
            if f.kind not in (CONTINUOUS, CATEGORICAL):
                raise SchemaError(f"feature {f.name!r}: unknown kind {f.kind!r}")
            if f.kind == CATEGORICAL and f.cardinality < 2:
                raise SchemaError(f"categorical feature {f.name!r} needs >= 2 levels")
        if len(self.classes) < 2:
            raise SchemaError("label needs >= 2 classes")

    @property
    def names(self):
        return [f.name for f in self.features]

    @property
    def n_features(self):
        return len(self.features)

    @property
    def n_classes(self):
        return len(self.classes)

    @property
    def continuous_indices(self):
        return [i for i, f in enumerate(self.features) if f.kind == CONTINUOUS]

    @property
    def categorical_indices(self):
        return [i for i, f in enumerate(self.features) if f.kind == CATEGORICAL]

    @property
    def encoded_width(self):
        return sum(f.width for f in self.features)

    @property
    def column_map(self):
        blocks, start = [], 0
        for i, f in enumerate(self.features):
            blocks.append(ColumnBlock(i, start, start + f.width))
            start += f.width
        return tuple(blocks)

    def to_dict(self):
        feats = []
        for f in self.features:
            d = {"name": f.name, "kind": f.kind}
            if f.kind == CATEGORICAL:
                d["levels"] = list(f.levels)
            feats.append(d)
        return {"features": feats, "label": {"name": self.label, "classes": list(self.classes)}}

    @classmethod
    def from_dict(cls, d):
        try:
            feats = tuple(
                Feature(f["name"], f.get("kind", CONTINUOUS), tuple(str(v) for v in f.get("levels", ())))
                for f in d["features"]
            )
            return cls(feats, d["label"]["name"], tuple(d["label"]["classes"]))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema document: {exc}") from exc

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Dataset:
    schema: FeatureSchema
    X: np.ndarray
    y: Optional[np.ndarray]
    role: str = "train"

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1 and X.size == 0:
            X = X.reshape(0, self.schema.n_features)
        if X.ndim != 2 or X.shape[1] != self.schema.n_features:
            raise DimensionMismatch(f"expected {self.schema.n_features} feature columns, got {X.shape}")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        for j in self.schema.categorical_indices:
            col = X[:, j]
            k = self.schema.features[j].cardinality
            if np.any((col < 0) | (col >= k) | (col != np.floor(col))):
                raise ValueError(f"categorical column {self.schema.features[j].name!r} has invalid level indices")
        object.__setattr__(self, "X", _frozen(X))
        if self.y is not None:
            y = np.asarray(self.y)
            if y.shape != (X.shape[0],):
                raise DimensionMismatch("label count must equal row count")
            if y.size and (y.min() < 0 or y.max() >= self.schema.n_classes):
                raise ValueError("label index out of range")
            object.__setattr__(self, "y", _frozen(y, dtype=np.int64))

    def __len__(self):
        return self.X.shape[0]

    def take(self, idx, role=None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        y = None if self.y is None else self.y[idx]
        return Dataset(self.schema, self.X[idx], y, role or self.role)

    def with_labels(self, y, role=None) -> "Dataset":
        return Dataset(self.schema, self.X, y, role or self.role)

    def with_role(self, role) -> "Dataset":
        return Dataset(self.schema, self.X, self.y, role)

    def continuous(self):
        return self.X[:, self.schema.continuous_indices]

    def rows_as_tuples(self):
        return [tuple(r) for r in self.X.tolist()]


# ---------------------------------------------------------------- CSV I/O


def load_csv(path, schema: FeatureSchema, role: str = "train") -> Dataset:
    expected = schema.names + [schema.label]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, no header row") from None
        header = [h.strip() for h in header]
        for name in expected:
            if name not in header:
                raise MissingColumn(f"{path}: column {name!r} missing from header")
        if header != expected:
            raise ParseError(f"{path}: header must be {expected} in order, got {header}")
        level_maps = [
            {lv: i for i, lv in enumerate(f.levels)} if f.kind == CATEGORICAL else None for f in schema.features
        ]
        class_map = {c: i for i, c in enumerate(schema.classes)}
        rows, labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(expected):
                raise ParseError(f"{path}:{lineno}: expected {len(expected)} cells, got {len(rec)}")
            vals = []
            for f, lm, cell in zip(schema.features, level_maps, rec):
                if lm is None:
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise ParseError(f"{path}:{lineno}: column {f.name!r}: not a number: {cell!r}") from None
                else:
                    if cell not in lm:
                        raise UnknownCategoryLevel(lineno, f.name, cell)
                    vals.append(float(lm[cell]))
            lab = rec[-1]
            if lab not in class_map:
                raise UnknownCategoryLevel(lineno, schema.label, lab)
            rows.append(vals)
            labels.append(class_map[lab])
    X = np.array(rows, dtype=float).reshape(len(rows), schema.n_features)
    return Dataset(schema, X, np.array(labels, dtype=np.int64), role)


def write_csv(d: Dataset, path):
    if d.y is None:
        raise ValueError("cannot write an unlabeled dataset")
    schema = d.schema
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.names + [schema.label])
        for row, lab in zip(d.X.tolist(), d.y.tolist()):
            cells = [
                repr(v) if f.kind == CONTINUOUS else f.levels[int(v)] for f, v in zip(schema.features, row)
            ]
            cells.append(schema.classes[lab])
            w.writerow(cells)


# ---------------------------------------------------------------- encoding


@dataclass(frozen=True)
class Standardizer:
    """Per-continuous-feature z-score statistics, in schema continuous order."""

    means: np.ndarray
    stds: np.ndarray
    zero_variance: tuple = ()

    def to_dict(self):
        return {"means": self.means.tolist(), "stds": self.stds.tolist(), "zero_variance": list(self.zero_variance)}

    @classmethod
    def from_dict(cls, d):
        return cls(_frozen(d["means"]), _frozen(d["stds"]), tuple(d["zero_variance"]))


def fit_standardizer(d: Dataset) -> Standardizer:
    cont = d.continuous()
    means = cont.mean(axis=0) if len(d) else np.zeros(cont.shape[1])
    stds = cont.std(axis=0) if len(d) else np.ones(cont.shape[1])
    zero = []
    names = [d.schema.features[j].name for j in d.schema.continuous_indices]
    for i, s in enumerate(stds):
        if not s >= ZERO_VARIANCE_STD:
            zero.append(names[i])
            means[i], stds[i] = 0.0, 1.0
    if zero:
        warnings.warn(f"ZeroVarianceColumn: passing through unscaled: {zero}", stacklevel=3)
    return Standardizer(_frozen(means), _frozen(stds), tuple(zero))


@dataclass(frozen=True)
class EncodedMatrix:
    values: np.ndarray
    schema: FeatureSchema
    standardizer: Optional[Standardizer] = None
    labels: Optional[np.ndarray] = None
    role: str = "train"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != self.schema.encoded_width:
            raise DimensionMismatch(f"expected encoded width {self.schema.encoded_width}, got {v.shape}")
        object.__setattr__(self, "values", _frozen(v))
        if self.labels is not None:
            object.__setattr__(self, "labels", _frozen(self.labels, dtype=np.int64))

    @property
    def column_map(self):
        return self.schema.column_map

    @property
    def continuous_columns(self):
        return [b.start for b in self.column_map if self.schema.features[b.feature].kind == CONTINUOUS]

    def __len__(self):
        return self.values.shape[0]

    def like(self, values, labels=None, role=None) -> "EncodedMatrix":
        """Same layout and standardizer, new values."""
        return EncodedMatrix(values, self.schema, self.standardizer, labels, role or self.role)


def encode(d: Dataset, standardize: bool = True, standardizer: Optional[Standardizer] = None) -> EncodedMatrix:
    schema = d.schema
    if standardize and standardizer is None:
        if d.role != "train":
            raise ValueError("standardization statistics must come from the train split; pass a standardizer")
        standardizer = fit_standardizer(d)
    if not standardize:
        standardizer = None
    out = np.zeros((len(d), schema.encoded_width))
    ci = 0
    rows = np.arange(len(d))
    for b in schema.column_map:
        f = schema.features[b.feature]
        col = d.X[:, b.feature]
        if f.kind == CONTINUOUS:
            if standardizer is not None:
                col = (col - standardizer.means[ci]) / standardizer.stds[ci]
            out[:, b.start] = col
            ci += 1
        else:
            out[rows, b.start + col.astype(np.int64)] = 1.0
    return EncodedMatrix(out, schema, standardizer, d.y, d.role)


def decode(m: EncodedMatrix, role: Optional[str] = None) -> Dataset:
    """Invert `encode`: argmax per categorical block (first index on ties)."""
    schema, st = m.schema, m.standardizer
    X = np.zeros((len(m), schema.n_features))
    ci = 0
    for b in m.column_map:
        f = schema.features[b.feature]
        if f.kind == CONTINUOUS:
            col = m.values[:, b.start]
            if st is not None:
                col = col * st.stds[ci] + st.means[ci]
            X[:, b.feature] = col
            ci += 1
        else:
            X[:, b.feature] = np.argmax(m.values[:, b.start:b.stop], axis=1)
    return Dataset(schema, X, m.labels, role or m.role)


# ---------------------------------------------------------------- splits


def _allocate(counts, total):
    """Largest-remainder allocation of `total` rows over classes, each class >= 1."""
    counts = np.asarray(counts)
    present = counts > 0
    if total < present.sum():
        raise ResultTooSmall(f"{total} rows cannot cover {int(present.sum())} classes")
    quota = counts / counts.sum() * total
    alloc = np.floor(quota).astype(np.int64)
    alloc[present & (alloc == 0)] = 1
    alloc = np.minimum(alloc, counts)
    while alloc.sum() > total:
        # take back from the class with the most surplus over its quota
        cand = np.where(alloc > 1)[0]
        i = cand[np.argmax((alloc - quota)[cand])]
        alloc[i] -= 1
    rem = quota - alloc
    while alloc.sum() < total:
        cand = np.where(alloc < counts)[0]
        i = cand[np.argmax(rem[cand])]
        alloc[i] += 1
        rem[i] -= 1.0
    return alloc


def subsample(d: Dataset, compression_ratio: float, seed: int) -> Dataset:
    """Class-stratified uniform subsample of floor(n / ratio) rows, original order kept."""
    if not compression_ratio >= 1:
        raise InvalidCompression(f"compression ratio must be >= 1, got {compression_ratio}")
    n = len(d)
    total = int(math.floor(n / compression_ratio + 1e-9))
    if total == n:
        return d
    rng = np.random.default_rng(seed)
    y = d.y if d.y is not None else np.zeros(n, dtype=np.int64)
    classes = np.unique(y)
    counts = np.array([(y == c).sum() for c in classes])
    alloc = _allocate(counts, total)
    keep = []
    for c, k in zip(classes, alloc):
        idx = np.flatnonzero(y == c)
        keep.append(rng.choice(idx, size=int(k), replace=False))
    return d.take(np.sort(np.concatenate(keep)))


def stratified_split(d: Dataset, proportions: Sequence[float], seed: int, roles=("train", "validation", "test")):
    """Split into len(proportions) stratified parts; sizes follow the proportions overall."""
    props = np.asarray(proportions, dtype=float)
    props = props / props.sum()
    n = len(d)
    sizes = np.floor(props * n + 0.5).astype(np.int64)
    sizes[-1] = n - sizes[:-1].sum()
    rng = np.random.default_rng(seed)
    order = []
    for c in np.unique(d.y):
        idx = np.flatnonzero(d.y == c)
        order.append(rng.permutation(idx))
    # interleave classes so every prefix is roughly stratified
    ranks = np.concatenate([np.arange(len(o)) / len(o) for o in order])
    flat = np.concatenate(order)
    flat = flat[np.argsort(ranks, kind="stable")]
    parts, start = [], 0
    for size, role in zip(sizes, roles):
        parts.append(d.take(np.sort(flat[start:start + size]), role))
        start += size
    return parts


# ---------------------------------------------------------------- PCA


@dataclass(frozen=True)
class PcaTransform:
    components: np.ndarray  # (n_continuous, k), orthonormal columns
    means: np.ndarray
    variances: np.ndarray  # eigenvalues for the retained components, descending
    source_schema: FeatureSchema = field(repr=False)

    @property
    def k(self):
        return self.components.shape[1]

    def projected_schema(self) -> FeatureSchema:
        feats = [Feature(f"pc{i + 1}") for i in range(self.k)]
        feats += [self.source_schema.features[j] for j in self.source_schema.categorical_indices]
        return FeatureSchema(tuple(feats), self.source_schema.label, self.source_schema.classes)


def fit_pca(m: EncodedMatrix, compression_ratio: float) -> PcaTransform:
    if not compression_ratio >= 1:
        raise InvalidCompression(f"compression ratio must be >= 1, got {compression_ratio}")
    cols = m.continuous_columns
    k = int(round(len(cols) / compression_ratio))
    if k < 1:
        raise InvalidCompression(f"ratio {compression_ratio} leaves no components for {len(cols)} continuous features")
    Xc = m.values[:, cols]
    means = Xc.mean(axis=0)
    cov = np.cov(Xc - means, rowvar=False, bias=True).reshape(len(cols), len(cols))
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    comps = evecs[:, order]
    # fix the sign so the largest-magnitude loading of each component is positive
    flip = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(k)])
    comps = comps * np.where(flip == 0, 1.0, flip)
    return PcaTransform(_frozen(comps), _frozen(means), _frozen(np.maximum(evals[order], 0.0)), m.schema)


def apply_pca(m: EncodedMatrix, t: PcaTransform) -> EncodedMatrix:
    if m.schema != t.source_schema:
        raise DimensionMismatch("PCA transform was fitted on a different schema")
    proj = (m.values[:, m.continuous_columns] - t.means) @ t.components
    cat_blocks = [
        m.values[:, b.start:b.stop] for b in m.column_map if m.schema.features[b.feature].kind == CATEGORICAL
    ]
    values = np.hstack([proj] + cat_blocks) if cat_blocks else proj
    return EncodedMatrix(values, t.projected_schema(), None, m.labels, m.role)


def reconstruct(p: EncodedMatrix, t: PcaTransform) -> np.ndarray:
    """Map projected continuous coordinates back to the source continuous columns."""
    return p.values[:, : t.k] @ t.components.T + t.means
