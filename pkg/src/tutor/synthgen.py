"""Synthetic data: sample a density model, drop rows that contradict the
integrity classifiers, and label what survives with a separate labeler."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import density
from .errors import RetryBudgetExhausted
from .forest import IntegrityClassifier, verify
from .network import MaskedNetwork
from .tabular import Dataset, EncodedMatrix, decode, encode, write_csv

BUDGET_FACTOR = 10


class NetworkLabeler:
    """Labels raw rows with a trained network, encoding them the way its training data was."""

    def __init__(self, net: MaskedNetwork, layout: EncodedMatrix, name: str = "network"):
        self.net, self.layout, self.name = net, layout, name

    @property
    def identity(self):
        return f"{self.name}:{self.net.n_in}-{self.net.n_hidden}-{self.net.n_out}:{self.net.active_connections}"

    def predict(self, d: Dataset):
        m = encode(d, standardize=self.layout.standardizer is not None, standardizer=self.layout.standardizer)
        return self.net.predict(m.values)


@dataclass
class SyntheticBatch:
    data: Dataset
    method: str
    requested_count: int
    retained_count: int
    rejection_log: dict
    labeler: str
    draws: int = 0
    collisions: int = 0
    budget_exhausted: bool = False
    seed: int = 0

    def metadata(self):
        return {
            "method": self.method, "seed": self.seed, "requested_count": self.requested_count,
            "retained_count": self.retained_count, "draws": self.draws, "collisions": self.collisions,
            "rejection_log": dict(sorted(self.rejection_log.items())), "labeler": self.labeler,
            "budget_exhausted": self.budget_exhausted,
        }


def generate_verified(model, layout: EncodedMatrix, classifiers: Sequence[IntegrityClassifier], labeler,
                      count: int, seed: int, exclude: Optional[set] = None,
                      budget_factor: int = BUDGET_FACTOR) -> SyntheticBatch:
    """Draw rows until `count` pass every integrity classifier or the draw budget runs out.

    `layout` carries the schema and standardizer the density model was fitted
    under. Rows whose features appear in `exclude` (tuples of raw values) are
    dropped as well. Rows are kept in draw order, so the result depends only
    on (model, seed, count).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    schema = layout.schema
    budget = budget_factor * count
    kept, draws, chunk_i, collisions = [], 0, 0, 0
    rejections = {c.target_feature: 0 for c in classifiers}
    n_kept = 0
    while n_kept < count and draws < budget:
        size = min(budget - draws, max(2 * (count - n_kept), 64))
        raw = density.sample(model, size, int(np.random.default_rng([seed, chunk_i]).integers(2**63)))
        chunk_i += 1
        draws += size
        d = decode(layout.like(raw, role="synthetic"), role="synthetic")
        ok, rej = verify(classifiers, d)
        for k, v in rej.items():
            rejections[k] += v
        if exclude:
            fresh = np.array([tuple(r) not in exclude for r in d.X.tolist()], dtype=bool)
            collisions += int((ok & ~fresh).sum())
            ok &= fresh
        rows = d.X[ok][: count - n_kept]
        kept.append(rows)
        n_kept += rows.shape[0]
    X = np.concatenate(kept) if kept else np.zeros((0, schema.n_features))
    d = Dataset(schema, X, None, "synthetic")
    y = labeler.predict(d) if len(d) else np.zeros(0, dtype=np.int64)
    exhausted = n_kept < count
    if exhausted:
        warnings.warn(RetryBudgetExhausted(
            f"kept {n_kept} of {count} rows after {draws} draws; density and integrity classifiers disagree"
        ), stacklevel=2)
    return SyntheticBatch(d.with_labels(y), getattr(model, "method", "unknown"), count, n_kept, rejections,
                          labeler.identity, draws, collisions, exhausted, seed)


def privacy_export(model, layout: EncodedMatrix, classifiers, labeler, path, count: int = 100000, seed: int = 0,
                   real: Sequence[Dataset] = ()) -> SyntheticBatch:
    """Write a labeled synthetic CSV that shares no row with `real`, plus schema and metadata sidecars."""
    exclude = set()
    for d in real:
        exclude.update(d.rows_as_tuples())
    batch = generate_verified(model, layout, classifiers, labeler, count, seed, exclude=exclude)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(batch.data, path)
    layout.schema.save(path.with_suffix(".schema.json"))
    path.with_suffix(".meta.json").write_text(json.dumps(batch.metadata(), sort_keys=True, indent=1) + "\n")
    return batch
