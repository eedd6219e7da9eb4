"""Bundled dataset preparation."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .tabular import Dataset, Feature, FeatureSchema, stratified_split, write_csv

# train / validation / test proportions for Breast Cancer
BREAST_CANCER_SPLIT = (404, 150, 160)


def load_breast_cancer_dataset() -> Dataset:
    """Wisconsin diagnostic breast cancer data (569 rows, 30 continuous features)."""
    from sklearn.datasets import load_breast_cancer

    raw = load_breast_cancer()
    names = [n.replace(" ", "_") for n in raw.feature_names]
    schema = FeatureSchema(tuple(Feature(n) for n in names), "diagnosis", tuple(str(c) for c in raw.target_names))
    return Dataset(schema, raw.data, raw.target.astype(np.int64))


def prepare_breast_cancer(out_dir, seed: int = 0, proportions=BREAST_CANCER_SPLIT):
    """Write schema.json and train/validation/test CSVs; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = load_breast_cancer_dataset()
    parts = stratified_split(d, proportions, seed)
    paths = {"schema": out / "schema.json"}
    d.schema.save(paths["schema"])
    for part in parts:
        paths[part.role] = out / f"{part.role}.csv"
        write_csv(part, paths[part.role])
    return paths
