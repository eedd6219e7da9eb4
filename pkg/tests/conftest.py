import numpy as np
import pytest

from tutor.tabular import CATEGORICAL, Dataset, Feature, FeatureSchema


def mixed_schema():
    return FeatureSchema(
        (Feature("x1"), Feature("color", CATEGORICAL, ("red", "green", "blue")), Feature("x2"),
         Feature("flag", CATEGORICAL, ("no", "yes"))),
        "label", ("a", "b"),
    )


def random_mixed(n, seed=0, role="train"):
    rng = np.random.default_rng(seed)
    X = np.column_stack([rng.normal(size=n), rng.integers(0, 3, n), rng.normal(2, 3, n), rng.integers(0, 2, n)])
    return Dataset(mixed_schema(), X, rng.integers(0, 2, n), role)


def continuous_dataset(X, y, role="train", n_classes=2):
    X = np.asarray(X, dtype=float)
    schema = FeatureSchema(tuple(Feature(f"f{i}") for i in range(X.shape[1])), "label",
                           tuple(f"c{i}" for i in range(n_classes)))
    return Dataset(schema, X, y, role)


@pytest.fixture
def mixed():
    return random_mixed(50)
