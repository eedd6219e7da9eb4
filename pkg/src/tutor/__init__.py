"""Synthetic-data-assisted training of compact tabular classifiers."""
from .errors import TutorError
from .network import MaskedNetwork, TrainConfig, build_fc, train
from .tabular import Dataset, Feature, FeatureSchema

__version__ = "0.1.0"
__all__ = ["Dataset", "Feature", "FeatureSchema", "MaskedNetwork", "TrainConfig", "TutorError", "build_fc", "train",
           "__version__"]
