"""Desk-scale test-bed for predictive uncertainty in classifiers."""

from .algorithms import ALGORITHMS, HyperParams, Seeds, TrainedModel, train_run
from .dataforge import BlobSpec, ClassPartition, Dataset, generate_blobs, root_partition, ward_tree
from .measures import MEASURES
from .netcore import Predictor, PredictorConfig, forward, softmax
from .pipeline import SweepConfig, evaluate_all, execute_sweep, load_config, render_report
from .posthoc import Ensemble, calibrate_temperature, ensemble_select

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS", "MEASURES", "BlobSpec", "ClassPartition", "Dataset", "Ensemble", "HyperParams",
    "Predictor", "PredictorConfig", "Seeds", "SweepConfig", "TrainedModel", "calibrate_temperature",
    "ensemble_select", "evaluate_all", "execute_sweep", "forward", "generate_blobs", "load_config",
    "render_report", "root_partition", "softmax", "train_run", "ward_tree",
]
