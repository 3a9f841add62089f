"""Hardness-degree monitoring against model extraction queries.

The core idea: save the classifier after every training epoch, and for each
incoming query record the epoch index at which its predicted label stops
changing (its hardness degree). Benign users' queries have a characteristic
distribution of degrees; a user whose histogram of degrees drifts too far from
it, in Pearson distance, is flagged.
"""

from .calibration import CalibrationConfig, CalibrationResult, NormalHistogram, calibrate, fpr_estimate
from .data import SamplePool, SyntheticDatasetSpec, generate_dataset, split_test_pool
from .hardness import (
    HardnessError,
    HardnessHistogram,
    hardness_degree,
    hardness_degrees,
    histogram_distance,
    normalize,
    pearson_distance,
)
from .monitor import HardnessMonitor, MonitorConfig, QueryVerdict, UserState, ingest
from .snapshots import (
    PredictionMatrix,
    SnapshotModel,
    SubclassifierSequence,
    TrainConfig,
    TrainingDiverged,
    gradient_wrt_input,
    predict_matrix,
    train_with_snapshots,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationConfig",
    "CalibrationResult",
    "HardnessError",
    "HardnessHistogram",
    "HardnessMonitor",
    "MonitorConfig",
    "NormalHistogram",
    "PredictionMatrix",
    "QueryVerdict",
    "SamplePool",
    "SnapshotModel",
    "SubclassifierSequence",
    "SyntheticDatasetSpec",
    "TrainConfig",
    "TrainingDiverged",
    "UserState",
    "calibrate",
    "fpr_estimate",
    "generate_dataset",
    "gradient_wrt_input",
    "hardness_degree",
    "hardness_degrees",
    "histogram_distance",
    "ingest",
    "normalize",
    "pearson_distance",
    "predict_matrix",
    "split_test_pool",
    "train_with_snapshots",
]
