"""Teacher-student anomaly detection with discrepancy-scored quantization
and attention recalibration."""

from .errors import (ConfigError, ContractError, DatasetContractError, DimensionError,
                     ImageParseError, ParameterError, PipelineOrderError, RaadError,
                     UndefinedMetricError)
from .estimator import RaadDetector
from .maps import AnomalyMap, bias_mass, model_maps
from .metrics import EvalReport, ScoredSample, au_pro, auroc, average_precision
from .networks import Network, build_autoencoder, build_extractor, build_pdn
from .scoring import BitPolicy, LayerScore
from .tensor import Tape, Tensor, backward
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AnomalyMap", "BitPolicy", "ConfigError", "ContractError", "DatasetContractError",
    "DimensionError", "EvalReport", "ImageParseError", "LayerScore", "Network",
    "ParameterError", "PipelineOrderError", "RaadDetector", "RaadError", "ScoredSample",
    "Tape", "Tensor", "TrainConfig", "UndefinedMetricError", "au_pro", "auroc",
    "average_precision", "backward", "bias_mass", "build_autoencoder", "build_extractor",
    "build_pdn", "model_maps", "__version__",
]
