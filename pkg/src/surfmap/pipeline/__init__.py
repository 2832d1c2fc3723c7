from .ablation import AblationResult, run_ablation_suite
from .config import ConfigError, RunConfig
from .data import sample_pair_batch
from .train import NumericError, predict, predict_with, train

__all__ = [
    "AblationResult",
    "ConfigError",
    "NumericError",
    "RunConfig",
    "predict",
    "predict_with",
    "run_ablation_suite",
    "sample_pair_batch",
    "train",
]
