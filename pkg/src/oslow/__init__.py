"""Order-based causal discovery with permutation-masked affine autoregressive flows."""

__version__ = "0.1.0"

from .estimator import OSLow, VarSort  # noqa: E402
from .trainer import TrainConfig, TrainResult, train  # noqa: E402

__all__ = ["OSLow", "VarSort", "TrainConfig", "TrainResult", "train", "__version__"]
