"""Residual FCN segmentation with long and short skip connections, on a
small numpy autodiff engine."""

__version__ = "0.1.0"

from .estimator import SkipSegmenter
from .network import Network, NetworkConfig, build_network, bundled_config, make_config, table1_config
from .training import TrainConfig, fit, mc_dropout_predict

__all__ = [
    "Network",
    "NetworkConfig",
    "SkipSegmenter",
    "TrainConfig",
    "build_network",
    "bundled_config",
    "fit",
    "make_config",
    "mc_dropout_predict",
    "table1_config",
]
