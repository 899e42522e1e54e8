"""scikit-learn style wrapper around the segmentation network."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import precision
from .data import AugmentFlags
from .exceptions import ConfigError, DimensionError
from .metrics import pixel_accuracy
from .ops import sigmoid_array
from .network import NetworkConfig, build_network, load_config, make_config
from .training import TrainConfig, fit, mc_dropout_predict, predict_logits
from .validation import check_divisible, check_images, check_masks, check_probability


class SkipSegmenter(BaseEstimator):
    """Binary per-pixel segmenter with long and short skip connections.

    ``X`` is a stack of grayscale images, (N, H, W) or (N, 1, H, W); ``y``
    holds 0/1 masks of the same shape. Outputs follow the input layout.
    Training keeps the parameters with the lowest validation loss. If no
    validation set is passed, ``validation_fraction`` of the training images
    is held out.

    Architecture comes either from ``config`` (a path to an INI file or a
    ``NetworkConfig``) or from ``widths``/``repetitions``/``block_type``.
    With ``mc_samples > 0`` probabilities are MC-dropout averages.
    """

    def __init__(self, widths: Sequence[int] = (8, 16, 32), repetitions: int = 1,
                 block_type: str = "simple", long_skips: bool = True, short_skips: bool = True,
                 batch_norm: bool = True, dropout_rate: float = 0.0, config=None,
                 loss: str = "bce", learning_rate: float = 1e-3, weight_decay: float = 1e-3,
                 epochs: int = 10, batch_size: int = 4, validation_fraction: float = 0.2,
                 augment: Optional[AugmentFlags] = None, mc_samples: int = 0, mc_rate: float = 0.2,
                 threshold: float = 0.5, dtype: str = "float32", random_state: int = 0):
        self.widths = widths
        self.repetitions = repetitions
        self.block_type = block_type
        self.long_skips = long_skips
        self.short_skips = short_skips
        self.batch_norm = batch_norm
        self.dropout_rate = dropout_rate
        self.config = config
        self.loss = loss
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.augment = augment
        self.mc_samples = mc_samples
        self.mc_rate = mc_rate
        self.threshold = threshold
        self.dtype = dtype
        self.random_state = random_state

    # -- construction ----------------------------------------------------------

    def _network_config(self, hw) -> NetworkConfig:
        if self.config is not None:
            cfg = load_config(self.config) if not isinstance(self.config, NetworkConfig) else self.config
            if tuple(cfg.input_resolution) != tuple(hw):
                raise DimensionError(f"config expects {cfg.input_resolution} inputs, data is {tuple(hw)}")
            return cfg
        if hw[0] != hw[1]:
            raise DimensionError(f"generated configs need square images, got {tuple(hw)}")
        check_divisible(hw, 2 ** (len(self.widths) - 1))
        return make_config(hw[0], tuple(self.widths), self.repetitions, self.block_type,
                           long_skips=self.long_skips, short_skips=self.short_skips,
                           use_batch_norm=self.batch_norm, dropout_rate=self.dropout_rate)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(loss=self.loss, learning_rate=self.learning_rate,
                           weight_decay=self.weight_decay, epochs=self.epochs,
                           batch_size=self.batch_size, seed=self.random_state,
                           augment=self.augment or AugmentFlags.none())

    def _holdout(self, X, y):
        frac = check_probability(self.validation_fraction, "validation_fraction")
        n_val = int(round(frac * len(X)))
        if n_val < 1 or n_val >= len(X):
            raise ConfigError(
                f"validation_fraction={frac} leaves no train or no validation images out of {len(X)}; "
                "pass X_val/y_val explicitly"
            )
        order = np.random.default_rng(self.random_state).permutation(len(X))
        val, train = order[:n_val], order[n_val:]
        return (X[train], y[train]), (X[val], y[val])

    # -- API -------------------------------------------------------------------

    def fit(self, X, y, X_val=None, y_val=None):
        X_arr = check_images(X)
        y_arr = check_masks(y, X_arr)
        if (X_val is None) != (y_val is None):
            raise ValueError("pass both X_val and y_val, or neither")
        if X_val is None:
            train, val = self._holdout(X_arr, y_arr)
        else:
            Xv = check_images(X_val, "X_val", expected_hw=X_arr.shape[2:])
            train, val = (X_arr, y_arr), (Xv, check_masks(y_val, Xv, "y_val"))
        cfg = self._network_config(X_arr.shape[2:])
        with precision(self.dtype):
            net = build_network(cfg, seed=self.random_state)
            result = fit(net, train, val, self._train_config())
            net.load_state_dict(result.best_state)
        self.network_ = net
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.best_val_loss_ = result.best_val_loss
        self.updates_ = result.updates
        self.input_shape_ = tuple(X_arr.shape[2:])
        return self

    def _prepare(self, X):
        check_is_fitted(self, "network_")
        squeeze = np.ndim(X) == 3
        return check_images(X, expected_hw=self.input_shape_), squeeze

    def decision_function(self, X):
        """Deterministic per-pixel logits."""
        arr, squeeze = self._prepare(X)
        out = predict_logits(self.network_, arr, self.batch_size)
        return out[:, 0] if squeeze else out

    def predict_proba(self, X):
        """Foreground probabilities, MC-averaged when ``mc_samples > 0``."""
        arr, squeeze = self._prepare(X)
        if self.mc_samples > 0:
            rng = np.random.default_rng([self.random_state, 1])
            out = mc_dropout_predict(self.network_, arr, self.mc_samples, self.mc_rate, rng, self.batch_size)
        else:
            out = sigmoid_array(predict_logits(self.network_, arr, self.batch_size).astype(np.float64))
        return out[:, 0] if squeeze else out

    def predict(self, X):
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y):
        """Mean pixel accuracy of ``predict(X)`` against ``y``."""
        pred = self.predict(X)
        truth = check_masks(y, check_images(X))
        return pixel_accuracy(pred.reshape(truth.shape) > 0, truth > 0.5)
