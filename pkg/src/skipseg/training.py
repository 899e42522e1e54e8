"""RMSprop training loop, best-on-validation checkpointing and MC-dropout."""
from __future__ import annotations

import configparser
import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import no_grad, zero_grads
from .data import AugmentFlags, augment_batch
from .exceptions import ConfigError, StateError, TrainingDivergedError
from .losses import get_loss
from .metrics import pixel_accuracy
from .network import Network
from .ops import EVAL, TRAIN, sigmoid_array
from .telemetry import UpdateAccumulator, UpdateRecord, snapshot

logger = logging.getLogger(__name__)

HISTORY_CSV_HEADER = ["epoch", "train_loss", "val_loss", "train_acc", "val_acc"]


@dataclass
class TrainConfig:
    loss: str = "bce"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    dropout_rate: Optional[float] = None
    augment: AugmentFlags = field(default_factory=AugmentFlags.none)
    dice_smooth: float = 1.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        get_loss(self.loss)

    def loss_fn(self):
        fn = get_loss(self.loss)
        if self.loss == "dice":
            return lambda logits, y: fn(logits, y, self.dice_smooth)
        return fn

    def as_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = asdict(self.augment)
        return d


_TRAIN_KEYS = {
    "loss": str, "learning_rate": float, "weight_decay": float, "rms_decay": float,
    "rms_eps": float, "epochs": int, "batch_size": int, "seed": int, "dice_smooth": float,
}
_AUGMENT_KEYS = {f.name: f.type for f in fields(AugmentFlags)}


def train_config_from_section(section: Dict[str, str], base: Optional[TrainConfig] = None) -> TrainConfig:
    """Build a TrainConfig from ``key = value`` strings.

    Keys are the TrainConfig field names plus ``augment_<flag>`` for the
    augmentation flags; ``dropout_rate = none`` keeps the network's rate.
    """
    values = (base or TrainConfig()).as_dict()
    augment = dict(values.pop("augment"))
    for key, raw in section.items():
        raw = str(raw).strip()
        try:
            if key in _TRAIN_KEYS:
                values[key] = _TRAIN_KEYS[key](raw)
            elif key == "dropout_rate":
                values[key] = None if raw.lower() in ("", "none") else float(raw)
            elif key.startswith("augment_") and key[8:] in _AUGMENT_KEYS:
                name = key[8:]
                if isinstance(augment[name], bool):
                    if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(f"expected a boolean, got {raw!r}")
                    augment[name] = raw.lower() in ("true", "1", "yes")
                else:
                    augment[name] = type(augment[name])(raw)
            else:
                raise ConfigError(f"unknown [train] key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"bad [train] value for {key}: {exc}") from None
    return TrainConfig(augment=AugmentFlags(**augment), **values)


def load_train_config(path, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Read the optional ``[train]`` section of a config file."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(Path(path).read_text(encoding="utf-8"))
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config {path}: {exc}") from None
    section = dict(parser["train"]) if parser.has_section("train") else {}
    return train_config_from_section(section, base)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return str(value).lower()
    return repr(value) if isinstance(value, float) else str(value)


def train_config_items(cfg: TrainConfig) -> List[Tuple[str, str]]:
    """Flat ``(key, value)`` pairs in the same vocabulary the loader accepts."""
    d = cfg.as_dict()
    augment = d.pop("augment")
    return [(k, _fmt(v)) for k, v in d.items()] + [(f"augment_{k}", _fmt(v)) for k, v in augment.items()]


@dataclass
class OptimizerState:
    accumulators: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls({p.name: np.zeros_like(p.data) for p in params})


def rmsprop_step(params, state: OptimizerState, cfg: TrainConfig) -> None:
    """One in-place RMSprop update with coupled L2 weight decay.

    g <- grad + wd * theta;  acc <- rho * acc + (1 - rho) * g^2;
    theta <- theta - lr * g / (sqrt(acc) + eps)
    """
    lr, wd, rho, eps = cfg.learning_rate, cfg.weight_decay, cfg.rms_decay, cfg.rms_eps
    for p in params:
        acc = state.accumulators.get(p.name)
        if acc is None or acc.shape != p.shape:
            raise StateError(f"optimizer state has no matching accumulator for {p.name}")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if wd:
            g = g + wd * p.data
        acc *= rho
        acc += (1 - rho) * g * g
        p.data = p.data - lr * g / (np.sqrt(acc) + eps)
    state.step += 1


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float = float("nan")
    train_acc: float = float("nan")
    val_acc: float = float("nan")


@dataclass
class FitResult:
    best_state: Dict[str, np.ndarray]
    best_epoch: int
    best_val_loss: float
    history: List[EpochStats]
    updates: List[UpdateRecord]

    def train_loss_at_best(self) -> float:
        for row in self.history:
            if row.epoch == self.best_epoch:
                return row.train_loss
        return float("nan")


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_epoch(net: Network, images: np.ndarray, masks: np.ndarray, cfg: TrainConfig,
                opt_state: OptimizerState, telemetry: Optional[UpdateAccumulator] = None,
                epoch: int = 1) -> EpochStats:
    """One seeded pass over the training data.

    Per batch: augment, forward (train mode), loss, backward, snapshot,
    RMSprop step, telemetry. The generator for shuffling, augmentation and
    dropout is keyed on ``(seed, epoch)``.
    """
    if images.shape != masks.shape:
        raise ConfigError(f"images {images.shape} and masks {masks.shape} differ")
    rng = np.random.default_rng([cfg.seed, epoch])
    params = net.parameters()
    loss_fn = cfg.loss_fn()
    dtype = params[0].dtype
    order = rng.permutation(len(images))
    losses, accs, weights = [], [], []
    for b, idx in enumerate(_batches(len(images), cfg.batch_size, order)):
        x, y = augment_batch(images[idx], masks[idx], rng, cfg.augment)
        x, y = x.astype(dtype, copy=False), y.astype(dtype, copy=False)
        zero_grads(params)
        logits = net(x, TRAIN, rng, cfg.dropout_rate)
        loss = loss_fn(logits, y)
        value = loss.item()
        losses.append(value)
        if not np.isfinite(value):
            raise TrainingDivergedError(epoch, b, losses[-10:])
        loss.backward()
        before = snapshot(params) if telemetry is not None else None
        rmsprop_step(params, opt_state, cfg)
        if telemetry is not None:
            telemetry.record(before, snapshot(params))
        accs.append(pixel_accuracy(logits.data > 0, y > 0.5))
        weights.append(len(idx))
    zero_grads(params)
    w = np.asarray(weights, dtype=np.float64)
    if not len(w):
        return EpochStats(epoch, float("nan"))
    return EpochStats(epoch, float(np.dot(losses, w) / w.sum()), train_acc=float(np.dot(accs, w) / w.sum()))


def predict_logits(net: Network, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Deterministic eval-mode logits, computed without building a graph."""
    dtype = net.parameters()[0].dtype
    outs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            outs.append(net(images[start:start + batch_size].astype(dtype, copy=False), EVAL).data)
    return np.concatenate(outs) if outs else np.zeros((0,) + images.shape[1:], dtype)


def evaluate(net: Network, images: np.ndarray, masks: np.ndarray, cfg: TrainConfig) -> Tuple[float, float]:
    """(loss, pixel accuracy) over the whole set in eval mode."""
    logits = predict_logits(net, images, cfg.batch_size)
    with no_grad():
        loss = cfg.loss_fn()(logits, masks.astype(logits.dtype)).item()
    return loss, pixel_accuracy(logits > 0, masks > 0.5)


def fit(net: Network, train: Tuple[np.ndarray, np.ndarray], val: Tuple[np.ndarray, np.ndarray],
        cfg: TrainConfig, track_updates: bool = True) -> FitResult:
    """Train for ``cfg.epochs`` and keep the parameters with the lowest val loss.

    The stored state changes only on strict improvement. With zero epochs
    the initial parameters are returned and the history is empty.
    """
    x_train, y_train = train
    x_val, y_val = val
    if len(x_val) == 0:
        raise ConfigError("validation set is empty")
    opt_state = OptimizerState.for_params(net.parameters())
    telemetry = UpdateAccumulator.for_params(net.parameters()) if track_updates else None
    best_state = net.state_dict()
    best_epoch, best_val = 0, float("inf")
    history: List[EpochStats] = []
    updates: List[UpdateRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        stats = train_epoch(net, x_train, y_train, cfg, opt_state, telemetry, epoch)
        stats.val_loss, stats.val_acc = evaluate(net, x_val, y_val, cfg)
        history.append(stats)
        if telemetry is not None:
            updates.extend(telemetry.close_epoch(epoch))
        if stats.val_loss < best_val:
            best_val, best_epoch = stats.val_loss, epoch
            best_state = net.state_dict()
        logger.info("epoch %d train %.4f val %.4f", epoch, stats.train_loss, stats.val_loss)
    return FitResult(best_state, best_epoch, best_val, history, updates)


def mc_dropout_predict(net: Network, images: np.ndarray, n_samples: int = 16, rate: float = 0.2,
                       rng: Optional[np.random.Generator] = None, batch_size: int = 8) -> np.ndarray:
    """Mean sigmoid output over ``n_samples`` passes with dropout active.

    Batch norm and everything else run in eval mode. ``rate=0`` reproduces
    the deterministic eval forward exactly.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if rng is None:
        rng = np.random.default_rng(0)
    if rate == 0:
        return predict_proba(net, images, batch_size)  # every pass would be identical
    dtype = net.parameters()[0].dtype
    total = None
    with no_grad():
        for _ in range(n_samples):
            parts = []
            for start in range(0, len(images), batch_size):
                x = images[start:start + batch_size].astype(dtype, copy=False)
                parts.append(net(x, EVAL, rng, dropout_rate=rate, dropout_mode=TRAIN).data)
            probs = sigmoid_array(np.concatenate(parts).astype(np.float64))
            total = probs if total is None else total + probs
    return total / n_samples


def predict_proba(net: Network, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    return sigmoid_array(predict_logits(net, images, batch_size).astype(np.float64))


def write_history_csv(history: Sequence[EpochStats], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_CSV_HEADER)
        for h in history:
            writer.writerow([h.epoch, repr(float(h.train_loss)), repr(float(h.val_loss)),
                             repr(float(h.train_acc)), repr(float(h.val_acc))])


def read_history_csv(path) -> List[EpochStats]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HISTORY_CSV_HEADER:
            raise ValueError(f"{path}: unexpected history header {header}")
        return [EpochStats(int(e), float(a), float(b), float(c), float(d)) for e, a, b, c, d in reader]
