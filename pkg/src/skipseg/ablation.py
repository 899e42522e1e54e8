"""Skip-connection ablation: train the same network with skip toggles flipped.

Every variant starts from the same seed, so parameters that exist in
several variants begin identical. Each run writes its own history and
telemetry CSVs under ``<out>/<variant>/``. A ``comparison.csv`` with one
row per variant sits at the top level.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import generate_synthetic_em, split_train_val, stack_samples
from .exceptions import ConfigError
from .network import NetworkConfig, build_network, save_checkpoint
from .telemetry import depth_profile_ratio, export_update_csv, sort_records
from .training import FitResult, TrainConfig, fit, write_history_csv

logger = logging.getLogger(__name__)

# name -> (long_skips, short_skips)
VARIANTS: Dict[str, Tuple[bool, bool]] = {
    "model1": (True, True),
    "model2": (False, True),
    "model3": (True, False),
    "noskip": (False, False),
}

DEFAULT_TAU = 0.25

COMPARISON_HEADER = [
    "model", "long_skips", "short_skips", "best_epoch", "train_loss_at_best",
    "best_val_loss", "epochs_to_tau", "depth_ratio",
]


@dataclass
class VariantResult:
    model: str
    long_skips: bool
    short_skips: bool
    best_epoch: int
    train_loss_at_best: float
    best_val_loss: float
    epochs_to_tau: Optional[int]
    depth_ratio: float


def epochs_to_threshold(val_losses: Sequence[float], tau: float) -> Optional[int]:
    """First 1-based epoch whose val loss is <= tau, or None if never."""
    for i, v in enumerate(val_losses, start=1):
        if v <= tau:
            return i
    return None


def synthetic_split(seed: int, size: int, n_train: int = 50, n_val: int = 10):
    samples = generate_synthetic_em(seed, n_train + n_val, size)
    split = split_train_val(samples, n_train / (n_train + n_val), seed)
    return stack_samples(split.train), stack_samples(split.val)


def summarize(name: str, toggles: Tuple[bool, bool], result: FitResult, tau: float) -> VariantResult:
    try:
        ratio = depth_profile_ratio(result.updates) if result.updates else math.nan
    except Exception as exc:  # telemetry degenerate (e.g. lr=0); keep the row
        logger.warning("%s: depth ratio unavailable (%s)", name, exc)
        ratio = math.nan
    return VariantResult(
        model=name,
        long_skips=toggles[0],
        short_skips=toggles[1],
        best_epoch=result.best_epoch,
        train_loss_at_best=result.train_loss_at_best(),
        best_val_loss=result.best_val_loss,
        epochs_to_tau=epochs_to_threshold([h.val_loss for h in result.history], tau),
        depth_ratio=ratio,
    )


def write_comparison_csv(rows: Sequence[VariantResult], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPARISON_HEADER)
        for r in rows:
            writer.writerow([
                r.model, int(r.long_skips), int(r.short_skips), r.best_epoch,
                repr(float(r.train_loss_at_best)), repr(float(r.best_val_loss)),
                "" if r.epochs_to_tau is None else r.epochs_to_tau, repr(float(r.depth_ratio)),
            ])


def read_comparison_csv(path) -> List[VariantResult]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != COMPARISON_HEADER:
            raise ValueError(f"{path}: unexpected comparison header {reader.fieldnames}")
        return [
            VariantResult(
                model=row["model"],
                long_skips=row["long_skips"] == "1",
                short_skips=row["short_skips"] == "1",
                best_epoch=int(row["best_epoch"]),
                train_loss_at_best=float(row["train_loss_at_best"]),
                best_val_loss=float(row["best_val_loss"]),
                epochs_to_tau=int(row["epochs_to_tau"]) if row["epochs_to_tau"] else None,
                depth_ratio=float(row["depth_ratio"]),
            )
            for row in reader
        ]


def run_ablation(net_cfg: NetworkConfig, train_cfg: TrainConfig, out_dir,
                 data=None, tau: float = DEFAULT_TAU,
                 variants: Optional[Sequence[str]] = None,
                 save_checkpoints: bool = False) -> List[VariantResult]:
    """Train each variant and write its CSVs; returns the comparison rows.

    ``data`` is ``((x_train, y_train), (x_val, y_val))``. When omitted, a
    synthetic 50/10 split at the network's input resolution is generated
    from ``train_cfg.seed``.
    """
    names = list(VARIANTS) if variants is None else list(variants)
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown ablation variants {unknown}; choose from {list(VARIANTS)}")
    if data is None:
        h, w = net_cfg.input_resolution
        if h != w:
            raise ConfigError("synthetic data needs a square input resolution")
        data = synthetic_split(train_cfg.seed, h)
    train, val = data
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in names:
        toggles = VARIANTS[name]
        cfg = net_cfg.with_toggles(long_skips=toggles[0], short_skips=toggles[1])
        net = build_network(cfg, seed=train_cfg.seed)
        logger.info("ablation variant %s (long=%s short=%s)", name, *toggles)
        result = fit(net, train, val, train_cfg)
        run_dir = out / name
        run_dir.mkdir(exist_ok=True)
        write_history_csv(result.history, run_dir / "history.csv")
        export_update_csv(sort_records(result.updates), run_dir / "telemetry.csv")
        if save_checkpoints:
            save_checkpoint(net, run_dir / "best.ckpt", result.best_state)
        rows.append(summarize(name, toggles, result, tau))
    write_comparison_csv(rows, out / "comparison.csv")
    return rows


def median_or_inf(values: Sequence[Optional[float]]) -> float:
    """Median with ``None`` (never reached) counted as +inf."""
    return float(np.median([math.inf if v is None else v for v in values]))
