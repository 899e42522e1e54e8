"""Per-layer parameter-update telemetry.

After every optimizer step the mean absolute change of each layer's
parameters is accumulated; closing an epoch averages those step values into
one :class:`UpdateRecord` per layer.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .exceptions import TelemetryError

UPDATE_CSV_HEADER = ["epoch", "layer_name", "depth_index", "mean_abs_update"]


@dataclass(frozen=True)
class UpdateRecord:
    epoch: int
    layer_name: str
    depth_index: int
    mean_abs_update: float


def snapshot(params) -> Dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in params}


class UpdateAccumulator:
    """Collects per-step layer updates and emits epoch averages.

    ``layers`` maps parameter name -> (layer name, depth index).
    """

    def __init__(self, layers: Dict[str, tuple]):
        self.layers = dict(layers)
        self._layer_depth = {}
        for layer, depth in self.layers.values():
            self._layer_depth.setdefault(layer, depth)
        self._sums: Dict[str, float] = {name: 0.0 for name in self._layer_depth}
        self.steps = 0
        self.last_step: Dict[str, float] = {}

    @classmethod
    def for_params(cls, params) -> "UpdateAccumulator":
        return cls({p.name: (p.layer, p.depth_index) for p in params})

    def record(self, before: Dict[str, np.ndarray], after: Dict[str, np.ndarray]) -> Dict[str, float]:
        if set(before) != set(after) or set(before) != set(self.layers):
            raise TelemetryError("parameter snapshots are not name-aligned with the tracked layers")
        abs_sum = {name: 0.0 for name in self._layer_depth}
        counts = {name: 0 for name in self._layer_depth}
        for name, prev in before.items():
            layer = self.layers[name][0]
            cur = after[name]
            if cur.shape != prev.shape:
                raise TelemetryError(f"{name}: snapshot shapes differ {prev.shape} vs {cur.shape}")
            abs_sum[layer] += float(np.abs(cur.astype(np.float64) - prev.astype(np.float64)).sum())
            counts[layer] += prev.size
        step = {layer: abs_sum[layer] / counts[layer] if counts[layer] else 0.0 for layer in abs_sum}
        for layer, value in step.items():
            self._sums[layer] += value
        self.steps += 1
        self.last_step = step
        return step

    def close_epoch(self, epoch: int) -> List[UpdateRecord]:
        steps = max(self.steps, 1)
        records = [
            UpdateRecord(epoch, layer, self._layer_depth[layer], self._sums[layer] / steps)
            for layer in self._layer_depth
        ]
        self._sums = {name: 0.0 for name in self._layer_depth}
        self.steps = 0
        return sort_records(records)


def record_layer_updates(before, after, accumulator: UpdateAccumulator) -> Dict[str, float]:
    return accumulator.record(before, after)


def sort_records(records: Iterable[UpdateRecord]) -> List[UpdateRecord]:
    return sorted(records, key=lambda r: (r.epoch, r.depth_index, r.layer_name))


def export_update_csv(records: Sequence[UpdateRecord], path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(UPDATE_CSV_HEADER)
            for r in sort_records(records):
                writer.writerow([r.epoch, r.layer_name, r.depth_index, repr(float(r.mean_abs_update))])
    except OSError as exc:
        raise OSError(f"cannot write update telemetry to {path}: {exc}") from exc


def read_update_csv(path) -> List[UpdateRecord]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != UPDATE_CSV_HEADER:
            raise TelemetryError(f"{path}: unexpected header {header}")
        return [UpdateRecord(int(e), name, int(d), float(v)) for e, name, d, v in reader]


def update_matrix(records: Sequence[UpdateRecord]):
    """(epochs, layer names in depth order, epochs x layers array) for heatmaps."""
    records = sort_records(records)
    epochs = sorted({r.epoch for r in records})
    order = {}
    for r in records:
        order.setdefault(r.layer_name, r.depth_index)
    layers = sorted(order, key=lambda n: (order[n], n))
    col = {n: i for i, n in enumerate(layers)}
    row = {e: i for i, e in enumerate(epochs)}
    mat = np.zeros((len(epochs), len(layers)))
    for r in records:
        mat[row[r.epoch], col[r.layer_name]] = r.mean_abs_update
    return epochs, layers, mat


def depth_profile_ratio(records: Sequence[UpdateRecord], classifier: str = "classifier",
                        last_fraction: float = 0.25) -> float:
    """Median update of the deepest third of layers over the classifier's.

    "Deepest" means closest to the bottom of the U, i.e. the middle of the
    depth range. Values are averaged over the last ``last_fraction`` of
    epochs before taking the ratio. Long-skip projection layers are
    excluded since only some variants have them.
    """
    epochs, layers, mat = update_matrix(records)
    if not epochs:
        raise TelemetryError("no telemetry records")
    n_last = max(1, int(round(len(epochs) * last_fraction)))
    mean = mat[-n_last:].mean(axis=0)
    depth = {}
    for r in records:
        depth.setdefault(r.layer_name, r.depth_index)
    head = [i for i, n in enumerate(layers) if n.split(".")[0] == classifier]
    if not head:
        raise TelemetryError(f"no layer of row {classifier!r} in telemetry")
    body = [i for i, n in enumerate(layers) if not n.endswith(".long") and i not in head]
    depths = np.array([depth[layers[i]] for i in body], dtype=float)
    center = (depths.min() + depths.max()) / 2.0
    dist = np.abs(depths - center)
    k = max(1, len(body) // 3)
    deepest = [body[i] for i in np.argsort(dist, kind="stable")[:k]]
    head_value = float(mean[head].mean())
    if head_value == 0.0:
        raise TelemetryError("classifier received no updates")
    return float(np.median(mean[deepest])) / head_value
