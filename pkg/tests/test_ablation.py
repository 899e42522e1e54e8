import math

import numpy as np
import pytest

from skipseg.ablation import (
    VARIANTS,
    VariantResult,
    epochs_to_threshold,
    median_or_inf,
    read_comparison_csv,
    run_ablation,
    write_comparison_csv,
)
from skipseg.exceptions import ConfigError
from skipseg.network import make_config
from skipseg.training import TrainConfig, read_history_csv


def test_variant_table_mirrors_the_three_models():
    assert VARIANTS["model1"] == (True, True)
    assert VARIANTS["model2"] == (False, True)
    assert VARIANTS["model3"] == (True, False)


def test_epochs_to_threshold():
    assert epochs_to_threshold([0.9, 0.5, 0.25, 0.1], 0.25) == 3
    assert epochs_to_threshold([0.9, 0.5], 0.25) is None
    assert epochs_to_threshold([], 0.25) is None


def test_median_counts_never_as_infinite():
    assert median_or_inf([3, None, 5]) == 5
    assert median_or_inf([None, None, 1]) == math.inf


def test_comparison_round_trip(tmp_path):
    rows = [VariantResult("model1", True, True, 4, 0.3, 0.2, 3, 0.8),
            VariantResult("noskip", False, False, 1, 0.6, 0.5, None, 1.1)]
    write_comparison_csv(rows, tmp_path / "c.csv")
    assert read_comparison_csv(tmp_path / "c.csv") == rows


def test_run_ablation_writes_per_variant_outputs(tmp_path):
    cfg = make_config(16, (4, 8), 1)
    x = np.random.default_rng(0).random((6, 1, 16, 16)).astype(np.float32)
    y = (x > 0.5).astype(np.float32)
    rows = run_ablation(cfg, TrainConfig(epochs=2, batch_size=2), tmp_path,
                        data=((x[:4], y[:4]), (x[4:], y[4:])), variants=["model1", "model2"])
    assert [r.model for r in rows] == ["model1", "model2"]
    assert read_comparison_csv(tmp_path / "comparison.csv") == rows
    assert len(read_history_csv(tmp_path / "model2" / "history.csv")) == 2
    with pytest.raises(ConfigError):
        run_ablation(cfg, TrainConfig(epochs=1), tmp_path, variants=["model9"])
