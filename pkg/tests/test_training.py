import numpy as np
import pytest

from skipseg.blocks import Parameter
from skipseg.data import AugmentFlags, generate_synthetic_em, stack_samples
from skipseg.exceptions import ConfigError, StateError, TrainingDivergedError
from skipseg.network import build_network, make_config
from skipseg.telemetry import UpdateAccumulator
from skipseg.training import (
    HISTORY_CSV_HEADER,
    OptimizerState,
    TrainConfig,
    fit,
    load_train_config,
    mc_dropout_predict,
    predict_logits,
    read_history_csv,
    rmsprop_step,
    train_config_from_section,
    train_config_items,
    train_epoch,
    write_history_csv,
)
from skipseg.ops import sigmoid_array


def _param(value, grad, name="p"):
    p = Parameter(np.asarray(value, dtype=np.float64), name=name)
    p.grad = np.asarray(grad, dtype=np.float64)
    return p


def test_rmsprop_single_step_example():
    p = _param([0.0], [1.0])
    state = OptimizerState.for_params([p])
    rmsprop_step([p], state, TrainConfig(weight_decay=0.0))
    np.testing.assert_allclose(state.accumulators["p"], [0.1])
    np.testing.assert_allclose(p.data, [-0.001 / np.sqrt(0.1)], rtol=1e-6)
    assert p.data[0] == pytest.approx(-3.1623e-3, abs=1e-7)


def test_rmsprop_zero_grad_no_decay_is_noop():
    p = _param([1.5, -2.0], [0.0, 0.0])
    rmsprop_step([p], OptimizerState.for_params([p]), TrainConfig(weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_weight_decay_pulls_towards_zero():
    p = _param([1.0], [0.0])
    rmsprop_step([p], OptimizerState.for_params([p]), TrainConfig(weight_decay=0.001))
    assert p.data[0] < 1.0


def test_rmsprop_coordinates_are_independent(rng):
    g = rng.standard_normal(6)
    joint = _param(np.zeros(6), g)
    rmsprop_step([joint], OptimizerState.for_params([joint]), TrainConfig())
    for i in range(6):
        single = _param([0.0], [g[i]], name=f"s{i}")
        rmsprop_step([single], OptimizerState.for_params([single]), TrainConfig())
        assert single.data[0] == joint.data[i]


def test_rmsprop_state_mismatch():
    p = _param([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(StateError):
        rmsprop_step([p], OptimizerState({"p": np.zeros(3)}), TrainConfig())


def _toy(size=16, **kw):
    x, y = stack_samples(generate_synthetic_em(0, 6, size))
    net = build_network(make_config(size, (4, 8), 1, **kw), seed=0)
    return net, x, y


def test_zero_learning_rate_freezes_parameters():
    net, x, y = _toy()
    before = {k: v.data.copy() for k, v in net.named_parameters().items()}
    cfg = TrainConfig(learning_rate=0.0, weight_decay=0.0, batch_size=3)
    acc = UpdateAccumulator.for_params(net.parameters())
    train_epoch(net, x, y, cfg, OptimizerState.for_params(net.parameters()), acc, 1)
    for name, p in net.named_parameters().items():
        np.testing.assert_array_equal(p.data, before[name])
    assert all(r.mean_abs_update == 0.0 for r in acc.close_epoch(1))


def test_train_epoch_deterministic():
    stats = []
    for _ in range(2):
        net, x, y = _toy(dropout_rate=0.2)
        cfg = TrainConfig(batch_size=4, augment=AugmentFlags(), seed=3)
        stats.append(train_epoch(net, x, y, cfg, OptimizerState.for_params(net.parameters()), None, 1))
    assert stats[0] == stats[1]


def test_divergence_reports_context():
    net, x, y = _toy()
    net.named_parameters()["classifier.rep0.conv.bias"].data[:] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        train_epoch(net, x, y, TrainConfig(batch_size=3), OptimizerState.for_params(net.parameters()), None, 7)
    assert info.value.epoch == 7 and info.value.batch == 0


def test_fit_zero_epochs_returns_init():
    net, x, y = _toy()
    init = net.state_dict()
    res = fit(net, (x[:4], y[:4]), (x[4:], y[4:]), TrainConfig(epochs=0))
    assert res.history == [] and res.best_epoch == 0
    for k in init:
        np.testing.assert_array_equal(res.best_state[k], init[k])


def test_fit_keeps_best_and_is_deterministic():
    runs = []
    for _ in range(2):
        net, x, y = _toy()
        runs.append(fit(net, (x[:4], y[:4]), (x[4:], y[4:]), TrainConfig(epochs=4, batch_size=2)))
    a, b = runs
    assert a.history == b.history and a.updates == b.updates
    assert a.best_val_loss == min(h.val_loss for h in a.history)
    assert a.history[a.best_epoch - 1].val_loss == a.best_val_loss
    assert a.train_loss_at_best() == a.history[a.best_epoch - 1].train_loss


def test_best_state_reproduces_best_val_loss():
    net, x, y = _toy()
    cfg = TrainConfig(epochs=3, batch_size=2)
    res = fit(net, (x[:4], y[:4]), (x[4:], y[4:]), cfg)
    net.load_state_dict(res.best_state)
    from skipseg.training import evaluate

    assert evaluate(net, x[4:], y[4:], cfg)[0] == res.best_val_loss


def test_fit_empty_validation():
    net, x, y = _toy()
    with pytest.raises(ConfigError):
        fit(net, (x, y), (x[:0], y[:0]), TrainConfig(epochs=1))


def test_mc_dropout_rate_zero_matches_eval():
    net, x, _ = _toy(dropout_rate=0.3)
    mc = mc_dropout_predict(net, x, n_samples=3, rate=0.0)
    np.testing.assert_array_equal(mc, sigmoid_array(predict_logits(net, x).astype(np.float64)))


def test_mc_dropout_single_pass_reproducible():
    net, x, _ = _toy()
    a = mc_dropout_predict(net, x, 1, 0.2, np.random.default_rng(4))
    b = mc_dropout_predict(net, x, 1, 0.2, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, mc_dropout_predict(net, x, 1, 0.2, np.random.default_rng(5)))
    with pytest.raises(ConfigError):
        mc_dropout_predict(net, x, 0)


def test_mc_dropout_variance_shrinks_with_samples():
    net, x, _ = _toy()
    x = x[:1]
    variances = []
    for n in (1, 4, 16):
        draws = [mc_dropout_predict(net, x, n, 0.2, np.random.default_rng([n, k])) for k in range(12)]
        variances.append(np.var(np.stack(draws), axis=0).mean())
    assert variances[0] > variances[1] > variances[2]
    assert variances[2] < variances[0] / 4


def test_history_csv_round_trip(tmp_path):
    net, x, y = _toy()
    res = fit(net, (x[:4], y[:4]), (x[4:], y[4:]), TrainConfig(epochs=2, batch_size=2))
    write_history_csv(res.history, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == ",".join(HISTORY_CSV_HEADER)
    assert read_history_csv(tmp_path / "h.csv") == res.history


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(loss="l2")


def test_train_section_round_trip(tmp_path):
    cfg = train_config_from_section({"epochs": "7", "dropout_rate": "0.1", "augment_shear": "yes"})
    assert cfg.epochs == 7 and cfg.dropout_rate == 0.1 and cfg.augment.shear and not cfg.augment.flip
    assert train_config_from_section(dict(train_config_items(cfg))) == cfg
    path = tmp_path / "c.ini"
    path.write_text("[network]\n[train]\nlearning_rate = 0.01 ; comment\n")
    assert load_train_config(path).learning_rate == 0.01
    with pytest.raises(ConfigError):
        train_config_from_section({"momentum": "0.9"})
    with pytest.raises(ConfigError):
        train_config_from_section({"augment_flip": "maybe"})
