import pytest

from skipseg.cli import main, read_manifest
from skipseg.network import config_to_text, make_config
from skipseg.training import read_history_csv


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.ini"
    text = config_to_text(make_config(16, (4, 8), 1, dropout_rate=0.1))
    path.write_text(text + "\n[train]\nbatch_size = 4\nepochs = 2\n")
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def test_train_zero_epochs(tmp_path, small_config):
    out = tmp_path / "run"
    assert run("train", "--config", small_config, "--epochs", 0, "--n-samples", 6, "--out", out) == 0
    assert read_history_csv(out / "history.csv") == []
    assert (out / "best.ckpt").read_bytes()[:8] == b"SKSEGCKP"
    manifest = read_manifest(out / "manifest.txt")
    assert manifest["command"] == "train"
    assert manifest["train.epochs"] == "0"
    assert manifest["row.classifier.block"] == "conv1x1"
    assert manifest["train.learning_rate"] == "0.001"


def test_train_eval_plot(tmp_path, small_config, capsys):
    out = tmp_path / "run"
    assert run("train", "--config", small_config, "--n-samples", 8, "--seed", 2, "--augment", "--out", out) == 0
    assert len(read_history_csv(out / "history.csv")) == 2
    assert read_manifest(out / "manifest.txt")["train.augment_elastic"] == "true"
    ev = tmp_path / "eval"
    assert run("eval", "--checkpoint", out / "best.ckpt", "--n-samples", 8, "--seed", 2,
               "--mc-samples", 3, "--out", ev) == 0
    lines = (ev / "metrics.csv").read_text().splitlines()
    assert lines[0] == "metric,value"
    assert {l.split(",")[0] for l in lines[1:]} == {"loss", "pixel_accuracy", "soft_dice", "rand_index", "n_images"}
    assert run("plot", "--run", out) == 0
    assert (out / "curves.png").stat().st_size > 0 and (out / "updates.png").exists()


def test_synth_then_train_on_directory(tmp_path, small_config):
    data = tmp_path / "data"
    assert run("synth", "--count", 5, "--size", 16, "--seed", 1, "--out", data) == 0
    assert len(list((data / "images").glob("*.png"))) == 5
    assert run("train", "--config", small_config, "--data", data, "--train-ratio", 0.6,
               "--epochs", 1, "--out", tmp_path / "r") == 0
    assert read_manifest(tmp_path / "r" / "manifest.txt")["data.n_train"] == "3"


def test_ablate_is_byte_identical(tmp_path, small_config):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert run("ablate", "--config", small_config, "--seed", 7, "--epochs", 1, "--n-samples", 6,
                   "--variants", "model1,model3", "--out", out) == 0
    names = ["comparison.csv", "model1/history.csv", "model1/telemetry.csv", "model3/history.csv",
             "model3/telemetry.csv"]
    for name in names:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    manifests = [read_manifest(out / "manifest.txt") for out in outs]
    assert manifests[0].pop("arg.out") != manifests[1].pop("arg.out")
    assert manifests[0] == manifests[1]
    header = (outs[0] / "comparison.csv").read_text().splitlines()[0]
    assert header.startswith("model,long_skips,short_skips,best_epoch,train_loss_at_best,best_val_loss")
    assert run("plot", "--run", outs[0]) == 0
    assert (outs[0] / "ablation_val_loss.png").exists()


def test_gradcheck_command(tmp_path):
    assert run("gradcheck", "--n-seeds", 1, "--out", tmp_path) == 0
    rows = (tmp_path / "gradcheck.csv").read_text().splitlines()
    assert rows[0] == "case,seed,max_rel_error" and len(rows) > 30


def test_gradcheck_failure_exits_one(tmp_path, monkeypatch):
    import skipseg.cli as cli
    from skipseg.gradcheck import CheckResult

    monkeypatch.setattr(cli, "run_suite", lambda seeds, progress=None: [CheckResult("x", 0, 1.0)])
    assert run("gradcheck", "--n-seeds", 1, "--out", tmp_path) == 1


def test_error_exit_codes(tmp_path, capsys):
    assert run("train", "--config", tmp_path / "missing.ini", "--out", tmp_path / "o") == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[network]\n[row down1]\nblock = fancy\nresolution = 4x4\nwidth = 2\n")
    assert run("train", "--config", bad, "--out", tmp_path / "o") == 1
    assert run("train", "--config", "no_such_bundle", "--out", tmp_path / "o") == 1
    assert "error" in capsys.readouterr().err
    assert run("eval", "--checkpoint", tmp_path / "nope.ckpt", "--out", tmp_path / "e") == 2
    assert run("plot", "--run", tmp_path / "empty") == 2


def test_bundled_toy_config_trains(tmp_path):
    assert run("train", "--config", "toy", "--epochs", 1, "--n-samples", 4, "--batch-size", 2,
               "--out", tmp_path) == 0
