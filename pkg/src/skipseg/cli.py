"""Command-line entry point: ``skipseg <command> [options]``.

Commands: train, eval, ablate, gradcheck, synth, plot. Each run writes
``manifest.txt`` to its output directory. It holds one ``key = value``
pair per line (``#`` starts a comment) and echoes the resolved network and
training configuration. Exit status is 0 on success, 1 for a failed check
or invalid configuration and 2 for file-system errors.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .ablation import DEFAULT_TAU, VARIANTS, run_ablation, synthetic_split
from .autodiff import precision
from .data import generate_synthetic_em, load_image_stack, save_image_stack, split_train_val, stack_samples
from .exceptions import (
    ConfigError,
    DimensionError,
    LabelError,
    StateError,
    TrainingDivergedError,
    UndefinedMetricError,
)
from .gradcheck import TOLERANCE, run_suite, summarize
from .metrics import pixel_accuracy, segment_rand_index, soft_dice_coefficient
from .network import (
    NetworkConfig,
    build_network,
    bundled_config,
    load_checkpoint,
    load_config,
    save_checkpoint,
    save_config,
)
from .telemetry import export_update_csv, read_update_csv, sort_records, update_matrix
from .training import (
    TrainConfig,
    evaluate,
    fit,
    load_train_config,
    mc_dropout_predict,
    predict_proba,
    read_history_csv,
    train_config_from_section,
    train_config_items,
    write_history_csv,
)

logger = logging.getLogger("skipseg")

DEFAULT_TRAIN_RATIO = 50 / 60


class CheckFailed(Exception):
    """A command ran to completion but its check did not pass."""


# -- config resolution ---------------------------------------------------------

def resolve_config(name: str) -> Tuple[NetworkConfig, Optional[Path]]:
    """A path to an INI file, or the name of a bundled config."""
    path = Path(name)
    if path.suffix == ".ini" or len(path.parts) > 1:
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {name}")
        return load_config(path), path
    return bundled_config(name), Path(__file__).with_name("configs") / f"{name}.ini"


def resolve_train_config(args, config_path: Optional[Path], **overrides) -> TrainConfig:
    base = load_train_config(config_path) if config_path is not None else TrainConfig()
    section = {}
    for key in ("epochs", "seed", "loss", "learning_rate", "batch_size", "dropout_rate"):
        value = getattr(args, key, None)
        if value is not None:
            section[key] = str(value)
    if getattr(args, "augment", False):
        section.update({f"augment_{k}": "true" for k in ("flip", "rotate90", "shear", "elastic")})
    section.update({k: str(v) for k, v in overrides.items()})
    return train_config_from_section(section, base)


def load_dataset(args, cfg: NetworkConfig, seed: int):
    """(train, val) arrays from ``--data`` or a synthetic split."""
    if getattr(args, "data", None):
        samples = load_image_stack(args.data)
        if not samples:
            raise FileNotFoundError(f"no images found under {args.data}/images")
        split = split_train_val(samples, args.train_ratio, seed)
        return stack_samples(split.train), stack_samples(split.val)
    h, w = cfg.input_resolution
    if h != w:
        raise ConfigError("synthetic data needs a square input resolution; pass --data")
    n_val = max(1, int(round(args.n_samples * (1 - args.train_ratio))))
    return synthetic_split(seed, h, args.n_samples - n_val, n_val)


# -- manifest ------------------------------------------------------------------

def manifest_items(command: str, args, net_cfg: Optional[NetworkConfig] = None,
                   train_cfg: Optional[TrainConfig] = None,
                   extra: Iterable[Tuple[str, object]] = ()) -> List[Tuple[str, str]]:
    items = [("command", command), ("version", __version__)]
    for key, value in sorted(vars(args).items()):
        if key in ("func", "command"):
            continue
        items.append((f"arg.{key}", "none" if value is None else str(value)))
    if net_cfg is not None:
        items += [("network.input_resolution", "x".join(map(str, net_cfg.input_resolution))),
                  ("network.input_channels", str(net_cfg.input_channels)),
                  ("network.long_skips", str(net_cfg.long_skips).lower()),
                  ("network.short_skips", str(net_cfg.short_skips).lower()),
                  ("network.batch_norm", str(net_cfg.use_batch_norm).lower()),
                  ("network.dropout_rate", repr(float(net_cfg.dropout_rate)))]
        for row in net_cfg.rows:
            items += [(f"row.{row.name}.block", row.block_type),
                      (f"row.{row.name}.resolution", "x".join(map(str, row.out_resolution))),
                      (f"row.{row.name}.width", str(row.out_width)),
                      (f"row.{row.name}.repetitions", str(row.repetitions)),
                      (f"row.{row.name}.path", row.path)]
    if train_cfg is not None:
        items += [(f"train.{k}", v) for k, v in train_config_items(train_cfg)]
    items += [(k, str(v)) for k, v in extra]
    return items


def write_manifest(out: Path, items: Sequence[Tuple[str, str]]) -> None:
    lines = ["# skipseg run manifest: key = value"] + [f"{k} = {v}" for k, v in items]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, value = line.partition(" = ")
        out[key] = value
    return out


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ------------------------------------------------------------------

def cmd_train(args) -> None:
    net_cfg, cfg_path = resolve_config(args.config)
    train_cfg = resolve_train_config(args, cfg_path)
    out = _out_dir(args)
    with precision(args.precision):
        train, val = load_dataset(args, net_cfg, train_cfg.seed)
        net = build_network(net_cfg, seed=train_cfg.seed)
        result = fit(net, train, val, train_cfg)
        save_checkpoint(net, out / "best.ckpt", result.best_state)
    write_history_csv(result.history, out / "history.csv")
    export_update_csv(sort_records(result.updates), out / "telemetry.csv")
    save_config(net_cfg, out / "config.ini")
    write_manifest(out, manifest_items("train", args, net_cfg, train_cfg, [
        ("result.best_epoch", result.best_epoch),
        ("result.best_val_loss", repr(float(result.best_val_loss))),
        ("data.n_train", len(train[0])), ("data.n_val", len(val[0])),
        ("output.checkpoint", "best.ckpt"), ("output.history", "history.csv"),
        ("output.telemetry", "telemetry.csv"), ("output.config", "config.ini"),
    ]))
    print(f"best epoch {result.best_epoch}, val loss {result.best_val_loss:.4f}; wrote {out}")


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


def evaluation_metrics(net, images, masks, train_cfg: TrainConfig, mc_samples: int, mc_rate: float,
                       seed: int) -> List[Tuple[str, float]]:
    loss, acc = evaluate(net, images, masks, train_cfg)
    if mc_samples > 0:
        prob = mc_dropout_predict(net, images, mc_samples, mc_rate, np.random.default_rng([seed, 2]))
    else:
        prob = predict_proba(net, images)
    rand = []
    for p, y in zip(prob, masks):
        try:
            rand.append(segment_rand_index(p[0], y[0]))
        except UndefinedMetricError:
            rand.append(None)
    return [
        ("loss", loss),
        ("pixel_accuracy", acc if mc_samples == 0 else pixel_accuracy(prob >= 0.5, masks > 0.5)),
        ("soft_dice", soft_dice_coefficient(prob, masks)),
        ("rand_index", _mean_defined(rand)),
        ("n_images", float(len(images))),
    ]


def cmd_eval(args) -> None:
    net = load_checkpoint(args.checkpoint)
    train_cfg = resolve_train_config(args, None, loss=args.loss)
    out = _out_dir(args)
    if args.data:
        samples = load_image_stack(args.data)
        if not samples:
            raise FileNotFoundError(f"no images found under {args.data}/images")
        images, masks = stack_samples(samples)
    else:
        _, (images, masks) = load_dataset(args, net.cfg, args.seed)
    rows = evaluation_metrics(net, images, masks, train_cfg, args.mc_samples, args.mc_rate, args.seed)
    with (out / "metrics.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for name, value in rows:
            writer.writerow([name, repr(float(value))])
    write_manifest(out, manifest_items("eval", args, net.cfg, train_cfg, [("output.metrics", "metrics.csv")]))
    for name, value in rows:
        print(f"{name:15s} {value:.6g}")


def cmd_ablate(args) -> None:
    net_cfg, cfg_path = resolve_config(args.config)
    train_cfg = resolve_train_config(args, cfg_path)
    out = _out_dir(args)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    with precision(args.precision):
        data = load_dataset(args, net_cfg, train_cfg.seed)
        rows = run_ablation(net_cfg, train_cfg, out, data=data, tau=args.tau, variants=variants,
                            save_checkpoints=args.save_checkpoints)
    write_manifest(out, manifest_items("ablate", args, net_cfg, train_cfg, [
        ("output.comparison", "comparison.csv"),
        *[(f"output.{v}", f"{v}/history.csv {v}/telemetry.csv") for v in variants],
    ]))
    print(f"{'model':8s} {'long':>4s} {'short':>5s} {'best_ep':>7s} {'train@best':>10s} {'best_val':>9s} {'ep<=tau':>7s}")
    for r in rows:
        reach = "-" if r.epochs_to_tau is None else str(r.epochs_to_tau)
        print(f"{r.model:8s} {int(r.long_skips):4d} {int(r.short_skips):5d} {r.best_epoch:7d} "
              f"{r.train_loss_at_best:10.4f} {r.best_val_loss:9.4f} {reach:>7s}")


def cmd_gradcheck(args) -> None:
    out = _out_dir(args)
    seeds = range(args.seed, args.seed + args.n_seeds)

    def progress(res):
        if not res.passed:
            print(f"FAIL {res.case} seed {res.seed}: {res.error:.3e}", file=sys.stderr)

    results = run_suite(seeds, progress=progress)
    failures = [r for r in results if not r.passed]
    with (out / "gradcheck.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["case", "seed", "max_rel_error"])
        for r in results:
            writer.writerow([r.case, r.seed, repr(r.error)])
    worst = summarize(results)
    write_manifest(out, manifest_items("gradcheck", args, extra=[
        ("tolerance", repr(TOLERANCE)), ("n_checks", len(results)), ("n_failed", len(failures)),
        ("worst_error", repr(max(worst.values()))), ("output.results", "gradcheck.csv"),
    ]))
    for case, err in worst.items():
        print(f"{case:36s} {err:.3e}")
    if failures:
        raise CheckFailed(f"{len(failures)} of {len(results)} gradient checks exceeded {TOLERANCE:g}")
    print(f"all {len(results)} checks within {TOLERANCE:g}")


def cmd_synth(args) -> None:
    out = _out_dir(args)
    samples = generate_synthetic_em(args.seed, args.count, args.size)
    save_image_stack(samples, out)
    write_manifest(out, manifest_items("synth", args, extra=[
        ("layout.images", "images/<name>.png (8-bit grayscale)"),
        ("layout.masks", "masks/<name>.png (255 = cell interior, 0 = membrane)"),
    ]))
    print(f"wrote {len(samples)} samples to {out}")


def _plot_history(ax, path: Path, label_prefix: str = "") -> None:
    hist = read_history_csv(path)
    epochs = [h.epoch for h in hist]
    ax.plot(epochs, [h.train_loss for h in hist], "--", label=f"{label_prefix}train")
    ax.plot(epochs, [h.val_loss for h in hist], label=f"{label_prefix}val")


def _plot_updates(path: Path, dest: Path, plt) -> None:
    epochs, layers, mat = update_matrix(read_update_csv(path))
    fig, ax = plt.subplots(figsize=(8, 4))
    with np.errstate(divide="ignore"):
        img = ax.imshow(np.log10(mat.T), aspect="auto", origin="upper", cmap="viridis",
                        extent=(epochs[0] - 0.5, epochs[-1] + 0.5, len(layers) - 0.5, -0.5))
    fig.colorbar(img, ax=ax, label="log10 mean |update|")
    ax.set_xlabel("epoch")
    ax.set_ylabel("layer (input to output)")
    fig.tight_layout()
    fig.savefig(dest, dpi=100)
    plt.close(fig)


def cmd_plot(args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if (run / "comparison.csv").exists():
        variants = sorted(p.parent for p in run.glob("*/history.csv"))
        fig, ax = plt.subplots(figsize=(6, 4))
        for v in variants:
            hist = read_history_csv(v / "history.csv")
            ax.plot([h.epoch for h in hist], [h.val_loss for h in hist], label=v.name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "ablation_val_loss.png", dpi=100)
        plt.close(fig)
        written.append("ablation_val_loss.png")
        for v in variants:
            if (v / "telemetry.csv").exists():
                _plot_updates(v / "telemetry.csv", out / f"updates_{v.name}.png", plt)
                written.append(f"updates_{v.name}.png")
    if (run / "history.csv").exists():
        fig, ax = plt.subplots(figsize=(6, 4))
        _plot_history(ax, run / "history.csv")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "curves.png", dpi=100)
        plt.close(fig)
        written.append("curves.png")
    if (run / "telemetry.csv").exists():
        _plot_updates(run / "telemetry.csv", out / "updates.png", plt)
        written.append("updates.png")
    if not written:
        raise FileNotFoundError(f"no history.csv, telemetry.csv or comparison.csv under {run}")
    write_manifest(out, manifest_items("plot", args, extra=[("output.images", " ".join(written))]))
    print("wrote " + ", ".join(written))


# -- parser --------------------------------------------------------------------

def _common(p, config_default: Optional[str] = None, epochs: bool = True) -> None:
    if config_default is not None:
        p.add_argument("--config", default=config_default,
                       help="INI file path or bundled config name (toy, deep, table1)")
    p.add_argument("--seed", type=int, default=None if epochs else 0, help="run seed")
    if epochs:
        p.add_argument("--epochs", type=int, default=None, help="training epochs")
    p.add_argument("--out", required=True, help="output directory")


def _data_args(p) -> None:
    p.add_argument("--data", help="dataset directory with images/ and masks/ (default: synthetic)")
    p.add_argument("--n-samples", type=int, default=60, help="synthetic sample count")
    p.add_argument("--train-ratio", type=float, default=DEFAULT_TRAIN_RATIO)


def _train_args(p) -> None:
    p.add_argument("--loss", choices=["bce", "dice"])
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout", dest="dropout_rate", type=float)
    p.add_argument("--augment", action="store_true", help="enable flip, rotation, shear and elastic warps")
    p.add_argument("--precision", choices=["float32", "float64"], default="float32")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skipseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and keep the best checkpoint")
    _common(p, "toy")
    _data_args(p)
    _train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    _common(p, epochs=False)
    _data_args(p)
    p.add_argument("--loss", choices=["bce", "dice"], default="bce")
    p.add_argument("--mc-samples", type=int, default=0, help="MC-dropout passes (0: deterministic)")
    p.add_argument("--mc-rate", type=float, default=0.2)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train skip-connection variants from one seed")
    _common(p, "deep")
    _data_args(p)
    _train_args(p)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU, help="val-loss threshold for epochs_to_tau")
    p.add_argument("--variants", help=f"comma list from {','.join(VARIANTS)} (default: all)")
    p.add_argument("--save-checkpoints", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable part")
    _common(p, epochs=False)
    p.add_argument("--n-seeds", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic membrane dataset")
    _common(p, epochs=False)
    p.add_argument("--count", type=int, default=60)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("plot", help="render curves and update heatmaps from run CSVs")
    p.add_argument("--run", required=True, help="directory produced by train or ablate")
    p.add_argument("--out", help="image directory (default: the run directory)")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CheckFailed as exc:
        print(f"skipseg: check failed: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, LabelError, DimensionError, StateError, TrainingDivergedError, ValueError) as exc:
        print(f"skipseg: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"skipseg: I/O error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
