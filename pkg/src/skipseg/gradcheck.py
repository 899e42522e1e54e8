"""Finite-difference gradient suite over every differentiable component.

Each case builds small random inputs from a seed, wraps the component in a
random linear probe so the check sees a scalar, and returns the worst
relative error from :func:`finite_diff_check`. Everything runs in float64.

Central differences are only an oracle where the function is smooth
within +-EPS. Cases with relu inputs redraw their random input when any
relu changes sign across the evaluations of one check (a kink lay inside
the step), up to KINK_RETRIES times. The rule ignores the error value,
and after the last attempt the error is reported as is.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from .autodiff import add_elementwise, finite_diff_check, mul, precision, tensor, weighted_sum
from .blocks import BlockOpts, make_block
from .losses import bce_loss, dice_loss
from .network import build_network, make_config
from .ops import (
    BatchNormState,
    batch_norm,
    conv2d,
    decimate_downsample,
    dropout,
    record_relu_signs,
    relu,
    repeat_upsample,
    sigmoid,
)

TOLERANCE = 1e-5
EPS = 1e-5
KINK_RETRIES = 10


@dataclass
class CheckResult:
    case: str
    seed: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error <= TOLERANCE


def _probe_check(fn, x, wrt, r, max_elements=None) -> Tuple[float, bool]:
    """Check ``<fn(x), v>`` for a random probe ``v`` fixed on first call.

    Also reports whether some relu input changed sign between evaluations.
    """
    holder = {"crossed": False}

    def scalar(t):
        with record_relu_signs() as signs:
            out = fn(t)
        if "v" not in holder:
            holder["v"] = r.standard_normal(out.shape)
            holder["signs"] = signs
        elif not holder["crossed"]:
            holder["crossed"] = len(signs) != len(holder["signs"]) or any(
                not np.array_equal(a, b) for a, b in zip(signs, holder["signs"]))
        return weighted_sum(out, holder["v"])

    error = finite_diff_check(scalar, x, eps=EPS, wrt=wrt, max_elements=max_elements, rng=r)
    return error, holder["crossed"]


def _smooth(attempt: Callable[[], Tuple[float, bool]]) -> float:
    """Error of the first attempt whose step crossed no kink (or of the last one)."""
    for _ in range(KINK_RETRIES):
        error, crossed = attempt()
        if not crossed:
            break
    return error


def _x(r, shape):
    return tensor(r.standard_normal(shape))


def _conv_case(k, stride):
    pad = k // 2

    def run(seed):
        r = np.random.default_rng([seed, 1])
        w = _x(r, (3, 2, k, k))
        b = _x(r, (3,))
        return _smooth(lambda: _probe_check(lambda t: conv2d(t, w, b, stride, pad), _x(r, (2, 2, 4, 4)), [w, b], r))

    return run


def _unary_case(op):
    def run(seed):
        r = np.random.default_rng([seed, 2])
        return _smooth(lambda: _probe_check(op, _x(r, (2, 2, 4, 4)), [], r))

    return run


def _binary_case(op):
    def run(seed):
        r = np.random.default_rng([seed, 3])
        other = _x(r, (2, 3))
        return _smooth(lambda: _probe_check(lambda t: op(t, other), _x(r, (2, 3)), [other], r))

    return run


def _bn_case(mode):
    def run(seed):
        r = np.random.default_rng([seed, 4])
        state = BatchNormState.create(2)
        state.gamma.data[:] = r.uniform(0.5, 2.0, 2)
        state.beta.data[:] = r.standard_normal(2)
        state.running_mean[:] = r.standard_normal(2)
        state.running_var[:] = r.uniform(0.5, 2.0, 2)
        return _smooth(lambda: _probe_check(lambda t: batch_norm(t, state, mode), _x(r, (3, 2, 3, 3)),
                                            [state.gamma, state.beta], r))

    return run


def _dropout_case(seed):
    r = np.random.default_rng([seed, 5])
    return _smooth(lambda: _probe_check(lambda t: dropout(t, 0.3, "train", np.random.default_rng(seed)),
                                        _x(r, (2, 2, 4, 4)), [], r))


def _block_case(kind, resample, skip):
    def run(seed):
        r = np.random.default_rng([seed, 6])
        cout = 4 if seed % 2 else 8  # alternate identity and projected shortcuts
        opts = BlockOpts(4, cout, resample=resample, dropout_rate=0.2, use_short_skip=skip)
        block = make_block(kind, "b", opts, seed=seed, depth_index=0)
        for p in block.parameters():
            p.data = p.data + 0.1 * r.standard_normal(p.shape)
        return _smooth(lambda: _probe_check(lambda t: block(t, "train", np.random.default_rng(seed)),
                                            _x(r, (2, 4, 4, 4)), block.parameters(), r, max_elements=12))

    return run


def _loss_case(loss):
    def run(seed):
        r = np.random.default_rng([seed, 7])
        y = (r.random((2, 1, 4, 4)) < 0.5).astype(float)
        x = tensor(2.0 * r.standard_normal((2, 1, 4, 4)))
        return finite_diff_check(lambda t: loss(t, y), x, eps=EPS)

    return run


def _network_case(seed):
    r = np.random.default_rng([seed, 8])
    cfg = make_config(8, widths=(4, 4, 4), repetitions=1, block_type="simple",
                      long_skips=True, short_skips=True, use_batch_norm=True, dropout_rate=0.2)
    net = build_network(cfg, seed=seed)
    return _smooth(lambda: _probe_check(lambda t: net(t, "train", np.random.default_rng(seed)),
                                        _x(r, (2, 1, 8, 8)), net.parameters(), r, max_elements=4))


def default_cases() -> Dict[str, Callable[[int], float]]:
    """Named cases: ops, 18 block variants, both losses, a 3-level network."""
    cases: Dict[str, Callable[[int], float]] = {
        "conv3x3": _conv_case(3, 1),
        "conv3x3_stride2": _conv_case(3, 2),
        "conv1x1": _conv_case(1, 1),
        "conv1x1_stride2": _conv_case(1, 2),
        "relu": _unary_case(relu),
        "sigmoid": _unary_case(sigmoid),
        "add": _binary_case(add_elementwise),
        "mul": _binary_case(mul),
        "batch_norm_train": _bn_case("train"),
        "batch_norm_eval": _bn_case("eval"),
        "dropout": _dropout_case,
        "decimate": _unary_case(lambda t: decimate_downsample(t, 2)),
        "repeat": _unary_case(lambda t: repeat_upsample(t, 2)),
    }
    for kind, resample, skip in itertools.product(("simple", "basic", "bottleneck"),
                                                  ("none", "down", "up"), (True, False)):
        name = f"block_{kind}_{resample}_{'skip' if skip else 'noskip'}"
        cases[name] = _block_case(kind, resample, skip)
    cases["bce_loss"] = _loss_case(bce_loss)
    cases["dice_loss"] = _loss_case(lambda t, y: dice_loss(t, y, 1.0))
    cases["network_3level"] = _network_case
    return cases


def run_suite(seeds: Iterable[int], cases: Optional[Dict[str, Callable[[int], float]]] = None,
              progress: Optional[Callable[[CheckResult], None]] = None) -> List[CheckResult]:
    cases = default_cases() if cases is None else cases
    results = []
    with precision("float64"):
        for seed in seeds:
            for name, fn in cases.items():
                res = CheckResult(name, int(seed), float(fn(int(seed))))
                results.append(res)
                if progress is not None:
                    progress(res)
    return results


def summarize(results: List[CheckResult]) -> Dict[str, float]:
    """Worst error per case."""
    worst: Dict[str, float] = {}
    for r in results:
        worst[r.case] = max(worst.get(r.case, 0.0), r.error)
    return worst


if __name__ == "__main__":  # pragma: no cover
    t0 = time.time()
    out = run_suite(range(3))
    for case, err in summarize(out).items():
        print(f"{case:40s} {err:.3e}")
    print(f"{time.time() - t0:.1f}s")
