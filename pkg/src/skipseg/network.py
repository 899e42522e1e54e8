"""Contracting/expanding residual FCN built from a declarative row table.

A network is an ordered list of rows. Each row is one block type repeated
``repetitions`` times; the first repetition performs the row's resampling
(inferred from the change of resolution w.r.t. the previous row), the rest
preserve shape. Rows are tagged by path:

* ``down``   contracting path; each row's output is kept for a long skip
* ``across`` bottom of the U, no long skip
* ``up``     expanding path; the j-th up row receives the j-th down row
             counted from the bottom, summed into its input
* ``head``   the final 1x1 classifier

Config file grammar (INI, parsed with :mod:`configparser`)::

    [network]
    input_resolution = 512x512
    input_channels = 1
    long_skips = true
    short_skips = true
    batch_norm = true
    dropout_rate = 0.0

    [row down1]
    block = conv3x3          ; conv3x3 | conv1x1 | simple | basic | bottleneck
    resolution = 512x512
    width = 32
    repetitions = 1
    path = down              ; optional, inferred from the row name prefix

Rows appear in network order. An optional ``[train]`` section may sit in
the same file; it is ignored here and read by
:func:`skipseg.training.load_train_config`.
"""
from __future__ import annotations

import configparser
import io
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import add, as_tensor, precision
from .blocks import Block, BlockOpts, Conv, Parameter, make_block
from .exceptions import ConfigError, DimensionError
from .ops import TRAIN

BLOCK_KINDS = ("conv3x3", "conv1x1", "simple", "basic", "bottleneck")
PATHS = ("down", "across", "up", "head")


def _infer_path(name: str) -> str:
    lowered = name.lower()
    for prefix in ("down", "across", "up"):
        if lowered.startswith(prefix):
            return prefix
    return "head"


@dataclass(frozen=True)
class ArchRow:
    name: str
    block_type: str
    out_resolution: Tuple[int, int]
    out_width: int
    repetitions: int = 1
    path: Optional[str] = None

    def __post_init__(self):
        if self.block_type not in BLOCK_KINDS:
            raise ConfigError(f"row {self.name}: unknown block type {self.block_type!r}")
        if self.repetitions < 1 or self.out_width < 1:
            raise ConfigError(f"row {self.name}: repetitions and width must be positive")
        object.__setattr__(self, "out_resolution", tuple(int(v) for v in self.out_resolution))
        if self.path is None:
            object.__setattr__(self, "path", _infer_path(self.name))
        elif self.path not in PATHS:
            raise ConfigError(f"row {self.name}: path must be one of {PATHS}")


@dataclass
class NetworkConfig:
    rows: List[ArchRow]
    long_skips: bool = True
    short_skips: bool = True
    use_batch_norm: bool = True
    dropout_rate: float = 0.0
    input_resolution: Tuple[int, int] = (512, 512)
    input_channels: int = 1

    def with_toggles(self, **changes) -> "NetworkConfig":
        return replace(self, **changes)


def resample_plan(cfg: NetworkConfig) -> List[Tuple[Tuple[int, int], str]]:
    """Per row: (input resolution, resample mode)."""
    plan = []
    prev = tuple(cfg.input_resolution)
    for row in cfg.rows:
        res = row.out_resolution
        if res == prev:
            mode = "none"
        elif res == (prev[0] // 2, prev[1] // 2) and prev[0] % 2 == 0 and prev[1] % 2 == 0:
            mode = "down"
        elif res == (prev[0] * 2, prev[1] * 2):
            mode = "up"
        else:
            raise ConfigError(
                f"row {row.name}: resolution {res} is not prev {prev}, half or double of it"
            )
        plan.append((prev, mode))
        prev = res
    return plan


def long_skip_pairs(cfg: NetworkConfig) -> Dict[str, str]:
    """Map each expanding row name to the contracting row feeding its long skip."""
    plan = resample_plan(cfg)
    downs = [r for r in cfg.rows if r.path == "down"]
    ups = [(r, plan[i][0]) for i, r in enumerate(cfg.rows) if r.path == "up"]
    pairs = {}
    for j, (up, in_res) in enumerate(ups):
        if j >= len(downs):
            break
        down = downs[len(downs) - 1 - j]
        if down.out_resolution != in_res:
            raise ConfigError(
                f"long skip resolution mismatch: row {down.name} outputs {down.out_resolution} "
                f"but row {up.name} takes input at {in_res}"
            )
        pairs[up.name] = down.name
    return pairs


def validate_config(cfg: NetworkConfig) -> None:
    if not cfg.rows:
        raise ConfigError("network has no rows")
    names = [r.name for r in cfg.rows]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate row names in {names}")
    last = cfg.rows[-1]
    if last.block_type != "conv1x1" or last.out_width != 1:
        raise ConfigError(f"last row {last.name} must be a conv1x1 classifier of width 1")
    if not 0.0 <= cfg.dropout_rate < 1.0:
        raise ConfigError(f"dropout_rate must lie in [0, 1), got {cfg.dropout_rate}")
    resample_plan(cfg)
    if cfg.long_skips:
        long_skip_pairs(cfg)


class Network:
    """A built residual FCN; call it to obtain per-pixel logits."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        validate_config(cfg)
        self.cfg = cfg
        self.seed = seed
        self.rows: List[Tuple[ArchRow, List[Block]]] = []
        self.long_projections: Dict[str, Optional[Conv]] = {}
        self.long_pairs = long_skip_pairs(cfg) if cfg.long_skips else {}

        widths = {}
        channels = cfg.input_channels
        depth = 0
        for i, (row, (in_res, mode)) in enumerate(zip(cfg.rows, resample_plan(cfg))):
            if row.name in self.long_pairs:
                src_width = widths[self.long_pairs[row.name]]
                proj = None
                if src_width != channels:
                    proj = Conv(f"{row.name}.long", src_width, channels, 1, seed=seed,
                                depth_index=depth, layer=f"{row.name}.long")
                self.long_projections[row.name] = proj
            blocks = []
            for rep in range(row.repetitions):
                opts = BlockOpts(
                    in_channels=channels,
                    out_channels=row.out_width,
                    resample=mode if rep == 0 else "none",
                    use_batch_norm=cfg.use_batch_norm,
                    dropout_rate=cfg.dropout_rate,
                    use_short_skip=cfg.short_skips,
                )
                blocks.append(
                    make_block(row.block_type, f"{row.name}.rep{rep}", opts, seed, depth,
                               preactivate=i > 0)
                )
                channels = row.out_width
                depth += 1
            widths[row.name] = row.out_width
            self.rows.append((row, blocks))
        self.n_layers = depth

    def __call__(self, x, mode: str = TRAIN, rng: Optional[np.random.Generator] = None,
                 dropout_rate: Optional[float] = None, dropout_mode: Optional[str] = None,
                 return_features: bool = False):
        return self.forward(x, mode, rng, dropout_rate, dropout_mode, return_features)

    def forward(self, x, mode: str = TRAIN, rng: Optional[np.random.Generator] = None,
                dropout_rate: Optional[float] = None, dropout_mode: Optional[str] = None,
                return_features: bool = False):
        """Logits of shape N x 1 x H x W.

        ``dropout_rate`` overrides the configured rate and ``dropout_mode``
        the mode seen by dropout layers only (MC-dropout sampling uses
        ``mode="eval", dropout_mode="train"``). With ``return_features`` the
        output of every row is returned as well.
        """
        x = as_tensor(x)
        expected = (self.cfg.input_channels, *self.cfg.input_resolution)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise DimensionError(
                f"network expects input N x {expected[0]} x {expected[1]} x {expected[2]}, got {x.shape}"
            )
        skips = {}
        features = {}
        h = x
        for row, blocks in self.rows:
            if row.name in self.long_pairs:
                src = skips[self.long_pairs[row.name]]
                proj = self.long_projections[row.name]
                h = add(h, proj(src) if proj is not None else src)
            for block in blocks:
                h = block(h, mode, rng, dropout_rate, dropout_mode)
            if row.path == "down":
                skips[row.name] = h
            features[row.name] = h
        if return_features:
            return h, features
        return h

    def parameters(self) -> List[Parameter]:
        params = []
        for row, blocks in self.rows:
            proj = self.long_projections.get(row.name)
            if proj is not None:
                params.extend(proj.parameters())
            for block in blocks:
                params.extend(block.parameters())
        return params

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for _, blocks in self.rows:
            for block in blocks:
                out.update(block.buffers())
        return out

    def blocks(self) -> List[Block]:
        return [b for _, blocks in self.rows for b in blocks]

    def layers(self) -> List[Tuple[str, int, int]]:
        """(layer name, depth index, scalar parameter count) in path order."""
        seen: Dict[str, List[int]] = {}
        for p in self.parameters():
            entry = seen.setdefault(p.layer, [p.depth_index, 0])
            entry[1] += p.size
        return [(name, d, n) for name, (d, n) in seen.items()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        state.update({name: buf.copy() for name, buf in self.buffers().items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.buffers()
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise ConfigError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise DimensionError(f"{name}: stored shape {state[name].shape} != {p.shape}")
            p.data = state[name].astype(p.dtype, copy=True)
        for name, buf in buffers.items():
            buf[...] = state[name]


def build_network(cfg: NetworkConfig, seed: int = 0) -> Network:
    return Network(cfg, seed)


def param_count(net: Network) -> int:
    """Total number of trainable scalars, batch-norm affine terms included."""
    return sum(p.size for p in net.parameters())


# -- canonical configurations --------------------------------------------------

TABLE1_ROWS = [
    ("down1", "conv3x3", 512, 32, 1),
    ("down2", "simple", 256, 32, 1),
    ("down3", "bottleneck", 128, 128, 3),
    ("down4", "bottleneck", 64, 256, 8),
    ("down5", "bottleneck", 32, 512, 10),
    ("across", "bottleneck", 32, 1024, 3),
    ("up1", "bottleneck", 64, 512, 10),
    ("up2", "bottleneck", 128, 256, 8),
    ("up3", "bottleneck", 256, 128, 3),
    ("up4", "simple", 512, 32, 1),
    ("up5", "conv3x3", 512, 32, 1),
    ("classifier", "conv1x1", 512, 1, 1),
]


def table1_config(**toggles) -> NetworkConfig:
    """The full-size 512x512 architecture with its 12 rows."""
    rows = [ArchRow(n, b, (r, r), w, k) for n, b, r, w, k in TABLE1_ROWS]
    return NetworkConfig(rows=rows, input_resolution=(512, 512), **toggles)


def make_config(
    input_size: int,
    widths: Sequence[int] = (8, 16, 32),
    repetitions: int = 1,
    block_type: str = "simple",
    input_channels: int = 1,
    **toggles,
) -> NetworkConfig:
    """A U-shaped config with ``len(widths)`` resolution levels.

    Rows: conv3x3 stem, one ``block_type`` row per lower level, an across
    row, mirrored up rows, a conv3x3 row and the 1x1 classifier.
    """
    levels = len(widths)
    if input_size % (2 ** (levels - 1)):
        raise ConfigError(f"input size {input_size} not divisible by 2**{levels - 1}")
    rows = [ArchRow("down1", "conv3x3", (input_size, input_size), widths[0], 1)]
    for i in range(1, levels):
        r = input_size >> i
        rows.append(ArchRow(f"down{i + 1}", block_type, (r, r), widths[i], repetitions))
    bottom = input_size >> (levels - 1)
    rows.append(ArchRow("across", block_type, (bottom, bottom), widths[-1], repetitions))
    for j, i in enumerate(range(levels - 1, 0, -1)):
        r = input_size >> (i - 1)
        rows.append(ArchRow(f"up{j + 1}", block_type, (r, r), widths[i - 1], repetitions))
    rows.append(ArchRow(f"up{levels}", "conv3x3", (input_size, input_size), widths[0], 1))
    rows.append(ArchRow("classifier", "conv1x1", (input_size, input_size), 1, 1))
    return NetworkConfig(rows=rows, input_resolution=(input_size, input_size),
                         input_channels=input_channels, **toggles)


# -- config files --------------------------------------------------------------

def _fmt_res(res) -> str:
    return f"{res[0]}x{res[1]}"


def _parse_res(text: str) -> Tuple[int, int]:
    parts = text.lower().replace(" ", "").split("x")
    if len(parts) == 1:
        parts = parts * 2
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad resolution {text!r}; expected HxW") from None
    return h, w


def config_to_text(cfg: NetworkConfig) -> str:
    parser = configparser.ConfigParser()
    parser["network"] = {
        "input_resolution": _fmt_res(cfg.input_resolution),
        "input_channels": str(cfg.input_channels),
        "long_skips": str(cfg.long_skips).lower(),
        "short_skips": str(cfg.short_skips).lower(),
        "batch_norm": str(cfg.use_batch_norm).lower(),
        "dropout_rate": repr(float(cfg.dropout_rate)),
    }
    for row in cfg.rows:
        parser[f"row {row.name}"] = {
            "block": row.block_type,
            "resolution": _fmt_res(row.out_resolution),
            "width": str(row.out_width),
            "repetitions": str(row.repetitions),
            "path": row.path,
        }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_from_text(text: str) -> NetworkConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable network config: {exc}") from None
    if "network" not in parser:
        raise ConfigError("network config needs a [network] section")
    net = parser["network"]
    rows = []
    for section in parser.sections():
        if not section.startswith("row "):
            if section not in ("network", "train"):  # [train] is read by training
                raise ConfigError(f"unknown section [{section}]")
            continue
        s = parser[section]
        try:
            rows.append(ArchRow(
                name=section[4:].strip(),
                block_type=s["block"],
                out_resolution=_parse_res(s["resolution"]),
                out_width=s.getint("width"),
                repetitions=s.getint("repetitions", 1),
                path=s.get("path"),
            ))
        except KeyError as exc:
            raise ConfigError(f"[{section}] is missing key {exc}") from None
    try:
        cfg = NetworkConfig(
            rows=rows,
            long_skips=net.getboolean("long_skips", True),
            short_skips=net.getboolean("short_skips", True),
            use_batch_norm=net.getboolean("batch_norm", True),
            dropout_rate=net.getfloat("dropout_rate", 0.0),
            input_resolution=_parse_res(net.get("input_resolution", "512x512")),
            input_channels=net.getint("input_channels", 1),
        )
    except ValueError as exc:
        raise ConfigError(f"bad [network] value: {exc}") from None
    validate_config(cfg)
    return cfg


def load_config(path: Union[str, Path]) -> NetworkConfig:
    return config_from_text(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: NetworkConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(config_to_text(cfg), encoding="utf-8")


def bundled_config(name: str) -> NetworkConfig:
    """Load one of the configs shipped with the package (``table1``, ``deep``, ``toy``)."""
    path = Path(__file__).with_name("configs") / f"{name}.ini"
    if not path.exists():
        raise ConfigError(f"no bundled config named {name!r}")
    return load_config(path)


# -- checkpoints ---------------------------------------------------------------
#
# Layout (little endian):
#   magic        8 bytes  b"SKSEGCKP"
#   version      u32
#   seed         i64
#   config       u32 length + UTF-8 INI text
#   n_entries    u32
#   per entry:   u16 name length, name, u8 kind (0 parameter, 1 buffer),
#                u8 dtype (0 float32, 1 float64), u8 ndim, ndim x u32 dims,
#                raw array bytes

CHECKPOINT_MAGIC = b"SKSEGCKP"
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def checkpoint_bytes(net: Network, state: Optional[Dict[str, np.ndarray]] = None) -> bytes:
    state = net.state_dict() if state is None else state
    param_names = set(net.named_parameters())
    config = config_to_text(net.cfg).encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<Iq", CHECKPOINT_VERSION, net.seed),
           struct.pack("<I", len(config)), config, struct.pack("<I", len(state))]
    for name, arr in state.items():
        code = 1 if arr.dtype == np.float64 else 0
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<BBB", 0 if name in param_names else 1, code, data.ndim))
        out.append(struct.pack(f"<{data.ndim}I", *data.shape))
        out.append(data.tobytes())
    return b"".join(out)


def save_checkpoint(net: Network, path: Union[str, Path], state: Optional[Dict[str, np.ndarray]] = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(net, state))


def load_checkpoint(path: Union[str, Path]) -> Network:
    """Rebuild a network from a checkpoint file written by :func:`save_checkpoint`."""
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic bytes)")
    pos = 8
    version, seed = struct.unpack_from("<Iq", blob, pos)
    pos += 12
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    cfg = config_from_text(blob[pos:pos + clen].decode("utf-8"))
    pos += clen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        _, code, ndim = struct.unpack_from("<BBB", blob, pos)
        pos += 3
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        state[name] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    dtypes = {arr.dtype for arr in state.values()}
    dtype = np.float64 if np.dtype(np.float64) in dtypes else np.float32
    with precision(dtype):
        net = Network(cfg, seed)
    net.load_state_dict(state)
    return net
