"""Temporal regression network, additive bias tables and the masked variant.

The main model ("Nero") predicts three future frames per pixel as::

    TR(history at the pixel) + B_LxH[x, y, hour] + B_WxH[weekday, hour] + B_M[month]

"Pomponia" multiplies a value prediction with an occupancy mask that is
advected by a learned per-pixel displacement field.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, DimensionError, FormatError, WindowError
from .griddata import N_TARGETS, ClockIndex, TrainingExample

BIAS_KINDS = ("LxH", "WxH", "M")
VOLUME_CHANNEL = 0
VOLUME_THRESHOLD = 1 / 255


@dataclass(frozen=True)
class TRConfig:
    n_layers: int = 2
    hidden_channels: int = 16
    history: int = 4
    activation: str = "elu"
    kernel_size: int = 1
    channels: int = 3

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden_channels < 1 or self.history < 1 or self.channels < 1:
            raise ConfigurationError(f"invalid TR configuration {self}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.activation not in tc.ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {tc.ACTIVATIONS}")

    @property
    def in_channels(self):
        return self.kernel_size**2 * self.history * self.channels

    @property
    def out_channels(self):
        return N_TARGETS * self.channels

    def layer_shapes(self, out_channels=None):
        """(Cout, Cin) of every layer, first to last."""
        out = self.out_channels if out_channels is None else out_channels
        widths = [self.in_channels] + [self.hidden_channels] * (self.n_layers - 1) + [out]
        return [(widths[i + 1], widths[i]) for i in range(self.n_layers)]


def bias_table_shapes(grid, n_hour_bins, channels):
    H, W = grid
    k = N_TARGETS * channels
    return {
        "LxH": (H, W, n_hour_bins, k),
        "WxH": (7, n_hour_bins, k),
        "M": (12, k),
    }


@dataclass(frozen=True, eq=False)
class NeroParams:
    """TR weights plus the enabled bias tables, as named float64 arrays.

    Keys: ``tr.{i}.weight``, ``tr.{i}.bias`` and ``bias.{kind}``; insertion
    order is declaration order and is what checkpoints serialize.
    """

    config: TRConfig
    grid: tuple
    biases: tuple = BIAS_KINDS
    n_hour_bins: int = 12
    arrays: dict = field(default_factory=dict)

    def with_arrays(self, arrays):
        return replace(self, arrays=dict(arrays))

    def layers(self):
        return [(f"tr.{i}.weight", f"tr.{i}.bias") for i in range(self.config.n_layers)]

    @property
    def bias_tables(self):
        return {k: self.arrays[f"bias.{k}"] for k in self.biases}


@dataclass(frozen=True, eq=False)
class PomponiaParams:
    value: NeroParams
    displacement: dict = field(default_factory=dict)

    @property
    def config(self):
        return self.value.config

    @property
    def arrays(self):
        return {**self.value.arrays, **self.displacement}

    def with_arrays(self, arrays):
        disp = {k: arrays[k] for k in self.displacement}
        value = {k: arrays[k] for k in self.value.arrays}
        return PomponiaParams(self.value.with_arrays(value), disp)


def _init_layers(prefix, shapes, rng):
    out = {}
    for i, (cout, cin) in enumerate(shapes):
        out[f"{prefix}.{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / cin), size=(cout, cin))
        out[f"{prefix}.{i}.bias"] = np.zeros(cout)
    return out


def init_params(config: TRConfig, seed=0, grid=(1, 1), biases=BIAS_KINDS,
                n_hour_bins=12) -> NeroParams:
    """He-normal TR weights, zero layer biases, zero bias tables."""
    unknown = set(biases) - set(BIAS_KINDS)
    if unknown:
        raise ConfigurationError(f"unknown bias tables {sorted(unknown)}")
    biases = tuple(b for b in BIAS_KINDS if b in set(biases))
    rng = np.random.default_rng(seed)
    arrays = _init_layers("tr", config.layer_shapes(), rng)
    shapes = bias_table_shapes(grid, n_hour_bins, config.channels)
    for kind in biases:
        arrays[f"bias.{kind}"] = np.zeros(shapes[kind])
    return NeroParams(config, tuple(grid), biases, n_hour_bins, arrays)


def init_pomponia(config: TRConfig, seed=0, grid=(1, 1), biases=BIAS_KINDS,
                  n_hour_bins=12) -> PomponiaParams:
    value = init_params(config, seed, grid, biases, n_hour_bins)
    rng = np.random.default_rng([seed, 1])
    cin = config.history * config.channels + 2
    widths = [cin] + [config.hidden_channels] * (config.n_layers - 1) + [2]
    shapes = [(widths[i + 1], widths[i]) for i in range(config.n_layers)]
    disp = _init_layers("disp", shapes, rng)
    # start from the identity warp
    last = f"disp.{config.n_layers - 1}.weight"
    disp[last] = np.zeros_like(disp[last])
    return PomponiaParams(value, disp)


def leaf_tensors(arrays: dict) -> dict:
    return {k: tc.Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def stack_history(history: np.ndarray) -> np.ndarray:
    """[h, H, W, C] -> [H, W, h*C], frame-major channel order."""
    h, H, W, C = history.shape
    return history.transpose(1, 2, 0, 3).reshape(H, W, h * C)


def _mlp(x, tensors, prefix, n_layers, kind):
    for i in range(n_layers):
        x = tc.channel_linear(x, tensors[f"{prefix}.{i}.weight"], tensors[f"{prefix}.{i}.bias"])
        if i < n_layers - 1:
            x = tc.activation(x, kind)
    return x


def _to_frames(x, H, W, C):
    """[H, W, 3*C] -> [3, H, W, C]."""
    return tc.transpose(tc.reshape(x, (H, W, N_TARGETS, C)), (2, 0, 1, 3))


def _check_history(history, config, grid=None):
    if history.ndim != 4 or history.shape[0] != config.history or history.shape[3] != config.channels:
        raise DimensionError(
            f"history shape {history.shape} does not match h={config.history}, C={config.channels}"
        )
    if grid is not None and tuple(history.shape[1:3]) != tuple(grid):
        raise DimensionError(f"history grid {history.shape[1:3]} differs from model grid {grid}")


def tr_predict(history, params: NeroParams, tensors=None) -> tc.Tensor:
    """Run the temporal regression network; returns [3, H, W, C]."""
    cfg = params.config
    history = np.asarray(history, dtype=np.float64)
    _check_history(history, cfg)
    tensors = tensors if tensors is not None else {k: tc.Tensor(v) for k, v in params.arrays.items()}
    _, H, W, C = history.shape
    x = tc.neighborhood(tc.Tensor(stack_history(history)), cfg.kernel_size)
    return _to_frames(_mlp(x, tensors, "tr", cfg.n_layers, cfg.activation), H, W, C)


def bias_sum(params: NeroParams, clock: ClockIndex, tensors=None) -> tc.Tensor | None:
    """Sum of the enabled bias tables at ``clock``; None when no table is enabled."""
    if not params.biases:
        return None
    tensors = tensors if tensors is not None else {k: tc.Tensor(v) for k, v in params.arrays.items()}
    H, W = params.grid
    C = params.config.channels
    k = N_TARGETS * C
    ranges = {"hour": params.n_hour_bins, "weekday": 7, "month": 12}
    for name, n in ranges.items():
        value = getattr(clock, name)
        if not 0 <= value < n:
            raise WindowError(f"clock {name} index {value} outside [0, {n})")
    total = None
    for kind in params.biases:
        table = tensors[f"bias.{kind}"]
        if kind == "LxH":
            part = tc.take(table, (slice(None), slice(None), clock.hour))
        elif kind == "WxH":
            part = tc.broadcast_to(tc.take(table, (clock.weekday, clock.hour)), (H, W, k))
        else:
            part = tc.broadcast_to(tc.take(table, (clock.month,)), (H, W, k))
        total = part if total is None else tc.add(total, part)
    return _to_frames(total, H, W, C)


def nero_forward(example: TrainingExample, params: NeroParams, tensors=None) -> tc.Tensor:
    tensors = tensors if tensors is not None else {k: tc.Tensor(v) for k, v in params.arrays.items()}
    _check_history(example.history, params.config, params.grid if params.biases else None)
    y = tr_predict(example.history, params, tensors)
    b = bias_sum(params, example.clock, tensors)
    return y if b is None else tc.add(y, b)


def volume_mask(frames: np.ndarray) -> np.ndarray:
    """1 where the volume channel holds at least one raw byte unit."""
    return (frames[..., VOLUME_CHANNEL] >= VOLUME_THRESHOLD - 1e-12).astype(np.float64)


def coordinate_channels(H, W) -> np.ndarray:
    ys = np.linspace(0.0, 1.0, H) if H > 1 else np.zeros(1)
    xs = np.linspace(0.0, 1.0, W) if W > 1 else np.zeros(1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx, yy], axis=-1)


def pomponia_forward(example: TrainingExample, params: PomponiaParams, tensors=None):
    """Return (Y_final, M_warped, Y_value); Y_final = warped mask ⊙ Y_value."""
    tensors = tensors if tensors is not None else {k: tc.Tensor(v) for k, v in params.arrays.items()}
    cfg = params.config
    history = np.asarray(example.history, dtype=np.float64)
    _check_history(history, cfg)
    _, H, W, C = history.shape
    y_value = nero_forward(example, params.value, tensors)
    inputs = np.concatenate([stack_history(history), coordinate_channels(H, W)], axis=-1)
    disp = _mlp(tc.Tensor(inputs), tensors, "disp", cfg.n_layers, cfg.activation)
    mask = volume_mask(history[-1])
    warped = tc.bilinear_sample(tc.Tensor(mask), disp)
    spread = tc.broadcast_to(tc.reshape(warped, (1, H, W, 1)), (N_TARGETS, H, W, C))
    return tc.mul(spread, y_value), warped, y_value


# -- checkpoints ----------------------------------------------------------

CKPT_MAGIC = b"GCP1"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHI")


def _describe(params):
    kind = "pomponia" if isinstance(params, PomponiaParams) else "nero"
    nero = params.value if kind == "pomponia" else params
    cfg = nero.config
    return {
        "kind": kind,
        "tr": {f: getattr(cfg, f) for f in cfg.__dataclass_fields__},
        "grid": list(nero.grid),
        "biases": list(nero.biases),
        "n_hour_bins": nero.n_hour_bins,
    }


def _skeleton(meta):
    cfg = TRConfig(**meta["tr"])
    args = dict(grid=tuple(meta["grid"]), biases=tuple(meta["biases"]), n_hour_bins=meta["n_hour_bins"])
    if meta["kind"] == "pomponia":
        return init_pomponia(cfg, 0, **args)
    if meta["kind"] == "nero":
        return init_params(cfg, 0, **args)
    raise ValueError(f"unknown model kind {meta['kind']!r}")


def encode_params(params) -> bytes:
    config = json.dumps(_describe(params), sort_keys=True).encode()
    parts = [_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(config)), config]
    for arr in params.arrays.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_params(blob: bytes):
    if len(blob) < _CKPT_HEAD.size:
        raise FormatError("checkpoint header truncated", len(blob))
    magic, version, n = _CKPT_HEAD.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}", 0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = _CKPT_HEAD.size
    if len(blob) < pos + n:
        raise FormatError("config block truncated", len(blob))
    try:
        meta = json.loads(blob[pos:pos + n])
        skeleton = _skeleton(meta)
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"invalid config block: {e}", pos) from e
    pos += n
    arrays = {}
    for name, like in skeleton.arrays.items():
        nbytes = like.size * 8
        if len(blob) < pos + nbytes:
            raise FormatError(f"tensor {name} truncated", len(blob))
        arrays[name] = np.frombuffer(blob, "<f8", like.size, pos).reshape(like.shape).astype(np.float64)
        pos += nbytes
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes", pos)
    return skeleton.with_arrays(arrays)


def save_params(params, path):
    with open(path, "wb") as fh:
        fh.write(encode_params(params))


def load_params(path):
    with open(path, "rb") as fh:
        return decode_params(fh.read())
