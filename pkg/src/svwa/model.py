"""PointNet-lite classifier with a hand-written backward pass.

Layout (no T-Net, no dropout)::

    points (B, M, 3)
      -> mlp_i: linear -> BN -> ReLU   (shared across points)
      -> max-pool over points
      -> head_i: linear -> BN -> ReLU
      -> classifier: linear -> logits (B, num_classes)

Every BN layer owns an adaptable ``gamma``/``beta`` pair; everything else is
frozen during test-time adaptation.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import DimensionError, FormatError, StructureError, VersionError
from .numerics import EVAL, TRAIN, GradSet, ParamSet, RunningStats

NORM_SUFFIXES = (".bn.gamma", ".bn.beta")


@dataclass(frozen=True)
class PointNetLiteConfig:
    num_classes: int
    mlp_channels: tuple[int, ...] = (64, 64, 128, 1024)
    head_dims: tuple[int, ...] = (512, 256)
    fps_points: int = 1024
    point_dims: int = 3

    def __post_init__(self):
        object.__setattr__(self, "mlp_channels", tuple(int(c) for c in self.mlp_channels))
        object.__setattr__(self, "head_dims", tuple(int(c) for c in self.head_dims))
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        dims = (*self.mlp_channels, *self.head_dims, self.fps_points, self.point_dims)
        if not self.mlp_channels or min(dims) < 1:
            raise ValueError("all dimensions must be >= 1 and mlp_channels non-empty")

    def stages(self) -> list[tuple[str, int, int]]:
        """``(name, fan_in, fan_out)`` of every linear+BN stage in order."""
        out = []
        fan_in = self.point_dims
        for i, c in enumerate(self.mlp_channels):
            out.append((f"mlp{i + 1}", fan_in, c))
            fan_in = c
        for i, c in enumerate(self.head_dims):
            out.append((f"head{i + 1}", fan_in, c))
            fan_in = c
        return out

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for name, fan_in, fan_out in self.stages():
            shapes[f"{name}.fc.weight"] = (fan_in, fan_out)
            shapes[f"{name}.fc.bias"] = (fan_out,)
            shapes[f"{name}.bn.gamma"] = (fan_out,)
            shapes[f"{name}.bn.beta"] = (fan_out,)
        last = self.head_dims[-1] if self.head_dims else self.mlp_channels[-1]
        shapes["classifier.weight"] = (last, self.num_classes)
        shapes["classifier.bias"] = (self.num_classes,)
        return shapes


def norm_param_names(config: PointNetLiteConfig) -> list[str]:
    return [n for n in config.param_shapes() if n.endswith(NORM_SUFFIXES)]


def count_parameters(config: PointNetLiteConfig) -> tuple[int, int]:
    """``(adaptable, total)`` parameter counts implied by ``config``."""
    shapes = config.param_shapes()
    total = sum(int(np.prod(s)) for s in shapes.values())
    adaptable = sum(int(np.prod(shapes[n])) for n in norm_param_names(config))
    return adaptable, total


# The classic full-size PointNet classifier (input and feature T-Nets, BN after
# every hidden layer), listed as (fan_in, fan_out, has_bn).  Used only for
# parameter accounting; it is never instantiated.
def _tnet(k: int) -> list[tuple[int, int, bool]]:
    return [(k, 64, True), (64, 128, True), (128, 1024, True),
            (1024, 512, True), (512, 256, True), (256, k * k, False)]


def reference_pointnet_layers(num_classes: int = 40) -> list[tuple[int, int, bool]]:
    backbone = [(3, 64, True), (64, 128, True), (128, 1024, True)]
    head = [(1024, 512, True), (512, 256, True), (256, num_classes, False)]
    return _tnet(3) + _tnet(64) + backbone + head


def reference_pointnet_counts(num_classes: int = 40) -> tuple[int, int]:
    """``(adaptable, total)`` for the full-size PointNet with T-Nets."""
    adaptable = total = 0
    for fan_in, fan_out, has_bn in reference_pointnet_layers(num_classes):
        total += fan_in * fan_out + fan_out
        if has_bn:
            adaptable += 2 * fan_out
    return adaptable, total + adaptable


@dataclass
class ModelState:
    config: PointNetLiteConfig
    params: ParamSet
    running: dict[str, RunningStats] = field(default_factory=dict)

    def copy(self) -> "ModelState":
        return ModelState(
            self.config,
            nx.copy_params(self.params),
            {k: r.copy() for k, r in self.running.items()},
        )

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def norm_names(self) -> list[str]:
        return [n for n in self.params if n.endswith(NORM_SUFFIXES)]

    def frozen_names(self) -> list[str]:
        return [n for n in self.params if not n.endswith(NORM_SUFFIXES)]

    def get_norm_params(self) -> ParamSet:
        return {n: self.params[n].copy() for n in self.norm_names()}

    def set_norm_params(self, values: Mapping[str, np.ndarray]) -> None:
        current = {n: self.params[n] for n in self.norm_names()}
        nx.check_aligned(current, dict(values), "norm params")
        for n, v in values.items():
            self.params[n] = np.array(v, dtype=self.dtype, copy=True)

    def adaptable_fraction(self) -> float:
        adaptable = sum(self.params[n].size for n in self.norm_names())
        return adaptable / sum(p.size for p in self.params.values())


def init_model(config: PointNetLiteConfig, seed: int = 0, dtype=np.float64) -> ModelState:
    """He-normal weights, zero biases, ``gamma = 1``, ``beta = 0``."""
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".weight"):
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])).astype(dtype)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    running = {name: RunningStats.fresh(c, dtype) for name, _, c in config.stages()}
    return ModelState(config, params, running)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


@dataclass
class Trace:
    """Cached activations of one forward pass, consumed by :func:`backward`."""

    batch: int
    n_points: int
    stage_caches: list
    pool_idx: np.ndarray
    classifier_cache: tuple


def forward_logits(
    state: ModelState,
    points: np.ndarray,
    norm_mode: str = TRAIN,
    norm_params: Mapping[str, np.ndarray] | None = None,
    update_running: bool = False,
):
    """Class logits for a (B, M, 3) batch. Returns ``(logits, trace)``.

    ``norm_params`` substitutes the model's BN affine parameters without
    copying the frozen backbone.  Running statistics are only updated when
    ``update_running`` is set (supervised training).
    """
    cfg = state.config
    points = np.asarray(points, dtype=state.dtype)
    if points.ndim != 3 or points.shape[2] != cfg.point_dims:
        raise DimensionError(f"expected (B, M, {cfg.point_dims}) points, got {points.shape}")
    if points.shape[1] != cfg.fps_points:
        raise DimensionError(
            f"model expects {cfg.fps_points} points per cloud, got {points.shape[1]}"
        )
    p = state.params
    norm = p if norm_params is None else {**p, **norm_params}
    b, m, _ = points.shape
    h = points.reshape(b * m, cfg.point_dims)
    caches = []
    n_mlp = len(cfg.mlp_channels)
    for i, (name, _, c) in enumerate(cfg.stages()):
        if i == n_mlp:
            pooled, pool_idx = nx.max_pool_points(h.reshape(b, m, -1).transpose(0, 2, 1))
            h = pooled
        h, lin_cache = nx.linear(h, p[f"{name}.fc.weight"], p[f"{name}.fc.bias"])
        h, bn_cache = nx.batchnorm(
            h,
            norm[f"{name}.bn.gamma"],
            norm[f"{name}.bn.beta"],
            mode=norm_mode,
            running=state.running[name],
            update_running=update_running,
        )
        h, mask = nx.relu(h)
        caches.append((lin_cache, bn_cache, mask))
    if n_mlp == len(cfg.stages()):
        h, pool_idx = nx.max_pool_points(h.reshape(b, m, -1).transpose(0, 2, 1))
    logits, cls_cache = nx.linear(h, p["classifier.weight"], p["classifier.bias"])
    return logits, Trace(b, m, caches, pool_idx, cls_cache)


def _linear_back(g, cache, prefix, grads, norm_only):
    if norm_only:
        # weight gradients are discarded, skip computing them
        return g @ cache[1].T
    g, grads[f"{prefix}.weight"], grads[f"{prefix}.bias"] = nx.linear_backward(g, cache)
    return g


def backward(state: ModelState, trace: Trace, grad_logits: np.ndarray, norm_only: bool = False) -> GradSet:
    """Gradients of every parameter (or only BN affine ones) given dL/dlogits."""
    cfg = state.config
    grads: GradSet = {}
    g = _linear_back(grad_logits, trace.classifier_cache, "classifier", grads, norm_only)
    stages = cfg.stages()
    n_mlp = len(cfg.mlp_channels)
    for i in range(len(stages) - 1, -1, -1):
        if i == n_mlp - 1:
            g = nx.max_pool_points_backward(g, trace.pool_idx, trace.n_points)
            g = g.transpose(0, 2, 1).reshape(trace.batch * trace.n_points, -1)
        name = stages[i][0]
        lin_cache, bn_cache, mask = trace.stage_caches[i]
        g = nx.relu_backward(g, mask)
        g, grads[f"{name}.bn.gamma"], grads[f"{name}.bn.beta"] = nx.batchnorm_backward(g, bn_cache)
        if i == 0 and norm_only:
            break
        g = _linear_back(g, lin_cache, f"{name}.fc", grads, norm_only)
    order = state.norm_names() if norm_only else list(state.params)
    return {n: grads[n] for n in order}


ENTROPY = "entropy"
CROSS_ENTROPY = "cross_entropy"


def loss_and_grads(
    state: ModelState,
    points: np.ndarray,
    loss: str = ENTROPY,
    labels: Sequence[int] | None = None,
    norm_mode: str = TRAIN,
    norm_params: Mapping[str, np.ndarray] | None = None,
    norm_only: bool = True,
    update_running: bool = False,
):
    """``(loss_value, grads, logits)`` for one batch."""
    logits, trace = forward_logits(state, points, norm_mode, norm_params, update_running)
    if loss == ENTROPY:
        value, _, cache = nx.softmax_entropy(logits)
        grad_logits = nx.softmax_entropy_backward(cache)
    elif loss == CROSS_ENTROPY:
        if labels is None:
            raise ValueError("cross-entropy needs labels")
        value, cache = nx.cross_entropy(logits, labels)
        grad_logits = nx.cross_entropy_backward(cache)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return value, backward(state, trace, grad_logits, norm_only), logits


def norm_grads(
    state: ModelState,
    points: np.ndarray,
    loss: str = ENTROPY,
    labels: Sequence[int] | None = None,
    norm_mode: str = TRAIN,
    norm_params: Mapping[str, np.ndarray] | None = None,
) -> tuple[float, GradSet]:
    """Loss value and its gradient w.r.t. the BN ``gamma``/``beta`` parameters only."""
    value, grads, _ = loss_and_grads(state, points, loss, labels, norm_mode, norm_params)
    return value, grads


# --------------------------------------------------------------------------
# checkpoint I/O
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SVWA"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_tensor(buf: io.BytesIO, name: str, value: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    dtype = value.dtype.newbyteorder("<")
    if dtype not in _DTYPE_CODES:
        raise TypeError(f"unsupported dtype {value.dtype} for {name!r}")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<BI", _DTYPE_CODES[dtype], value.ndim))
    buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
    buf.write(np.ascontiguousarray(value, dtype=dtype).tobytes())


class Reader:
    """Little-endian cursor over a byte string that reports failing offsets."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def tensor(self) -> tuple[str, np.ndarray]:
        (length,) = self.unpack("H", "name length")
        start = self.pos
        try:
            name = self.take(length, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8", start) from exc
        code_pos = self.pos
        code, rank = self.unpack("BI", f"header of {name!r}")
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code}", code_pos)
        shape = self.unpack(f"{rank}I", f"shape of {name!r}")
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(count * dtype.itemsize, f"values of {name!r}")
        return name, np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError("trailing bytes after payload", self.pos)


def checkpoint_bytes(state: ModelState) -> bytes:
    cfg = state.config
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<II", cfg.num_classes, cfg.fps_points))
    for dims in (cfg.mlp_channels, cfg.head_dims):
        buf.write(struct.pack(f"<I{len(dims)}I", len(dims), *dims))
    for name, value in state.params.items():
        write_tensor(buf, name, value)
    for name, _, _ in cfg.stages():
        write_tensor(buf, f"{name}.bn.running_mean", state.running[name].mean)
        write_tensor(buf, f"{name}.bn.running_var", state.running[name].var)
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes) -> ModelState:
    r = Reader(data)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", 0)
    (version,) = r.unpack("H", "version")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}", 4)
    num_classes, fps_points = r.unpack("II", "config")
    (n_mlp,) = r.unpack("I", "mlp count")
    mlp = r.unpack(f"{n_mlp}I", "mlp channels")
    (n_head,) = r.unpack("I", "head count")
    head = r.unpack(f"{n_head}I", "head dims")
    try:
        cfg = PointNetLiteConfig(num_classes, mlp, head, fps_points)
    except ValueError as exc:
        raise FormatError(f"invalid config block: {exc}", r.pos) from exc

    params: ParamSet = {}
    for expected, shape in cfg.param_shapes().items():
        pos = r.pos
        name, value = r.tensor()
        if name != expected or value.shape != shape:
            raise FormatError(f"expected {expected}{shape}, found {name}{value.shape}", pos)
        params[name] = value
    running = {}
    for stage, _, c in cfg.stages():
        stats = []
        for kind in ("running_mean", "running_var"):
            pos = r.pos
            name, value = r.tensor()
            if name != f"{stage}.bn.{kind}" or value.shape != (c,):
                raise FormatError(f"unexpected running statistic {name}", pos)
            stats.append(value)
        running[stage] = RunningStats(*stats)
    r.done()
    return ModelState(cfg, params, running)


def save_checkpoint(state: ModelState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def load_checkpoint(path) -> ModelState:
    return checkpoint_from_bytes(Path(path).read_bytes())


def assert_frozen_equal(a: ModelState, b: ModelState) -> None:
    """Raise if any non-BN-affine parameter differs bitwise between two states."""
    if a.frozen_names() != b.frozen_names():
        raise StructureError("models have different parameter layouts")
    for n in a.frozen_names():
        if a.params[n].tobytes() != b.params[n].tobytes():
            raise AssertionError(f"frozen parameter {n!r} changed")
