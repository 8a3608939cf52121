"""Dense numpy kernels with explicit forward/backward passes.

Only the layers PointNet-lite needs are provided: ``linear``, ``batchnorm``,
``relu``, ``max_pool_points`` and the two classification losses.  Every
forward returns ``(output, cache)``; the matching ``*_backward`` consumes the
cache.  Parameters live in plain ordered dicts (``ParamSet``) mapping a dotted
name to an ndarray, and :func:`adamw_step` updates them in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np

from .errors import (
    DegenerateBatchError,
    DimensionError,
    LabelError,
    NumericError,
    StructureError,
)

ParamSet = Dict[str, np.ndarray]
GradSet = Dict[str, np.ndarray]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

TRAIN = "train"
EVAL = "eval"


def check_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"{what} contains NaN or Inf")


# --------------------------------------------------------------------------
# linear
# --------------------------------------------------------------------------


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Affine map ``x @ weight + bias`` for ``x`` of shape (B, D_in)."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise DimensionError(
            f"linear expects 2-D input/weight and 1-D bias, got "
            f"{x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise DimensionError(
            f"linear shape mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    if x.shape[0] < 1:
        raise DimensionError("linear needs at least one row")
    check_finite(x)
    out = x @ weight
    out += bias
    return out, (x, weight)


def linear_backward(grad_out: np.ndarray, cache):
    x, weight = cache
    grad_input = grad_out @ weight.T
    grad_weight = x.T @ grad_out
    grad_bias = grad_out.sum(axis=0)
    return grad_input, grad_weight, grad_bias


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------


@dataclass
class RunningStats:
    """Per-channel running mean and (biased) variance of a BN layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy())


def _to_rows(x: np.ndarray) -> np.ndarray:
    # (B, C, N) -> (B*N, C)
    b, c, n = x.shape
    return x.transpose(0, 2, 1).reshape(b * n, c)


def _from_rows(rows: np.ndarray, shape) -> np.ndarray:
    b, c, n = shape
    return rows.reshape(b, n, c).transpose(0, 2, 1)


def batchnorm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mode: str = TRAIN,
    running: RunningStats | None = None,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
    update_running: bool = True,
):
    """Batch normalization over (B, C) or (B, C, N) inputs.

    In ``"train"`` mode the current batch's per-channel mean and biased
    variance are used, and ``running`` (if given and ``update_running``) is
    moved towards them with ``momentum``.  In ``"eval"`` mode the running
    statistics are used and must be supplied.
    """
    if x.ndim == 3:
        out, cache = batchnorm(
            _to_rows(x), gamma, beta, mode, running, momentum, eps, update_running
        )
        return _from_rows(out, x.shape), cache + (x.shape,)
    if x.ndim != 2:
        raise DimensionError(f"batchnorm expects (B, C) or (B, C, N), got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(
            f"batchnorm: {channels} channels but gamma {gamma.shape}, beta {beta.shape}"
        )
    check_finite(x)

    if mode == TRAIN:
        count = x.shape[0]
        if count < 2:
            raise DegenerateBatchError(
                f"batch statistics need at least 2 samples per channel, got {count}"
            )
        mean = x.mean(axis=0)
        centered = x - mean
        var = np.einsum("ij,ij->j", centered, centered) / count
        if running is not None and update_running:
            running.mean *= 1.0 - momentum
            running.mean += momentum * mean
            running.var *= 1.0 - momentum
            running.var += momentum * var
    elif mode == EVAL:
        if running is None:
            raise ValueError("eval mode needs running statistics")
        mean, var = running.mean, running.var
        centered = x - mean
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    denom = var + eps
    if not (denom > 0).all():
        raise NumericError("batchnorm: variance + eps is not positive")
    inv_std = 1.0 / np.sqrt(denom)
    x_hat = centered * inv_std
    out = x_hat * gamma
    out += beta
    return out, (mode, x_hat, inv_std, gamma)


def batchnorm_backward(grad_out: np.ndarray, cache):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    if len(cache) == 5:
        shape = cache[4]
        gi, gg, gb = batchnorm_backward(_to_rows(grad_out), cache[:4])
        return _from_rows(gi, shape), gg, gb
    mode, x_hat, inv_std, gamma = cache
    grad_beta = grad_out.sum(axis=0)
    grad_gamma = np.einsum("ij,ij->j", grad_out, x_hat)
    if mode == EVAL:
        return grad_out * (gamma * inv_std), grad_gamma, grad_beta
    count = grad_out.shape[0]
    # full backward through the batch mean and variance
    grad_input = grad_out - (grad_beta / count)
    grad_input -= x_hat * (grad_gamma / count)
    grad_input *= gamma * inv_std
    return grad_input, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# pointwise and pooling
# --------------------------------------------------------------------------


def relu(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0.0).astype(x.dtype, copy=False), mask


def relu_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return grad_out * mask


def max_pool_points(x: np.ndarray):
    """Max over the point axis of a (B, C, N) array.

    Returns ``(pooled, argmax)``; ties resolve to the smallest point index.
    """
    if x.ndim != 3 or x.shape[2] < 1:
        raise DimensionError(f"max_pool_points expects (B, C, N>=1), got {x.shape}")
    idx = np.argmax(x, axis=2)
    out = np.take_along_axis(x, idx[..., None], axis=2)[..., 0]
    return out, idx


def max_pool_points_backward(grad_out: np.ndarray, idx: np.ndarray, n_points: int) -> np.ndarray:
    b, c = grad_out.shape
    grad_input = np.zeros((b, c, n_points), dtype=grad_out.dtype)
    np.put_along_axis(grad_input, idx[..., None], grad_out[..., None], axis=2)
    return grad_input


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_entropy(logits: np.ndarray):
    """Mean Shannon entropy (natural log) of the row-wise softmax.

    Returns ``(mean_entropy, probs, cache)``.
    """
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"softmax_entropy expects (B, C>=2), got {logits.shape}")
    check_finite(logits, "logits")
    logp = log_softmax(logits)
    probs = np.exp(logp)
    row_entropy = -(probs * logp).sum(axis=1)
    return float(row_entropy.mean()), probs, (probs, logp, row_entropy)


def softmax_entropy_backward(cache) -> np.ndarray:
    probs, logp, row_entropy = cache
    return -probs * (logp + row_entropy[:, None]) / probs.shape[0]


def cross_entropy(logits: np.ndarray, labels):
    """Mean negative log-likelihood. Returns ``(mean_loss, cache)``."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"cross_entropy expects (B, C>=2), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"{logits.shape[0]} rows but {labels.shape} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise LabelError(f"labels must lie in [0, {logits.shape[1]})")
    check_finite(logits, "logits")
    logp = log_softmax(logits)
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()
    return float(loss), (np.exp(logp), labels)


def cross_entropy_backward(cache) -> np.ndarray:
    probs, labels = cache
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    grad /= len(labels)
    return grad


# --------------------------------------------------------------------------
# parameter sets and AdamW
# --------------------------------------------------------------------------


def check_aligned(a: ParamSet, b: ParamSet, what: str = "parameter sets") -> None:
    if list(a) != list(b):
        raise StructureError(f"{what} differ in names or order")
    for name in a:
        if a[name].shape != b[name].shape:
            raise StructureError(
                f"{what}: {name!r} has shapes {a[name].shape} vs {b[name].shape}"
            )


def copy_params(params: ParamSet) -> ParamSet:
    return {name: value.copy() for name, value in params.items()}


@dataclass
class AdamWState:
    """Moments and hyperparameters for :func:`adamw_step`.

    Defaults follow the test-time adaptation setting: ``lr=1e-3``,
    ``beta1=0.9``, no weight decay.
    """

    m: ParamSet = field(default_factory=dict)
    v: ParamSet = field(default_factory=dict)
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    @classmethod
    def for_params(cls, params: ParamSet, **hyper) -> "AdamWState":
        zeros = {name: np.zeros_like(value) for name, value in params.items()}
        return cls(m=zeros, v=copy_params(zeros), **hyper)

    def copy(self) -> "AdamWState":
        return AdamWState(
            m=copy_params(self.m),
            v=copy_params(self.v),
            step=self.step,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.weight_decay,
        )


def adamw_step(params: ParamSet, grads: GradSet, state: AdamWState):
    """One AdamW update with bias correction, applied in place.

    Weight decay is decoupled: ``theta -= lr * wd * theta`` happens before the
    adaptive step.  Returns ``(params, state)`` for convenience.
    """
    check_aligned(params, grads, "params/grads")
    check_aligned(params, state.m, "params/first moments")
    check_aligned(params, state.v, "params/second moments")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, theta in params.items():
        g = grads[name]
        check_finite(g, f"gradient {name!r}")
        if state.weight_decay:
            theta *= 1.0 - state.lr * state.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / bias2) + state.eps
        theta -= state.lr * (m / bias1) / denom
    return params, state


# --------------------------------------------------------------------------
# finite-difference checker
# --------------------------------------------------------------------------


def grad_check(
    f: Callable[[ParamSet], tuple[float, GradSet]],
    params: ParamSet,
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a ParamSet to ``(value, grads)``; only names present in
    ``grads`` are checked.  The relative error of a coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    work = copy_params(params)
    _, analytic = f(work)
    worst = 0.0
    for name, grad in analytic.items():
        theta = work[name]
        flat = theta.reshape(-1)
        g = np.asarray(grad, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(work)[0]
            flat[i] = orig - h
            f_minus = f(work)[0]
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(g[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst

