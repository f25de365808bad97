"""
Dense tensor arithmetic on float64 numpy arrays: activations (including
cumax), masked max pooling, dropout, batch normalization, cross-entropy,
the Adam optimizer and a finite-difference gradient checker.

Every differentiable forward has a paired `*_backward` that maps an
upstream gradient to input gradients.
"""
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

DTYPE = np.float64
PROB_FLOOR = 1e-12


class SeedStreams:
    """
    Named, reproducible random sub-streams derived from one run seed.

    `stream("dropout", 2, 5)` always yields the same generator for the same
    seed and names, independent of which other streams were drawn before.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, *names) -> np.random.Generator:
        key = tuple(zlib.crc32(str(name).encode("utf-8")) for name in names)
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=key))


@dataclass
class Parameter:
    """
    A trainable tensor paired with its gradient accumulator.
    """
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


def _check_finite(name: str, out: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} produced non-finite values")
    return out


def _check_axis(x: np.ndarray, axis: int) -> None:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for tensor of rank {x.ndim}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    `a @ b` where `a` may carry leading batch axes and `b` is 2-D.
    """
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _check_finite("matmul", a @ b)


def matmul_backward(dout: np.ndarray, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradients for `a` and `b`. Leading batch axes of `a` are summed out of
    the gradient for `b`.
    """
    da = dout @ b.T
    db = a.reshape(-1, a.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
    return da, db


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"{name} shape mismatch: {a.shape} vs {b.shape}") from exc


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_broadcast("add", a, b)
    return _check_finite("add", a + b)


def add_backward(dout: np.ndarray, a_shape, b_shape) -> Tuple[np.ndarray, np.ndarray]:
    return _unbroadcast(dout, tuple(a_shape)), _unbroadcast(dout, tuple(b_shape))


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_broadcast("mul", a, b)
    return _check_finite("mul", a * b)


def mul_backward(dout: np.ndarray, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return _unbroadcast(dout * b, a.shape), _unbroadcast(dout * a, b.shape)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dout: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dout * y * (1.0 - y)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(dout: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dout * (1.0 - y * y)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """
    Max-subtracted softmax along `axis`.
    """
    _check_axis(x, axis)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return _check_finite("softmax", ex / np.sum(ex, axis=axis, keepdims=True))


def softmax_backward(dout: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dout - np.sum(dout * y, axis=axis, keepdims=True))


def cumax(x: np.ndarray, axis: int = -1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Cumulative softmax: monotone nondecreasing along `axis`, ending at 1.

    Returns (output, softmax) so the backward pass can reuse the softmax.
    """
    s = softmax(x, axis=axis)
    return np.minimum(np.cumsum(s, axis=axis), 1.0), s


def cumax_backward(dout: np.ndarray, s: np.ndarray, axis: int = -1) -> np.ndarray:
    """
    Gradient of cumax with respect to its logits, given the softmax `s`
    cached by the forward pass.
    """
    # d/ds_k of cumsum collects every output at or after k
    ds = np.flip(np.cumsum(np.flip(dout, axis=axis), axis=axis), axis=axis)
    return softmax_backward(ds, s, axis=axis)


def global_max_pool(h: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-feature maximum over the valid timesteps of a (batch, time, hidden)
    tensor. Returns (pooled, argmax) where argmax picks the lowest time
    index on ties.
    """
    if h.ndim != 3 or mask.shape != h.shape[:2]:
        raise ValueError(f"global_max_pool shape mismatch: {h.shape} with mask {mask.shape}")
    valid = mask.astype(bool)
    if not np.all(valid.any(axis=1)):
        raise ValueError("global_max_pool: example with no valid timestep")
    masked = np.where(valid[:, :, None], h, -np.inf)
    argmax = np.argmax(masked, axis=1)
    pooled = np.take_along_axis(h, argmax[:, None, :], axis=1)[:, 0, :]
    return pooled, argmax


def global_max_pool_backward(dout: np.ndarray, argmax: np.ndarray, time_steps: int) -> np.ndarray:
    batch, hidden = dout.shape
    dh = np.zeros((batch, time_steps, hidden), dtype=DTYPE)
    np.put_along_axis(dh, argmax[:, None, :], dout[:, None, :], axis=1)
    return dh


def dropout(
    x: np.ndarray,
    rate: float,
    training: bool,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Inverted dropout. Returns (output, scale) where scale is the per-element
    multiplier (0 or 1/(1-rate)) applied in training mode, all ones otherwise.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, np.ones_like(x)
    keep = rng.random(x.shape) >= rate
    scale = keep.astype(DTYPE) / (1.0 - rate)
    return x * scale, scale


def dropout_backward(dout: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return dout * scale


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    training: bool


def batch_norm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tuple[np.ndarray, BatchNormCache]:
    """
    Batch normalization over the batch axis of a (batch, features) tensor.

    In training mode the batch statistics are used and the running
    statistics are updated in place with exponential momentum; in
    evaluation mode the running statistics are used.
    """
    if x.ndim != 2 or x.shape[1] != gamma.shape[0]:
        raise ValueError(f"batch_norm shape mismatch: {x.shape} with {gamma.shape[0]} features")
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm needs a batch of at least 2 in training mode")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    out = gamma * x_hat + beta
    return _check_finite("batch_norm", out), BatchNormCache(x_hat, inv_std, gamma, training)


def batch_norm_backward(
    dout: np.ndarray, cache: BatchNormCache
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Gradients for the input, gamma and beta.

    In training mode the batch mean and variance depend on every row, so
    the input gradient couples rows; in evaluation mode the running
    statistics are constants and the gradient is a per-feature scale.
    """
    dgamma = np.sum(dout * cache.x_hat, axis=0)
    dbeta = np.sum(dout, axis=0)
    dx_hat = dout * cache.gamma
    if not cache.training:
        return dx_hat * cache.inv_std, dgamma, dbeta
    n = dout.shape[0]
    dx = (cache.inv_std / n) * (
        n * dx_hat - dx_hat.sum(axis=0) - cache.x_hat * np.sum(dx_hat * cache.x_hat, axis=0)
    )
    return dx, dgamma, dbeta


def cross_entropy(pred: np.ndarray, true_idx: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Summed negative log-likelihood of the true classes.

    Returns (loss, gradient with respect to `pred`). Probabilities are
    floored at 1e-12 inside the log.
    """
    true_idx = np.asarray(true_idx)
    n, k = pred.shape
    if true_idx.shape != (n,) or np.any(true_idx < 0) or np.any(true_idx >= k):
        raise ValueError(f"invalid class indices for {k} classes: {true_idx}")
    if not np.allclose(pred.sum(axis=1), 1.0, atol=1e-6, rtol=0.0):
        raise ValueError("cross_entropy expects rows of probabilities summing to 1")
    rows = np.arange(n)
    picked = pred[rows, true_idx]
    floored = np.maximum(picked, PROB_FLOOR)
    loss = float(-np.sum(np.log(floored)))
    dpred = np.zeros_like(pred)
    dpred[rows, true_idx] = np.where(picked > PROB_FLOOR, -1.0 / floored, 0.0)
    return loss, dpred


@dataclass
class AdamState:
    """
    First/second moment estimates per parameter name and the step counter.
    """
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Parameter], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for p in params:
            state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        return state


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float) -> None:
    """
    One bias-corrected Adam update; gradients are zeroed afterwards.
    """
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p in params:
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad * p.grad
        if lr != 0.0:
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()


def finite_difference_check(
    forward: Callable[[], float],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """
    Compare analytic gradients against central differences.

    `forward` computes a scalar loss and accumulates analytic gradients
    into `params`. Returns the maximum relative error
    |a - n| / max(|a|, |n|, floor) over every scalar of every parameter.
    """
    for p in params:
        p.zero_grad()
    forward()
    analytic: List[np.ndarray] = [p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = forward()
            flat[i] = original - eps
            minus = forward()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = grad.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
