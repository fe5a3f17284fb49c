"""Differentiable NCHW operators used by NPNet.

Every operator comes as a forward function and a ``*_backward`` function that
takes the upstream gradient followed by the same inputs as the forward call.
Nothing is cached between the two; backward recomputes what it needs, so all
operators except ``batchnorm`` (which updates its running statistics in
train mode) are pure functions of their arguments.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 with four axes
(batch, channel, height, width).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(x, name: str = "input") -> np.ndarray:
    """Return ``x`` as a contiguous float32 NCHW array, validating the rank."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim != 4:
        raise ShapeError(f"{name}: expected 4-D NCHW tensor, got shape {arr.shape}")
    if any(d <= 0 for d in arr.shape):
        raise ShapeError(f"{name}: all dimensions must be positive, got {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


@dataclass
class ConvSpec:
    weight: np.ndarray  # (out_channels, in_channels, k, k)
    bias: Optional[np.ndarray] = None  # (out_channels,)
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def output_shape(self, input_shape) -> tuple[int, int, int, int]:
        n, c, h, w = input_shape
        if c != self.in_channels:
            raise ShapeError(
                f"channel dimension: input has {c} channels, convolution expects {self.in_channels}"
            )
        ho = conv_output_size(h, self.kernel, self.stride, self.padding, self.dilation)
        wo = conv_output_size(w, self.kernel, self.stride, self.padding, self.dilation)
        if ho < 1:
            raise ShapeError(f"height dimension: input height {h} too small for kernel/dilation/padding")
        if wo < 1:
            raise ShapeError(f"width dimension: input width {w} too small for kernel/dilation/padding")
        return n, self.out_channels, ho, wo


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    taps = []
    for i in range(k):
        for j in range(k):
            y0, x0 = i * dilation, j * dilation
            taps.append(xp[:, :, y0 : y0 + stride * (ho - 1) + 1 : stride, x0 : x0 + stride * (wo - 1) + 1 : stride])
    # (n, c, k*k, ho, wo) -> (n, c*k*k, ho*wo); channel-major to match weight.reshape(o, -1)
    return np.stack(taps, axis=2).reshape(n, c * k * k, ho * wo)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    n, o, ho, wo = spec.output_shape(x.shape)
    k = spec.kernel
    if k == 1 and spec.stride == 1 and spec.padding == 0:
        out = np.matmul(spec.weight.reshape(o, -1), x.reshape(n, x.shape[1], -1))
    else:
        cols = _im2col(_pad(x, spec.padding), k, spec.stride, spec.dilation, ho, wo)
        out = np.matmul(spec.weight.reshape(o, -1), cols)
    out = out.reshape(n, o, ho, wo)
    if spec.bias is not None:
        out += spec.bias.reshape(1, o, 1, 1)
    return out


def conv2d_backward(dout: np.ndarray, x: np.ndarray, spec: ConvSpec):
    """Return ``(dx, dweight, dbias)``; ``dbias`` is None for bias-free specs."""
    n, c, h, w = x.shape
    _, o, ho, wo = spec.output_shape(x.shape)
    k, s, d, p = spec.kernel, spec.stride, spec.dilation, spec.padding
    g = dout.reshape(n, o, ho * wo)
    w2 = spec.weight.reshape(o, -1)

    if k == 1 and s == 1 and p == 0:
        cols = x.reshape(n, c, h * w)
    else:
        cols = _im2col(_pad(x, p), k, s, d, ho, wo)
    dweight = np.einsum("nop,nqp->oq", g, cols).reshape(spec.weight.shape).astype(DTYPE, copy=False)
    dbias = g.sum(axis=(0, 2)) if spec.bias is not None else None

    dcols = np.matmul(w2.T, g)  # (n, c*k*k, ho*wo)
    if k == 1 and s == 1 and p == 0:
        dx = dcols.reshape(n, c, h, w)
    else:
        dcols = dcols.reshape(n, c, k, k, ho, wo)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                y0, x0 = i * d, j * d
                dxp[:, :, y0 : y0 + s * (ho - 1) + 1 : s, x0 : x0 + s * (wo - 1) + 1 : s] += dcols[:, :, i, j]
        dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
    return np.ascontiguousarray(dx), dweight, dbias


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9
    mode: str = "train"

    @classmethod
    def fresh(cls, channels: int, **kw) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, DTYPE),
            beta=np.zeros(channels, DTYPE),
            running_mean=np.zeros(channels, DTYPE),
            running_var=np.ones(channels, DTYPE),
            **kw,
        )


def _bn_check(x: np.ndarray, state: BatchNormState) -> None:
    c = x.shape[1]
    for field in ("gamma", "beta", "running_mean", "running_var"):
        if getattr(state, field).shape != (c,):
            raise ShapeError(
                f"channel dimension: batchnorm {field} has shape {getattr(state, field).shape}, input has {c} channels"
            )
    if state.mode not in ("train", "eval"):
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {state.mode!r}")


def _bn_stats(x: np.ndarray):
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var = x.var(axis=(0, 2, 3), dtype=np.float64)
    return mean.astype(DTYPE), var.astype(DTYPE)


def batchnorm(x: np.ndarray, state: BatchNormState, update_stats: bool = True) -> np.ndarray:
    """Normalize per channel. In train mode the running statistics of ``state``
    are updated in place unless ``update_stats`` is False."""
    _bn_check(x, state)
    if state.mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ShapeError("batchnorm in train mode needs at least 2 values per channel")
        mean, var = _bn_stats(x)
        if update_stats:
            m = state.momentum
            unbiased = var * (count / (count - 1))
            state.running_mean[...] = m * state.running_mean + (1 - m) * mean
            state.running_var[...] = m * state.running_var + (1 - m) * unbiased
            assert not (state.running_var < 0).any()
    else:
        mean, var = state.running_mean, state.running_var
    inv = (1.0 / np.sqrt(var + state.eps)).astype(DTYPE)
    scale = (state.gamma * inv).reshape(1, -1, 1, 1)
    shift = (state.beta - mean * state.gamma * inv).reshape(1, -1, 1, 1)
    return x * scale + shift


def batchnorm_backward(dout: np.ndarray, x: np.ndarray, state: BatchNormState):
    """Return ``(dx, dgamma, dbeta)`` for the mode recorded in ``state``."""
    _bn_check(x, state)
    if state.mode == "train":
        mean, var = _bn_stats(x)
    else:
        mean, var = state.running_mean, state.running_var
    inv = (1.0 / np.sqrt(var + state.eps)).astype(DTYPE).reshape(1, -1, 1, 1)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    g = state.gamma.reshape(1, -1, 1, 1)
    if state.mode == "eval":
        return dout * g * inv, dgamma, dbeta
    count = x.shape[0] * x.shape[2] * x.shape[3]
    dxhat = dout * g
    dx = inv / count * (
        count * dxhat
        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return dx.astype(DTYPE, copy=False), dgamma, dbeta


# ---------------------------------------------------------------------------
# elementwise and reshaping operators
# ---------------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0, dtype=DTYPE)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow in exp for large |x|
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(DTYPE, copy=False)


def sigmoid_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return dout * s * (1 - s)


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(dout: np.ndarray, x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return relu_backward(dout, x)
    if kind == "sigmoid":
        return sigmoid_backward(dout, x)
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(DTYPE)


def global_avg_pool_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    h, w = x.shape[2:]
    return np.broadcast_to(dout / DTYPE(h * w), x.shape).astype(DTYPE)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return concat_many([a, b])


def concat_many(parts) -> np.ndarray:
    ref = parts[0].shape
    for i, p in enumerate(parts[1:], 1):
        for axis, label in ((0, "batch"), (2, "height"), (3, "width")):
            if p.shape[axis] != ref[axis]:
                raise ShapeError(
                    f"{label} dimension: concat operand {i} has {p.shape[axis]}, expected {ref[axis]}"
                )
    return np.concatenate(parts, axis=1)


def split_channels(dout: np.ndarray, sizes) -> list[np.ndarray]:
    """Backward of ``concat_many``: slice the gradient back into its pieces."""
    idx = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(dout, idx, axis=1)]


def channel_scale(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    n, c = x.shape[:2]
    if weights.shape != (n, c, 1, 1):
        raise ShapeError(f"channel dimension: scale weights {weights.shape} do not match input ({n}, {c}, 1, 1)")
    return x * weights


def channel_scale_backward(dout: np.ndarray, x: np.ndarray, weights: np.ndarray):
    """Return ``(dx, dweights)``."""
    return dout * weights, (dout * x).sum(axis=(2, 3), keepdims=True)


# ---------------------------------------------------------------------------
# bilinear resize (half-pixel centers, edge clamped)
# ---------------------------------------------------------------------------


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) interpolation matrix along one axis."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(DTYPE)


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    ry = bilinear_matrix(h, out_h)
    rx = bilinear_matrix(w, out_w)
    return np.ascontiguousarray(ry @ x @ rx.T)


def bilinear_resize_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    h, w = x.shape[2:]
    out_h, out_w = dout.shape[2:]
    if (h, w) == (out_h, out_w):
        return dout.copy()
    ry = bilinear_matrix(h, out_h)
    rx = bilinear_matrix(w, out_w)
    return np.ascontiguousarray(ry.T @ dout @ rx)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _check_targets(logits: np.ndarray, target: np.ndarray) -> None:
    n, k, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape} (expected {(n, h, w)})")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"class index out of range [0, {k}): found {target.min()}..{target.max()}")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, target: np.ndarray) -> float:
    """Mean per-pixel negative log-likelihood of ``target`` under softmax(logits)."""
    _check_targets(logits, target)
    logp = log_softmax(logits.astype(np.float64))
    picked = np.take_along_axis(logp, target[:, None].astype(np.int64), axis=1)
    return float(-picked.mean())


def softmax_cross_entropy_backward(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    _check_targets(logits, target)
    n, _, h, w = logits.shape
    grad = np.exp(log_softmax(logits.astype(np.float64)))
    np.put_along_axis(
        grad,
        target[:, None].astype(np.int64),
        np.take_along_axis(grad, target[:, None].astype(np.int64), axis=1) - 1.0,
        axis=1,
    )
    return (grad / (n * h * w)).astype(DTYPE)
