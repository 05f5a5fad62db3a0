"""Network building blocks and their hand-derived backward passes.

A layer is described by a LayerSpec (kind plus hyperparameters), holds its
weights in a LayerParams, and communicates forward-to-backward through a
LayerCache. Activations flow as float32 (N, C, H, W) maps through the
convolutional stages and (N, features) matrices after flattening; float64
is supported end to end for gradient checking.

Convolutions are 3x3, stride 1, zero padding 1, lowered to a matrix
product over im2col columns. The columns are recomputed during backward
from the cached input instead of being cached themselves, trading a cheap
rearrangement for a large activation-memory saving at full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor
from .errors import ShapeError


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the architecture: what it is, not its weights."""

    kind: str  # conv3x3 | relu | maxpool2x2 | flatten | dense | dropout | softmax
    out_channels: int = 0  # conv3x3 only
    out_features: int = 0  # dense only
    rate: float = 0.0  # dropout only


@dataclass
class LayerParams:
    """Learnable tensors for one layer; both None for parameter-free kinds."""

    w: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None

    def count(self) -> int:
        n = 0
        if self.w is not None:
            n += self.w.size
        if self.b is not None:
            n += self.b.size
        return n


@dataclass
class LayerCache:
    """What forward must remember for backward."""

    x_shape: tuple = ()
    x: Optional[np.ndarray] = None  # conv/dense/relu input
    argmax: Optional[np.ndarray] = None  # maxpool winner index 0..3 per window
    mask: Optional[np.ndarray] = None  # dropout keep mask, already scaled


def out_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
    """Shape (without batch dim) a layer emits for a given input shape."""
    if spec.kind == "conv3x3":
        if len(in_shape) != 3:
            raise ShapeError(f"conv3x3 expects (C, H, W) input, got {in_shape}")
        return (spec.out_channels, in_shape[1], in_shape[2])
    if spec.kind == "maxpool2x2":
        c, h, w = in_shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool2x2 needs height and width >= 2, got {in_shape}")
        return (c, h // 2, w // 2)
    if spec.kind == "flatten":
        return (int(np.prod(in_shape)),)
    if spec.kind == "dense":
        if len(in_shape) != 1:
            raise ShapeError(f"dense expects flat input, got {in_shape}")
        return (spec.out_features,)
    if spec.kind in ("relu", "dropout", "softmax"):
        return in_shape
    raise ShapeError(f"unknown layer kind {spec.kind!r}")


def init_params(
    spec: LayerSpec,
    in_shape: tuple,
    rng: np.random.Generator,
    final_dense: bool = False,
    dtype=np.float32,
) -> LayerParams:
    """Draw initial weights for one layer.

    Conv and hidden dense layers feed ReLUs, so they use zero-mean normal
    weights with variance 2/fan_in. The final dense layer feeds the
    softmax and uses uniform weights on +-sqrt(6/(fan_in+fan_out)).
    Biases start at zero.
    """
    if spec.kind == "conv3x3":
        fan_in = in_shape[0] * 9
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(spec.out_channels, in_shape[0], 3, 3))
        return LayerParams(w.astype(dtype), np.zeros(spec.out_channels, dtype=dtype))
    if spec.kind == "dense":
        fan_in = in_shape[0]
        fan_out = spec.out_features
        if final_dense:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        return LayerParams(w.astype(dtype), np.zeros(fan_out, dtype=dtype))
    return LayerParams()


# -- forward -----------------------------------------------------------------


def conv3x3_forward(x: np.ndarray, params: LayerParams):
    n, c, h, w = x.shape
    oc = params.w.shape[0]
    w2 = params.w.reshape(oc, c * 9)
    out = np.empty((n, oc, h, w), dtype=x.dtype)
    for i in range(n):
        cols = tensor.im2col(x[i])
        y = tensor.gemm(w2, cols)
        y += params.b[:, None]
        out[i] = y.reshape(oc, h, w)
    return out, LayerCache(x_shape=x.shape, x=x)


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), LayerCache(x_shape=x.shape, x=x)


def maxpool2x2_forward(x: np.ndarray):
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    # odd trailing row/column is dropped (floor semantics)
    windows = (
        x[:, :, : oh * 2, : ow * 2]
        .reshape(n, c, oh, 2, ow, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh, ow, 4)
    )
    # argmax takes the first maximum, i.e. row-major order within the window
    idx = np.argmax(windows, axis=-1).astype(np.uint8)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, LayerCache(x_shape=x.shape, argmax=idx)


def flatten_forward(x: np.ndarray):
    n = x.shape[0]
    return np.ascontiguousarray(x).reshape(n, -1), LayerCache(x_shape=x.shape)


def dense_forward(x: np.ndarray, params: LayerParams):
    y = tensor.gemm(x, params.w)
    y += params.b[None, :]
    return y, LayerCache(x_shape=x.shape, x=x)


def dropout_forward(x: np.ndarray, rate: float, train: bool,
                    rng: Optional[np.random.Generator]):
    if not train or rate <= 0.0:
        return x, LayerCache(x_shape=x.shape)
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return x * mask, LayerCache(x_shape=x.shape, mask=mask)


def forward_layer(
    spec: LayerSpec,
    params: LayerParams,
    x: np.ndarray,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
):
    """Run one layer; returns (output, cache). Softmax is a marker layer
    applied by the loss / predictor, so it passes activations through."""
    if spec.kind == "conv3x3":
        return conv3x3_forward(x, params)
    if spec.kind == "relu":
        return relu_forward(x)
    if spec.kind == "maxpool2x2":
        return maxpool2x2_forward(x)
    if spec.kind == "flatten":
        return flatten_forward(x)
    if spec.kind == "dense":
        return dense_forward(x, params)
    if spec.kind == "dropout":
        return dropout_forward(x, spec.rate, train, rng)
    if spec.kind == "softmax":
        return x, LayerCache(x_shape=x.shape)
    raise ShapeError(f"unknown layer kind {spec.kind!r}")


# -- backward ----------------------------------------------------------------


def conv3x3_backward(params: LayerParams, cache: LayerCache, grad_out: np.ndarray):
    x = cache.x
    n, c, h, w = x.shape
    oc = params.w.shape[0]
    w2 = params.w.reshape(oc, c * 9)
    grad_w2 = np.zeros_like(w2)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = np.empty_like(x)
    for i in range(n):
        cols = tensor.im2col(x[i])  # recomputed, see module docstring
        go2 = np.ascontiguousarray(grad_out[i].reshape(oc, h * w))
        grad_w2 += tensor.gemm(go2, cols, transpose_b=True)
        grad_cols = tensor.gemm(w2, go2, transpose_a=True)
        grad_x[i] = tensor.col2im(grad_cols, c, h, w)
    return grad_x, LayerParams(grad_w2.reshape(params.w.shape), grad_b)


def relu_backward(cache: LayerCache, grad_out: np.ndarray):
    return grad_out * (cache.x > 0), None


def maxpool2x2_backward(cache: LayerCache, grad_out: np.ndarray):
    n, c, h, w = cache.x_shape
    oh, ow = h // 2, w // 2
    grad_windows = np.zeros((n, c, oh, ow, 4), dtype=grad_out.dtype)
    np.put_along_axis(
        grad_windows, cache.argmax[..., None].astype(np.intp),
        grad_out[..., None], axis=-1)
    grad_x = np.zeros((n, c, h, w), dtype=grad_out.dtype)
    grad_x[:, :, : oh * 2, : ow * 2] = (
        grad_windows.reshape(n, c, oh, ow, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh * 2, ow * 2)
    )
    return grad_x, None


def flatten_backward(cache: LayerCache, grad_out: np.ndarray):
    return grad_out.reshape(cache.x_shape), None


def dense_backward(params: LayerParams, cache: LayerCache, grad_out: np.ndarray):
    grad_out = np.ascontiguousarray(grad_out)
    grad_w = tensor.gemm(cache.x, grad_out, transpose_a=True)
    grad_b = grad_out.sum(axis=0)
    grad_x = tensor.gemm(grad_out, params.w, transpose_b=True)
    return grad_x, LayerParams(grad_w, grad_b)


def dropout_backward(cache: LayerCache, grad_out: np.ndarray):
    if cache.mask is None:
        return grad_out, None
    return grad_out * cache.mask, None


def backward_layer(
    spec: LayerSpec,
    params: LayerParams,
    cache: LayerCache,
    grad_out: np.ndarray,
):
    """Run one layer's backward pass; returns (grad_input, grad_params)."""
    if spec.kind == "conv3x3":
        return conv3x3_backward(params, cache, grad_out)
    if spec.kind == "relu":
        return relu_backward(cache, grad_out)
    if spec.kind == "maxpool2x2":
        return maxpool2x2_backward(cache, grad_out)
    if spec.kind == "flatten":
        return flatten_backward(cache, grad_out)
    if spec.kind == "dense":
        return dense_backward(params, cache, grad_out)
    if spec.kind == "dropout":
        return dropout_backward(cache, grad_out)
    if spec.kind == "softmax":
        return grad_out, None
    raise ShapeError(f"unknown layer kind {spec.kind!r}")


# -- loss --------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted by the row max for stability."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns (loss, grad_logits, probs). The gradient is the fused
    softmax + cross-entropy form (probs - one_hot) / batch_size.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, classes), got {logits.shape}")
    n = logits.shape[0]
    probs = softmax(logits)
    picked = probs[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, np.finfo(logits.dtype).tiny)).mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype), probs


# -- optimizers ---------------------------------------------------------------


@dataclass
class OptimizerConfig:
    """Update rule settings; adam is the default training rule."""

    kind: str = "adam"  # adam | sgd_momentum
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9


@dataclass
class OptimizerState:
    step: int = 0
    slots: dict = field(default_factory=dict)  # tensor key -> moment arrays


def optimizer_step(
    config: OptimizerConfig,
    state: OptimizerState,
    params: list,
    grads: list,
) -> None:
    """Apply one in-place update to every learnable tensor.

    `params` and `grads` are aligned lists of LayerParams; parameter-free
    entries hold None tensors and are skipped.
    """
    state.step += 1
    t = state.step
    for li, (p, g) in enumerate(zip(params, grads)):
        if p is None or p.w is None:
            continue
        for name in ("w", "b"):
            theta = getattr(p, name)
            grad = getattr(g, name)
            key = (li, name)
            if config.kind == "adam":
                if key not in state.slots:
                    state.slots[key] = (np.zeros_like(theta), np.zeros_like(theta))
                m, v = state.slots[key]
                m *= config.beta1
                m += (1.0 - config.beta1) * grad
                v *= config.beta2
                v += (1.0 - config.beta2) * np.square(grad)
                mhat = m / (1.0 - config.beta1 ** t)
                vhat = v / (1.0 - config.beta2 ** t)
                theta -= (config.lr * mhat / (np.sqrt(vhat) + config.eps)).astype(
                    theta.dtype)
            elif config.kind == "sgd_momentum":
                if key not in state.slots:
                    state.slots[key] = (np.zeros_like(theta),)
                (vel,) = state.slots[key]
                vel *= config.momentum
                vel -= config.lr * grad
                theta += vel.astype(theta.dtype)
            else:
                raise ValueError(f"unknown optimizer kind {config.kind!r}")
