"""Layer primitives on NHWC numpy arrays, forward and backward."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .spec import Activation

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99


class ShapeError(ValueError):
    pass


def _pad_same(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    top, left = (kh - 1) // 2, (kw - 1) // 2
    return np.pad(x, ((0, 0), (top, kh - 1 - top), (left, kw - 1 - left), (0, 0)))


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # rows: (b, h, w); columns: (dy, dx, c) to match the weight layout
    b, h, w, c = x.shape
    windows = sliding_window_view(_pad_same(x, kh, kw), (kh, kw), axis=(1, 2))
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, kh * kw * c)


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 convolution with zero ``same`` padding.

    x: (B, H, W, C_in); weights: (F, kh, kw, C_in); returns (B, H, W, F).
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a (B, H, W, C) input, got shape {x.shape}")
    f, kh, kw, cin = weights.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d input has {x.shape[-1]} channels, filters expect {cin} "
                         f"(input {x.shape}, weights {weights.shape})")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({f},)")
    return conv2d_forward_cols(x, weights, bias)[0]


def conv2d_forward_cols(x: np.ndarray, weights: np.ndarray, bias: np.ndarray):
    """``conv2d_forward`` that also returns the im2col matrix for reuse in backward."""
    f, kh, kw, _ = weights.shape
    b, h, w, _ = x.shape
    cols = _im2col(x, kh, kw)
    out = cols @ weights.reshape(f, -1).T
    out += bias
    return out.reshape(b, h, w, f), cols


def conv2d_backward(dout: np.ndarray, x: np.ndarray, weights: np.ndarray,
                    cols: np.ndarray | None = None):
    """Gradients (dx, dweights, dbias) of a same-padded stride-1 convolution.

    ``dout`` may be wider than the weights (float64 from batch-norm); the bias
    reduction uses it as given, the matmuls run in the weight dtype.
    """
    f, kh, kw, cin = weights.shape
    b, h, w, _ = x.shape
    dbias = dout.reshape(-1, f).sum(axis=0).astype(weights.dtype)
    g = dout.reshape(-1, f).astype(weights.dtype, copy=False)
    if cols is None:
        cols = _im2col(x, kh, kw)
    dweights = (g.T @ cols).reshape(weights.shape)
    dcols = (g @ weights.reshape(f, -1)).reshape(b, h, w, kh, kw, cin)
    dpad = np.zeros((b, h + kh - 1, w + kw - 1, cin), dtype=weights.dtype)
    for dy in range(kh):
        for dx in range(kw):
            dpad[:, dy:dy + h, dx:dx + w, :] += dcols[:, :, :, dy, dx, :]
    top, left = (kh - 1) // 2, (kw - 1) // 2
    return dpad[:, top:top + h, left:left + w, :], dweights, dbias


def batch_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over all but the last axis."""
    flat = x.reshape(-1, x.shape[-1])
    mean = flat.mean(axis=0)
    centred = flat - mean
    return mean, np.einsum("ij,ij->j", centred, centred) / flat.shape[0]


def batchnorm_forward(x: np.ndarray, params: dict[str, np.ndarray], mode: str = "infer",
                      eps: float = BN_EPSILON) -> np.ndarray:
    """Per-channel normalisation over the last axis.

    ``infer`` uses the moving statistics, ``train`` the statistics of ``x``
    itself.  Moving statistics are never modified here; see
    ``update_moving_stats``.
    """
    gamma, beta = params["gamma"], params["beta"]
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm input has {x.shape[-1]} channels, params have {gamma.shape[0]}")
    if mode == "infer":
        var = params["moving_variance"]
        if not np.all(var > 0):
            raise ValueError("batchnorm moving_variance must be strictly positive")
        mean = params["moving_mean"]
    elif mode == "train":
        mean, var = batch_moments(x)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    return (x - mean) * (gamma * inv) + beta


def batchnorm_backward(dout: np.ndarray, x: np.ndarray, gamma: np.ndarray,
                       eps: float = BN_EPSILON):
    """Gradients (dx, dgamma, dbeta) for train-mode (batch statistics) normalisation.

    Computed in float64 and dx is returned as float64: its terms cancel to
    zero in sum, which float32 rounding leaves visibly non-zero.
    """
    dtype, shape = x.dtype, x.shape
    x = x.reshape(-1, shape[-1]).astype(np.float64)
    dout = dout.reshape(-1, shape[-1]).astype(np.float64)
    n = x.shape[0]
    mean, var = batch_moments(x)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    dbeta = dout.sum(axis=0)
    dgamma = np.einsum("ij,ij->j", dout, xhat)
    dx = (gamma * inv / n) * (n * dout - dbeta - xhat * dgamma)
    return dx.reshape(shape), dgamma.astype(dtype), dbeta.astype(dtype)


def update_moving_stats(params: dict[str, np.ndarray], batch_mean: np.ndarray,
                        batch_var: np.ndarray, momentum: float = BN_MOMENTUM) -> None:
    params["moving_mean"] *= momentum
    params["moving_mean"] += (1 - momentum) * batch_mean
    params["moving_variance"] *= momentum
    params["moving_variance"] += (1 - momentum) * batch_var


def avgpool_forward(x: np.ndarray, pool_h: int, pool_w: int) -> np.ndarray:
    """Non-overlapping mean pooling; trailing rows/columns that do not fill a window are dropped."""
    b, h, w, c = x.shape
    ho, wo = h // pool_h, w // pool_w
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool {pool_h}x{pool_w} larger than input {h}x{w}")
    crop = x[:, :ho * pool_h, :wo * pool_w, :]
    return crop.reshape(b, ho, pool_h, wo, pool_w, c).mean(axis=(2, 4))


def avgpool_backward(dout: np.ndarray, input_shape: tuple[int, ...], pool_h: int, pool_w: int):
    b, ho, wo, c = dout.shape
    dx = np.zeros(input_shape, dtype=dout.dtype)
    spread = np.repeat(np.repeat(dout, pool_h, axis=1), pool_w, axis=2) / (pool_h * pool_w)
    dx[:, :ho * pool_h, :wo * pool_w, :] = spread
    return dx


def activate(x: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.TANH:
        return np.tanh(x)
    if activation is Activation.RELU:
        return np.maximum(x, 0)
    return x


def activation_backward(dout: np.ndarray, out: np.ndarray, activation: Activation) -> np.ndarray:
    """Backprop through an activation given its *output*."""
    if activation is Activation.TANH:
        return dout * (1 - out * out)
    if activation is Activation.RELU:
        return dout * (out > 0)
    return dout


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                  activation: Activation = Activation.NONE) -> np.ndarray:
    """``act(x @ W + b)`` for x of shape (n_in,) or (B, n_in); W is (n_in, n_out)."""
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense input length {x.shape[-1]} != weight rows {weights.shape[0]}")
    return activate(x @ weights + bias, activation)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
