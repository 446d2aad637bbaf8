"""Whole-network forward and backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .spec import Kind, NetworkParams, NetworkSpec


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class ForwardTrace:
    """Per-layer outputs (``None`` where not captured) and the final class probabilities."""

    outputs: list[np.ndarray | None]
    probabilities: np.ndarray

    def block_output(self, spec: NetworkSpec, conv_name: str) -> np.ndarray:
        """Post-activation feature maps of a conv block (the BatchNorm following it)."""
        out = self.outputs[spec.conv_index(conv_name) + 1]
        if out is None:
            raise ValueError(f"{conv_name} output was not captured")
        return out


def _as_batch(spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape == spec.input_shape:
        x = x[None]
    elif x.ndim == 3 and spec.input_shape[-1] == 1 and x.shape[1:] == spec.input_shape[:2]:
        x = x[..., None]
    if x.shape[1:] != spec.input_shape:
        raise L.ShapeError(f"input shape {x.shape[1:]} does not match network input {spec.input_shape}")
    return x


def _conv_block_with_overrides(x, conv, bn, bn_spec, overrides: dict[int, np.ndarray]):
    """Conv + BN + activation where overridden channels are copied in, not computed.

    The GEMM keeps its full width with the overridden filters zeroed: BLAS
    blocking depends on the column count, and a narrower product would not be
    bitwise identical to the plain forward pass for the remaining filters.
    """
    f = conv["weights"].shape[0]
    for c in overrides:
        if not 0 <= c < f:
            raise IndexError(f"override channel {c} out of range for {f} filters")
    computed = np.array([c for c in range(f) if c not in overrides], dtype=np.int64)
    weights = np.zeros_like(conv["weights"])
    weights[computed] = conv["weights"][computed]
    out = np.empty(x.shape[:3] + (f,), dtype=x.dtype)
    if computed.size:
        pre = L.conv2d_forward(x, weights, conv["bias"])[..., computed]
        sub = {k: v[computed] for k, v in bn.items()}
        out[..., computed] = L.activate(L.batchnorm_forward(pre, sub, "infer"), bn_spec.activation)
    for c, maps in overrides.items():
        out[..., c] = maps
    return out


def forward(spec: NetworkSpec, params: NetworkParams, x: np.ndarray, capture: bool = False,
            overrides: dict[int, dict[int, np.ndarray]] | None = None,
            mode: str = "infer") -> ForwardTrace:
    """Forward pass; ``mode="train"`` normalises with batch statistics (params untouched).

    ``overrides`` maps a conv layer index to ``{channel: (B, H, W) maps}``; those
    channels' post-activation outputs are taken from the given arrays instead
    of being computed.  Inference mode only.
    """
    x = _as_batch(spec, x).astype(params.dtype, copy=False)
    overrides = overrides or {}
    if overrides and mode != "infer":
        raise ValueError("feature-map overrides are only supported in inference mode")
    outputs: list[np.ndarray | None] = []
    skip_next = False
    for i, (layer, p) in enumerate(zip(spec.layers, params.tensors)):
        if skip_next:
            skip_next = False
            continue
        if layer.kind is Kind.CONV and overrides.get(i):
            x = _conv_block_with_overrides(x, p, params.tensors[i + 1], spec.layers[i + 1], overrides[i])
            outputs += [None, x if capture else None]
            skip_next = True
            continue
        if layer.kind is Kind.CONV:
            x = L.conv2d_forward(x, p["weights"], p["bias"])
        elif layer.kind is Kind.BATCHNORM:
            x = L.activate(L.batchnorm_forward(x, p, mode), layer.activation)
        elif layer.kind is Kind.AVGPOOL:
            x = L.avgpool_forward(x, layer.pool_h, layer.pool_w)
        elif layer.kind is Kind.FLATTEN:
            x = x.reshape(x.shape[0], -1)
        elif layer.kind is Kind.DENSE:
            x = L.dense_forward(x, p["weights"], p["bias"], layer.activation)
        elif layer.kind is Kind.SOFTMAX:
            x = L.softmax(L.dense_forward(x, p["weights"], p["bias"]))
        outputs.append(x if capture else None)
    return ForwardTrace(outputs, x)


def _one_hot(labels: np.ndarray, classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape[1] != classes:
            raise ValueError(f"one-hot labels have {labels.shape[1]} columns, expected {classes}")
        return labels.astype(dtype)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
        raise ValueError(f"labels must lie in [0, {classes})")
    return np.eye(classes, dtype=dtype)[labels]


@dataclass
class Gradients:
    loss: float
    grads: list[dict[str, np.ndarray]]
    batch_stats: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def backward(spec: NetworkSpec, params: NetworkParams, x: np.ndarray, labels: np.ndarray) -> Gradients:
    """Mean cross-entropy over the batch and its gradient for every trainable tensor.

    Batch-norm layers run on batch statistics (training mode); the batch
    moments are returned so the caller can update the moving averages.
    Nothing in ``params`` is modified.
    """
    dtype = params.dtype
    x = _as_batch(spec, x).astype(dtype, copy=False)
    y = _one_hot(labels, spec.class_count, dtype)
    n = x.shape[0]

    inputs: list[np.ndarray] = []
    cols: dict[int, np.ndarray] = {}
    batch_stats: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    logits = None
    for i, (layer, p) in enumerate(zip(spec.layers, params.tensors)):
        inputs.append(x)
        if layer.kind is Kind.CONV:
            x, cols[i] = L.conv2d_forward_cols(x, p["weights"], p["bias"])
        elif layer.kind is Kind.BATCHNORM:
            batch_stats[i] = L.batch_moments(x)
            x = L.activate(L.batchnorm_forward(x, p, "train"), layer.activation)
        elif layer.kind is Kind.AVGPOOL:
            x = L.avgpool_forward(x, layer.pool_h, layer.pool_w)
        elif layer.kind is Kind.FLATTEN:
            x = x.reshape(n, -1)
        elif layer.kind is Kind.DENSE:
            x = L.dense_forward(x, p["weights"], p["bias"], layer.activation)
        elif layer.kind is Kind.SOFTMAX:
            logits = L.dense_forward(x, p["weights"], p["bias"])
            x = L.softmax(logits)
    outputs = inputs[1:] + [x]

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-(y * log_probs).sum() / n)
    if not np.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite loss {loss}; max |logit| = {np.nanmax(np.abs(logits)):.3g}, "
            f"non-finite logits: {int((~np.isfinite(logits)).sum())}")

    grads: list[dict[str, np.ndarray]] = [{} for _ in spec.layers]
    d = (x - y) / n
    for i in reversed(range(len(spec.layers))):
        layer, p, inp, out = spec.layers[i], params.tensors[i], inputs[i], outputs[i]
        if layer.kind is Kind.SOFTMAX:
            grads[i] = {"weights": inp.T @ d, "bias": d.sum(axis=0)}
            d = d @ p["weights"].T
        elif layer.kind is Kind.DENSE:
            d = L.activation_backward(d, out, layer.activation)
            grads[i] = {"weights": inp.T @ d, "bias": d.sum(axis=0)}
            d = d @ p["weights"].T
        elif layer.kind is Kind.FLATTEN:
            d = d.reshape(inp.shape)
        elif layer.kind is Kind.AVGPOOL:
            d = L.avgpool_backward(d, inp.shape, layer.pool_h, layer.pool_w)
        elif layer.kind is Kind.BATCHNORM:
            d = L.activation_backward(d, out, layer.activation)
            d, dgamma, dbeta = L.batchnorm_backward(d, inp, p["gamma"])
            grads[i] = {"gamma": dgamma, "beta": dbeta}
        elif layer.kind is Kind.CONV:
            dx, dw, db = L.conv2d_backward(d, inp, p["weights"], cols.pop(i))
            grads[i] = {"weights": dw, "bias": db}
            d = dx
    grads = [{k: v.astype(dtype, copy=False) for k, v in g.items()} for g in grads]
    return Gradients(loss, grads, batch_stats)


@dataclass
class Model:
    spec: NetworkSpec
    params: NetworkParams
    name: str = "model"

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        x = _as_batch(self.spec, x)
        rows = [forward(self.spec, self.params, x[s:s + batch_size]).probabilities
                for s in range(0, len(x), batch_size)]
        return np.concatenate(rows, axis=0)
