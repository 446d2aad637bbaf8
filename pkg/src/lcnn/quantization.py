"""Post-training per-tensor INT8 affine quantization of network parameters.

Codes are signed 8-bit, ``x ~= (q - zero_point) * scale``.  Weights are stored
quantized and dequantized before compute; there is no integer kernel path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn.spec import NetworkParams, NetworkSpec

QMIN, QMAX = -128, 127


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise ValueError(f"zero_point {self.zero_point} outside [{QMIN}, {QMAX}]")


def _float32_at_least(value: float) -> float:
    f = np.float32(value)
    if float(f) < value:
        f = np.nextafter(f, np.float32(np.inf))
    return float(f)


def choose_qparams(t: np.ndarray) -> QuantParams:
    lo, hi = float(np.min(t)), float(np.max(t))
    if lo == hi:
        # one distinct value: pick the scale so that it is reproduced exactly
        if lo == 0.0:
            return QuantParams(1.0, 0)
        scale = abs(float(np.float32(lo)))
        return QuantParams(scale, QMIN if lo > 0 else QMAX)
    # the representable range always contains 0 so the zero point needs no clamping
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    # rounded up so the range still spans at most 255 steps at float32 precision
    scale = _float32_at_least((hi - lo) / (QMAX - QMIN))
    zero_point = int(np.clip(np.round(QMIN - lo / scale), QMIN, QMAX))
    return QuantParams(scale, zero_point)


def quantize_with(t: np.ndarray, qp: QuantParams) -> np.ndarray:
    q = np.round(np.asarray(t, dtype=np.float64) / qp.scale) + qp.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def quantize_tensor(t: np.ndarray) -> tuple[np.ndarray, QuantParams]:
    """Asymmetric per-tensor quantization; ``np.round`` rounds half to even."""
    t = np.asarray(t)
    if t.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(t)):
        raise ValueError("cannot quantize a tensor with non-finite values")
    qp = choose_qparams(t)
    return quantize_with(t, qp), qp


def dequantize_tensor(q: np.ndarray, qp: QuantParams, dtype=np.float64) -> np.ndarray:
    return ((q.astype(np.float64) - qp.zero_point) * qp.scale).astype(dtype)


@dataclass
class QuantizedTensor:
    layer: int
    key: str
    codes: np.ndarray
    qparams: QuantParams


@dataclass
class QuantizedModel:
    spec: NetworkSpec
    tensors: list[QuantizedTensor]
    provenance: dict[int, np.ndarray]

    def payload_bytes(self) -> int:
        return sum(t.codes.size for t in self.tensors)

    def equals(self, other: "QuantizedModel") -> bool:
        if self.spec != other.spec or len(self.tensors) != len(other.tensors):
            return False
        for a, b in zip(self.tensors, other.tensors):
            if (a.layer, a.key, a.qparams) != (b.layer, b.key, b.qparams):
                return False
            if a.codes.dtype != b.codes.dtype or a.codes.tobytes() != b.codes.tobytes():
                return False
        return (set(self.provenance) == set(other.provenance)
                and all(np.array_equal(self.provenance[k], other.provenance[k]) for k in self.provenance))


def quantize_network(spec: NetworkSpec, params: NetworkParams) -> QuantizedModel:
    params.check(spec)
    tensors = []
    for layer, key, value in params.items():
        codes, qp = quantize_tensor(value)
        tensors.append(QuantizedTensor(layer, key, codes, qp))
    return QuantizedModel(spec, tensors, {k: v.copy() for k, v in params.provenance.items()})


def dequantize_network(qm: QuantizedModel, dtype=np.float32) -> NetworkParams:
    """Float parameters for inference.

    Moving-variance entries that land on the zero code are raised to half a
    quantization step so batch-norm stays well defined.
    """
    tensors: list[dict[str, np.ndarray]] = [{} for _ in qm.spec.layers]
    for t in qm.tensors:
        value = dequantize_tensor(t.codes, t.qparams)
        if t.key == "moving_variance":
            value = np.where(value > 0, value, 0.5 * t.qparams.scale)
        tensors[t.layer][t.key] = value.astype(dtype)
    return NetworkParams(tensors, {k: v.copy() for k, v in qm.provenance.items()})
