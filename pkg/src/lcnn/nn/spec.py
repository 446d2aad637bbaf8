"""Architecture descriptions and parameter containers.

A network is an ordered list of ``LayerSpec`` entries drawn from a small
vocabulary (conv, batch-norm, average pooling, flatten, dense, softmax
classifier).  Tensors are laid out NHWC; conv weights are
``(filters, kernel_h, kernel_w, in_channels)``.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np


class Kind(str, enum.Enum):
    CONV = "Conv2D"
    BATCHNORM = "BatchNorm"
    AVGPOOL = "AvgPool"
    FLATTEN = "Flatten"
    DENSE = "Dense"
    SOFTMAX = "SoftmaxClassifier"


class Activation(str, enum.Enum):
    TANH = "tanh"
    RELU = "relu"
    NONE = "none"

    @classmethod
    def from_letter(cls, letter: str) -> "Activation":
        try:
            return {"T": cls.TANH, "R": cls.RELU, "N": cls.NONE}[letter.upper()]
        except KeyError:
            raise ValueError(f"unknown activation letter {letter!r}") from None


@dataclass(frozen=True)
class LayerSpec:
    kind: Kind
    filters: int = 0
    kernel_h: int = 0
    kernel_w: int = 0
    pool_h: int = 0
    pool_w: int = 0
    units: int = 0
    activation: Activation = Activation.NONE


def conv2d(filters: int, kernel_h: int = 3, kernel_w: int | None = None) -> LayerSpec:
    return LayerSpec(Kind.CONV, filters=filters, kernel_h=kernel_h,
                     kernel_w=kernel_h if kernel_w is None else kernel_w)


def batchnorm(activation: Activation | str = Activation.NONE) -> LayerSpec:
    return LayerSpec(Kind.BATCHNORM, activation=Activation(activation))


def avgpool(pool_h: int, pool_w: int) -> LayerSpec:
    return LayerSpec(Kind.AVGPOOL, pool_h=pool_h, pool_w=pool_w)


def flatten() -> LayerSpec:
    return LayerSpec(Kind.FLATTEN)


def dense(units: int, activation: Activation | str = Activation.NONE) -> LayerSpec:
    return LayerSpec(Kind.DENSE, units=units, activation=Activation(activation))


def softmax_classifier(classes: int) -> LayerSpec:
    return LayerSpec(Kind.SOFTMAX, units=classes)


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (height, width, channels) > 0, got {self.input_shape}")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if not self.layers or self.layers[-1].kind is not Kind.SOFTMAX:
            raise ValueError("final layer must be a SoftmaxClassifier")
        if self.layers[-1].units != self.class_count:
            raise ValueError(
                f"classifier has {self.layers[-1].units} outputs, class_count is {self.class_count}")
        for i, layer in enumerate(self.layers):
            if layer.kind is Kind.CONV:
                if layer.filters < 1 or layer.kernel_h < 1 or layer.kernel_w < 1:
                    raise ValueError(f"layer {i}: conv needs filters and kernel dims >= 1")
                if layer.activation is not Activation.NONE:
                    raise ValueError(f"layer {i}: conv activation belongs on the following BatchNorm")
                if i + 1 >= len(self.layers) or self.layers[i + 1].kind is not Kind.BATCHNORM:
                    raise ValueError(f"layer {i}: Conv2D must be followed by BatchNorm")
            elif layer.kind is Kind.BATCHNORM:
                if i == 0 or self.layers[i - 1].kind is not Kind.CONV:
                    raise ValueError(f"layer {i}: BatchNorm must follow a Conv2D")
            elif layer.kind is Kind.AVGPOOL:
                if layer.pool_h < 1 or layer.pool_w < 1:
                    raise ValueError(f"layer {i}: pool dims must be >= 1")
            elif layer.kind in (Kind.DENSE, Kind.SOFTMAX):
                if layer.units < 1:
                    raise ValueError(f"layer {i}: units must be >= 1")
        # shape derivation raises on empty outputs or bad ordering
        self.output_shapes()

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shape, excluding the batch dimension."""
        shapes: list[tuple[int, ...]] = []
        shape: tuple[int, ...] = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind is Kind.CONV:
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: Conv2D needs a spatial input, got {shape}")
                shape = (shape[0], shape[1], layer.filters)
            elif layer.kind is Kind.AVGPOOL:
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: AvgPool needs a spatial input, got {shape}")
                h, w = shape[0] // layer.pool_h, shape[1] // layer.pool_w
                if h < 1 or w < 1:
                    raise ValueError(
                        f"layer {i}: pool {layer.pool_h}x{layer.pool_w} larger than input {shape[:2]}")
                shape = (h, w, shape[2])
            elif layer.kind is Kind.FLATTEN:
                shape = (int(np.prod(shape)),)
            elif layer.kind in (Kind.DENSE, Kind.SOFTMAX):
                if len(shape) != 1:
                    raise ValueError(f"layer {i}: {layer.kind.value} needs a flat input, got {shape}")
                shape = (layer.units,)
            shapes.append(shape)
        return shapes

    def input_shapes(self) -> list[tuple[int, ...]]:
        return [self.input_shape, *self.output_shapes()[:-1]]

    def conv_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind is Kind.CONV]

    def conv_names(self) -> list[str]:
        return [f"C{n + 1}" for n in range(len(self.conv_indices()))]

    def conv_index(self, name: str) -> int:
        """Layer index of a conv layer named ``C1``, ``C2``, ..."""
        match = re.fullmatch(r"[Cc](\d+)", name.strip())
        convs = self.conv_indices()
        if not match or not 1 <= int(match.group(1)) <= len(convs):
            raise ValueError(f"no conv layer named {name!r}; have {self.conv_names()}")
        return convs[int(match.group(1)) - 1]

    def layer_name(self, index: int) -> str:
        convs = self.conv_indices()
        if index in convs:
            return f"C{convs.index(index) + 1}"
        return f"{self.layers[index].kind.value}{index}"

    def architecture_string(self) -> str:
        """``C1-C2-...-Dense`` widths, e.g. ``16-16-32-100``."""
        widths = [self.layers[i].filters for i in self.conv_indices()]
        widths += [l.units for l in self.layers if l.kind is Kind.DENSE]
        return "-".join(str(w) for w in widths)

    def with_layer(self, index: int, layer: LayerSpec) -> "NetworkSpec":
        layers = list(self.layers)
        layers[index] = layer
        return replace(self, layers=tuple(layers))


def baseline_spec(c1: int = 16, c2: int = 16, c3: int = 32, dense_units: int = 100, *,
                kernel: int = 3, activations: str = "TRTT",
                input_shape: tuple[int, int, int] = (40, 51, 1),
                classes: int = 10) -> NetworkSpec:
    """The three-conv / two-pool / dense architecture, parametrised by layer widths.

    ``activations`` gives one letter (T or R) per C1, C2, C3 and the dense layer.
    """
    if len(activations) != 4:
        raise ValueError(f"need 4 activation letters for C1,C2,C3,D, got {activations!r}")
    a1, a2, a3, ad = (Activation.from_letter(a) for a in activations)
    layers = (
        conv2d(c1, kernel), batchnorm(a1),
        conv2d(c2, kernel), batchnorm(a2),
        avgpool(5, 5),
        conv2d(c3, kernel), batchnorm(a3),
        avgpool(4, 10),
        flatten(),
        dense(dense_units, ad),
        softmax_classifier(classes),
    )
    return NetworkSpec(input_shape, layers, classes)


def parse_architecture(text: str, **kwargs) -> NetworkSpec:
    """Build a Table-1 style network from ``"C1-C2-C3-Dense"``, e.g. ``"12-16-32-100"``."""
    parts = text.strip().split("-")
    if len(parts) != 4 or not all(p.isdigit() for p in parts):
        raise ValueError(f"architecture must look like '16-16-32-100', got {text!r}")
    return baseline_spec(*(int(p) for p in parts), **kwargs)


# Tensor keys per layer kind, in serialization order.
TENSOR_KEYS: dict[Kind, tuple[str, ...]] = {
    Kind.CONV: ("weights", "bias"),
    Kind.BATCHNORM: ("gamma", "beta", "moving_mean", "moving_variance"),
    Kind.AVGPOOL: (),
    Kind.FLATTEN: (),
    Kind.DENSE: ("weights", "bias"),
    Kind.SOFTMAX: ("weights", "bias"),
}
NON_TRAINABLE = frozenset({"moving_mean", "moving_variance"})


def tensor_shapes(spec: NetworkSpec) -> list[dict[str, tuple[int, ...]]]:
    shapes = []
    for layer, in_shape in zip(spec.layers, spec.input_shapes()):
        if layer.kind is Kind.CONV:
            shapes.append({"weights": (layer.filters, layer.kernel_h, layer.kernel_w, in_shape[-1]),
                           "bias": (layer.filters,)})
        elif layer.kind is Kind.BATCHNORM:
            c = in_shape[-1]
            shapes.append({k: (c,) for k in TENSOR_KEYS[Kind.BATCHNORM]})
        elif layer.kind in (Kind.DENSE, Kind.SOFTMAX):
            shapes.append({"weights": (in_shape[0], layer.units), "bias": (layer.units,)})
        else:
            shapes.append({})
    return shapes


@dataclass
class NetworkParams:
    """All learned tensors, one dict per layer, aligned with ``NetworkSpec.layers``.

    ``provenance`` maps conv layer index to the integer ids of its filters in
    the common unpruned parent.
    """

    tensors: list[dict[str, np.ndarray]]
    provenance: dict[int, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "NetworkParams":
        return NetworkParams([{k: v.copy() for k, v in d.items()} for d in self.tensors],
                             {k: v.copy() for k, v in self.provenance.items()})

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams([{k: v.astype(dtype) for k, v in d.items()} for d in self.tensors],
                             {k: v.copy() for k, v in self.provenance.items()})

    @property
    def dtype(self):
        for d in self.tensors:
            for v in d.values():
                return v.dtype
        return np.dtype(np.float32)

    def items(self) -> Iterator[tuple[int, str, np.ndarray]]:
        """All float tensors in canonical (serialization) order."""
        for i, d in enumerate(self.tensors):
            for key, value in d.items():
                yield i, key, value

    def trainable(self) -> Iterator[tuple[int, str, np.ndarray]]:
        for i, key, value in self.items():
            if key not in NON_TRAINABLE:
                yield i, key, value

    def count(self) -> int:
        return sum(v.size for _, _, v in self.items())

    def check(self, spec: NetworkSpec) -> None:
        """Raise ``ValueError`` unless shapes, variances and provenance agree with ``spec``."""
        expected = tensor_shapes(spec)
        if len(expected) != len(self.tensors):
            raise ValueError(f"params have {len(self.tensors)} layers, spec has {len(expected)}")
        for i, (want, have) in enumerate(zip(expected, self.tensors)):
            if set(want) != set(have):
                raise ValueError(f"layer {i}: tensor keys {sorted(have)} != {sorted(want)}")
            for key, shape in want.items():
                if have[key].shape != shape:
                    raise ValueError(f"layer {i} {key}: shape {have[key].shape} != {shape}")
            if "moving_variance" in have and not np.all(have["moving_variance"] > 0):
                raise ValueError(f"layer {i}: moving_variance must be strictly positive")
        for i in spec.conv_indices():
            ids = self.provenance.get(i)
            if ids is None or ids.shape != (spec.layers[i].filters,):
                raise ValueError(f"layer {i}: provenance ids missing or wrong length")
            if len(np.unique(ids)) != len(ids):
                raise ValueError(f"layer {i}: provenance ids not unique")

    def equals(self, other: "NetworkParams") -> bool:
        """Bitwise equality of every tensor and provenance table."""
        if len(self.tensors) != len(other.tensors) or set(self.provenance) != set(other.provenance):
            return False
        for a, b in zip(self.tensors, other.tensors):
            if set(a) != set(b):
                return False
            for k in a:
                if a[k].dtype != b[k].dtype or a[k].shape != b[k].shape:
                    return False
                if a[k].tobytes() != b[k].tobytes():
                    return False
        return all(np.array_equal(self.provenance[k], other.provenance[k]) for k in self.provenance)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> NetworkParams:
    """Glorot-uniform weights, zero biases, identity batch-norm."""
    rng = np.random.default_rng(seed)
    tensors: list[dict[str, np.ndarray]] = []
    provenance: dict[int, np.ndarray] = {}
    for i, (layer, shapes) in enumerate(zip(spec.layers, tensor_shapes(spec))):
        if layer.kind is Kind.CONV:
            f, kh, kw, cin = shapes["weights"]
            tensors.append({"weights": _glorot(rng, shapes["weights"], kh * kw * cin, kh * kw * f, dtype),
                            "bias": np.zeros(f, dtype)})
            provenance[i] = np.arange(f, dtype=np.int64)
        elif layer.kind is Kind.BATCHNORM:
            c = shapes["gamma"][0]
            tensors.append({"gamma": np.ones(c, dtype), "beta": np.zeros(c, dtype),
                            "moving_mean": np.zeros(c, dtype), "moving_variance": np.ones(c, dtype)})
        elif layer.kind in (Kind.DENSE, Kind.SOFTMAX):
            n_in, n_out = shapes["weights"]
            tensors.append({"weights": _glorot(rng, (n_in, n_out), n_in, n_out, dtype),
                            "bias": np.zeros(n_out, dtype)})
        else:
            tensors.append({})
    return NetworkParams(tensors, provenance)
