"""``.lcnn`` model container and CSV dataset manifests.

Container layout (all integers little-endian)::

    header      4s magic "LCNN" | u8 version | u8 precision (0 float32, 1 int8) | u16 reserved
    spec        u16 height, width, channels, class_count, layer_count
                per layer: u8 kind | u8 activation | u16 a | u16 b | u16 c
    provenance  per conv layer, one u32 per filter
    payload     per tensor in canonical order:
                  float32: raw f32 values
                  int8:    f32 scale | i32 zero_point | raw i8 codes
    trailer     u32 CRC-32 of everything above

The payload length follows from the architecture table alone.
"""

from __future__ import annotations

import csv
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn.spec import (
    Activation,
    Kind,
    LayerSpec,
    NetworkParams,
    NetworkSpec,
    TENSOR_KEYS,
    tensor_shapes,
)
from .quantization import QuantizedModel, QuantizedTensor, QuantParams, dequantize_network, quantize_network

MAGIC = b"LCNN"
VERSION = 1
PRECISIONS = {"float32": 0, "int8": 1}

_HEADER = struct.Struct("<4sBBH")
_SPEC = struct.Struct("<5H")
_LAYER = struct.Struct("<BBHHH")
_QPARAMS = struct.Struct("<fi")
_CRC = struct.Struct("<I")

_KIND_CODES = {kind: code for code, kind in enumerate(Kind)}
_ACT_CODES = {act: code for code, act in enumerate(Activation)}

SCENE_LABELS = (
    "airport", "bus", "metro", "metro_station", "park", "public_square",
    "shopping_mall", "street_pedestrian", "street_traffic", "tram",
)


class ModelFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")


def _layer_fields(layer: LayerSpec) -> tuple[int, int, int]:
    if layer.kind is Kind.CONV:
        return layer.filters, layer.kernel_h, layer.kernel_w
    if layer.kind is Kind.AVGPOOL:
        return layer.pool_h, layer.pool_w, 0
    if layer.kind in (Kind.DENSE, Kind.SOFTMAX):
        return layer.units, 0, 0
    return 0, 0, 0


def _layer_from_fields(kind: Kind, act: Activation, a: int, b: int, c: int) -> LayerSpec:
    if kind is Kind.CONV:
        return LayerSpec(kind, filters=a, kernel_h=b, kernel_w=c, activation=act)
    if kind is Kind.AVGPOOL:
        return LayerSpec(kind, pool_h=a, pool_w=b, activation=act)
    if kind in (Kind.DENSE, Kind.SOFTMAX):
        return LayerSpec(kind, units=a, activation=act)
    return LayerSpec(kind, activation=act)


def _tensor_sizes(spec: NetworkSpec) -> list[int]:
    return [int(np.prod(shape)) for d in tensor_shapes(spec) for shape in d.values()]


def overhead_bytes(spec: NetworkSpec) -> int:
    """Header, spec table, provenance table and checksum."""
    filters = sum(spec.layers[i].filters for i in spec.conv_indices())
    return _HEADER.size + _SPEC.size + _LAYER.size * len(spec.layers) + 4 * filters + _CRC.size


def payload_bytes(spec: NetworkSpec, precision: str) -> int:
    sizes = _tensor_sizes(spec)
    if precision == "float32":
        return 4 * sum(sizes)
    if precision == "int8":
        return sum(sizes) + _QPARAMS.size * len(sizes)
    raise ValueError(f"unknown precision {precision!r}")


def file_size(spec: NetworkSpec, precision: str) -> int:
    return overhead_bytes(spec) + payload_bytes(spec, precision)


def _encode_spec(spec: NetworkSpec) -> bytes:
    parts = [_SPEC.pack(*spec.input_shape, spec.class_count, len(spec.layers))]
    for layer in spec.layers:
        parts.append(_LAYER.pack(_KIND_CODES[layer.kind], _ACT_CODES[layer.activation], *_layer_fields(layer)))
    return b"".join(parts)


def _encode_provenance(spec: NetworkSpec, provenance: dict[int, np.ndarray]) -> bytes:
    return b"".join(np.asarray(provenance[i], dtype="<u4").tobytes() for i in spec.conv_indices())


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode(spec: NetworkSpec, precision: str, provenance, payload: bytes) -> bytes:
    body = (_HEADER.pack(MAGIC, VERSION, PRECISIONS[precision], 0) + _encode_spec(spec)
            + _encode_provenance(spec, provenance) + payload)
    return body + _CRC.pack(zlib.crc32(body))


def save_model(path, spec: NetworkSpec, params: NetworkParams, precision: str = "float32") -> int:
    """Write a model atomically; returns the file size in bytes.

    ``precision="int8"`` quantizes the parameters first.
    """
    if precision == "int8":
        return save_quantized(path, quantize_network(spec, params))
    if precision != "float32":
        raise ValueError(f"unknown precision {precision!r}")
    params.check(spec)
    payload = b"".join(np.asarray(v, dtype="<f4").tobytes() for _, _, v in params.items())
    data = _encode(spec, "float32", params.provenance, payload)
    _atomic_write(Path(path), data)
    return len(data)


def save_quantized(path, qm: QuantizedModel) -> int:
    parts = []
    for t in qm.tensors:
        parts.append(_QPARAMS.pack(t.qparams.scale, t.qparams.zero_point))
        parts.append(np.asarray(t.codes, dtype=np.int8).tobytes())
    data = _encode(qm.spec, "int8", qm.provenance, b"".join(parts))
    _atomic_write(Path(path), data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError(
                f"truncated file: need {n} bytes for {what}, only {len(self.data) - self.pos} left", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))


def _decode(data: bytes):
    r = _Reader(data)
    magic, version, precision_code, _ = r.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise ModelFormatError(f"unsupported format version {version}", 4)
    precision = {v: k for k, v in PRECISIONS.items()}.get(precision_code)
    if precision is None:
        raise ModelFormatError(f"unknown precision tag {precision_code}", 5)

    spec_at = r.pos
    h, w, c, classes, n_layers = r.unpack(_SPEC, "spec table")
    layers = []
    for n in range(n_layers):
        at = r.pos
        kind_code, act_code, a, b, cc = r.unpack(_LAYER, f"layer {n}")
        try:
            kind, act = list(Kind)[kind_code], list(Activation)[act_code]
        except IndexError:
            raise ModelFormatError(f"layer {n}: bad kind/activation code {kind_code}/{act_code}", at) from None
        layers.append(_layer_from_fields(kind, act, a, b, cc))
    try:
        spec = NetworkSpec((h, w, c), tuple(layers), classes)
    except ValueError as exc:
        raise ModelFormatError(f"invalid network spec: {exc}", spec_at) from None

    expected = overhead_bytes(spec) + payload_bytes(spec, precision)
    if len(data) != expected:
        raise ModelFormatError(f"file is {len(data)} bytes, spec implies {expected}",
                               min(len(data), expected))
    (crc,) = _CRC.unpack(data[-_CRC.size:])
    if crc != zlib.crc32(data[:-_CRC.size]):
        raise ModelFormatError("checksum mismatch", len(data) - _CRC.size)

    provenance = {}
    for i in spec.conv_indices():
        f = spec.layers[i].filters
        provenance[i] = np.frombuffer(r.take(4 * f, f"provenance of layer {i}"), dtype="<u4").astype(np.int64)
    return spec, precision, provenance, r


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


def load_quantized(path) -> QuantizedModel:
    spec, precision, provenance, r = _decode(_read_bytes(path))
    if precision != "int8":
        raise ModelFormatError(f"{path} holds a {precision} model, not int8")
    tensors = []
    for i, shapes in enumerate(tensor_shapes(spec)):
        for key in TENSOR_KEYS[spec.layers[i].kind]:
            shape = shapes[key]
            at = r.pos
            scale, zp = r.unpack(_QPARAMS, f"quant params of layer {i} {key}")
            try:
                qp = QuantParams(scale, zp)
            except ValueError as exc:
                raise ModelFormatError(f"layer {i} {key}: {exc}", at) from None
            codes = np.frombuffer(r.take(int(np.prod(shape)), f"layer {i} {key}"), dtype=np.int8)
            tensors.append(QuantizedTensor(i, key, codes.reshape(shape).copy(), qp))
    return QuantizedModel(spec, tensors, provenance)


def load_model(path) -> tuple[NetworkSpec, NetworkParams]:
    """Read a model of either precision; int8 models come back dequantized."""
    spec, precision, provenance, r = _decode(_read_bytes(path))
    if precision == "int8":
        qm = load_quantized(path)
        return qm.spec, dequantize_network(qm)
    tensors: list[dict[str, np.ndarray]] = []
    for i, shapes in enumerate(tensor_shapes(spec)):
        d = {}
        for key in TENSOR_KEYS[spec.layers[i].kind]:
            n = int(np.prod(shapes[key]))
            d[key] = np.frombuffer(r.take(4 * n, f"layer {i} {key}"), dtype="<f4").astype(np.float32).reshape(shapes[key])
        tensors.append(d)
    params = NetworkParams(tensors, provenance)
    try:
        params.check(spec)
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from None
    return spec, params


def model_precision(path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size or head[:4] != MAGIC:
        raise ModelFormatError(f"{path} is not an LCNN model file", 0)
    code = head[5]
    for name, value in PRECISIONS.items():
        if value == code:
            return name
    raise ModelFormatError(f"unknown precision tag {code}", 5)


@dataclass(frozen=True)
class DatasetManifest:
    rows: tuple[tuple[str, str], ...]
    vocabulary: tuple[str, ...] = SCENE_LABELS
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def labels(self) -> np.ndarray:
        index = {label: i for i, label in enumerate(self.vocabulary)}
        return np.array([index[label] for _, label in self.rows], dtype=np.int64)

    def paths(self) -> list[Path]:
        base = self.root or Path(".")
        return [p if p.is_absolute() else base / p for p in (Path(r[0]) for r in self.rows)]


def read_manifest(path, vocabulary: tuple[str, ...] = SCENE_LABELS) -> DatasetManifest:
    """Read a ``path,label`` CSV; relative paths resolve against the manifest's directory."""
    path = Path(path)
    rows: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["path", "label"]:
            raise ValueError(f"{path}: header must be 'path,label', got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            file_path, label = (row["path"] or "").strip(), (row["label"] or "").strip()
            if not file_path:
                raise ValueError(f"{path}:{lineno}: empty path")
            if label not in vocabulary:
                raise ValueError(f"{path}:{lineno}: unknown label {label!r} for {file_path}")
            if file_path in seen:
                raise ValueError(f"{path}:{lineno}: duplicate path {file_path}")
            seen.add(file_path)
            rows.append((file_path, label))
    return DatasetManifest(tuple(rows), tuple(vocabulary), path.parent)


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label"])
        writer.writerows(rows)
