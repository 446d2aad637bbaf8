"""Parameter, MAC and storage accounting.

Conventions:

* params: conv ``F*(kh*kw*C_in + 1)``, batch-norm ``4*C`` (gamma, beta and both
  moving statistics), dense ``(n_in + 1)*n_out``.
* MACs per inference: conv ``H*W*F*kh*kw*C_in``, average pooling
  ``H_out*W_out*C*ph*pw``, dense ``n_in*n_out``; bias adds, batch-norm,
  activations and softmax are free.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from . import io
from .nn.spec import Kind, NetworkSpec

MAX_PARAMS = 128_000
MAX_MACS = 30_000_000


@dataclass
class LayerCost:
    name: str
    kind: str
    output_shape: tuple[int, ...]
    params: int
    macs: int


@dataclass
class GateResult:
    params_ok: bool
    macs_ok: bool
    params_slack: int
    macs_slack: int

    @property
    def passed(self) -> bool:
        return self.params_ok and self.macs_ok


@dataclass
class ComplexityReport:
    architecture: str
    layers: list[LayerCost]
    size_float32: int
    size_int8: int
    gate: GateResult | None = None

    @property
    def total_params(self) -> int:
        return sum(layer.params for layer in self.layers)

    @property
    def total_macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_params"] = self.total_params
        d["total_macs"] = self.total_macs
        if self.gate is not None:
            d["gate"]["passed"] = self.gate.passed
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        nw = max(6, *(len(l.name) for l in self.layers)) + 2
        kw = max(5, *(len(l.kind) for l in self.layers)) + 2
        lines = [f"{'layer':<{nw}}{'kind':<{kw}}{'output':<12}{'params':>10}{'MACs':>14}"]
        for l in self.layers:
            shape = "x".join(str(d) for d in l.output_shape)
            lines.append(f"{l.name:<{nw}}{l.kind:<{kw}}{shape:<12}{l.params:>10}{l.macs:>14,}")
        lines.append(f"{'total':<{nw + kw + 12}}{self.total_params:>10}{self.total_macs:>14,}")
        lines.append(f"size float32: {self.size_float32} B   int8: {self.size_int8} B   "
                     f"ratio {self.size_int8 / self.size_float32:.3f}")
        if self.gate is not None:
            g = self.gate
            lines.append(f"gate: params {'ok' if g.params_ok else 'FAIL'} (slack {g.params_slack})  "
                         f"MACs {'ok' if g.macs_ok else 'FAIL'} (slack {g.macs_slack:,})")
        return "\n".join(lines)


def conv_filter_params(kernel_h: int, kernel_w: int, in_channels: int) -> int:
    """Params owned by one conv filter: kernel, bias and its 4 batch-norm entries."""
    return kernel_h * kernel_w * in_channels + 1 + 4


def layer_costs(spec: NetworkSpec, skipped_filters: dict[int, int] | None = None) -> list[LayerCost]:
    """Per-layer params and MACs.

    ``skipped_filters`` maps a conv layer index to the number of its filters
    that are not evaluated (their maps are supplied from elsewhere); those
    filters' MACs are left out.  Parameter counts are unaffected.
    """
    skipped_filters = skipped_filters or {}
    costs = []
    for i, (layer, in_shape, out_shape) in enumerate(
            zip(spec.layers, spec.input_shapes(), spec.output_shapes())):
        params = macs = 0
        if layer.kind is Kind.CONV:
            cin = in_shape[-1]
            params = layer.filters * (layer.kernel_h * layer.kernel_w * cin + 1)
            evaluated = layer.filters - skipped_filters.get(i, 0)
            if not 0 <= evaluated <= layer.filters:
                raise ValueError(f"layer {i}: cannot skip {skipped_filters[i]} of {layer.filters} filters")
            macs = out_shape[0] * out_shape[1] * evaluated * layer.kernel_h * layer.kernel_w * cin
        elif layer.kind is Kind.BATCHNORM:
            params = 4 * in_shape[-1]
        elif layer.kind is Kind.AVGPOOL:
            macs = out_shape[0] * out_shape[1] * out_shape[2] * layer.pool_h * layer.pool_w
        elif layer.kind in (Kind.DENSE, Kind.SOFTMAX):
            params = (in_shape[0] + 1) * layer.units
            macs = in_shape[0] * layer.units
        costs.append(LayerCost(spec.layer_name(i), layer.kind.value, tuple(out_shape), params, macs))
    return costs


def count_params(spec: NetworkSpec) -> int:
    return sum(c.params for c in layer_costs(spec))


def count_macs(spec: NetworkSpec, skipped_filters: dict[int, int] | None = None) -> int:
    return sum(c.macs for c in layer_costs(spec, skipped_filters))


def check_constraints(report: "ComplexityReport | EnsembleReport", max_params: int = MAX_PARAMS,
                      max_macs: int = MAX_MACS) -> GateResult:
    return GateResult(report.total_params <= max_params, report.total_macs <= max_macs,
                      max_params - report.total_params, max_macs - report.total_macs)


def report(spec: NetworkSpec, gate: bool = True) -> ComplexityReport:
    r = ComplexityReport(spec.architecture_string(), layer_costs(spec),
                         io.file_size(spec, "float32"), io.file_size(spec, "int8"))
    if gate:
        r.gate = check_constraints(r)
    return r


@dataclass
class EnsembleReport:
    members: list[ComplexityReport]
    shared_filters: dict[str, int] = field(default_factory=dict)
    dedup_macs: int | None = None
    dedup_params: int | None = None
    gate: GateResult | None = None

    @property
    def total_params(self) -> int:
        return sum(m.total_params for m in self.members)

    @property
    def total_macs(self) -> int:
        return sum(m.total_macs for m in self.members)

    def to_dict(self) -> dict:
        d = {"members": [m.to_dict() for m in self.members], "total_params": self.total_params,
             "total_macs": self.total_macs, "shared_filters": self.shared_filters,
             "dedup_macs": self.dedup_macs, "dedup_params": self.dedup_params}
        if self.gate is not None:
            d["gate"] = {**asdict(self.gate), "passed": self.gate.passed}
        return d


def ensemble_report(specs: list[NetworkSpec],
                    skipped: dict[tuple[int, int], int] | None = None) -> EnsembleReport:
    """Totals over members; ``skipped`` maps (member, conv layer index) to the number of filters
    whose maps are copied from an earlier member instead of being computed."""
    skipped = skipped or {}
    members = [report(s, gate=False) for s in specs]
    r = EnsembleReport(members)
    r.gate = check_constraints(r)
    if skipped:
        per_member: dict[int, dict[int, int]] = {}
        for (m, layer), n in skipped.items():
            per_member.setdefault(m, {})[layer] = n
        r.dedup_macs = sum(count_macs(s, per_member.get(m)) for m, s in enumerate(specs))
        saved_params = 0
        for (m, layer), n in skipped.items():
            l, cin = specs[m].layers[layer], specs[m].input_shapes()[layer][-1]
            saved_params += n * conv_filter_params(l.kernel_h, l.kernel_w, cin)
        r.dedup_params = r.total_params - saved_params
        r.shared_filters = {f"{m}:{specs[m].layer_name(layer)}": n for (m, layer), n in skipped.items()}
    return r
