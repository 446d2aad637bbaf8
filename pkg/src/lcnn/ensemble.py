"""Ensembles of pruned networks, cross-network feature-map similarity and
deduplicated inference that copies near-identical maps instead of recomputing them."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import complexity, io
from .nn.network import Model, _as_batch, forward


def aggregate(probabilities) -> np.ndarray:
    """Arithmetic mean of member probability vectors (or batches of them)."""
    arrays = [np.asarray(p, dtype=np.float64) for p in probabilities]
    if not arrays:
        raise ValueError("need at least one member's probabilities")
    shape = arrays[0].shape
    for k, a in enumerate(arrays[1:], start=1):
        if a.shape != shape:
            raise ValueError(f"member {k} gives shape {a.shape}, member 0 gives {shape}")
    return np.mean(np.stack(arrays), axis=0)


@dataclass
class Ensemble:
    members: list[Model]

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        first = self.members[0].spec
        for m in self.members[1:]:
            if m.spec.input_shape != first.input_shape:
                raise ValueError(f"{m.name}: input shape {m.spec.input_shape} differs from {first.input_shape}")
            if m.spec.class_count != first.class_count:
                raise ValueError(f"{m.name}: {m.spec.class_count} classes, expected {first.class_count}")

    def __len__(self) -> int:
        return len(self.members)

    @property
    def specs(self):
        return [m.spec for m in self.members]

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return aggregate([m.predict(x, batch_size) for m in self.members])

    def complexity(self) -> complexity.EnsembleReport:
        return complexity.ensemble_report(self.specs)


def load_ensemble(descriptor) -> Ensemble:
    """Read ``{"members": [model paths]}``; relative paths resolve against the descriptor."""
    descriptor = Path(descriptor)
    d = json.loads(descriptor.read_text())
    paths = d.get("members") if isinstance(d, dict) else None
    if not paths:
        raise ValueError(f"{descriptor}: expected a non-empty 'members' list")
    members = []
    for p in paths:
        p = Path(p)
        if not p.is_absolute():
            p = descriptor.parent / p
        spec, params = io.load_model(p)
        members.append(Model(spec, params, p.stem))
    return Ensemble(members)


def write_ensemble(descriptor, model_paths) -> None:
    Path(descriptor).write_text(json.dumps({"members": [str(p) for p in model_paths]}, indent=2) + "\n")


@dataclass
class MseReport:
    """Summed squared difference of provenance-matched maps of one conv block."""

    layer: str
    indices_a: list[int]
    indices_b: list[int]
    provenance: list[int]
    values: np.ndarray  # one entry per matched pair
    examples: int

    def to_dict(self) -> dict:
        return {"layer": self.layer, "examples": self.examples,
                "pairs": [{"provenance": p, "index_a": a, "index_b": b, "mse": float(v)}
                          for p, a, b, v in zip(self.provenance, self.indices_a, self.indices_b, self.values)]}


def _block_maps(model: Model, layer: str, x: np.ndarray, batch_size: int):
    for s in range(0, len(x), batch_size):
        yield forward(model.spec, model.params, x[s:s + batch_size], capture=True).block_output(model.spec, layer)


def feature_map_mse(model_a: Model, model_b: Model, layer: str, x: np.ndarray,
                    batch_size: int = 256) -> MseReport:
    """Per matched filter, the sum over examples and positions of squared map differences.

    Maps are post-activation outputs of the conv block ``layer``; filters are
    matched through their provenance ids, so both models must descend from
    the same parent network.
    """
    ia, ib = model_a.spec.conv_index(layer), model_b.spec.conv_index(layer)
    prov_a, prov_b = model_a.params.provenance[ia], model_b.params.provenance[ib]
    where_b = {int(p): k for k, p in enumerate(prov_b)}
    pairs = [(k, where_b[int(p)], int(p)) for k, p in enumerate(prov_a) if int(p) in where_b]
    if not pairs:
        raise ValueError(f"{model_a.name} and {model_b.name} share no {layer} filters by provenance")
    idx_a = np.array([a for a, _, _ in pairs])
    idx_b = np.array([b for _, b, _ in pairs])
    x = _as_batch(model_a.spec, x)
    total = np.zeros(len(pairs))
    for ma, mb in zip(_block_maps(model_a, layer, x, batch_size), _block_maps(model_b, layer, x, batch_size)):
        diff = ma[..., idx_a].astype(np.float64) - mb[..., idx_b].astype(np.float64)
        total += np.einsum("bhwc,bhwc->c", diff, diff)
    return MseReport(layer, idx_a.tolist(), idx_b.tolist(), [p for _, _, p in pairs], total, len(x))


@dataclass(frozen=True)
class ShareEdge:
    provider: int  # member positions in ensemble order
    layer: str
    provider_index: int
    consumer: int
    consumer_index: int
    mse: float


@dataclass
class SharePlan:
    edges: list[ShareEdge] = field(default_factory=list)
    threshold: float = 1e4

    def __len__(self) -> int:
        return len(self.edges)

    def validate(self, ensemble: Ensemble) -> None:
        consumed: set[tuple[int, str, int]] = set()
        for e in self.edges:
            for member, index in ((e.provider, e.provider_index), (e.consumer, e.consumer_index)):
                if not 0 <= member < len(ensemble):
                    raise ValueError(f"plan refers to member {member}; ensemble has {len(ensemble)}")
                spec = ensemble.members[member].spec
                n = spec.layers[spec.conv_index(e.layer)].filters
                if not 0 <= index < n:
                    raise ValueError(f"plan refers to {e.layer} map {index} of member {member}, which has {n}")
            if e.provider >= e.consumer:
                raise ValueError(f"provider {e.provider} must come before consumer {e.consumer}")
            key = (e.consumer, e.layer, e.consumer_index)
            if key in consumed:
                raise ValueError(f"member {e.consumer} {e.layer} map {e.consumer_index} is consumed twice")
            consumed.add(key)
            sa, sb = ensemble.members[e.provider].spec, ensemble.members[e.consumer].spec
            la, lb = sa.conv_index(e.layer), sb.conv_index(e.layer)
            if sa.output_shapes()[la][:2] != sb.output_shapes()[lb][:2]:
                raise ValueError(f"{e.layer} maps of members {e.provider} and {e.consumer} differ in size")
        for e in self.edges:
            if (e.provider, e.layer, e.provider_index) in consumed:
                raise ValueError(f"member {e.provider} {e.layer} map {e.provider_index} is both provider "
                                 "and consumer")

    def skipped_filters(self, ensemble: Ensemble) -> dict[tuple[int, int], int]:
        """(member, conv layer index) -> number of maps copied rather than computed."""
        out: dict[tuple[int, int], int] = {}
        for e in self.edges:
            key = (e.consumer, ensemble.members[e.consumer].spec.conv_index(e.layer))
            out[key] = out.get(key, 0) + 1
        return out

    def to_json(self) -> str:
        return json.dumps({"threshold": self.threshold, "edges": [asdict(e) for e in self.edges]}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SharePlan":
        d = json.loads(text)
        return cls([ShareEdge(**e) for e in d["edges"]], float(d.get("threshold", 1e4)))


def build_share_plan(reports: dict[tuple[int, int], MseReport], threshold: float = 1e4) -> SharePlan:
    """Share every matched map whose aggregated MSE is at most ``threshold``.

    ``reports[(i, j)]`` (or ``reports[(i, j, layer)]`` when several layers
    are compared) holds members ``i`` and ``j``, in either order.  Consumers are visited in ensemble order and each takes the
    earliest eligible provider.  A map that is itself copied never provides,
    so every edge points at a computed map and no chain is longer than one
    hop; the recorded MSE is the one between the two ends of the edge.
    """
    if threshold < 0 or math.isnan(threshold):
        raise ValueError("threshold must be a non-negative number")
    candidates: dict[tuple[int, str, int], list[tuple[int, int, float]]] = {}
    for key, r in reports.items():
        i, j = key[:2]
        if i == j:
            continue
        if i < j:
            provider, consumer, p_idx, c_idx = i, j, r.indices_a, r.indices_b
        else:
            provider, consumer, p_idx, c_idx = j, i, r.indices_b, r.indices_a
        for pi, ci, v in zip(p_idx, c_idx, r.values):
            if v <= threshold:
                candidates.setdefault((consumer, r.layer, ci), []).append((provider, pi, float(v)))
    consumed: set[tuple[int, str, int]] = set()
    edges = []
    for (consumer, layer, ci) in sorted(candidates):
        for provider, pi, v in sorted(candidates[(consumer, layer, ci)]):
            if (provider, layer, pi) not in consumed:
                edges.append(ShareEdge(provider, layer, pi, consumer, ci, v))
                consumed.add((consumer, layer, ci))
                break
    return SharePlan(edges, threshold)


@dataclass
class DedupResult:
    probabilities: np.ndarray
    macs_plain: int
    macs_dedup: int
    macs_saved: int
    params_saved: int
    shared_maps: int
    max_drift: float | None = None  # largest |p_dedup - p_plain| when measured

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "probabilities"}


def share_savings(ensemble: Ensemble, plan: SharePlan) -> tuple[int, int]:
    """(MACs, params) a per-filter backend avoids: H_out*W_out*kh*kw*C_in and kh*kw*C_in + 5 per map."""
    macs = params = 0
    for e in plan.edges:
        spec = ensemble.members[e.consumer].spec
        i = spec.conv_index(e.layer)
        layer, cin = spec.layers[i], spec.input_shapes()[i][-1]
        h, w = spec.output_shapes()[i][:2]
        macs += h * w * layer.kernel_h * layer.kernel_w * cin
        params += complexity.conv_filter_params(layer.kernel_h, layer.kernel_w, cin)
    return macs, params


def ensemble_infer(ensemble: Ensemble, plan: SharePlan, x: np.ndarray, batch_size: int = 256,
                   measure_drift: bool = False) -> DedupResult:
    """Aggregate member predictions, copying each planned consumer map from its provider.

    Members run in ensemble order so providers are always computed first.
    """
    plan.validate(ensemble)
    x = _as_batch(ensemble.members[0].spec, x)
    needed: dict[int, set[str]] = {}
    for e in plan.edges:
        needed.setdefault(e.provider, set()).add(e.layer)
    chunks = []
    for s in range(0, len(x), batch_size):
        xb = x[s:s + batch_size]
        maps: dict[tuple[int, str], np.ndarray] = {}
        probs = []
        for m, model in enumerate(ensemble.members):
            overrides: dict[int, dict[int, np.ndarray]] = {}
            for e in plan.edges:
                if e.consumer == m:
                    overrides.setdefault(model.spec.conv_index(e.layer), {})[e.consumer_index] = \
                        maps[(e.provider, e.layer)][..., e.provider_index]
            trace = forward(model.spec, model.params, xb, capture=m in needed, overrides=overrides)
            for layer in needed.get(m, ()):
                maps[(m, layer)] = trace.block_output(model.spec, layer)
            probs.append(trace.probabilities)
        chunks.append(aggregate(probs))
    p = np.concatenate(chunks, axis=0)
    plain = complexity.ensemble_report(ensemble.specs)
    skipped = plan.skipped_filters(ensemble)
    dedup = complexity.ensemble_report(ensemble.specs, skipped) if skipped else plain
    macs_saved, params_saved = share_savings(ensemble, plan)
    result = DedupResult(p, plain.total_macs, dedup.dedup_macs if skipped else plain.total_macs,
                         macs_saved, params_saved, len(plan))
    if measure_drift:
        result.max_drift = float(np.max(np.abs(p - ensemble.predict(x, batch_size))))
    return result
