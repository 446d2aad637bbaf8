"""Cosine-similarity filter pruning and the network surgery that removes filters."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .nn.spec import Kind, NetworkParams, NetworkSpec


@dataclass
class SimilarityMatrix:
    layer: str
    values: np.ndarray
    l1_norms: np.ndarray


def filter_similarity(spec: NetworkSpec, params: NetworkParams, layer: str) -> SimilarityMatrix:
    """Pairwise cosine similarity of a conv layer's flattened kernels (bias excluded)."""
    index = spec.conv_index(layer)
    w = params.tensors[index]["weights"].reshape(spec.layers[index].filters, -1).astype(np.float64)
    norms = np.linalg.norm(w, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"{layer}: filter {int(zero[0])} has zero norm; cosine similarity undefined")
    unit = w / norms[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = (sim + sim.T) / 2
    np.fill_diagonal(sim, 1.0)
    return SimilarityMatrix(layer, sim, np.abs(w).sum(axis=1))


def select_redundant(matrix: SimilarityMatrix, count: int) -> list[tuple[int, int]]:
    """Greedy closest-pair matching; returns ``(kept, removed)`` pairs.

    Pairs are taken in order of decreasing similarity (ties by lower indices)
    among filters not yet paired.  In each pair the filter with the smaller L1
    norm is removed; equal norms remove the higher index.
    """
    n = matrix.values.shape[0]
    if count < 0 or 2 * count > n:
        raise ValueError(f"{matrix.layer}: cannot form {count} disjoint pairs from {n} filters")
    rows, cols = np.triu_indices(n, k=1)
    order = np.lexsort((cols, rows, -matrix.values[rows, cols]))
    used: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for k in order:
        if len(pairs) == count:
            break
        i, j = int(rows[k]), int(cols[k])
        if i in used or j in used:
            continue
        used.update((i, j))
        ni, nj = matrix.l1_norms[i], matrix.l1_norms[j]
        removed = i if ni < nj else j
        pairs.append((j if removed == i else i, removed))
    return pairs


@dataclass
class PrunePlan:
    """Per conv layer name, the ``(kept, removed)`` filter-index pairs."""

    pairs: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    surviving_ids: dict[str, list[int]] = field(default_factory=dict)

    def removed(self, layer: str) -> list[int]:
        return sorted(r for _, r in self.pairs.get(layer, []))

    def validate(self, spec: NetworkSpec) -> None:
        for layer, pairs in self.pairs.items():
            n = spec.layers[spec.conv_index(layer)].filters
            seen: set[int] = set()
            for kept, removed in pairs:
                for idx in (kept, removed):
                    if not 0 <= idx < n:
                        raise ValueError(f"{layer}: filter index {idx} out of range for {n} filters")
                    if idx in seen:
                        raise ValueError(f"{layer}: filter {idx} appears in more than one pair")
                    seen.add(idx)
            if len(pairs) >= n:
                raise ValueError(f"{layer}: plan would remove every filter")

    def to_json(self) -> str:
        return json.dumps({"pairs": {k: [list(p) for p in v] for k, v in self.pairs.items()},
                           "surviving_ids": self.surviving_ids}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PrunePlan":
        d = json.loads(text)
        return cls({k: [tuple(p) for p in v] for k, v in d["pairs"].items()},
                   {k: list(v) for k, v in d.get("surviving_ids", {}).items()})


def plan_pruning(spec: NetworkSpec, params: NetworkParams, counts: dict[str, int]) -> PrunePlan:
    """Plan ``counts[layer]`` removals per conv layer, each layer judged on the parent weights."""
    plan = PrunePlan()
    for layer, count in counts.items():
        if count == 0:
            continue
        pairs = select_redundant(filter_similarity(spec, params, layer), count)
        plan.pairs[layer] = pairs
        index = spec.conv_index(layer)
        removed = {r for _, r in pairs}
        plan.surviving_ids[layer] = [int(p) for k, p in enumerate(params.provenance[index]) if k not in removed]
    return plan


def apply_prune(spec: NetworkSpec, params: NetworkParams, plan: PrunePlan) -> tuple[NetworkSpec, NetworkParams]:
    """Delete the planned filters and every tensor slice that depends on them.

    A removed conv filter loses its kernel, bias and batch-norm entries; the
    next conv drops the matching input-channel slice, and a dense layer after
    flatten drops rows ``(h * W + w) * C + c``.
    """
    plan.validate(spec)
    removed_by_index = {spec.conv_index(name): set(plan.removed(name)) for name in plan.pairs}
    new = params.copy()
    layers = list(spec.layers)
    keep: np.ndarray | None = None  # surviving channels of the tensor flowing into the current layer
    shape = spec.input_shape
    for i, layer in enumerate(spec.layers):
        t = new.tensors[i]
        if layer.kind is Kind.CONV:
            if keep is not None:
                t["weights"] = t["weights"][..., keep]
            out_keep = np.array([f for f in range(layer.filters) if f not in removed_by_index.get(i, ())],
                                dtype=np.int64)
            if i in removed_by_index:
                t["weights"] = t["weights"][out_keep]
                t["bias"] = t["bias"][out_keep]
                new.provenance[i] = new.provenance[i][out_keep]
                layers[i] = replace(layer, filters=len(out_keep))
                keep = out_keep
            else:
                keep = None
        elif layer.kind is Kind.BATCHNORM:
            if keep is not None:
                for k in t:
                    t[k] = t[k][keep]
        elif layer.kind is Kind.FLATTEN:
            if keep is not None:
                h, w, c = shape
                keep = ((np.arange(h)[:, None, None] * w + np.arange(w)[None, :, None]) * c
                        + keep[None, None, :]).reshape(-1)
        elif layer.kind in (Kind.DENSE, Kind.SOFTMAX):
            if keep is not None:
                t["weights"] = t["weights"][keep]
            keep = None
        shape = spec.output_shapes()[i]
    new_spec = NetworkSpec(spec.input_shape, tuple(layers), spec.class_count)
    for d in new.tensors:
        for key in d:
            d[key] = np.ascontiguousarray(d[key])
    new.check(new_spec)
    return new_spec, new

