import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcnn import complexity, pruning
from lcnn.nn import Kind, Model, init_params, parse_architecture, baseline_spec

from reference import REFERENCE_ARCHS


def reference_counts(arch):
    widths = [int(w) for w in arch.split("-")]
    return {n: b - a for n, a, b in zip(("C1", "C2", "C3"), widths, (16, 16, 32)) if b - a}


@pytest.mark.parametrize("arch", [a for a in REFERENCE_ARCHS if a != "16-16-32-100"])
def test_surgery_reaches_reference_counts(arch):
    spec = baseline_spec()
    params = init_params(spec, 0)
    plan = pruning.plan_pruning(spec, params, reference_counts(arch))
    pspec, pparams = pruning.apply_prune(spec, params, plan)
    assert pspec.architecture_string() == arch
    assert pparams.count() == complexity.count_params(pspec) == REFERENCE_ARCHS[arch][0]


def test_similarity_matrix(rng):
    spec = baseline_spec()
    params = init_params(spec, 0)
    w = params.tensors[0]["weights"]
    w[3] = 2.5 * w[1]
    m = pruning.filter_similarity(spec, params, "C1")
    assert m.values.shape == (16, 16)
    np.testing.assert_allclose(m.values, m.values.T)
    np.testing.assert_allclose(np.diag(m.values), 1.0)
    assert m.values[1, 3] == pytest.approx(1.0)
    # the scaled copy has the larger L1 norm, so filter 1 goes
    assert pruning.select_redundant(m, 1) == [(3, 1)]


def test_select_is_greedy_and_disjoint():
    vals = np.array([[1, .9, .8, .1], [.9, 1, .95, .2], [.8, .95, 1, .3], [.1, .2, .3, 1.]])
    m = pruning.SimilarityMatrix("C1", vals, np.array([1.0, 2.0, 3.0, 4.0]))
    pairs = pruning.select_redundant(m, 2)
    assert pairs == [(2, 1), (3, 0)]
    with pytest.raises(ValueError):
        pruning.select_redundant(m, 3)


def test_equal_norms_remove_higher_index():
    vals = np.eye(2) + np.fliplr(np.eye(2)) * 0.5
    m = pruning.SimilarityMatrix("C1", vals, np.array([1.0, 1.0]))
    assert pruning.select_redundant(m, 1) == [(0, 1)]


def test_zero_filter_rejected():
    spec = baseline_spec()
    params = init_params(spec, 0)
    params.tensors[0]["weights"][5] = 0
    with pytest.raises(ValueError, match="zero norm"):
        pruning.filter_similarity(spec, params, "C1")


def test_plan_json_roundtrip():
    spec = baseline_spec()
    plan = pruning.plan_pruning(spec, init_params(spec, 1), {"C1": 4, "C3": 10})
    back = pruning.PrunePlan.from_json(plan.to_json())
    assert back.pairs == plan.pairs and back.surviving_ids == plan.surviving_ids
    json.loads(plan.to_json())


def test_invalid_plan():
    spec = baseline_spec()
    params = init_params(spec, 0)
    with pytest.raises(ValueError, match="more than one pair"):
        pruning.apply_prune(spec, params, pruning.PrunePlan({"C1": [(0, 1), (1, 2)]}))
    with pytest.raises(ValueError, match="out of range"):
        pruning.apply_prune(spec, params, pruning.PrunePlan({"C1": [(0, 16)]}))


def test_provenance_tracks_parent():
    spec = baseline_spec()
    params = init_params(spec, 0)
    plan = pruning.plan_pruning(spec, params, {"C2": 4})
    _, pparams = pruning.apply_prune(spec, params, plan)
    kept = [i for i in range(16) if i not in plan.removed("C2")]
    np.testing.assert_array_equal(pparams.provenance[2], kept)
    np.testing.assert_array_equal(pparams.tensors[2]["weights"], params.tensors[2]["weights"][kept])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 8), st.integers(0, 8), st.integers(0, 16), st.sampled_from([1, 3, 5]),
       st.integers(0, 10_000))
def test_param_delta_closed_form(r1, r2, r3, k, seed):
    spec = parse_architecture("16-16-32-100", kernel=k)
    params = init_params(spec, seed % 7)
    counts = {n: r for n, r in (("C1", r1), ("C2", r2), ("C3", r3)) if r}
    rng = np.random.default_rng(seed)
    plan = pruning.PrunePlan()
    for name, r in counts.items():
        n = spec.layers[spec.conv_index(name)].filters
        idx = rng.permutation(n)[:2 * r]
        plan.pairs[name] = [(int(a), int(b)) for a, b in zip(idx[:r], idx[r:])]
    pspec, pparams = pruning.apply_prune(spec, params, plan)
    f1, f2, f3 = 16 - r1, 16 - r2, 32 - r3
    kk = k * k
    delta = (r1 * (kk + 5) + kk * (16 * 16 - f1 * f2)
             + r2 * 5 + kk * (16 * 32 - f2 * f3)
             + r3 * 5 + 2 * r3 * 100)
    assert complexity.count_params(spec) - pparams.count() == delta
    assert pparams.count() == complexity.count_params(pspec)


@pytest.mark.parametrize("counts", [{"C1": 4}, {"C2": 5}, {"C3": 10}, {"C1": 3, "C2": 2, "C3": 6}])
def test_zero_downstream_weights_equivalence(rng, counts):
    spec = baseline_spec()
    params = init_params(spec, 3, np.float64)
    for _, key, v in params.items():
        if key in ("bias", "beta", "moving_mean"):
            v[:] = rng.normal(0, 0.2, v.shape)
        elif key in ("gamma", "moving_variance"):
            v[:] = rng.uniform(0.5, 1.5, v.shape)
    plan = pruning.plan_pruning(spec, params, counts)
    # make every removed filter invisible downstream
    for name in plan.pairs:
        i = spec.conv_index(name)
        removed = plan.removed(name)
        if name == "C3":
            rows = np.arange(2 * 1 * 32).reshape(2, 1, 32)[..., removed].ravel()
            dense = next(k for k, l in enumerate(spec.layers) if l.kind is Kind.DENSE)
            params.tensors[dense]["weights"][rows] = 0
        else:
            nxt = spec.conv_indices()[spec.conv_indices().index(i) + 1]
            params.tensors[nxt]["weights"][..., removed] = 0
    pspec, pparams = pruning.apply_prune(spec, params, plan)
    x = rng.normal(size=(5, 40, 51, 1))
    diff = np.abs(Model(spec, params).predict(x) - Model(pspec, pparams).predict(x)).max()
    assert diff <= 1e-6
