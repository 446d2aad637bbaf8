import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lcnn import complexity, ensemble, io, pruning
from lcnn.nn import Model, init_params, baseline_spec


def prob_rows(k):
    return arrays(np.float64, (3, k), elements=st.floats(0.01, 1.0)).map(lambda a: a / a.sum(1, keepdims=True))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6).flatmap(lambda k: st.lists(prob_rows(k), min_size=1, max_size=5)), st.randoms())
def test_aggregate_is_distribution_and_order_free(members, r):
    out = ensemble.aggregate(members)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=1e-12)
    shuffled = list(members)
    r.shuffle(shuffled)
    np.testing.assert_allclose(ensemble.aggregate(shuffled), out, rtol=1e-12)


def test_aggregate_examples():
    np.testing.assert_allclose(ensemble.aggregate([[0.6, 0.4], [0.4, 0.6]]), [0.5, 0.5])
    np.testing.assert_array_equal(ensemble.aggregate([[0.3, 0.7]]), [0.3, 0.7])
    with pytest.raises(ValueError):
        ensemble.aggregate([[0.5, 0.5], [0.2, 0.3, 0.5]])
    with pytest.raises(ValueError):
        ensemble.aggregate([])


@pytest.fixture(scope="module")
def family():
    """A parent and three untrained children pruned from it, plus inputs."""
    spec = baseline_spec(classes=4)
    params = init_params(spec, 11)
    models = [Model(spec, params, "parent")]
    for name, counts in (("pc2", {"C2": 4}), ("pc3", {"C3": 8}), ("pc1", {"C1": 4})):
        pspec, pparams = pruning.apply_prune(spec, params, pruning.plan_pruning(spec, params, counts))
        models.append(Model(pspec, pparams, name))
    x = np.random.default_rng(0).normal(size=(6, 40, 51, 1)).astype(np.float32)
    return models, x


def test_mse_self_is_zero(family):
    models, x = family
    r = ensemble.feature_map_mse(models[0], models[0], "C1", x)
    assert np.all(r.values == 0) and len(r.values) == 16


def test_mse_locality(family):
    models, x = family
    other = Model(models[0].spec, models[0].params.copy(), "perturbed")
    other.params.tensors[0]["weights"][5] += 0.3
    r = ensemble.feature_map_mse(models[0], other, "C1", x)
    assert r.values[5] > 0
    assert np.all(np.delete(r.values, 5) == 0)


def test_mse_is_sum_of_squares(family):
    models, x = family
    other = Model(models[0].spec, models[0].params.copy(), "perturbed")
    other.params.tensors[0]["bias"][2] += 0.1
    r = ensemble.feature_map_mse(models[0], other, "C1", x)
    from lcnn.nn import forward

    a = forward(models[0].spec, models[0].params, x, capture=True).block_output(models[0].spec, "C1")
    b = forward(other.spec, other.params, x, capture=True).block_output(other.spec, "C1")
    want = np.sum((a[..., 2].astype(np.float64) - b[..., 2]) ** 2)
    assert r.values[2] == pytest.approx(want, rel=1e-12)


def test_mse_matches_by_provenance(family):
    models, x = family
    parent, pc1 = models[0], models[3]
    r = ensemble.feature_map_mse(parent, pc1, "C1", x)
    assert len(r.values) == 12
    assert r.indices_a == [int(p) for p in pc1.params.provenance[0]]
    assert r.indices_b == list(range(12))
    assert np.all(r.values == 0)


def test_mse_no_common_provenance(family):
    models, x = family
    stranger = Model(models[0].spec, models[0].params.copy(), "stranger")
    stranger.params.provenance[0] = stranger.params.provenance[0] + 100
    with pytest.raises(ValueError, match="provenance"):
        ensemble.feature_map_mse(models[0], stranger, "C1", x)


def _reports(models, x, layers=("C1",)):
    return {(i, j, layer): ensemble.feature_map_mse(models[i], models[j], layer, x)
            for layer in layers for i in range(len(models)) for j in range(i + 1, len(models))}


def test_plan_threshold_extremes(family):
    models, x = family
    ens = ensemble.Ensemble(models[1:3])
    perturbed = Model(models[2].spec, models[2].params.copy(), "p")
    perturbed.params.tensors[0]["weights"][0] += 0.5
    ens = ensemble.Ensemble([models[1], perturbed])
    reports = _reports(ens.members, x)
    zero = ensemble.build_share_plan(reports, 0.0)
    assert sorted(e.consumer_index for e in zero.edges) == list(range(1, 16))
    inf = ensemble.build_share_plan(reports, math.inf)
    assert len(inf) == 16
    for plan in (zero, inf):
        plan.validate(ens)


def test_plan_picks_earliest_provider_without_chains(family):
    models, x = family
    plan = ensemble.build_share_plan(_reports(models, x), 0.0)
    consumed = {(e.consumer, e.layer, e.consumer_index) for e in plan.edges}
    assert len(consumed) == len(plan.edges)
    assert all(e.provider == 0 for e in plan.edges)
    assert not any((e.provider, e.layer, e.provider_index) in consumed for e in plan.edges)
    assert all(e.mse <= plan.threshold for e in plan.edges)


def test_plan_of_seven_edges_accounting():
    spec = baseline_spec()
    ens = ensemble.Ensemble([Model(spec, init_params(spec, 0)), Model(spec, init_params(spec, 1))])
    plan = ensemble.SharePlan([ensemble.ShareEdge(0, "C1", k, 1, k, 0.0) for k in range(7)])
    plan.validate(ens)
    macs, params = ensemble.share_savings(ens, plan)
    assert macs == 7 * 40 * 51 * 9 == 128_520
    assert params == 7 * (9 + 5)


def test_plan_json_roundtrip(family):
    models, x = family
    plan = ensemble.build_share_plan(_reports(models, x), 1e4)
    back = ensemble.SharePlan.from_json(plan.to_json())
    assert back.edges == plan.edges and back.threshold == plan.threshold
    json.loads(plan.to_json())


def test_plan_validation_errors(family):
    models, _ = family
    ens = ensemble.Ensemble(models[:2])
    bad = [
        [ensemble.ShareEdge(0, "C1", 16, 1, 0, 0.0)],
        [ensemble.ShareEdge(0, "C1", 0, 2, 0, 0.0)],
        [ensemble.ShareEdge(1, "C1", 0, 0, 0, 0.0)],
        [ensemble.ShareEdge(0, "C1", 0, 1, 3, 0.0), ensemble.ShareEdge(0, "C1", 1, 1, 3, 0.0)],
    ]
    for edges in bad:
        with pytest.raises(ValueError):
            ensemble.ensemble_infer(ens, ensemble.SharePlan(edges), np.zeros((1, 40, 51, 1), np.float32))


def test_empty_plan_equals_plain(family):
    models, x = family
    ens = ensemble.Ensemble(models)
    r = ensemble.ensemble_infer(ens, ensemble.SharePlan(), x)
    np.testing.assert_array_equal(r.probabilities, ens.predict(x))
    assert r.macs_saved == 0 and r.macs_dedup == r.macs_plain


def test_threshold_zero_plan_is_bitwise_exact(family):
    models, x = family
    ens = ensemble.Ensemble(models)
    plan = ensemble.build_share_plan(_reports(models, x, ("C1", "C2")), 0.0)
    assert len(plan) > 0
    r = ensemble.ensemble_infer(ens, plan, x, batch_size=4, measure_drift=True)
    np.testing.assert_array_equal(r.probabilities, ens.predict(x))
    assert r.max_drift == 0.0
    plain = complexity.ensemble_report(ens.specs).total_macs
    dedup = complexity.ensemble_report(ens.specs, plan.skipped_filters(ens)).dedup_macs
    assert r.macs_saved == plain - dedup


def test_ensemble_member_checks():
    with pytest.raises(ValueError):
        ensemble.Ensemble([])
    a, b = baseline_spec(classes=4), baseline_spec(classes=5)
    with pytest.raises(ValueError, match="classes"):
        ensemble.Ensemble([Model(a, init_params(a, 0)), Model(b, init_params(b, 0))])


def test_descriptor_roundtrip(tmp_path, family):
    models, x = family
    paths = []
    for m in models[:2]:
        io.save_model(tmp_path / f"{m.name}.lcnn", m.spec, m.params)
        paths.append(f"{m.name}.lcnn")
    ensemble.write_ensemble(tmp_path / "ens.json", paths)
    ens = ensemble.load_ensemble(tmp_path / "ens.json")
    np.testing.assert_array_equal(ens.predict(x), ensemble.Ensemble(models[:2]).predict(x))
