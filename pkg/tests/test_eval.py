import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_obs, make_route
from routechoice.core import Category, ParameterTable, StructuralError
from routechoice.eval import (
    ElasticityCurve,
    FoldPlan,
    attach_path_size,
    bl_ci,
    chosen_elasticities,
    cross_validate,
    curves_to_csv,
    dcm_metrics,
    elasticity_study,
    non_fastest_sample,
    point_elasticity,
)
from routechoice.features import ChoiceData
from routechoice.models import (
    DCMKind,
    DCMSpec,
    DeepSpec,
    ModelKind,
    Schedule,
    TransformerConfig,
    accuracy,
    build_model,
    dcm_loglik,
    evaluate,
)

EPS = np.finfo(float).eps


def mnl_table(ivtt=-2.483, wt=-2.9, nt=-3.5):
    return ParameterTable(["IVTT", "Fare", "WT", "NoT"], [ivtt, -1.0, wt, nt])


def test_fold_sizes_example():
    plan = FoldPlan.make(10_003, seed=4)
    assert sorted(plan.sizes.tolist(), reverse=True) == [2001, 2001, 2001, 2000, 2000]


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 3000), st.integers(0, 10_000), st.integers(2, 7))
def test_fold_plan_partition(n, seed, k):
    plan = FoldPlan.make(n, seed=seed, n_folds=min(k, n))
    sizes = plan.sizes
    assert sizes.max() - sizes.min() <= 1 and sizes.sum() == n
    seen = np.concatenate([plan.valid_idx(f) for f in range(plan.n_folds)])
    assert sorted(seen.tolist()) == list(range(n))
    for f in range(plan.n_folds):
        assert not set(plan.train_idx(f)) & set(plan.valid_idx(f))


def test_fold_plan_rejects_empty_folds():
    with pytest.raises(StructuralError):
        FoldPlan(np.zeros(10, dtype=np.int64)).validate(10)
    with pytest.raises(StructuralError):
        FoldPlan(np.array([0, 0, 2, 2])).validate(4)
    with pytest.raises(StructuralError):
        FoldPlan.make(10).validate(11)


def test_bl_ci_examples():
    bl, ci = bl_ci(0.75, 0.83, 0.84)
    assert bl == pytest.approx(0.08) and ci == pytest.approx(0.01)
    assert bl_ci(0.6, 0.6, 0.6) == (0.0, 0.0)
    with pytest.raises(StructuralError):
        bl_ci(0.5, 1.2, 0.7)


acc = st.floats(0.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(acc, acc, acc)
def test_bl_ci_identity(m, c, u):
    bl, ci = bl_ci(m, c, u)
    assert abs((bl + ci) - (u - m)) <= 4 * EPS


def test_accuracy_three_of_four():
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
    assert accuracy(probs, [0, 1, 0, 0]) == 0.75


def test_constant_utility_gives_uniform_loss():
    obs = [make_obs([make_route(ivtt=600 + 60 * a) for a in range(4)], chosen=k % 4) for k in range(8)]
    data = ChoiceData.from_observations(obs)
    model = build_model(DeepSpec(ModelKind.CNN2U, 4))
    loss, acc_ = evaluate(model, data)
    assert loss == pytest.approx(math.log(4), abs=1e-15)
    assert acc_ == 0.25


def test_mean_loss_equals_scaled_loglik(mnl_observations):
    data = ChoiceData.from_observations(mnl_observations)
    table = mnl_table()
    ll, _ = dcm_loglik(table, data.dense(), data.mask, data.chosen)
    loss, _ = dcm_metrics(table, data)
    assert abs(loss - (-ll / data.n_obs)) <= 1e-12 * abs(loss)


@pytest.fixture(scope="module")
def cv_data(mnl_observations):
    obs = mnl_observations[:1500]
    return attach_path_size(ChoiceData.from_observations(obs, with_context=True), obs)


def test_cross_validation_is_reproducible(cv_data):
    plan = FoldPlan.make(cv_data.n_obs, seed=1)
    sched = Schedule(epochs=4, lr=0.05, batch_size=256)
    a = cross_validate(DeepSpec(ModelKind.CNN2S, 97), cv_data, plan, sched)
    b = cross_validate(DeepSpec(ModelKind.CNN2S, 97), cv_data, plan, sched)
    assert a.to_dict() == b.to_dict()
    assert len(a.per_fold) == 5 and a.n_parameters == 4478


def test_cross_validation_dcm_and_constrained(cv_data):
    plan = FoldPlan.make(cv_data.n_obs, seed=2)
    mnl = cross_validate(DCMSpec(), cv_data, plan)
    psl = cross_validate(DCMSpec(DCMKind.PSL), cv_data, plan)
    assert mnl.model_id == "MNL" and mnl.n_parameters == 3 and psl.n_parameters == 4
    assert "fit" in mnl.extras and mnl.extras["fit"]["n_obs"] == cv_data.n_obs
    sources = [[-2.0 - 0.1 * f, -1.0, -3.0, -3.5] for f in range(5)]
    spec = DeepSpec(ModelKind.CNN2C, 97, frozen_policy_source=sources[0])
    sched = Schedule(epochs=2, lr=0.01)
    cons = cross_validate(spec, cv_data, plan, sched, sources=sources)
    assert cons.parameter_table["IVTT"] == pytest.approx(-2.2)
    assert cons.parameter_table.frozen.all() and np.isnan(cons.parameter_table.std_errors).all()
    same = cross_validate(spec, cv_data, plan, sched)
    assert same.parameter_table["IVTT"] == -2.0


def two_equal_routes(ivtt=600):
    return make_obs([make_route(ivtt=ivtt, links=(("a", "b"),)),
                     make_route(ivtt=ivtt, links=(("c", "d"),))], chosen=0)


def test_mnl_elasticity_closed_form_example():
    e = point_elasticity(mnl_table(), two_equal_routes(), "IVTT")
    assert e == pytest.approx(-1.2415, rel=1e-4)


def test_elasticity_below_floor_is_zero():
    assert point_elasticity(mnl_table(), two_equal_routes(ivtt=60), "IVTT") == 0.0


def test_single_alternative_elasticity_is_zero():
    obs = make_obs([make_route()], chosen=0)
    for attr in ("IVTT", "Fare", "WT", "NoT"):
        assert point_elasticity(mnl_table(), obs, attr) == 0.0


def test_negligible_probability_is_missing():
    obs = make_obs([make_route(ivtt=6000, links=(("a", "b"),)), make_route(ivtt=600, links=(("c", "d"),))])
    assert math.isnan(point_elasticity(mnl_table(ivtt=-50.0), obs, "IVTT"))


@settings(max_examples=60, deadline=None)
@given(st.floats(-4, -0.5), st.floats(200, 5000), st.floats(200, 5000), st.floats(0, 900),
       st.floats(0, 900))
def test_mnl_elasticity_matches_closed_form(beta, t0, t1, w0, w1):
    routes = [make_route(ivtt=t0, walk=w0, category=Category.BUS_BUS, links=(("a", "b"), ("b", "c"))),
              make_route(ivtt=t1, walk=w1, category=Category.BUS_BUS, links=(("d", "e"), ("e", "f")))]
    obs = make_obs(routes)
    table = mnl_table(ivtt=beta, wt=-2.0)
    u = np.log(np.array([t0, t1]) / 60) * beta + np.log((np.array([w0, w1]) + 1) / 60) * -2.0
    p = np.exp(u - u.max())
    p = p[0] / p.sum()
    assert point_elasticity(table, obs, "IVTT") == pytest.approx(beta * (1 - p), rel=1e-4, abs=1e-9)
    assert point_elasticity(table, obs, "WT") == pytest.approx(-2.0 * (1 - p) * w0 / (w0 + 1),
                                                               rel=1e-4, abs=1e-9)


def test_batched_elasticities_equal_point_elasticities(mnl_observations):
    sample = mnl_observations[:6]
    tiny = TransformerConfig(d_model=8, pool=8, n_heads=2, d_head=4, d_ff=8, n_layers=1, dtype="float32")
    tfm = build_model(DeepSpec(ModelKind.TFMU, 97, transformer=tiny, seed=5))
    tfm.calibrate(ChoiceData.from_observations(mnl_observations, with_context=True).rows)
    tfm.head.weight.value[:] = np.random.default_rng(1).normal(scale=0.3, size=tfm.head.weight.shape)
    for model in (mnl_table(), tfm):
        grid = np.array([300.0, 900.0, 2400.0])
        batched = chosen_elasticities(model, sample, "IVTT", grid, batch=4)
        for j, obs in enumerate(sample):
            for g, x in enumerate(grid):
                np.testing.assert_allclose(batched[j, g], point_elasticity(model, obs, "IVTT", x),
                                           rtol=1e-9, atol=1e-12)


def test_non_fastest_sample(mnl_observations):
    picks = non_fastest_sample(mnl_observations, n_od=10, seed=3)
    assert picks == non_fastest_sample(mnl_observations, n_od=10, seed=3)
    assert len(picks) == 10
    ods = [mnl_observations[k].od_pair for k in picks]
    assert len(set(ods)) == len(ods)
    for k in picks:
        o = mnl_observations[k]
        assert o.chosen != int(np.argmin([r.journey_seconds for r in o.alternatives]))
    everything = non_fastest_sample(mnl_observations, n_od=10_000)
    assert len(everything) <= 30


def test_elasticity_study_curves(mnl_observations):
    models = {"MNL": mnl_table()}
    curves, n = elasticity_study(models, mnl_observations, n_od=20, seed=1, grid_points=7)
    again, _ = elasticity_study(models, mnl_observations, n_od=20, seed=1, grid_points=7)
    assert curves_to_csv(curves) == curves_to_csv(again)
    assert n == 20 and [c.attribute for c in curves] == ["IVTT", "Fare", "WT", "NoT"]
    for c in curves:
        assert np.all(np.diff(c.grid) > 0) and len(c.grid) == 7
        finite = np.isfinite(c.std_band)
        assert np.all(c.std_band[finite] >= 0)
    ivtt = curves[0]
    above = ivtt.grid > 120
    assert np.all(ivtt.mean_elasticity[above] < 0)
    assert curves_to_csv(curves).splitlines()[0] == "attribute,x,mean,std,model_id"


def test_elasticity_curve_validation():
    with pytest.raises(StructuralError):
        ElasticityCurve("IVTT", [1.0, 1.0], [0, 0], [0, 0], "m")
    with pytest.raises(StructuralError):
        ElasticityCurve("Speed", [1.0, 2.0], [0, 0], [0, 0], "m")
