import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_obs, make_route
from routechoice.core import CardType, Category, StructuralError
from routechoice.engine import masked_softmax_xent
from routechoice.features import (
    ChoiceData,
    Expansion,
    ExpansionSpec,
    TransformSpec,
    assemble_features,
    column_sources,
    expand,
    expand_array,
    expand_joint,
    expanded_width,
    route_features,
    transform_route,
    transform_values,
)


def oracle_transform(ivtt_s, fare_c, walk_s, n_transfers):
    return [
        math.log(max(ivtt_s / 60.0, 2.0)),
        math.log(max(fare_c / 100.0, 0.92)),
        math.log((walk_s + 1.0) / 60.0),
        math.log(n_transfers + 1.0),
    ]


def test_transform_examples():
    x = transform_values(60, 80, 0, 0)
    assert x[0] == pytest.approx(0.6931, abs=1e-4)
    assert x[1] == pytest.approx(-0.0834, abs=1e-4)
    assert x[3] == 0.0
    assert x[2] == pytest.approx(math.log(1 / 60))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 7200), st.integers(0, 500), st.integers(0, 2700), st.integers(0, 5))
def test_transform_matches_oracle(ivtt, fare, walk, k):
    np.testing.assert_allclose(transform_values(ivtt, fare, walk, k), oracle_transform(ivtt, fare, walk, k),
                               rtol=0, atol=1e-12)


def test_transform_route_uses_route_fields():
    r = make_route(ivtt=1500, fare=183, walk=240, category=Category.BUS_RAIL)
    np.testing.assert_allclose(transform_route(r), oracle_transform(1500, 183, 240, 1), atol=1e-12)


@pytest.mark.parametrize("field", ["ivtt_floor_minutes", "fare_floor_dollars", "walk_offset_seconds",
                                   "transfers_offset"])
def test_transform_spec_requires_positive(field):
    with pytest.raises(StructuralError):
        TransformSpec(**{field: 0.0})


def test_feature_dims_and_card_one_hot():
    obs = make_obs([make_route(), make_route(ivtt=900, category=Category.BUS_BUS)], card=CardType.ADULT)
    assert assemble_features(obs, with_context=False).feature_dim == 4
    fm = assemble_features(obs, with_context=True)
    assert fm.feature_dim == 97
    assert fm.columns[:4] == ("IVTT", "Fare", "WT", "NoT")
    for row in fm.values[: fm.n_alternatives]:
        np.testing.assert_array_equal(row[4:7], [0, 1, 0])
    r = obs.alternatives[1]
    np.testing.assert_array_equal(fm.values[1, 7:37], r.origin_landuse)
    np.testing.assert_array_equal(fm.values[1, 37:67], r.dest_landuse)
    np.testing.assert_array_equal(fm.values[1, 67:97], r.transfer_landuse)


def oracle_joint(x):
    d = len(x)
    out = list(x)
    for i in range(d):
        for j in range(i, d):
            out.append(x[i] * x[j])
    return np.array(out)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 9), elements=st.floats(-10, 10)))
def test_expand_joint_matches_loop_oracle(x):
    np.testing.assert_array_equal(expand_joint(x), oracle_joint(x))


@pytest.mark.parametrize("d,width", [(4, 14), (97, 4850), (93, 4464)])
def test_expanded_widths(d, width):
    assert expanded_width(d) == width
    assert expand_joint(np.ones((2, d))).shape == (2, width)


def test_separated_width_and_no_cross_terms():
    names = [f"p{k}" for k in range(4)] + [f"o{k}" for k in range(93)]
    values, cols, pdim = expand_array(np.ones((1, 97)), Expansion.SEPARATED, 4, names)
    assert values.shape[1] == 4478 and pdim == 14
    for src in column_sources(cols):
        kinds = {n[0] for n in src}
        assert len(kinds) == 1
    _, cols_joint, _ = expand_array(np.ones((1, 97)), Expansion.JOINT, 4, names)
    assert any(len({n[0] for n in s}) == 2 for s in column_sources(cols_joint))


def test_expand_keeps_padding_zero():
    obs = make_obs([make_route(), make_route(ivtt=800)])
    fm = expand(assemble_features(obs, with_context=True), ExpansionSpec(Expansion.SEPARATED))
    assert fm.feature_dim == 4478 and fm.policy_dim == 14
    assert np.all(fm.values[2:] == 0)
    assert fm.columns[4] == "IVTT×IVTT"


def test_expansion_budget():
    with pytest.raises(StructuralError):
        expand_array(np.ones((1, 200)), Expansion.JOINT)


def test_choice_data_matches_per_observation_assembly(mnl_observations):
    obs = mnl_observations[:200]
    for ctx in (False, True):
        data = ChoiceData.from_observations(obs, with_context=ctx)
        dense = data.dense()
        for k in range(0, 200, 17):
            fm = assemble_features(obs[k], with_context=ctx)
            n = fm.n_alternatives
            np.testing.assert_array_equal(dense[k, :n], fm.values[:n])
            assert data.mask[k].sum() == n
            assert data.chosen[k] == obs[k].chosen
        assert len(np.unique(data.rows, axis=0)) == len(data.rows)


def test_policy_only_equals_four_feature_data(mnl_observations):
    obs = mnl_observations[:300]
    a = ChoiceData.from_observations(obs, with_context=True).policy_only()
    b = ChoiceData.from_observations(obs, with_context=False)
    np.testing.assert_array_equal(a.dense(), b.dense())


def test_subset_and_compression_preserve_likelihood(mnl_observations):
    data = ChoiceData.from_observations(mnl_observations[:500], with_context=True)
    w = np.random.default_rng(0).normal(size=data.feature_dim)

    def mean_loss(d):
        u = np.where(d.mask, (d.rows @ w)[np.maximum(d.index, 0)], 0.0)
        losses, _ = masked_softmax_xent(u, d.mask, d.chosen)
        weights = np.ones(d.n_obs) if d.weights is None else d.weights
        return np.dot(weights, losses) / weights.sum()

    comp = data.compressed()
    assert comp.n_obs < data.n_obs and comp.total_weight == data.n_obs
    assert mean_loss(comp) == pytest.approx(mean_loss(data), rel=1e-12)
    idx = np.arange(0, 500, 3)
    sub = data.subset(idx)
    np.testing.assert_array_equal(sub.dense(), data.dense()[idx])


def test_route_features_context_flag():
    r = make_route(category=Category.RAIL)
    assert route_features(r, CardType.SENIOR, with_context=False).shape == (4,)
    np.testing.assert_array_equal(route_features(r, CardType.SENIOR)[4:7], [0, 0, 1])
