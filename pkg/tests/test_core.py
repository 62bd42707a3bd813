import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftest import landuse, make_obs, make_route
from routechoice.core import (
    MAX_ALTERNATIVES,
    CardType,
    Category,
    EvalReport,
    FeatureMatrix,
    NumericalError,
    ParameterTable,
    Route,
    StructuralError,
    pad_and_mask,
)


def test_category_transfer_counts():
    assert [c.transfers for c in Category] == [0, 1, 0, 1, 1, 2]
    assert Category.BUS_RAIL_BUS.legs == ("bus", "rail", "bus")


def test_card_type_order():
    assert [c.index for c in CardType] == [0, 1, 2]


def test_route_rejects_inconsistent_transfers():
    with pytest.raises(StructuralError):
        Route(600, 100, 0, 1, (("a", "b"),), (1.0,), Category.BUS, landuse(), landuse())


def test_route_rejects_negative_attributes():
    with pytest.raises(StructuralError):
        make_route(ivtt=-1)


def test_route_rejects_mismatched_link_costs():
    with pytest.raises(StructuralError):
        make_route(links=(("a", "b"), ("b", "c")), costs=(1.0,))


@pytest.mark.parametrize("bad", [np.ones(29) / 29, np.full(30, 0.1), -np.ones(30) / 30])
def test_route_rejects_bad_landuse(bad):
    with pytest.raises(StructuralError):
        Route(600, 100, 0, 0, (("a", "b"),), (1.0,), Category.BUS, bad, landuse())


def test_route_equality_and_replace():
    r = make_route()
    assert r == make_route()
    assert r.replace(ivtt_seconds=700) != r
    assert r.replace(ivtt_seconds=700).ivtt_seconds == 700
    assert make_route(ivtt=500, walk=120, category=Category.BUS_BUS).journey_seconds == 620


def test_landuse_is_read_only():
    r = make_route()
    with pytest.raises(ValueError):
        r.origin_landuse[0] = 1.0


def test_observation_validation():
    with pytest.raises(StructuralError):
        make_obs([make_route()], chosen=1)
    with pytest.raises(StructuralError):
        make_obs([], chosen=0)
    with pytest.raises(StructuralError):
        make_obs([make_route(ivtt=600 + k) for k in range(6)])


def test_pad_and_mask_shapes():
    obs = make_obs([make_route(), make_route(ivtt=900)], chosen=1)
    fm = pad_and_mask(obs, np.ones((2, 4)))
    assert fm.values.shape == (MAX_ALTERNATIVES, 4)
    assert fm.n_alternatives == 2 and fm.chosen == 1
    assert np.all(fm.values[2:] == 0)


def test_pad_and_mask_rejects_overflow():
    routes = [make_route(ivtt=600 + k, category=c) for c in Category for k in range(5)]
    obs = make_obs(routes)
    with pytest.raises(StructuralError):
        pad_and_mask(obs, np.ones((30, 4)), max_alternatives=29)


def test_feature_matrix_rejects_nonzero_padding():
    values = np.ones((3, 4))
    with pytest.raises(StructuralError):
        FeatureMatrix(values, np.array([True, True, False]), 0)


def test_parameter_table_t_stats():
    t = ParameterTable(["a", "b", "c"], [2.0, -1.0, 3.0], np.array([0.5, np.nan, 0.0]), frozen=[0, 1, 0])
    assert t.t_stats[0] == 4.0
    assert np.isnan(t.t_stats[1]) and np.isnan(t.t_stats[2])
    est, se, tstat, frozen = t.row("b")
    assert est == -1.0 and np.isnan(se) and np.isnan(tstat) and frozen


def test_parameter_table_length_mismatch():
    with pytest.raises(StructuralError):
        ParameterTable(["a", "b"], [1.0])


finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(finite, st.floats(1e-6, 1e3), st.booleans()), min_size=1, max_size=8))
def test_parameter_table_csv_and_dict_roundtrip(rows):
    # a CSV whose error column is entirely blank reads back as "no errors"
    assume(not all(f for *_, f in rows))
    names = [f"p{k}" for k in range(len(rows))]
    est, se, frozen = (list(c) for c in zip(*rows))
    se = [np.nan if f else s for s, f in zip(se, frozen)]
    t = ParameterTable(names, est, np.array(se), frozen=frozen)
    for back in (ParameterTable.from_csv(t.to_csv()), ParameterTable.from_dict(t.to_dict())):
        assert back.names == t.names
        np.testing.assert_array_equal(back.estimates, t.estimates)
        np.testing.assert_array_equal(back.std_errors, t.std_errors)
        np.testing.assert_array_equal(back.t_stats, t.t_stats)
        np.testing.assert_array_equal(back.frozen, t.frozen)


def test_eval_report_mean_std_and_roundtrip():
    folds = [{"train_loss": 1.0 + k, "valid_loss": 2.0, "train_acc": 0.5, "valid_acc": 0.25 * k}
             for k in range(4)]
    r = EvalReport("MNL", folds, ParameterTable(["a"], [1.0]), 3, {"fit": {"loglik": -1.0}})
    assert r.mean["train_loss"] == 2.5
    assert r.std["valid_loss"] == 0.0
    assert r.mean["valid_acc"] == pytest.approx(0.375)
    back = EvalReport.from_dict(r.to_dict())
    assert back.to_dict() == r.to_dict()


def test_numerical_error_carries_diagnostics():
    e = NumericalError("diverged", lr=0.1, epoch=3)
    assert e.diagnostics == {"lr": 0.1, "epoch": 3}
