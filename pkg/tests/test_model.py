import math

import numpy as np
import pytest

import score_mewma as sm
from score_mewma.errors import ModelConfigError

from conftest import intercept_only_model, oracle_enumerate, two_node_model


def test_mean_response_basics():
    assert sm.mean_response(0.0) == 0.5
    # frozen from 1 / (1 + exp(1.724))
    assert abs(sm.mean_response(-1.724) - 0.151356655549879) < 1e-12
    # saturation without overflow; 1 - 2e-22 rounds to 1.0 in float64
    hi = sm.mean_response(50.0)
    assert np.isfinite(hi) and 1.0 - 1e-15 <= hi <= 1.0
    lo = sm.mean_response(-800.0)
    assert np.isfinite(lo) and 0.0 <= lo < 1e-300


def test_mean_response_monotone_and_symmetric():
    grid = np.linspace(-30, 30, 301)
    vals = sm.mean_response(grid)
    assert (np.diff(vals) > 0).all()
    np.testing.assert_allclose(sm.mean_response(-grid), 1.0 - vals, atol=1e-12)


def test_default_delivery_model_values(delivery):
    p = delivery.params
    assert len(p) == 17
    assert p["beta24"] == 1.140
    assert p["gamma34"] == 1.267
    assert p["beta11"] == -1.724
    assert p["delta12"] == 1.682
    y4 = delivery.spec.node("Y4")
    assert {v for v, _ in y4.outcome_parents} == {"Y2", "Y3"}
    # intercepts are flagged as package defaults, not source estimates
    assert "intercepts" in delivery.metadata["value_sources"]


def test_param_vector_lookup_consistency(delivery):
    p = delivery.params
    total = 0
    for node in delivery.spec.nodes:
        start, stop = p.block_map[node.id]
        names = node.coef_names()
        assert stop - start == len(names)
        for offset, name in enumerate(names):
            assert p.index_map[name] == start + offset
            assert p[name] == p.values[start + offset]
        total += len(names)
    assert total == len(p)


def test_linear_predictor_intercept_only(delivery):
    record = sm.PatientRecord(
        x=np.zeros(2, dtype=np.int8), z=np.zeros(2, dtype=np.int8), y=np.zeros(4, dtype=np.int8)
    )
    for node in delivery.spec.nodes:
        eta = sm.linear_predictor(delivery.spec, delivery.params, node.id, record)
        assert eta == delivery.params[node.intercept_name]


def test_linear_predictor_sum(delivery):
    # Y3 with x2 = y2 = z1 = z2 = 1 and a zero intercept adds the four slopes
    params = delivery.params.replace({"alpha3": 0.0})
    record = sm.PatientRecord(
        x=np.array([0, 1], dtype=np.int8),
        z=np.array([1, 1], dtype=np.int8),
        y=np.array([0, 1, 0, 0], dtype=np.int8),
    )
    eta = sm.linear_predictor(delivery.spec, params, "Y3", record)
    assert abs(eta - 2.164) < 1e-12


def test_linear_predictor_linearity(delivery):
    rng = np.random.default_rng(0)
    record = sm.PatientRecord(
        x=rng.integers(0, 2, 2).astype(np.int8),
        z=rng.integers(0, 2, 2).astype(np.int8),
        y=rng.integers(0, 2, 4).astype(np.int8),
    )
    params = delivery.params.replace({n.intercept_name: 0.0 for n in delivery.spec.nodes})
    doubled = params.with_values(2.0 * params.values)
    for node in delivery.spec.node_ids:
        eta = sm.linear_predictor(delivery.spec, params, node, record)
        assert abs(sm.linear_predictor(delivery.spec, doubled, node, record) - 2.0 * eta) < 1e-12


def test_linear_predictor_missing_parent(delivery):
    record = sm.PatientRecord(
        x=np.zeros(2, dtype=np.int8),
        z=np.zeros(2, dtype=np.int8),
        y=np.array([0, -1, 0, 0], dtype=np.int8),
    )
    with pytest.raises(ModelConfigError, match="Y2"):
        sm.linear_predictor(delivery.spec, delivery.params, "Y3", record)


def test_factorization_sums_to_one(delivery):
    data, probs = sm.enumerate_patients(delivery.spec, delivery.params, delivery.covariates)
    assert abs(probs.sum() - 1.0) < 1e-12
    # conditional factorization for a fixed covariate configuration
    mask = (data.x[:, 0] == 1) & (data.x[:, 1] == 0) & (data.z[:, 0] == 0) & (data.z[:, 1] == 1)
    px = delivery.covariates.prevalence
    joint_xz = px["X1"] * (1 - px["X2"]) * (1 - px["Z1"]) * px["Z2"]
    assert abs(probs[mask].sum() - joint_xz) < 1e-12


def test_enumerate_matches_loop_oracle(delivery):
    data, probs = sm.enumerate_patients(delivery.spec, delivery.params, delivery.covariates)
    records, oracle_probs = oracle_enumerate(delivery.spec, delivery.params, delivery.covariates)
    lookup = {
        (tuple(r.x), tuple(r.z), tuple(r.y)): p for r, p in zip(records, oracle_probs)
    }
    for i in range(len(data)):
        key = (tuple(data.x[i]), tuple(data.z[i]), tuple(data.y[i]))
        assert abs(probs[i] - lookup[key]) < 1e-14


def test_roundtrip_bit_exact(delivery):
    text = sm.serialize_model_spec(delivery)
    again = sm.parse_model_spec(text)
    assert sm.serialize_model_spec(again) == text
    assert again.spec == delivery.spec
    np.testing.assert_array_equal(again.params.values, delivery.params.values)
    assert again.covariates.prevalence == delivery.covariates.prevalence
    assert sm.model_hash(again) == sm.model_hash(delivery)


def test_parse_reports_syntax_position():
    with pytest.raises(ModelConfigError, match=r"line \d+, column \d+"):
        sm.parse_model_spec('{"nodes": [,]}')


def test_parse_rejects_unknown_fields():
    doc = sm.model_to_dict(two_node_model())
    doc["extra"] = 1
    with pytest.raises(ModelConfigError, match="extra"):
        sm.model_from_dict(doc)
    doc = sm.model_to_dict(two_node_model())
    doc["nodes"][0]["mystery"] = 2
    with pytest.raises(ModelConfigError, match="mystery"):
        sm.model_from_dict(doc)


def test_outcome_parent_order_violation_is_cycle_error():
    doc = sm.model_to_dict(two_node_model())
    # Y1 listing the later node Y2 as a parent breaks the temporal order
    doc["nodes"][0]["outcome_parents"] = [{"var": "Y2", "coef_name": "g21", "value": 0.1}]
    with pytest.raises(ModelConfigError, match="temporal order"):
        sm.model_from_dict(doc)


def test_self_parent_rejected():
    doc = sm.model_to_dict(two_node_model())
    doc["nodes"][0]["outcome_parents"] = [{"var": "Y1", "coef_name": "g11", "value": 0.1}]
    with pytest.raises(ModelConfigError, match="itself"):
        sm.model_from_dict(doc)


def test_duplicate_coefficient_name_rejected():
    doc = sm.model_to_dict(two_node_model())
    doc["nodes"][1]["risk_parents"][0]["coef_name"] = "b11"
    with pytest.raises(ModelConfigError, match="duplicate coefficient"):
        sm.model_from_dict(doc)


def test_undeclared_covariate_rejected():
    doc = sm.model_to_dict(two_node_model())
    doc["nodes"][0]["process_parents"][0]["var"] = "X9"
    with pytest.raises(ModelConfigError, match="X9"):
        sm.model_from_dict(doc)


def test_only_logit_link_supported():
    doc = sm.model_to_dict(two_node_model())
    doc["nodes"][0]["link"] = "probit"
    with pytest.raises(ModelConfigError, match="probit"):
        sm.model_from_dict(doc)


def test_prevalence_bounds():
    with pytest.raises(ModelConfigError, match="prevalence"):
        sm.CovariateModel({"X1": 1.4})


def test_intercept_only_model_paths():
    m = intercept_only_model(alpha=math.log(0.25 / 0.75))
    data, probs = sm.enumerate_patients(m.spec, m.params, m.covariates)
    assert len(data) == 2
    assert abs(probs[data.y[:, 0] == 1][0] - 0.25) < 1e-12


def test_patient_record_validation():
    with pytest.raises(ModelConfigError):
        sm.PatientData(x=np.zeros((2, 1)), z=np.zeros((3, 1)), y=np.zeros((2, 1)))
