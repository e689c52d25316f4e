"""
Tests for model validation, attack channels and model files.
"""

import io
import json
from dataclasses import replace

import numpy as np
import pytest

from flowtrace.detection import DetectorSpec
from flowtrace.errors import (
    ChannelError,
    DimensionMismatchError,
    ModelParseError,
    NonPSDError,
    SingularMatrixError,
    ValidationError,
)
from flowtrace.model import (
    AttackChannels,
    ScenarioConfig,
    SystemModel,
    build_da,
    load_model,
    model_document,
    parse_model,
    save_model,
    validate_model,
    validate_scenario,
)


def _document(**overrides):
    doc = {
        "system": {
            "A": [[0.9]],
            "B": [[1.0]],
            "C": [[1.0]],
            "Q": [[1.0]],
            "R": [[1.0]],
            "x0_mean": [0.0],
            "x0_cov": [[1.0]],
        }
    }
    for key, value in overrides.items():
        block, _, name = key.partition("__")
        doc.setdefault(block, {})[name] = value
    return json.dumps(doc, indent=2)


def test_scalar_model_accepted(model_factory):
    model = model_factory([[0.9]], [[1.0]], [[1.0]])
    assert (model.n, model.p, model.m) == (1, 1, 1)
    assert not model.A.flags.writeable


def test_singular_r_rejected(model_factory):
    with pytest.raises(SingularMatrixError):
        model_factory([[0.9]], [[1.0]], [[1.0]], R=[[0.0]])


def test_non_psd_q_rejected(model_factory):
    with pytest.raises(NonPSDError) as e:
        model_factory(np.eye(2), np.ones((2, 1)), np.eye(2), Q=[[1.0, 2.0], [2.0, 1.0]])
    assert e.value.field == "Q"


def test_asymmetric_covariance_rejected(model_factory):
    with pytest.raises(NonPSDError):
        model_factory(np.eye(2), np.ones((2, 1)), np.eye(2), x0_cov=[[1.0, 0.5], [0.0, 1.0]])


@pytest.mark.parametrize(
    "m,sensors,expected",
    [
        (3, (2,), [[0.0], [1.0], [0.0]]),
        (2, (1, 2), [[1.0, 0.0], [0.0, 1.0]]),
        (2, (), np.zeros((2, 0))),
    ],
)
def test_build_da(m, sensors, expected):
    Da = build_da(AttackChannels(Ba=np.zeros((1, 0)), sensors=sensors), m)
    assert np.array_equal(Da, np.asarray(expected).reshape(m, len(sensors)))


def test_build_da_out_of_range():
    with pytest.raises(ChannelError):
        build_da(AttackChannels(Ba=np.zeros((1, 0)), sensors=(3,)), 2)


def test_channels_validation(model_factory, channels_factory):
    model = model_factory(np.eye(2), np.ones((2, 1)), np.eye(2))
    with pytest.raises(ChannelError):
        channels_factory(model, Ba=[[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(ChannelError):
        channels_factory(model, sensors=(2, 1))
    with pytest.raises(ChannelError):
        channels_factory(model, sensors=(1, 1))
    channels = channels_factory(model, Ba=[[1.0], [0.0]], sensors=(2,))
    assert (channels.p_prime, channels.m_prime) == (1, 1)


def test_fixture_dimensions(double_integrator):
    model, channels, scenario = double_integrator
    assert (model.n, model.p, model.m) == (2, 1, 2)
    assert channels.sensors == (1, 2)
    assert channels.p_prime == 1
    assert scenario.attack_kind == "replay"
    assert scenario.watermark_delta_j == pytest.approx(0.4)
    assert scenario.detector.kind == "neyman_pearson"


def test_empty_document():
    with pytest.raises(ModelParseError) as e:
        parse_model("   \n")
    assert e.value.line == 1


def test_json_syntax_error_reports_line():
    with pytest.raises(ModelParseError) as e:
        parse_model('{\n  "system": ,\n}')
    assert e.value.line == 2
    assert str(e.value).startswith("line 2:")


def test_wrong_shape_names_field():
    with pytest.raises(DimensionMismatchError) as e:
        parse_model(_document(system__A=[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    assert e.value.field == "A"


def test_unknown_keys_rejected():
    with pytest.raises(ModelParseError) as e:
        parse_model(_document(scenario__horizonn=10))
    assert e.value.field == "scenario.horizonn"


def test_missing_system_field():
    doc = json.loads(_document())
    del doc["system"]["R"]
    with pytest.raises(ModelParseError) as e:
        parse_model(json.dumps(doc))
    assert e.value.field == "system.R"


def test_defaults_when_blocks_absent():
    model, channels, scenario = parse_model(_document())
    assert channels.p_prime == 0 and channels.m_prime == 0
    assert scenario == ScenarioConfig()


def test_attack_kind_object_form():
    _, _, scenario = parse_model(
        _document(attack__Ba=[[1.0]], attack__sensors=[1], scenario__attack_kind={"kind": "fdi", "epsilon": 0.1})
    )
    assert scenario.attack_kind == "fdi"
    assert scenario.attack_params == {"epsilon": 0.1}


def test_unknown_attack_kind():
    with pytest.raises(ValidationError):
        parse_model(_document(scenario__attack_kind="dos"))


def test_detector_block():
    _, _, scenario = parse_model(_document(scenario__detector={"kind": "chi2", "window": 4, "threshold": 9.0}))
    assert scenario.detector == DetectorSpec(kind="chi_squared", window=4, threshold=9.0)
    assert scenario.detector.delta is None


def test_scenario_validation(double_integrator):
    model, _, scenario = double_integrator
    with pytest.raises(ValidationError):
        validate_scenario(replace(scenario, horizon=0), model)
    with pytest.raises(ValidationError):
        validate_scenario(replace(scenario, watermark_delta_j=-0.1), model)
    with pytest.raises(DimensionMismatchError):
        validate_scenario(replace(scenario, watermark_cov=np.eye(2)), model)


def test_save_and_reload(tmp_path, double_integrator):
    model, channels, scenario = double_integrator
    path = tmp_path / "copy.model"
    text = save_model(model, channels, scenario, path)
    assert path.read_text(encoding="utf-8") == text
    assert text.endswith("\n")
    assert load_model(path) == (model, channels, scenario)
    assert load_model(io.StringIO(text))[0] == model
    assert not list(tmp_path.glob(".*.tmp"))


def test_document_keeps_attack_params(double_integrator):
    model, channels, scenario = double_integrator
    doc = model_document(model, channels, replace(scenario, attack_kind="fdi", attack_params={"epsilon": 0.1}))
    assert doc["scenario"]["attack_kind"] == {"kind": "fdi", "epsilon": 0.1}


@pytest.mark.parametrize(
    "overrides, path",
    [
        ({"system__x0_mean": ["a"]}, "system.x0_mean"),
        ({"system__A": [[0.9], [0.1, 0.2]]}, "system.A"),
        ({"attack__Ba": [[1.0], [1.0, 2.0]], "attack__sensors": [1]}, "attack.Ba"),
        ({"scenario__watermark_cov": "big"}, "scenario.watermark_cov"),
        ({"scenario__horizon": "ten"}, "scenario.horizon"),
        ({"scenario__horizon": 1.5}, "scenario.horizon"),
        ({"scenario__trials": True}, "scenario.trials"),
        ({"scenario__seed": [1]}, "scenario.seed"),
        ({"scenario__watermark_delta_j": "lots"}, "scenario.watermark_delta_j"),
        ({"scenario__detector": {"window": "x"}}, "scenario.detector.window"),
        ({"scenario__detector": {"delta": "small"}}, "scenario.detector.delta"),
        ({"scenario__detector": {"k_min": 2.5}}, "scenario.detector.k_min"),
        ({"scenario__detector": {"kind": ["np"]}}, "scenario.detector.kind"),
    ],
)
def test_malformed_values_name_field(overrides, path):
    with pytest.raises(ModelParseError) as e:
        parse_model(_document(**overrides))
    assert e.value.field == path


def test_integral_floats_accepted():
    _, _, scenario = parse_model(_document(scenario__horizon=20.0, scenario__detector={"window": 2.0}))
    assert scenario.horizon == 20 and isinstance(scenario.horizon, int)
    assert scenario.detector.window == 2


def test_scenario_rejects_fractional_counts(double_integrator):
    model, _, scenario = double_integrator
    with pytest.raises(ValidationError):
        validate_scenario(replace(scenario, horizon=1.5), model)
    with pytest.raises(ValidationError):
        validate_scenario(replace(scenario, trials="100"), model)


def test_validate_model_is_idempotent(double_integrator):
    model, _, _ = double_integrator
    rng = np.random.default_rng(11)
    S = rng.standard_normal((3, 3))
    raw = SystemModel(
        A=rng.standard_normal((3, 3)),
        B=rng.standard_normal((3, 2)),
        C=rng.standard_normal((2, 3)),
        Q=S @ S.T + 1e-12 * np.triu(np.ones((3, 3)), 1),
        R=np.eye(2),
        x0_mean=np.zeros(3),
        x0_cov=np.eye(3),
    )
    for candidate in (model, raw):
        once = validate_model(candidate)
        assert np.array_equal(once.Q, once.Q.T)
        assert validate_model(once) == once


def test_build_da_random_channel_sets():
    rng = np.random.default_rng(5)
    for _ in range(50):
        m = int(rng.integers(1, 8))
        size = int(rng.integers(0, m + 1))
        sensors = tuple(int(s) for s in np.sort(rng.choice(np.arange(1, m + 1), size=size, replace=False)))
        Da = build_da(AttackChannels(Ba=np.zeros((1, 0)), sensors=sensors), m)
        assert Da.shape == (m, size)
        assert np.all(Da.sum(axis=0) == 1.0)
        assert np.all(Da.sum(axis=1) <= 1.0)
        assert set(np.unique(Da)) <= {0.0, 1.0}
