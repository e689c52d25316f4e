"""
Tests for the closed-loop simulator, watermark design and Monte Carlo experiments.
"""

from dataclasses import replace

import numpy as np
import pytest

from flowtrace.attacks import fdi_bias_attack
from flowtrace.config import Settings
from flowtrace.detection import DetectorSpec
from flowtrace.engine import (
    build_policy,
    calibrate_watermark,
    cost_sensitivity,
    filter_schedule,
    optimal_watermark,
    run_experiment,
    simulate_trial,
    trial_seed,
)
from flowtrace.errors import PreconditionError, ValidationError
from flowtrace.estimation import design_lqg, lqg_cost, steady_state_filter
from flowtrace.infoflow import fdi_residue_bias, if_replay_exact, if_replay_watermark_bound, watermark_sensitivity

FAST = Settings(burn_in=100)


@pytest.fixture
def loop(double_integrator):
    model, channels, scenario = double_integrator
    law = design_lqg(model)
    return model, channels, scenario, law, steady_state_filter(model, law)


@pytest.fixture
def two_input_loop(model_factory):
    model = model_factory([[1.0, 0.1], [0.0, 1.0]], [[0.005, 0.0], [0.1, 0.05]], np.eye(2),
                          Q=0.1 * np.eye(2), R=0.1 * np.eye(2))
    law = design_lqg(model)
    return model, law, steady_state_filter(model, law)


# ---------------------------------------------------------------------------
# seeds and single trials
# ---------------------------------------------------------------------------

def test_trial_seed_is_deterministic():
    assert trial_seed(1, 0, 1) == trial_seed(1, 0, 1)
    seeds = {trial_seed(1, i, tag) for i in range(50) for tag in (0, 1)}
    assert len(seeds) == 100
    assert trial_seed(2, 0, 1) != trial_seed(1, 0, 1)
    assert 0 <= trial_seed(1, 3, 0) < 2 ** 64


def test_noise_free_loop_has_zero_residues(loop):
    model, channels, _, law, ssf = loop
    record = simulate_trial(model, law, ssf, None, np.array([[1.0]]), 50, 4, channels=channels, noise=False)
    assert np.array_equal(record.z, np.zeros((51, 2)))
    assert np.array_equal(record.chi2, np.zeros(51))
    assert np.array_equal(record.x[0], model.x0_mean)
    assert np.linalg.norm(record.x[-1]) < np.linalg.norm(record.x[0])


def test_simulate_trial_is_reproducible(loop):
    model, channels, _, law, ssf = loop
    first = simulate_trial(model, law, ssf, None, np.array([[0.5]]), 40, 123, channels=channels)
    second = simulate_trial(model, law, ssf, None, np.array([[0.5]]), 40, 123, channels=channels)
    other = simulate_trial(model, law, ssf, None, np.array([[0.5]]), 40, 124, channels=channels)
    for name in ("x", "u", "y", "z", "watermark"):
        assert np.array_equal(getattr(first, name), getattr(second, name))
    assert not np.array_equal(first.y, other.y)
    assert first.horizon == 40 and not first.diverged


def test_filter_schedule_modes(loop):
    model, _, _, _, ssf = loop
    steady = filter_schedule(model, ssf, 5)
    assert steady.K.shape == (5, 2, 2) and np.array_equal(steady.K[3], ssf.K)
    varying = filter_schedule(model, None, 5, "time_varying")
    assert varying.Pz_inv_sqrt.shape == (5, 2, 2)
    with pytest.raises(PreconditionError):
        filter_schedule(model, None, 5)
    with pytest.raises(ValidationError):
        filter_schedule(model, ssf, 5, "adaptive")


def test_residues_are_white(loop):
    model, channels, _, law, ssf = loop
    schedule = filter_schedule(model, ssf, 101, "time_varying")
    z = np.stack([
        simulate_trial(model, law, ssf, None, None, 100, trial_seed(9, i, 0), channels=channels, schedule=schedule).z
        for i in range(300)
    ])
    pooled = z.reshape(-1, 2)
    assert np.max(np.abs(pooled.T @ pooled / pooled.shape[0] - np.eye(2))) < 0.05
    lagged = np.einsum("tki,tkj->ij", z[:, 1:], z[:, :-1]) / (z.shape[0] * (z.shape[1] - 1))
    assert np.max(np.abs(lagged)) < 0.05


def test_fdi_residue_shift_matches_closed_form(loop):
    model, channels, _, law, ssf = loop
    T = 60
    policy = fdi_bias_attack(model, channels, 0.1, T)
    attacked = simulate_trial(model, law, ssf, policy, None, T, 77, channels=channels, filter_mode="time_varying")
    clean = simulate_trial(model, law, ssf, None, None, T, 77, channels=channels, filter_mode="time_varying")
    bias = fdi_residue_bias(model, channels, policy.ua_seq, policy.da_seq)
    assert np.allclose(attacked.z - clean.z, bias.delta_z, atol=1e-9)


# ---------------------------------------------------------------------------
# watermark design
# ---------------------------------------------------------------------------

def test_calibrate_watermark_hits_target(loop):
    model, _, _, law, ssf = loop
    j_star = lqg_cost(model, law, None, ssf)
    c = calibrate_watermark(model, law, ssf, np.eye(1), 0.4)
    assert (lqg_cost(model, law, c * np.eye(1), ssf) - j_star) / j_star == pytest.approx(0.4, rel=1e-6)
    half = calibrate_watermark(model, law, ssf, np.eye(1), 0.2)
    assert half == pytest.approx(c / 2.0, rel=1e-6)


def test_calibrate_watermark_flat_shape(loop):
    model, _, _, law, ssf = loop
    with pytest.raises(PreconditionError):
        calibrate_watermark(model, law, ssf, np.zeros((1, 1)), 0.4)


def test_cost_sensitivity_is_linear(two_input_loop):
    model, law, ssf = two_input_loop
    M = cost_sensitivity(model, law, ssf)
    assert np.allclose(M, M.T)
    Qw = np.array([[0.6, 0.2], [0.2, 0.3]])
    j_star = lqg_cost(model, law, None, ssf)
    assert np.trace(M @ Qw) == pytest.approx(lqg_cost(model, law, Qw, ssf) - j_star, rel=1e-8)


def test_optimal_watermark_beats_identity_shape(two_input_loop):
    model, law, ssf = two_input_loop
    cov, eps = optimal_watermark(model, law, ssf, 0.4)
    j_star = lqg_cost(model, law, None, ssf)
    assert (lqg_cost(model, law, cov, ssf) - j_star) / j_star == pytest.approx(0.4, rel=1e-8)
    assert if_replay_watermark_bound(ssf, law, model, cov) == pytest.approx(eps, rel=1e-8)
    assert np.linalg.matrix_rank(cov) == 1

    c = calibrate_watermark(model, law, ssf, np.eye(2), 0.4)
    assert eps >= if_replay_watermark_bound(ssf, law, model, c * np.eye(2)) * (1.0 - 1e-9)
    assert eps <= 0.4 * j_star * np.max(np.linalg.eigvalsh(watermark_sensitivity(ssf, law, model))) / np.min(
        np.linalg.eigvalsh(cost_sensitivity(model, law, ssf))
    )


# ---------------------------------------------------------------------------
# policies and experiments
# ---------------------------------------------------------------------------

def test_build_policy(double_integrator, channels_factory):
    model, channels, scenario = double_integrator
    fdi = build_policy(replace(scenario, attack_kind="fdi", attack_params={"sensor_bias": [0.0, 1.0]}, horizon=10),
                       model, channels)
    assert fdi.kind == "fdi" and np.array_equal(fdi.da_seq[4], [0.0, 1.0])
    replay = build_policy(replace(scenario, horizon=10), model, channels)
    assert replay.kind == "replay" and replay.n_rec == 11
    with pytest.raises(ValidationError):
        build_policy(replace(scenario, attack_params={"gain": 2.0}), model, channels)
    actuator_only = channels_factory(model, Ba=[[0.005], [0.1]])
    with pytest.raises(ValidationError):
        build_policy(replace(scenario, attack_kind="zero_dynamics", horizon=10), model, actuator_only)


@pytest.mark.parametrize(
    "kind, params, field",
    [
        ("fdi", {"epsilon": "tiny"}, "scenario.attack_kind.epsilon"),
        ("fdi", {"sensor_bias": ["a", 1.0]}, "scenario.attack_kind.sensor_bias"),
        ("fdi", {"da_seq": [[0.0, 1.0], [2.0]]}, "scenario.attack_kind.da_seq"),
        ("zero_dynamics", {"scale": "big"}, "scenario.attack_kind.scale"),
        ("replay", {"record_length": 10.5}, "scenario.attack_kind.record_length"),
    ],
)
def test_build_policy_malformed_params(double_integrator, kind, params, field):
    model, channels, scenario = double_integrator
    with pytest.raises(ValidationError) as e:
        build_policy(replace(scenario, attack_kind=kind, attack_params=params, horizon=10), model, channels)
    assert e.value.field == field


def test_ensembles_do_not_depend_on_trial_count_or_jobs(double_integrator):
    model, channels, scenario = double_integrator
    config = replace(scenario, attack_kind="none", horizon=20, trials=3, watermark_delta_j=None)
    three = run_experiment(config, model, channels, settings=FAST)
    one = run_experiment(replace(config, trials=1), model, channels, settings=FAST)
    threaded = run_experiment(config, model, channels, jobs=2, settings=FAST)
    assert np.array_equal(one.records[0].z, three.records[0].z)
    for left, right in zip(three.records, threaded.records):
        assert left.seed == right.seed
        assert np.array_equal(left.z, right.z)
    assert three.roc == []


def test_no_attack_experiment(double_integrator):
    model, channels, scenario = double_integrator
    config = replace(scenario, attack_kind="none", horizon=30, trials=100, watermark_delta_j=None,
                     watermark_cov=None, detector=DetectorSpec(kind="chi2", delta=0.05))
    summary = run_experiment(config, model, channels, scenario_id="none", settings=FAST)
    assert summary.report.exact_if == 0.0
    assert np.array_equal(summary.mean_perstep_kl, np.zeros(31))
    assert len(summary.roc) == 31
    assert all(r.beta >= 0.95 for r in summary.roc)
    assert summary.j_watermark == pytest.approx(summary.j_star)
    assert summary.roc_frame()["scenario_id"].unique().tolist() == ["none"]


def test_replay_experiment_without_watermark(double_integrator):
    model, channels, scenario = double_integrator
    config = replace(scenario, horizon=50, trials=20, watermark_delta_j=None, watermark_cov=None)
    summary = run_experiment(config, model, channels, settings=FAST)
    law = design_lqg(model)
    exact = if_replay_exact(steady_state_filter(model, law), law, model, 50)
    assert summary.report.exact_if == pytest.approx(exact.exact_if, rel=1e-9)
    assert summary.epsilon == 0.0
    assert summary.exact_if[50] < summary.exact_if[10]
    assert summary.metadata["filter_mode"] == "steady"
    frame = summary.ifcurve_frame()
    assert list(frame.columns) == ["k", "mean_perstep_kl", "cum_if_lowerbound", "exact_if", "epsilon_bound"]
    assert len(frame) == 51


def _quarter_means(alphas, k_min):
    return [chunk.mean() for chunk in np.array_split(np.asarray(alphas)[k_min:], 4)]


def test_replay_experiment_with_watermark(double_integrator):
    model, channels, scenario = double_integrator
    config = replace(scenario, horizon=150, trials=300)
    summary = run_experiment(config, model, channels, settings=FAST)
    assert summary.delta_j_ratio == pytest.approx(0.4, rel=0.01)
    assert summary.epsilon > 0.0
    assert summary.report.lower_bound_if >= 0.95 * summary.epsilon
    assert summary.exact_if is None
    assert summary.metadata["initial_error_cov"] == "steady_P"
    assert summary.metadata["np_statistic"] == "joint"
    alphas = np.array([r.alpha for r in summary.roc])
    assert alphas[0] > 0.0
    quarters = _quarter_means(alphas, config.detector.k_min)
    assert all(later <= earlier for earlier, later in zip(quarters, quarters[1:]))
    assert quarters[-1] < quarters[0]
    assert all(r.beta >= 0.95 for r in summary.roc)
    assert summary.decay_rate is not None and summary.decay_rate > 0.0


def test_steady_mode_h0_residues_start_white(loop):
    model, channels, _, law, ssf = loop
    schedule = filter_schedule(model, ssf, 3, "steady")
    z = np.stack([
        simulate_trial(model, law, ssf, None, np.array([[1.0]]), 2, trial_seed(21, i, 0),
                       channels=channels, schedule=schedule).z
        for i in range(20000)
    ])
    for k in range(3):
        cov = z[:, k].T @ z[:, k] / z.shape[0]
        assert np.max(np.abs(cov - np.eye(2))) < 0.05


def test_np_detector_beats_chi_squared_on_replay(double_integrator):
    model, channels, scenario = double_integrator
    config = replace(scenario, horizon=100, trials=300)
    alphas = {}
    for kind in ("np", "chi2"):
        detector = DetectorSpec(kind=kind, delta=0.05)
        summary = run_experiment(replace(config, detector=detector), model, channels, settings=FAST)
        assert all(r.beta >= 0.95 for r in summary.roc)
        alphas[kind] = np.array([r.alpha for r in summary.roc])
    k_min = config.detector.k_min
    assert alphas["np"][k_min:].mean() <= alphas["chi2"][k_min:].mean()
    assert alphas["np"][-10:].mean() < alphas["chi2"][-10:].mean()


@pytest.mark.slow
def test_replay_watermark_detection_full_scale(double_integrator):
    model, channels, scenario = double_integrator
    summary = run_experiment(replace(scenario, horizon=200, trials=1000), model, channels, jobs=4)
    assert summary.delta_j_ratio == pytest.approx(0.4, rel=0.01)
    assert summary.report.lower_bound_if >= 0.95 * summary.epsilon
    alphas = np.array([r.alpha for r in summary.roc])
    quarters = _quarter_means(alphas, scenario.detector.k_min)
    assert all(later <= earlier for earlier, later in zip(quarters, quarters[1:]))
    assert quarters[-1] < quarters[0]
    assert all(r.beta >= 0.95 for r in summary.roc)
    assert summary.decay_rate >= 0.5 * summary.epsilon


@pytest.mark.slow
def test_fdi_decay_rate_full_scale(double_integrator):
    model, channels, scenario = double_integrator
    config = replace(scenario, attack_kind="fdi", attack_params={"epsilon": 0.1}, horizon=200, trials=2000,
                     watermark_delta_j=None, watermark_cov=None)
    summary = run_experiment(config, model, channels, jobs=4)
    assert summary.report.exact_if == pytest.approx(0.1, abs=1e-10)
    assert 0.05 <= summary.decay_rate <= 0.2


def test_fdi_experiment(double_integrator):
    model, channels, scenario = double_integrator
    config = replace(scenario, attack_kind="fdi", attack_params={"epsilon": 0.1}, horizon=40, trials=200,
                     watermark_delta_j=None, watermark_cov=None)
    summary = run_experiment(config, model, channels, settings=FAST)
    assert summary.report.exact_if == pytest.approx(0.1, rel=1e-9)
    assert np.allclose(summary.exact_if, 0.1, rtol=1e-9)
    assert all(r.beta >= 0.95 for r in summary.roc)
    assert summary.metadata["filter_mode"] == "time_varying"


def test_zero_dynamics_experiment(double_integrator):
    model, channels, scenario = double_integrator
    config = replace(scenario, attack_kind="zero_dynamics", attack_params={"scale": 3.0}, horizon=20, trials=5,
                     watermark_delta_j=None, watermark_cov=None)
    summary = run_experiment(config, model, channels, settings=FAST)
    assert summary.report.exact_if < 1e-10
    assert summary.diverged == 0
