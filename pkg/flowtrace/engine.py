"""
flowtrace experiment engine
闭环仿真器与带种子的蒙特卡洛实验（LQG + 水印 + 攻击 + 检测器）
"""

import asyncio
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import linalg as la
from scipy import optimize
from tqdm import tqdm

from .attacks import (
    AttackPolicy,
    ReplayBuffer,
    ReplayPolicy,
    constant_fdi_policy,
    fdi_bias_attack,
    fdi_policy,
    no_attack,
    replay_policy,
    zero_dynamics_policy,
)
from .config import DEFAULT_SETTINGS, Settings
from .detection import (
    DetectorSpec,
    RocRecord,
    as_float,
    as_integer,
    chi_squared_paths,
    decay_rate,
    estimate_roc,
    np_llr_joint_paths,
    np_llr_paths,
    roc_frame,
)
from .errors import NumericError, PreconditionError, ValidationError
from .estimation import (
    FeedbackLaw,
    SteadyStateFilter,
    covariance_schedule,
    design_lqg,
    lqg_cost,
    spectral_radius,
    steady_state_filter,
)
from .infoflow import (
    InfoFlowReport,
    fdi_residue_bias,
    if_fdi,
    if_replay_exact,
    if_replay_watermark_bound,
    if_replay_watermark_perstep,
    info_flow_report,
    replay_if_curve,
    replay_residue_covariances,
    replay_residue_joint_covariance,
    replay_residue_means,
    watermark_sensitivity,
)
from .model import AttackChannels, ScenarioConfig, SystemModel, build_da, no_channels
from .stealth import synthesize_zero_flow_attack

logger = logging.getLogger(__name__)

H0_TAG = 0
H1_TAG = 1


@dataclass(frozen=True, eq=False)
class ReplaySegment:
    recorded_y: np.ndarray
    recorded_z: np.ndarray
    x_pred_start: np.ndarray  # recording run's x̂ at the first recorded sample


@dataclass(frozen=True, eq=False)
class TrialRecord:
    seed: int
    x: np.ndarray
    x_pred: np.ndarray
    u: np.ndarray
    y: np.ndarray  # as seen by the defender
    y_live: np.ndarray
    z: np.ndarray
    watermark: np.ndarray
    ua: np.ndarray
    da: np.ndarray
    chi2: np.ndarray
    diverged: bool = False
    replay: Optional[ReplaySegment] = None

    @property
    def horizon(self) -> int:
        return self.x.shape[0] - 1


@dataclass(frozen=True, eq=False)
class FilterSchedule:
    K: np.ndarray  # (steps, n, m)
    Pz_inv_sqrt: np.ndarray  # (steps, m, m)
    mode: str


@dataclass(eq=False)
class ExperimentSummary:
    scenario_id: str
    attack_kind: str
    horizon: int
    trials: int
    seed: int
    mean_perstep_kl: np.ndarray
    cum_if_lowerbound: np.ndarray
    exact_if: Optional[np.ndarray]
    report: InfoFlowReport
    epsilon: Optional[float]
    roc: List[RocRecord]
    decay_rate: Optional[float]
    detector: DetectorSpec
    j_star: float
    j_watermark: float
    watermark_cov: Optional[np.ndarray] = None
    watermark_multiplier: Optional[float] = None
    diverged: int = 0
    records: List[TrialRecord] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def delta_j_ratio(self) -> float:
        return (self.j_watermark - self.j_star) / self.j_star

    def ifcurve_frame(self) -> pd.DataFrame:
        steps = self.horizon + 1
        return pd.DataFrame(
            {
                "k": np.arange(steps),
                "mean_perstep_kl": self.mean_perstep_kl,
                "cum_if_lowerbound": self.cum_if_lowerbound,
                "exact_if": self.exact_if if self.exact_if is not None else np.full(steps, np.nan),
                "epsilon_bound": np.full(steps, np.nan if self.epsilon is None else self.epsilon),
            }
        )

    def roc_frame(self) -> pd.DataFrame:
        return roc_frame(self.roc, self.detector.kind, self.scenario_id, self.seed)


# ---------------------------------------------------------------------------
# seeds and noise
# ---------------------------------------------------------------------------

def trial_seed(master_seed: int, trial_index: int, ensemble_tag: int) -> int:
    """(master_seed, trial_index, ensemble_tag) 的64位混合"""
    sequence = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(ensemble_tag), int(trial_index)))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def _gaussian(rng: np.random.Generator, cov: np.ndarray, steps: int) -> np.ndarray:
    dim = cov.shape[0]
    if dim == 0 or not np.any(cov):
        return np.zeros((steps, dim))
    return rng.multivariate_normal(np.zeros(dim), cov, size=steps, method="eigh")


def _draw(
    model: SystemModel,
    sequence: np.random.SeedSequence,
    steps: int,
    watermark_cov: Optional[np.ndarray],
    noise: bool,
    x0_cov: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """x0, w, v, Δu 各自独立的随机流；x0_cov 缺省为模型的 P₀|₋₁"""
    if not noise:
        return np.array(model.x0_mean), np.zeros((steps, model.n)), np.zeros((steps, model.m)), np.zeros((steps, model.p))
    g_x0, g_w, g_v, g_wm = (np.random.default_rng(s) for s in sequence.spawn(4))
    x0 = model.x0_mean + _gaussian(g_x0, model.x0_cov if x0_cov is None else x0_cov, 1)[0]
    w = _gaussian(g_w, model.Q, steps)
    v = _gaussian(g_v, model.R, steps)
    wm = np.zeros((steps, model.p)) if watermark_cov is None else _gaussian(g_wm, watermark_cov, steps)
    return x0, w, v, wm


def filter_schedule(
    model: SystemModel, ssf: Optional[SteadyStateFilter], steps: int, mode: str = "steady"
) -> FilterSchedule:
    if mode == "steady":
        if ssf is None:
            raise PreconditionError("steady filter mode needs a SteadyStateFilter")
        K = np.broadcast_to(ssf.K, (steps,) + ssf.K.shape)
        Pz_is = np.broadcast_to(ssf.Pz_inv_sqrt, (steps, model.m, model.m))
        return FilterSchedule(K=K, Pz_inv_sqrt=Pz_is, mode=mode)
    if mode == "time_varying":
        _, K, Pz_is = covariance_schedule(model, steps - 1)
        return FilterSchedule(K=K, Pz_inv_sqrt=Pz_is, mode=mode)
    raise ValidationError(f"unknown filter mode '{mode}'")


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------

def _vector(value, size: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(-1)
    return np.zeros(size) if arr.size == 0 and size else arr


def _run_loop(
    model: SystemModel,
    law: Optional[FeedbackLaw],
    schedule: FilterSchedule,
    policy: AttackPolicy,
    channels: AttackChannels,
    x0: np.ndarray,
    w: np.ndarray,
    v: np.ndarray,
    wm: np.ndarray,
    steps: int,
    limit: float,
) -> Dict[str, Any]:
    A, B, C = model.A, model.B, model.C
    Ba, Da = channels.Ba, build_da(channels, model.m)
    attacked = np.asarray(channels.sensors, dtype=int) - 1
    n, m, p = model.n, model.m, model.p

    out = {
        "x": np.full((steps, n), np.nan),
        "x_pred": np.full((steps, n), np.nan),
        "u": np.full((steps, p), np.nan),
        "y": np.full((steps, m), np.nan),
        "y_live": np.full((steps, m), np.nan),
        "z": np.full((steps, m), np.nan),
        "ua": np.full((steps, channels.p_prime), np.nan),
        "da": np.full((steps, channels.m_prime), np.nan),
        "diverged": False,
    }
    x = np.array(x0, dtype=float)
    x_pred = np.array(model.x0_mean, dtype=float)
    for k in range(steps):
        y_live = C @ x + v[k]
        d = _vector(policy.sensor_input(k, y_live[attacked]), channels.m_prime)
        ua = _vector(policy.actuator_input(k), channels.p_prime)
        y = y_live + Da @ d
        innovation = y - C @ x_pred
        x_filt = x_pred + schedule.K[k] @ innovation
        u = wm[k] if law is None else law.L @ x_filt + wm[k]

        out["x"][k], out["x_pred"][k], out["u"][k] = x, x_pred, u
        out["y"][k], out["y_live"][k] = y, y_live
        out["z"][k] = schedule.Pz_inv_sqrt[k] @ innovation
        out["ua"][k], out["da"][k] = ua, d

        x = A @ x + B @ u + Ba @ ua + w[k]
        x_pred = A @ x_filt + B @ u
        if not (np.all(np.isfinite(x)) and np.max(np.abs(x), initial=0.0) < limit):
            out["diverged"] = True
            logger.warning(f"closed loop diverged at step {k}")
            break
    return out


def simulate_trial(
    model: SystemModel,
    law: Optional[FeedbackLaw],
    ssf: Optional[SteadyStateFilter],
    policy: Optional[AttackPolicy],
    watermark_cov: Optional[np.ndarray],
    T: int,
    seed: int,
    *,
    channels: Optional[AttackChannels] = None,
    filter_mode: str = "steady",
    noise: bool = True,
    schedule: Optional[FilterSchedule] = None,
    settings: Settings = DEFAULT_SETTINGS,
) -> TrialRecord:
    """Run one closed-loop trajectory over 0..T.

    u_k = L x̂_{k|k} + Δu_k; the policy intercepts the channels its kind
    allows. ``noise=False`` zeroes x₀ spread, w, v and the watermark.
    With the steady filter x₀ − x̂₀|₋₁ is drawn from N(0, P), so the
    residues are stationary from k = 0.
    """
    channels = channels or no_channels(model)
    policy = policy or no_attack(channels)
    policy.check(channels, model, T)
    if law is not None and spectral_radius(law.Acl) >= 1.0:
        logger.warning("simulating an unstable closed loop")

    steps = T + 1
    live_seq, record_seq = np.random.SeedSequence(int(seed)).spawn(2)
    schedule = schedule or filter_schedule(model, ssf, steps, filter_mode)
    x0_cov = ssf.P if schedule.mode == "steady" and ssf is not None else None

    segment = None
    if isinstance(policy, ReplayPolicy) and policy.buffer is None:
        burn_in = settings.burn_in
        rec_steps = burn_in + steps
        rec_schedule = filter_schedule(model, ssf, rec_steps, schedule.mode)
        x0_r, w_r, v_r, wm_r = _draw(model, record_seq, rec_steps, watermark_cov, noise, x0_cov)
        recording = _run_loop(
            model, law, rec_schedule, no_attack(channels), channels, x0_r, w_r, v_r, wm_r, rec_steps,
            settings.divergence_limit,
        )
        segment = ReplaySegment(
            recorded_y=recording["y"][burn_in:],
            recorded_z=recording["z"][burn_in:],
            x_pred_start=recording["x_pred"][burn_in],
        )
        policy = policy.bind(ReplayBuffer(segment.recorded_y))

    x0, w, v, wm = _draw(model, live_seq, steps, watermark_cov, noise, x0_cov)
    out = _run_loop(model, law, schedule, policy, channels, x0, w, v, wm, steps, settings.divergence_limit)
    return TrialRecord(
        seed=int(seed),
        x=out["x"],
        x_pred=out["x_pred"],
        u=out["u"],
        y=out["y"],
        y_live=out["y_live"],
        z=out["z"],
        watermark=wm,
        ua=out["ua"],
        da=out["da"],
        chi2=np.sum(np.square(out["z"]), axis=1),
        diverged=out["diverged"],
        replay=segment,
    )


# ---------------------------------------------------------------------------
# watermark design
# ---------------------------------------------------------------------------

def calibrate_watermark(
    model: SystemModel,
    law: FeedbackLaw,
    ssf: SteadyStateFilter,
    shape: np.ndarray,
    target_ratio: float,
    settings: Settings = DEFAULT_SETTINGS,
) -> float:
    """二分法求 c 使 (J(c·𝒬) − J*)/J* = target_ratio"""
    j_star = lqg_cost(model, law, None, ssf, settings)

    def excess(c: float) -> float:
        return (lqg_cost(model, law, c * shape, ssf, settings) - j_star) / j_star - target_ratio

    upper = 1.0
    for _ in range(200):
        if excess(upper) >= 0.0:
            break
        upper *= 2.0
    else:
        raise PreconditionError("watermark shape does not increase the LQG cost")
    multiplier = optimize.bisect(excess, 0.0, upper, xtol=1e-14 * upper, rtol=1e-14, maxiter=400)
    achieved = excess(multiplier) + target_ratio
    if abs(achieved - target_ratio) > settings.calibration_tol * target_ratio:
        raise NumericError(f"watermark calibration reached dJ/J* = {achieved:.6g}, target {target_ratio:.6g}")
    logger.info(f"watermark multiplier {multiplier:.6g} gives dJ/J* = {achieved:.6f}")
    return float(multiplier)


def cost_sensitivity(
    model: SystemModel, law: FeedbackLaw, ssf: SteadyStateFilter, settings: Settings = DEFAULT_SETTINGS
) -> np.ndarray:
    """M_J with J(𝒬) − J* = tr(M_J 𝒬)."""
    p = model.p
    j_star = lqg_cost(model, law, None, ssf, settings)
    M = np.zeros((p, p))
    for i in range(p):
        for j in range(i, p):
            probe = np.zeros((p, p))
            probe[i, j] = probe[j, i] = 1.0
            value = lqg_cost(model, law, probe, ssf, settings) - j_star
            M[i, j] = M[j, i] = value if i == j else value / 2.0
    return M


def optimal_watermark(
    model: SystemModel,
    law: FeedbackLaw,
    ssf: SteadyStateFilter,
    target_ratio: float,
    settings: Settings = DEFAULT_SETTINGS,
) -> Tuple[np.ndarray, float]:
    """在 ΔJ/J* 预算下最大化 ε 的水印协方差（秩一）"""
    j_star = lqg_cost(model, law, None, ssf, settings)
    values, vectors = la.eigh(watermark_sensitivity(ssf, law, model), cost_sensitivity(model, law, ssf, settings))
    direction = vectors[:, -1]
    scale = target_ratio * j_star
    return scale * np.outer(direction, direction), float(scale * values[-1])


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def build_policy(
    config: ScenarioConfig,
    model: SystemModel,
    channels: AttackChannels,
    settings: Settings = DEFAULT_SETTINGS,
) -> AttackPolicy:
    """根据场景配置构造攻击策略"""
    T, params, kind = config.horizon, dict(config.attack_params), config.attack_kind
    allowed = {
        "none": set(),
        "fdi": {"sensor_bias", "actuator_bias", "epsilon", "direction", "ua_seq", "da_seq"},
        "zero_dynamics": {"scale"},
        "replay": {"record_length"},
    }[kind]
    unknown = set(params) - allowed
    if unknown:
        raise ValidationError(f"scenario.attack_kind: unknown parameters {sorted(unknown)} for '{kind}'")

    if kind == "none":
        return no_attack(channels)
    if kind == "fdi":
        if "epsilon" in params:
            direction = params.get("direction")
            if direction is not None:
                direction = _param_array(direction, "direction")
            epsilon = as_float(params["epsilon"], "scenario.attack_kind.epsilon")
            return fdi_bias_attack(model, channels, epsilon, T, direction=direction)
        if "da_seq" in params or "ua_seq" in params:
            ua = _param_array(params.get("ua_seq", np.zeros((T, channels.p_prime))), "ua_seq", channels.p_prime)
            da = _param_array(params.get("da_seq", np.zeros((T + 1, channels.m_prime))), "da_seq", channels.m_prime)
            return fdi_policy(ua, da)
        sensor_bias, actuator_bias = params.get("sensor_bias"), params.get("actuator_bias")
        return constant_fdi_policy(
            channels,
            T,
            None if sensor_bias is None else _param_array(sensor_bias, "sensor_bias"),
            None if actuator_bias is None else _param_array(actuator_bias, "actuator_bias"),
        )
    if kind == "zero_dynamics":
        witness = synthesize_zero_flow_attack(model, channels, T, settings)
        if witness is None:
            raise ValidationError("no zero-information-flow attack exists for these attack channels")
        return zero_dynamics_policy(witness.scaled(as_float(params.get("scale", 1.0), "scenario.attack_kind.scale")))
    return replay_policy(as_integer(params.get("record_length", T + 1), "scenario.attack_kind.record_length"), channels)


def _param_array(value: Any, name: str, width: Optional[int] = None) -> np.ndarray:
    """攻击参数转为浮点数组；给定 width 时整理为 (步数, width)"""
    try:
        arr = np.asarray(value, dtype=float)
        if width is None or (arr.ndim == 2 and arr.shape[1] == width):
            return arr
        return arr.reshape(-1, width)
    except (TypeError, ValueError) as e:
        path = f"scenario.attack_kind.{name}"
        raise ValidationError(f"{path}: invalid value ({e})", field=path) from e


def _run_ensemble(factory: Callable[[int], TrialRecord], trials: int, jobs: int, progress: bool, desc: str) -> List[TrialRecord]:
    if jobs <= 1:
        return [factory(i) for i in tqdm(range(trials), desc=desc, disable=not progress)]
    return asyncio.run(_gather_trials(factory, trials, jobs, progress, desc))


async def _gather_trials(factory, trials: int, jobs: int, progress: bool, desc: str) -> List[TrialRecord]:
    """线程池并发运行试验，按提交顺序收集结果"""
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=jobs) as pool, tqdm(total=trials, desc=desc, disable=not progress) as bar:

        async def one(index: int) -> TrialRecord:
            record = await loop.run_in_executor(pool, factory, index)
            bar.update(1)
            return record

        return list(await asyncio.gather(*(one(i) for i in range(trials))))


def _statistics(
    records: List[TrialRecord], spec: DetectorSpec, means_for: Callable[[TrialRecord], np.ndarray], covs: np.ndarray
) -> np.ndarray:
    z = np.stack([r.z for r in records])
    if spec.kind == "chi_squared":
        return chi_squared_paths(z, spec.window)
    means = np.stack([means_for(r) for r in records])
    if covs.ndim == 2:
        return np_llr_joint_paths(z, means, covs)
    return np_llr_paths(z, means, covs)


def run_experiment(
    config: ScenarioConfig,
    model: SystemModel,
    channels: AttackChannels,
    *,
    scenario_id: str = "scenario",
    jobs: Optional[int] = None,
    progress: bool = False,
    settings: Settings = DEFAULT_SETTINGS,
) -> ExperimentSummary:
    """运行 H0/H1 两组蒙特卡洛试验并汇总信息流、ROC与衰减率"""
    T, kind = config.horizon, config.attack_kind
    jobs = settings.jobs if jobs is None else max(1, int(jobs))

    law = design_lqg(model, settings=settings)
    base = steady_state_filter(model, law, settings=settings)
    j_star = lqg_cost(model, law, None, base, settings)

    watermark_cov, multiplier = config.watermark_cov, None
    if config.watermark_delta_j is not None:
        shape = np.eye(model.p) if config.watermark_cov is None else np.asarray(config.watermark_cov)
        multiplier = calibrate_watermark(model, law, base, shape, config.watermark_delta_j, settings)
        watermark_cov = multiplier * shape
    j_watermark = lqg_cost(model, law, watermark_cov, base, settings)
    ssf = steady_state_filter(model, law, watermark_cov, settings)

    policy = build_policy(config, model, channels, settings)
    mode = "steady" if kind == "replay" else "time_varying"
    schedule = filter_schedule(model, ssf, T + 1, mode)

    def ensemble(attack: AttackPolicy, tag: int, desc: str) -> List[TrialRecord]:
        factory = lambda i: simulate_trial(  # noqa: E731
            model, law, ssf, attack, watermark_cov, T, trial_seed(config.seed, i, tag),
            channels=channels, filter_mode=mode, schedule=schedule, settings=settings,
        )
        return _run_ensemble(factory, config.trials, jobs, progress, desc)

    h1 = ensemble(policy, H1_TAG, f"{kind} H1")
    h0 = ensemble(no_attack(channels), H0_TAG, f"{kind} H0")
    diverged = sum(r.diverged for r in h0 + h1)
    h0 = [r for r in h0 if not r.diverged]
    h1 = [r for r in h1 if not r.diverged]
    if diverged:
        logger.warning(f"{diverged} diverged trials excluded")
    if not h0 or not h1:
        raise NumericError("every trial of an ensemble diverged")

    eye = np.eye(model.m)
    exact_curve, epsilon = None, None
    if kind == "replay":
        covs = replay_residue_covariances(ssf, law, model, watermark_cov, T)
        means_for = partial(_replay_means, ssf, law, model, T)
        per_trial = [
            if_replay_watermark_perstep(ssf, law, model, watermark_cov, r.watermark[:T], T, covariances=covs).per_step_kl
            for r in h1
        ]
        mean_kl = np.mean(np.stack(per_trial), axis=0)
        epsilon = if_replay_watermark_bound(ssf, law, model, watermark_cov)
        if watermark_cov is None:
            exact_curve = replay_if_curve(ssf, law, model, T)
            if model.m * (T + 1) <= settings.max_joint_dim:
                report = if_replay_exact(ssf, law, model, T, settings=settings)
            else:
                report = info_flow_report(T, mean_kl, float(exact_curve[-1]), "replay-exact", settings=settings)
        else:
            report = info_flow_report(T, mean_kl, None, "replay-watermark", {"epsilon": epsilon}, settings)
        dist_covs = covs + eye
        if config.detector.kind == "neyman_pearson":
            if model.m * (T + 1) <= settings.max_joint_dim:
                dist_covs = replay_residue_joint_covariance(ssf, law, model, watermark_cov, T, settings)
            else:
                logger.warning("NP statistic falls back to per-step marginals of the replay residues")
    elif kind in ("fdi", "zero_dynamics"):
        bias = fdi_residue_bias(model, channels, policy.ua_seq[:T], policy.da_seq[: T + 1],
                                ssf if mode == "steady" else None)
        report = if_fdi(bias, T)
        mean_kl = report.per_step_kl
        exact_curve = np.cumsum(mean_kl) / np.arange(1, T + 2)
        means_for = lambda record: bias.delta_z  # noqa: E731
        dist_covs = np.broadcast_to(eye, (T + 1, model.m, model.m))
    else:
        mean_kl = np.zeros(T + 1)
        report = info_flow_report(T, mean_kl, 0.0, "none", settings=settings)
        exact_curve = np.zeros(T + 1)
        means_for = lambda record: np.zeros((T + 1, model.m))  # noqa: E731
        dist_covs = np.broadcast_to(eye, (T + 1, model.m, model.m))

    spec = config.detector
    roc: List[RocRecord] = []
    rate = None
    if min(len(h0), len(h1)) >= settings.min_trials:
        stats_h0 = _statistics(h0, spec, means_for, dist_covs)
        stats_h1 = _statistics(h1, spec, means_for, dist_covs)
        roc = estimate_roc(stats_h0, stats_h1, spec, settings)
        try:
            rate = decay_rate([r.alpha for r in roc], spec.k_min, trials=len(h0), settings=settings)
        except ValidationError as e:
            logger.warning(f"decay rate unavailable: {e}")
    else:
        logger.warning(f"ROC skipped: {min(len(h0), len(h1))} trials per hypothesis (need {settings.min_trials})")

    summary = ExperimentSummary(
        scenario_id=scenario_id,
        attack_kind=kind,
        horizon=T,
        trials=config.trials,
        seed=config.seed,
        mean_perstep_kl=mean_kl,
        cum_if_lowerbound=np.cumsum(mean_kl) / np.arange(1, T + 2),
        exact_if=exact_curve,
        report=report,
        epsilon=epsilon,
        roc=roc,
        decay_rate=rate,
        detector=spec,
        j_star=j_star,
        j_watermark=j_watermark,
        watermark_cov=watermark_cov,
        watermark_multiplier=multiplier,
        diverged=diverged,
        records=h1,
        metadata={
            "w_loop": ssf.w_loop,
            "filter_mode": mode,
            "initial_error_cov": "steady_P" if mode == "steady" else "x0_cov",
            "np_statistic": None if spec.kind == "chi_squared" else ("joint" if dist_covs.ndim == 2 else "per_step"),
            "acl_spectral_radius": law.spectral_radius,
        },
    )
    logger.info(
        f"{scenario_id}: IF lower bound {report.lower_bound_if:.6g}, "
        f"dJ/J* {summary.delta_j_ratio:.4f}, decay rate {rate}"
    )
    return summary


def _replay_means(ssf: SteadyStateFilter, law: FeedbackLaw, model: SystemModel, T: int, record: TrialRecord) -> np.ndarray:
    return replay_residue_means(ssf, law, model, record.watermark[:T], T)
