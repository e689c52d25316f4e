"""
flowtrace information flow
高斯KL散度、信息流 IF_T 的精确值与逐步下界（FDI、重放、水印）
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy import linalg as la

from .config import DEFAULT_SETTINGS, Settings
from .errors import (
    NumericError,
    PreconditionError,
    SingularCovarianceError,
    UnstableError,
    UnsupportedPolicyError,
    ValidationError,
)
from .estimation import (
    FeedbackLaw,
    SteadyStateFilter,
    covariance_schedule,
    psd_sqrt,
    solve_dlyap,
    spectral_radius,
)
from .model import AttackChannels, SystemModel, build_da

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GaussianDist:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1 or mean.shape[0] < 1:
            raise ValidationError("GaussianDist: mean must be a nonempty vector")
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValidationError(f"GaussianDist: covariance shape {cov.shape} does not match mean {mean.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", (cov + cov.T) / 2.0)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def standard(cls, dim: int) -> "GaussianDist":
        return cls(np.zeros(dim), np.eye(dim))


@dataclass(frozen=True, eq=False)
class InfoFlowReport:
    horizon: int
    per_step_kl: np.ndarray
    lower_bound_if: float
    exact_if: Optional[float]
    method: str
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def information_gap(self) -> Optional[float]:
        """精确值与下界之差（残差间互信息之和 / (T+1)）"""
        if self.exact_if is None:
            return None
        return self.exact_if - self.lower_bound_if


@dataclass(frozen=True, eq=False)
class FdiResidueBias:
    delta_e: np.ndarray  # (T+1, n)
    delta_z: np.ndarray  # (T+1, m)


# ---------------------------------------------------------------------------
# Gaussian KL
# ---------------------------------------------------------------------------

def _cholesky(cov: np.ndarray, which: str):
    try:
        return la.cho_factor(cov, lower=True)
    except la.LinAlgError as e:
        raise SingularCovarianceError(f"Failed to factor {which} covariance: {e}") from e


def _logdet(factor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(factor[0]))))


def kl_gaussian(p1: GaussianDist, p0: GaussianDist) -> float:
    """D_KL(p1 || p0) for multivariate normals."""
    if p1.dim != p0.dim:
        raise ValidationError(f"kl_gaussian: dimensions differ ({p1.dim} vs {p0.dim})")
    f0 = _cholesky(p0.cov, "reference")
    f1 = _cholesky(p1.cov, "attack")
    diff = p1.mean - p0.mean
    trace = float(np.trace(la.cho_solve(f0, p1.cov)))
    mahalanobis = float(diff @ la.cho_solve(f0, diff))
    kl = 0.5 * (trace - p1.dim + _logdet(f0) - _logdet(f1) + mahalanobis)
    return max(kl, 0.0)


def if_lower_bound(per_step) -> float:
    values = np.asarray(per_step, dtype=float)
    if values.size == 0:
        raise ValidationError("if_lower_bound: empty sequence")
    if np.any(values < -1e-12):
        raise ValidationError("if_lower_bound: per-step divergences must be nonnegative")
    return float(np.sum(values) / values.size)


def info_flow_report(
    T: int,
    per_step: np.ndarray,
    exact: Optional[float],
    method: str,
    details: Optional[Dict[str, Any]] = None,
    settings: Settings = DEFAULT_SETTINGS,
) -> InfoFlowReport:
    per_step = np.clip(np.asarray(per_step, dtype=float), 0.0, None)
    lower = if_lower_bound(per_step)
    if exact is not None and exact < lower - settings.gap_tol * max(1.0, abs(lower)):
        raise NumericError(f"{method}: exact IF {exact:.12g} below per-step bound {lower:.12g}")
    return InfoFlowReport(
        horizon=T, per_step_kl=per_step, lower_bound_if=lower, exact_if=exact, method=method, details=details or {}
    )


# ---------------------------------------------------------------------------
# false data injection
# ---------------------------------------------------------------------------

def _sequence(value, rows: Optional[int], cols: int, name: str) -> np.ndarray:
    if value is None:
        if rows is None:
            raise ValidationError(f"{name}: sequence required")
        return np.zeros((rows, cols))
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1 and cols == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[1] != cols:
        raise ValidationError(f"{name}: expected rows of length {cols}, got shape {arr.shape}")
    return arr


def fdi_residue_bias(
    model: SystemModel,
    channels: AttackChannels,
    ua_seq,
    da_seq,
    ssf: Optional[SteadyStateFilter] = None,
) -> FdiResidueBias:
    """Residue bias of an output-independent injection.

    Δe⁺ = (A − A K_k C)Δe + Bᵃuᵃ_k − A K_k Dᵃdᵃ_k,
    Δz_k = (C P_k Cᵀ + R)^{-1/2}(CΔe + Dᵃdᵃ_k).
    With ``ssf`` the constant steady-state gain is used instead of K_k.
    """
    A, C, Ba = model.A, model.C, channels.Ba
    Da = build_da(channels, model.m)
    da = _sequence(da_seq, None, channels.m_prime, "da_seq")
    T = da.shape[0] - 1
    if T < 0:
        raise ValidationError("da_seq: at least one step required")
    ua = _sequence(ua_seq, T, channels.p_prime, "ua_seq")
    if ua.shape[0] not in (T, T + 1):
        raise ValidationError(f"ua_seq: expected {T} steps, got {ua.shape[0]}")

    if ssf is None:
        _, K, Pz_is = covariance_schedule(model, T)
    else:
        K = np.broadcast_to(ssf.K, (T + 1,) + ssf.K.shape)
        Pz_is = np.broadcast_to(ssf.Pz_inv_sqrt, (T + 1, model.m, model.m))

    delta_e = np.zeros((T + 1, model.n))
    delta_z = np.zeros((T + 1, model.m))
    for k in range(T + 1):
        injected = Da @ da[k]
        delta_z[k] = Pz_is[k] @ (C @ delta_e[k] + injected)
        if k < T:
            AK = A @ K[k]
            delta_e[k + 1] = (A - AK @ C) @ delta_e[k] + Ba @ ua[k] - AK @ injected
    return FdiResidueBias(delta_e=delta_e, delta_z=delta_z)


def if_fdi(bias: FdiResidueBias, T: Optional[int] = None) -> InfoFlowReport:
    T = bias.delta_z.shape[0] - 1 if T is None else T
    if bias.delta_z.shape[0] < T + 1:
        raise ValidationError(f"if_fdi: bias covers {bias.delta_z.shape[0]} steps, need {T + 1}")
    energy = np.sum(np.square(bias.delta_z[: T + 1]), axis=1)
    exact = float(np.sum(energy) / (2.0 * (T + 1)))
    return info_flow_report(T, energy / 2.0, exact, "fdi")


def is_eps_stealthy(bias: FdiResidueBias, eps: float) -> bool:
    """‖Δz_k‖² ≤ 2ε 对所有 k 成立"""
    return bool(np.all(np.sum(np.square(bias.delta_z), axis=1) <= 2.0 * eps * (1.0 + 1e-12)))


# ---------------------------------------------------------------------------
# replay without watermark
# ---------------------------------------------------------------------------

def _require_stable(law: FeedbackLaw) -> None:
    rho = spectral_radius(law.Acl)
    if rho >= 1.0:
        raise UnstableError("replay analysis needs a stable (A+BL)(I-KC)", spectral_radius=rho)


def _require_w(ssf: SteadyStateFilter) -> np.ndarray:
    if ssf.W is None:
        raise PreconditionError("steady-state estimate covariance W is unavailable (open loop is unstable)")
    return ssf.W


def replay_blocks(ssf: SteadyStateFilter, law: FeedbackLaw, model: SystemModel, T: int) -> np.ndarray:
    """G_j = 𝒫^{-1/2} C 𝒜^j, j = 0..T"""
    Pz_is = ssf.Pz_inv_sqrt
    blocks = np.empty((T + 1, model.m, model.n))
    power = np.eye(model.n)
    for j in range(T + 1):
        blocks[j] = Pz_is @ model.C @ power
        power = law.Acl @ power
    return blocks


def _logdet_spd(M: np.ndarray) -> float:
    sign, value = np.linalg.slogdet(M)
    if sign <= 0:
        raise SingularCovarianceError("matrix is not positive definite")
    return float(value)


def replay_bound(ssf: SteadyStateFilter, law: FeedbackLaw, model: SystemModel, x0_mean: np.ndarray) -> float:
    """KL(z_{0:T}) 关于 T 的一致上界 M*"""
    W = _require_w(ssf)
    Pz_is = ssf.Pz_inv_sqrt
    X1 = solve_dlyap(law.Acl, W)
    X2 = solve_dlyap(law.Acl.T, model.C.T @ (Pz_is @ Pz_is) @ model.C)
    Wh = psd_sqrt(W)
    b1 = float(np.trace(Pz_is @ model.C @ X1 @ model.C.T @ Pz_is))
    b2 = float(x0_mean @ X2 @ x0_mean)
    b3 = _logdet_spd(np.eye(model.n) + Wh @ X2 @ Wh)
    return 0.5 * (b1 + b2 + b3)


def if_replay_exact(
    ssf: SteadyStateFilter,
    law: FeedbackLaw,
    model: SystemModel,
    T: int,
    x0_mean: Optional[np.ndarray] = None,
    settings: Settings = DEFAULT_SETTINGS,
) -> InfoFlowReport:
    """无水印重放攻击下 z_{0:T} 的联合高斯KL"""
    _require_stable(law)
    W = _require_w(ssf)
    x0 = np.asarray(model.x0_mean if x0_mean is None else x0_mean, dtype=float)
    dim = model.m * (T + 1)
    if dim > settings.max_joint_dim:
        raise ValidationError(f"if_replay_exact: joint dimension {dim} exceeds {settings.max_joint_dim}")

    blocks = replay_blocks(ssf, law, model, T)
    G = blocks.reshape(dim, model.n)
    mean = -G @ x0
    spread = G @ W @ G.T
    joint = kl_gaussian(GaussianDist(mean, np.eye(dim) + spread), GaussianDist.standard(dim))

    eye_m = np.eye(model.m)
    per_step = np.array(
        [
            kl_gaussian(GaussianDist(-blocks[j] @ x0, eye_m + blocks[j] @ W @ blocks[j].T), GaussianDist.standard(model.m))
            for j in range(T + 1)
        ]
    )
    Wh = psd_sqrt(W)
    details = {
        "c1": float(np.trace(spread)),
        "c2": float(mean @ mean),
        "c3": -_logdet_spd(np.eye(model.n) + Wh @ G.T @ G @ Wh),
        "upper_bound_kl": replay_bound(ssf, law, model, x0),
        "w_loop": ssf.w_loop,
    }
    return info_flow_report(T, per_step, joint / (T + 1), "replay-exact", details, settings)


def replay_if_curve(
    ssf: SteadyStateFilter, law: FeedbackLaw, model: SystemModel, T: int, x0_mean: Optional[np.ndarray] = None
) -> np.ndarray:
    """IF_k for every prefix k = 0..T via the n×n determinant identity."""
    _require_stable(law)
    W = _require_w(ssf)
    x0 = np.asarray(model.x0_mean if x0_mean is None else x0_mean, dtype=float)
    Wh = psd_sqrt(W)
    gram = np.zeros((model.n, model.n))
    c1 = c2 = 0.0
    curve = np.empty(T + 1)
    for j, block in enumerate(replay_blocks(ssf, law, model, T)):
        c1 += float(np.trace(block @ W @ block.T))
        shift = block @ x0
        c2 += float(shift @ shift)
        gram += block.T @ block
        c3 = -_logdet_spd(np.eye(model.n) + Wh @ gram @ Wh)
        curve[j] = max(0.5 * (c1 + c2 + c3), 0.0) / (j + 1)
    return curve


# ---------------------------------------------------------------------------
# replay with watermark
# ---------------------------------------------------------------------------

def _watermark_cov(model: SystemModel, watermark_cov: Optional[np.ndarray]) -> np.ndarray:
    if watermark_cov is None:
        return np.zeros((model.p, model.p))
    return np.asarray(watermark_cov, dtype=float)


def if_replay_watermark_bound(
    ssf: SteadyStateFilter, law: FeedbackLaw, model: SystemModel, watermark_cov: Optional[np.ndarray]
) -> float:
    """ε = tr(𝒫⁻¹CΣCᵀ)/2，Σ = 𝒜Σ𝒜ᵀ + B𝒬Bᵀ"""
    Qw = _watermark_cov(model, watermark_cov)
    Sigma = solve_dlyap(law.Acl, model.B @ Qw @ model.B.T)
    Pz_is = ssf.Pz_inv_sqrt
    return max(0.5 * float(np.trace(Pz_is @ model.C @ Sigma @ model.C.T @ Pz_is)), 0.0)


def watermark_sensitivity(ssf: SteadyStateFilter, law: FeedbackLaw, model: SystemModel) -> np.ndarray:
    """M_ε with ε(𝒬) = tr(M_ε 𝒬)."""
    Pz_is = ssf.Pz_inv_sqrt
    X2 = solve_dlyap(law.Acl.T, model.C.T @ (Pz_is @ Pz_is) @ model.C)
    M = 0.5 * model.B.T @ X2 @ model.B
    return (M + M.T) / 2.0


def replay_residue_covariances(
    ssf: SteadyStateFilter,
    law: FeedbackLaw,
    model: SystemModel,
    watermark_cov: Optional[np.ndarray],
    T: int,
) -> np.ndarray:
    """Σ_k = 𝒫^{-1/2}C(𝒜ᵏW𝒜ᵏᵀ + Σ_{j<k} 𝒜ʲB𝒬Bᵀ𝒜ʲᵀ)Cᵀ𝒫^{-1/2}"""
    _require_stable(law)
    S = np.array(_require_w(ssf))
    drive = model.B @ _watermark_cov(model, watermark_cov) @ model.B.T
    Pz_is = ssf.Pz_inv_sqrt
    out = np.empty((T + 1, model.m, model.m))
    for k in range(T + 1):
        sigma = Pz_is @ model.C @ S @ model.C.T @ Pz_is
        out[k] = (sigma + sigma.T) / 2.0
        S = law.Acl @ S @ law.Acl.T + drive
    return out


def replay_residue_joint_covariance(
    ssf: SteadyStateFilter,
    law: FeedbackLaw,
    model: SystemModel,
    watermark_cov: Optional[np.ndarray],
    T: int,
    settings: Settings = DEFAULT_SETTINGS,
) -> np.ndarray:
    """Joint covariance of z_{0:T} under replay, given the live watermark.

    Block (l, j), l ≥ j, is 𝒫^{-1/2}C 𝒜^{l−j} S_j Cᵀ𝒫^{-1/2} plus I on
    the diagonal, where S_j is the covariance of x̂_live − x̂_rec at j.
    """
    _require_stable(law)
    dim = model.m * (T + 1)
    if dim > settings.max_joint_dim:
        raise ValidationError(f"replay joint covariance: dimension {dim} exceeds {settings.max_joint_dim}")
    S = np.array(_require_w(ssf))
    drive = model.B @ _watermark_cov(model, watermark_cov) @ model.B.T
    G = ssf.Pz_inv_sqrt @ model.C
    m = model.m
    joint = np.eye(dim)
    for j in range(T + 1):
        cross = S
        for row in range(j, T + 1):
            block = G @ cross @ G.T
            joint[row * m:(row + 1) * m, j * m:(j + 1) * m] += block
            if row != j:
                joint[j * m:(j + 1) * m, row * m:(row + 1) * m] += block.T
            cross = law.Acl @ cross
        S = law.Acl @ S @ law.Acl.T + drive
    return (joint + joint.T) / 2.0


def replay_residue_means(
    ssf: SteadyStateFilter,
    law: FeedbackLaw,
    model: SystemModel,
    watermark,
    T: int,
    x0_mean: Optional[np.ndarray] = None,
) -> np.ndarray:
    """μ_k = −𝒫^{-1/2}C(𝒜ᵏx̂₀ + Σ_{j<k} 𝒜^{k−1−j}BΔu_j)"""
    Pz_is = ssf.Pz_inv_sqrt
    state = np.array(model.x0_mean if x0_mean is None else x0_mean, dtype=float)
    wm = _sequence(watermark, T, model.p, "watermark")
    if wm.shape[0] < T:
        raise ValidationError(f"watermark: expected at least {T} steps, got {wm.shape[0]}")
    out = np.empty((T + 1, model.m))
    for k in range(T + 1):
        out[k] = -Pz_is @ model.C @ state
        if k < T:
            state = law.Acl @ state + model.B @ wm[k]
    return out


def if_replay_watermark_perstep(
    ssf: SteadyStateFilter,
    law: FeedbackLaw,
    model: SystemModel,
    watermark_cov: Optional[np.ndarray],
    watermark_realization,
    T: int,
    covariances: Optional[np.ndarray] = None,
) -> InfoFlowReport:
    """每步 z_k ~ N(μ_k, Σ_k + I) 相对 N(0, I) 的KL及其下界"""
    covs = replay_residue_covariances(ssf, law, model, watermark_cov, T) if covariances is None else covariances
    means = replay_residue_means(ssf, law, model, watermark_realization, T)
    eye = np.eye(model.m)
    c1 = np.sum(np.square(means), axis=1)
    c3 = np.trace(covs, axis1=1, axis2=2)
    c2 = -np.array([_logdet_spd(eye + sigma) for sigma in covs])
    if np.any(c2 + c3 < -1e-10):
        raise NumericError("replay watermark analysis produced a negative covariance term")
    return info_flow_report(T, 0.5 * (c1 + c2 + c3), None, "replay-watermark", {"c1": c1, "c2": c2, "c3": c3})


# ---------------------------------------------------------------------------
# output/residue equivalence
# ---------------------------------------------------------------------------

def _affine_run(model, channels, law, attack, T):
    n, m, p = model.n, model.m, model.p
    dim = n + n * T + m * (T + 1)
    Da = build_da(channels, m)
    _, K, Pz_is = covariance_schedule(model, T)

    x_off = np.array(model.x0_mean, dtype=float)
    x_coef = np.zeros((n, dim))
    x_coef[:, :n] = np.eye(n)
    xh_off = np.array(model.x0_mean, dtype=float)
    xh_coef = np.zeros((n, dim))

    y_off, y_coef, z_off, z_coef = [], [], [], []
    for k in range(T + 1):
        v_sel = np.zeros((m, dim))
        v_sel[:, n + n * T + m * k: n + n * T + m * (k + 1)] = np.eye(m)
        d_k = np.zeros(channels.m_prime) if attack is None else np.asarray(attack.sensor_input(k, None), dtype=float)
        yo = model.C @ x_off + Da @ d_k
        yc = model.C @ x_coef + v_sel
        io, ic = yo - model.C @ xh_off, yc - model.C @ xh_coef
        y_off.append(yo)
        y_coef.append(yc)
        z_off.append(Pz_is[k] @ io)
        z_coef.append(Pz_is[k] @ ic)
        if k == T:
            break
        xf_off, xf_coef = xh_off + K[k] @ io, xh_coef + K[k] @ ic
        if law is None:
            u_off, u_coef = np.zeros(p), np.zeros((p, dim))
        else:
            u_off, u_coef = law.L @ xf_off, law.L @ xf_coef
        ua_k = np.zeros(channels.p_prime) if attack is None else np.asarray(attack.actuator_input(k), dtype=float)
        w_sel = np.zeros((n, dim))
        w_sel[:, n + n * k: n + n * (k + 1)] = np.eye(n)
        x_off = model.A @ x_off + model.B @ u_off + channels.Ba @ ua_k
        x_coef = model.A @ x_coef + model.B @ u_coef + w_sel
        xh_off = model.A @ xf_off + model.B @ u_off
        xh_coef = model.A @ xf_coef + model.B @ u_coef

    noise = la.block_diag(model.x0_cov, *([model.Q] * T), *([model.R] * (T + 1)))
    Y = np.vstack(y_coef)
    Z = np.vstack(z_coef)
    return (
        GaussianDist(np.concatenate(y_off), Y @ noise @ Y.T),
        GaussianDist(np.concatenate(z_off), Z @ noise @ Z.T),
    )


def kl_outputs_equals_kl_residues_check(
    model: SystemModel,
    channels: AttackChannels,
    attack,
    T: int,
    law: Optional[FeedbackLaw] = None,
) -> Tuple[float, float]:
    """返回 (KL(y_{0:T}), KL(z_{0:T}))，二者应相等"""
    if law is not None and not isinstance(law, FeedbackLaw):
        raise UnsupportedPolicyError("only linear feedback laws keep the outputs jointly Gaussian")
    if attack is not None and not getattr(attack, "output_independent", False):
        raise UnsupportedPolicyError(f"attack '{getattr(attack, 'kind', attack)}' reads outputs; no closed form")
    y_nom, z_nom = _affine_run(model, channels, law, None, T)
    y_att, z_att = _affine_run(model, channels, law, attack, T)
    return kl_gaussian(y_att, y_nom), kl_gaussian(z_att, z_nom)
