"""
flowtrace estimation
卡尔曼滤波、残差生成、LQG增益设计以及Riccati/Lyapunov求解器
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy import linalg as la

from .config import DEFAULT_SETTINGS, Settings
from .errors import ConvergenceError, NumericError, PreconditionError, UnstableError
from .model import SystemModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FilterState:
    """Kalman recursion state.

    ``k`` is the index of the next measurement; ``x_pred`` and ``P_pred``
    are the prediction for it. ``x_filt``, ``K`` and ``z`` belong to the
    last processed measurement (None before the first one).
    """

    x_pred: np.ndarray
    P_pred: np.ndarray
    k: int = 0
    x_filt: Optional[np.ndarray] = None
    K: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class SteadyStateFilter:
    P: np.ndarray
    K: np.ndarray
    Pz: np.ndarray
    W: Optional[np.ndarray]
    w_loop: str = "closed"

    @property
    def Pz_inv_sqrt(self) -> np.ndarray:
        return psd_inv_sqrt(self.Pz)


@dataclass(frozen=True, eq=False)
class FeedbackLaw:
    L: np.ndarray
    Acl: np.ndarray
    spectral_radius: float


# ---------------------------------------------------------------------------
# matrix helpers
# ---------------------------------------------------------------------------

def spectral_radius(M: np.ndarray) -> float:
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(la.eigvals(M))))


def psd_sqrt(M: np.ndarray) -> np.ndarray:
    """对称半正定平方根（特征值截断到0）"""
    w, V = la.eigh((M + M.T) / 2.0)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def psd_inv_sqrt(M: np.ndarray) -> np.ndarray:
    w, V = la.eigh((M + M.T) / 2.0)
    w = np.clip(w, 0.0, None)
    if w.size and w[0] <= np.finfo(float).eps * max(float(w[-1]), 1.0):
        raise NumericError("innovation covariance is not positive definite")
    return (V / np.sqrt(w)) @ V.T


def _pbh_ok(A: np.ndarray, M: np.ndarray, rtol: float, by_columns: bool) -> bool:
    n = A.shape[0]
    for lam in la.eigvals(A):
        if abs(lam) < 1.0:
            continue
        block = np.hstack([lam * np.eye(n) - A, M]) if by_columns else np.vstack([lam * np.eye(n) - A, M])
        s = la.svdvals(block)
        if s.size == 0 or np.sum(s > rtol * max(s[0], 1.0)) < n:
            return False
    return True


def is_stabilizable(A: np.ndarray, B: np.ndarray, rtol: float = 1e-9) -> bool:
    """PBH：|λ| ≥ 1 的模态均可控"""
    return _pbh_ok(A, B, rtol, by_columns=True)


def is_detectable(A: np.ndarray, C: np.ndarray, rtol: float = 1e-9) -> bool:
    """PBH：|λ| ≥ 1 的模态均可观"""
    return _pbh_ok(A, C, rtol, by_columns=False)


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------

def _riccati_map(S: np.ndarray, A: np.ndarray, B: np.ndarray, Wx: np.ndarray, Wu: np.ndarray) -> np.ndarray:
    BtSA = B.T @ S @ A
    nxt = A.T @ S @ A - BtSA.T @ la.solve(B.T @ S @ B + Wu, BtSA, assume_a="pos") + Wx
    return (nxt + nxt.T) / 2.0


def _riccati_residual(S, A, B, Wx, Wu) -> float:
    return float(np.linalg.norm(_riccati_map(S, A, B, Wx, Wu) - S))


def _iterate_dare(A, B, Wx, Wu, settings: Settings) -> np.ndarray:
    S = np.array(Wx, dtype=float)
    for iteration in range(settings.riccati_max_iter):
        nxt = _riccati_map(S, A, B, Wx, Wu)
        if not np.all(np.isfinite(nxt)):
            raise ConvergenceError(
                f"Riccati iteration diverged after {iteration} steps; pair is not stabilizable",
                residual=float("inf"),
            )
        change = np.linalg.norm(nxt - S)
        S = nxt
        if change <= settings.riccati_tol * max(np.linalg.norm(S), np.finfo(float).tiny):
            logger.debug(f"Riccati iteration converged in {iteration + 1} steps")
            return S
    raise ConvergenceError(
        f"Riccati iteration did not converge in {settings.riccati_max_iter} steps",
        residual=_riccati_residual(S, A, B, Wx, Wu),
    )


def solve_dare(
    A: np.ndarray,
    B: np.ndarray,
    Wx: np.ndarray,
    Wu: np.ndarray,
    settings: Settings = DEFAULT_SETTINGS,
) -> Tuple[np.ndarray, np.ndarray]:
    """Stabilizing solution S of S = AᵀSA − AᵀSB(BᵀSB+Wu)⁻¹BᵀSA + Wx.

    Returns (S, gain) with gain = −(BᵀSB+Wu)⁻¹BᵀSA.
    """
    A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    Wx, Wu = np.asarray(Wx, dtype=float), np.asarray(Wu, dtype=float)
    S = None
    try:
        S = la.solve_discrete_are(A, B, Wx, Wu)
        S = (S + S.T) / 2.0
        residual = _riccati_residual(S, A, B, Wx, Wu)
        if not np.isfinite(residual) or residual > settings.riccati_residual_tol * max(np.linalg.norm(S), 1.0):
            logger.warning(f"scipy DARE residual {residual:.3e} too large, falling back to iteration")
            S = None
    except (la.LinAlgError, ValueError) as e:
        logger.warning(f"scipy DARE failed ({e}), falling back to iteration")
    if S is None:
        S = _iterate_dare(A, B, Wx, Wu, settings)

    gain = -la.solve(B.T @ S @ B + Wu, B.T @ S @ A, assume_a="pos")
    rho = spectral_radius(A + B @ gain)
    if rho >= 1.0:
        raise ConvergenceError(
            f"Riccati solution is not stabilizing (closed-loop spectral radius {rho:.6g})",
            residual=_riccati_residual(S, A, B, Wx, Wu),
        )
    return S, gain


def solve_dlyap(M: np.ndarray, V: np.ndarray, settings: Settings = DEFAULT_SETTINGS) -> np.ndarray:
    """求解 X = M X Mᵀ + V"""
    M, V = np.asarray(M, dtype=float), np.asarray(V, dtype=float)
    rho = spectral_radius(M)
    if rho >= 1.0:
        raise UnstableError("Lyapunov equation needs a stable matrix", spectral_radius=rho)
    X = la.solve_discrete_lyapunov(M, V)
    X = (X + X.T) / 2.0
    residual = float(np.linalg.norm(M @ X @ M.T + V - X))
    scale = max(float(np.linalg.norm(V)), float(np.linalg.norm(X)), np.finfo(float).tiny)
    if residual > settings.lyapunov_residual_tol * scale:
        raise NumericError(f"Lyapunov solve inaccurate (residual {residual:.3e})")
    return X


# ---------------------------------------------------------------------------
# Kalman filter
# ---------------------------------------------------------------------------

def initial_filter_state(model: SystemModel) -> FilterState:
    return FilterState(x_pred=np.array(model.x0_mean), P_pred=np.array(model.x0_cov), k=0)


def kalman_gain(P_pred: np.ndarray, model: SystemModel) -> Tuple[np.ndarray, np.ndarray]:
    """返回 (K, (CPCᵀ+R)^{-1/2})"""
    C = model.C
    Pz = C @ P_pred @ C.T + model.R
    Pz_is = psd_inv_sqrt(Pz)
    K = P_pred @ C.T @ (Pz_is @ Pz_is)
    return K, Pz_is


def predict_covariance(P_pred: np.ndarray, K: np.ndarray, model: SystemModel) -> np.ndarray:
    A, C = model.A, model.C
    nxt = A @ P_pred @ A.T + model.Q - A @ K @ C @ P_pred @ A.T
    return (nxt + nxt.T) / 2.0


def measurement_update(state: FilterState, model: SystemModel, y: np.ndarray) -> FilterState:
    K, Pz_is = kalman_gain(state.P_pred, model)
    innovation = np.asarray(y, dtype=float) - model.C @ state.x_pred
    return replace(state, x_filt=state.x_pred + K @ innovation, K=K, z=Pz_is @ innovation)


def time_update(state: FilterState, model: SystemModel, u: np.ndarray) -> FilterState:
    if state.x_filt is None or state.K is None:
        raise NumericError("time_update called before measurement_update")
    return FilterState(
        x_pred=model.A @ state.x_filt + model.B @ np.asarray(u, dtype=float),
        P_pred=predict_covariance(state.P_pred, state.K, model),
        k=state.k + 1,
        x_filt=state.x_filt,
        K=state.K,
        z=state.z,
    )


def kalman_step(state: FilterState, model: SystemModel, u: np.ndarray, y: np.ndarray) -> FilterState:
    """处理 y_k、施加 u_k，返回 k+1 时刻的状态"""
    return time_update(measurement_update(state, model, y), model, u)


def covariance_schedule(model: SystemModel, T: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """时变滤波的 P_{k|k−1}, K_k, (CP C^T+R)^{-1/2}，k = 0..T；与数据无关"""
    n, m = model.n, model.m
    P = np.empty((T + 1, n, n))
    K = np.empty((T + 1, n, m))
    Pz_is = np.empty((T + 1, m, m))
    current = np.array(model.x0_cov)
    for k in range(T + 1):
        P[k] = current
        K[k], Pz_is[k] = kalman_gain(current, model)
        current = predict_covariance(current, K[k], model)
    return P, K, Pz_is


def estimate_covariance(
    model: SystemModel,
    K: np.ndarray,
    Pz: np.ndarray,
    law: Optional[FeedbackLaw] = None,
    watermark_cov: Optional[np.ndarray] = None,
    settings: Settings = DEFAULT_SETTINGS,
) -> Tuple[Optional[np.ndarray], str]:
    """x̂_{k|k−1} 的稳态协方差：x̂⁺ = F x̂ + F K ν + B Δu，F = A+BL（闭环）或 A（开环）"""
    if law is not None:
        F, loop = model.A + model.B @ law.L, "closed"
    else:
        F, loop = np.array(model.A), "open"
        if spectral_radius(F) >= 1.0:
            return None, "open-unstable"
    drive = F @ K @ Pz @ K.T @ F.T
    if watermark_cov is not None:
        drive = drive + model.B @ watermark_cov @ model.B.T
    return solve_dlyap(F, drive, settings), loop


def steady_state_filter(
    model: SystemModel,
    law: Optional[FeedbackLaw] = None,
    watermark_cov: Optional[np.ndarray] = None,
    settings: Settings = DEFAULT_SETTINGS,
) -> SteadyStateFilter:
    """稳态卡尔曼滤波器（对偶DARE）"""
    if not is_detectable(model.A, model.C, settings.rank_rtol):
        raise PreconditionError("(A, C) is not detectable")
    if not is_stabilizable(model.A, psd_sqrt(model.Q), settings.rank_rtol):
        raise PreconditionError("(A, Q^{1/2}) is not stabilizable")
    try:
        P, _ = solve_dare(model.A.T, model.C.T, model.Q, model.R, settings)
    except ConvergenceError as e:
        raise ConvergenceError(f"Failed to solve the filtering Riccati equation: {e}", residual=e.residual) from e
    Pz = model.C @ P @ model.C.T + model.R
    Pz = (Pz + Pz.T) / 2.0
    K = la.solve(Pz, model.C @ P, assume_a="pos").T
    W, loop = estimate_covariance(model, K, Pz, law, watermark_cov, settings)
    return SteadyStateFilter(P=P, K=K, Pz=Pz, W=W, w_loop=loop)


def design_lqg(
    model: SystemModel,
    Wx: Optional[np.ndarray] = None,
    Wu: Optional[np.ndarray] = None,
    settings: Settings = DEFAULT_SETTINGS,
) -> FeedbackLaw:
    """LQG设计：u = L x̂_{k|k}，默认权重为单位阵"""
    if model.p == 0:
        raise PreconditionError("design_lqg needs at least one control input (p = 0)")
    if not is_stabilizable(model.A, model.B, settings.rank_rtol):
        raise PreconditionError("(A, B) is not stabilizable")
    Wx = np.eye(model.n) if Wx is None else Wx
    Wu = np.eye(model.p) if Wu is None else Wu
    _, L = solve_dare(model.A, model.B, Wx, Wu, settings)
    ssf = steady_state_filter(model, settings=settings)
    Acl = (model.A + model.B @ L) @ (np.eye(model.n) - ssf.K @ model.C)
    rho = spectral_radius(Acl)
    logger.info(f"LQG design: spectral radius of (A+BL)(I-KC) = {rho:.6f}")
    return FeedbackLaw(L=L, Acl=Acl, spectral_radius=rho)


def joint_loop(model: SystemModel, law: FeedbackLaw, K: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Joint (x, x̂_{k|k−1}) dynamics with noise (w, v, Δu).

    Returns (F, G, H) with ξ⁺ = Fξ + Gν and the applied input
    u = Hξ + L K v + Δu.
    """
    A, B, C, L = model.A, model.B, model.C, law.L
    n = model.n
    I = np.eye(n)
    ABL = A + B @ L
    F = np.block([[A + B @ L @ K @ C, B @ L @ (I - K @ C)], [ABL @ K @ C, ABL @ (I - K @ C)]])
    G = np.block([[I, B @ L @ K, B], [np.zeros((n, n)), ABL @ K, B]])
    H = np.hstack([L @ K @ C, L @ (I - K @ C)])
    return F, G, H


def lqg_cost(
    model: SystemModel,
    law: FeedbackLaw,
    watermark_cov: Optional[np.ndarray] = None,
    ssf: Optional[SteadyStateFilter] = None,
    settings: Settings = DEFAULT_SETTINGS,
) -> float:
    """稳态平均代价 J = E[xᵀx + uᵀu]（含水印 Δu ~ N(0, 𝒬)）"""
    ssf = ssf or steady_state_filter(model, settings=settings)
    p = model.p
    Qw = np.zeros((p, p)) if watermark_cov is None else np.asarray(watermark_cov, dtype=float)
    F, G, H = joint_loop(model, law, ssf.K)
    rho = spectral_radius(F)
    if rho >= 1.0:
        raise UnstableError("LQG closed loop is unstable", spectral_radius=rho)
    noise = la.block_diag(model.Q, model.R, Qw)
    Xi = solve_dlyap(F, G @ noise @ G.T, settings)
    LK = law.L @ ssf.K
    n = model.n
    cost = np.trace(Xi[:n, :n]) + np.trace(H @ Xi @ H.T) + np.trace(LK @ model.R @ LK.T) + np.trace(Qw)
    return float(cost)
