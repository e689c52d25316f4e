"""
flowtrace stealth audit
零信息流攻击存在性检验（矩阵束秩、左可逆性）与见证攻击序列合成
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import linalg as la

from .config import DEFAULT_SETTINGS, Settings
from .errors import HorizonError
from .model import AttackChannels, SystemModel, build_da

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PencilReport:
    stealthy_exists: bool
    witness_lambda: Optional[complex]
    rank_profile: List[Tuple[complex, int]]
    tolerance: float
    columns: int
    left_invertible: bool

    def frame(self) -> pd.DataFrame:
        """探测点秩表"""
        return pd.DataFrame(
            {
                "lambda": [f"{lam.real:+.6f}{lam.imag:+.6f}j" for lam, _ in self.rank_profile],
                "rank": [rank for _, rank in self.rank_profile],
                "deficient": [rank < self.columns for _, rank in self.rank_profile],
            }
        )


@dataclass(frozen=True, eq=False)
class WitnessAttack:
    ua_seq: np.ndarray  # (T, p′)
    da_seq: np.ndarray  # (T+1, m′)
    max_output_deviation: float

    def scaled(self, factor: float) -> "WitnessAttack":
        return WitnessAttack(self.ua_seq * factor, self.da_seq * factor, self.max_output_deviation * abs(factor))


def _hat_matrices(model: SystemModel, channels: AttackChannels) -> Tuple[np.ndarray, np.ndarray]:
    Da = build_da(channels, model.m)
    B_hat = np.hstack([channels.Ba, np.zeros((model.n, channels.m_prime))])
    D_hat = np.hstack([np.zeros((model.m, channels.p_prime)), Da])
    return B_hat, D_hat


def attack_pencil(model: SystemModel, channels: AttackChannels, lam: complex) -> np.ndarray:
    """[[λI − A, B̂ᵃ], [C, D̂ᵃ]]"""
    B_hat, D_hat = _hat_matrices(model, channels)
    top = np.hstack([lam * np.eye(model.n) - model.A, B_hat])
    return np.vstack([top, np.hstack([model.C, D_hat]).astype(complex)])


def _rank(M: np.ndarray, rtol: float) -> int:
    s = la.svdvals(M)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def pencil_rank_test(model: SystemModel, channels: AttackChannels, settings: Settings = DEFAULT_SETTINGS) -> PencilReport:
    """在A的特征值、伪随机复数点及方阵束的广义特征值处检测秩"""
    n, m = model.n, model.m
    columns = n + channels.p_prime + channels.m_prime

    rng = np.random.default_rng(settings.pencil_probe_seed)
    random_probes = rng.normal(size=settings.pencil_probes) + 1j * rng.normal(size=settings.pencil_probes)
    probes = list(la.eigvals(model.A)) + list(random_probes)
    if n + m == columns:
        B_hat, D_hat = _hat_matrices(model, channels)
        E = la.block_diag(np.eye(n), np.zeros((m, columns - n)))
        F = np.block([[model.A, -B_hat], [-model.C, -D_hat]])
        candidates = la.eigvals(F, E)
        probes += [lam for lam in candidates if np.isfinite(lam)]

    profile = [(complex(lam), _rank(attack_pencil(model, channels, lam), settings.rank_rtol)) for lam in probes]
    deficient = [lam for lam, rank in profile if rank < columns]
    random_ranks = [rank for _, rank in profile[n: n + len(random_probes)]]
    left_invertible = all(rank == columns for rank in random_ranks)
    report = PencilReport(
        stealthy_exists=bool(deficient),
        witness_lambda=deficient[0] if deficient else None,
        rank_profile=profile,
        tolerance=settings.rank_rtol,
        columns=columns,
        left_invertible=left_invertible,
    )
    logger.info(
        f"pencil test: {len(profile)} probes, stealthy_exists={report.stealthy_exists}, "
        f"left_invertible={left_invertible}"
    )
    return report


def forced_response_map(model: SystemModel, channels: AttackChannels, L: int) -> np.ndarray:
    """Stacked map (u_0, d_0, …, u_{L−1}, d_{L−1}, d_L) ↦ Δy_{0:L} with Δx₀ = 0."""
    Da = build_da(channels, model.m)
    p1, m1, m = channels.p_prime, channels.m_prime, model.m
    step = p1 + m1
    M = np.zeros((m * (L + 1), step * L + m1))
    markov = [model.C @ np.linalg.matrix_power(model.A, i) @ channels.Ba for i in range(L)]
    for j in range(L + 1):
        col = step * j
        if j < L:
            for k in range(j + 1, L + 1):
                M[m * k: m * (k + 1), col: col + p1] = markov[k - 1 - j]
        d_col = col + p1 if j < L else col
        M[m * j: m * (j + 1), d_col: d_col + m1] = Da
    return M


def output_deviation(model: SystemModel, channels: AttackChannels, ua_seq: np.ndarray, da_seq: np.ndarray) -> np.ndarray:
    """Δx_{k+1} = AΔx_k + Bᵃuᵃ_k, Δy_k = CΔx_k + Dᵃdᵃ_k"""
    Da = build_da(channels, model.m)
    delta_x = np.zeros(model.n)
    out = np.zeros((da_seq.shape[0], model.m))
    for k in range(da_seq.shape[0]):
        out[k] = model.C @ delta_x + Da @ da_seq[k]
        if k < ua_seq.shape[0]:
            delta_x = model.A @ delta_x + channels.Ba @ ua_seq[k]
    return out


def synthesize_zero_flow_attack(
    model: SystemModel,
    channels: AttackChannels,
    T: int,
    settings: Settings = DEFAULT_SETTINGS,
) -> Optional[WitnessAttack]:
    """合成 Δy_{0:T} ≡ 0 的非零攻击；首个攻击块必须非零"""
    p1, m1 = channels.p_prime, channels.m_prime
    if T < model.n - p1 + 1:
        raise HorizonError(f"horizon {T} too short: need T >= n - p' + 1 = {model.n - p1 + 1}")
    step = p1 + m1
    if step == 0:
        return None

    L = max(T, model.n)
    basis = la.null_space(forced_response_map(model, channels, L), rcond=settings.rank_rtol)
    if basis.shape[1] == 0:
        return None
    head = basis[:step]
    if np.linalg.norm(head) <= settings.synthesis_tol:
        logger.info("null space holds only inputs that have not reached the outputs yet")
        return None
    _, _, vh = la.svd(head)
    vector = basis @ vh[0]

    ua = np.zeros((L, p1))
    da = np.zeros((L + 1, m1))
    for j in range(L):
        ua[j] = vector[step * j: step * j + p1]
        da[j] = vector[step * j + p1: step * (j + 1)]
    da[L] = vector[step * L:]
    ua, da = ua[:T], da[: T + 1]
    scale = np.sqrt(np.sum(ua ** 2) + np.sum(da ** 2))
    ua, da = ua / scale, da / scale

    deviation = float(np.max(np.linalg.norm(output_deviation(model, channels, ua, da), axis=1)))
    if deviation > settings.synthesis_tol:
        logger.warning(f"witness output deviation {deviation:.3e} above tolerance")
    return WitnessAttack(ua_seq=ua, da_seq=da, max_output_deviation=deviation)
