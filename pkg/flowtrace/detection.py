"""
flowtrace detection
残差检测器（卡方、Neyman-Pearson）、ROC估计与虚警衰减率
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg as la
from scipy import stats

from .config import DEFAULT_SETTINGS, Settings
from .errors import InsufficientTrialsError, SingularCovarianceError, ValidationError

if TYPE_CHECKING:
    from .infoflow import GaussianDist

logger = logging.getLogger(__name__)

DETECTOR_KINDS = ("chi_squared", "neyman_pearson")
DETECTOR_ALIASES = {"chi2": "chi_squared", "np": "neyman_pearson"}


def as_integer(value: Any, name: str) -> int:
    """整数字段：接受整数或整值浮点数，拒绝 1.5、"ten"、True 等"""
    if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, float, np.integer, np.floating)):
        raise ValidationError(f"{name}: expected an integer, got {value!r}", field=name)
    if not float(value).is_integer():
        raise ValidationError(f"{name}: expected an integer, got {value!r}", field=name)
    return int(value)


def as_float(value: Any, name: str) -> float:
    if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, float, np.integer, np.floating)):
        raise ValidationError(f"{name}: expected a number, got {value!r}", field=name)
    return float(value)


@dataclass(frozen=True)
class DetectorSpec:
    """检测器配置；给定 threshold 时使用固定阈值，否则按 β ≥ 1−δ 选阈值"""

    kind: str = "neyman_pearson"
    window: int = 1
    delta: Optional[float] = 0.05
    threshold: Optional[float] = None
    k_min: int = 10

    def __post_init__(self):
        if not isinstance(self.kind, str):
            raise ValidationError(f"detector.kind: expected a string, got {self.kind!r}", field="detector.kind")
        kind = DETECTOR_ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in DETECTOR_KINDS:
            raise ValidationError(f"detector.kind: unknown detector '{self.kind}'", field="detector.kind")
        window = as_integer(self.window, "detector.window")
        if window < 1:
            raise ValidationError("detector.window: must be a positive integer", field="detector.window")
        object.__setattr__(self, "window", window)
        if self.threshold is not None:
            object.__setattr__(self, "threshold", as_float(self.threshold, "detector.threshold"))
            object.__setattr__(self, "delta", None)
        else:
            delta = None if self.delta is None else as_float(self.delta, "detector.delta")
            if delta is None or not 0.0 < delta < 1.0:
                raise ValidationError("detector.delta: must lie in (0, 1)", field="detector.delta")
            object.__setattr__(self, "delta", delta)
        k_min = as_integer(self.k_min, "detector.k_min")
        if k_min < 0:
            raise ValidationError("detector.k_min: must be nonnegative", field="detector.k_min")
        object.__setattr__(self, "k_min", k_min)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DetectorSpec":
        unknown = set(data) - {"kind", "window", "delta", "threshold", "k_min"}
        if unknown:
            raise ValidationError(f"detector: unknown keys {sorted(unknown)}", field="scenario.detector")
        return cls(
            kind=data.get("kind", "neyman_pearson"),
            window=data.get("window", 1),
            delta=data.get("delta", None if "threshold" in data else 0.05),
            threshold=data.get("threshold"),
            k_min=data.get("k_min", DEFAULT_SETTINGS.k_min),
        )

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"kind": self.kind, "window": self.window}
        if self.threshold is not None:
            out["threshold"] = self.threshold
        else:
            out["delta"] = self.delta
        out["k_min"] = self.k_min
        return out


@dataclass(frozen=True)
class RocRecord:
    k: int
    alpha: float  # Pr(alarm | H0)
    beta: float  # Pr(alarm | H1)
    threshold: float


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def chi_squared_stat(z_window: np.ndarray) -> float:
    """窗口内残差平方和"""
    return float(np.sum(np.square(np.asarray(z_window, dtype=float))))


def chi_squared_paths(z: np.ndarray, window: int) -> np.ndarray:
    """每个时刻的滑动窗口卡方统计量；z 形状为 (..., T+1, m)"""
    energy = np.sum(np.square(z), axis=-1)
    total = np.cumsum(energy, axis=-1)
    shifted = np.zeros_like(total)
    if window < total.shape[-1]:
        shifted[..., window:] = total[..., :-window]
    return total - shifted


def chi_squared_threshold(false_alarm: float, dof: int) -> float:
    return float(stats.chi2.ppf(1.0 - false_alarm, dof))


def _check_pd(cov: np.ndarray) -> None:
    try:
        la.cho_factor(cov)
    except la.LinAlgError as e:
        raise SingularCovarianceError(f"Failed to factor attack covariance: {e}") from e


def np_llr(z_seq: np.ndarray, attack_dists: Sequence["GaussianDist"]) -> float:
    """累积对数似然比 Σ log p1(z_k) − log p0(z_k)，p0 为标准正态"""
    z_seq = np.atleast_2d(np.asarray(z_seq, dtype=float))
    if len(attack_dists) < z_seq.shape[0]:
        raise ValidationError("np_llr: fewer attack distributions than residues")
    m = z_seq.shape[1]
    total = 0.0
    for z_k, dist in zip(z_seq, attack_dists):
        _check_pd(dist.cov)
        total += float(stats.multivariate_normal.logpdf(z_k, mean=dist.mean, cov=dist.cov))
        total -= float(stats.multivariate_normal.logpdf(z_k, mean=np.zeros(m), cov=np.eye(m)))
    return total


def np_llr_paths(z: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Cumulative NP statistics for a whole ensemble.

    z has shape (trials, T+1, m); means is (T+1, m) or per trial
    (trials, T+1, m); covs is (T+1, m, m). Returns (trials, T+1).
    """
    z = np.asarray(z, dtype=float)
    trials, steps, m = z.shape
    means = np.broadcast_to(means, z.shape)
    origin, eye = np.zeros(m), np.eye(m)
    llr = np.empty((trials, steps))
    for k in range(steps):
        _check_pd(covs[k])
        points = z[:, k, :]
        lp1 = stats.multivariate_normal.logpdf(points - means[:, k, :], mean=origin, cov=covs[k])
        lp0 = stats.multivariate_normal.logpdf(points, mean=origin, cov=eye)
        llr[:, k] = np.atleast_1d(lp1) - np.atleast_1d(lp0)
    return np.cumsum(llr, axis=1)


def np_llr_joint_paths(z: np.ndarray, means: np.ndarray, joint_cov: np.ndarray) -> np.ndarray:
    """Cumulative NP statistics when the attack residues are correlated in time.

    joint_cov is the (m(T+1))×(m(T+1)) covariance of z_{0:T} under the
    attack. The Cholesky factor of a leading block is the leading block of
    the full factor, so one triangular solve gives every prefix likelihood.
    """
    z = np.asarray(z, dtype=float)
    trials, steps, m = z.shape
    dim = steps * m
    if joint_cov.shape != (dim, dim):
        raise ValidationError(f"np_llr_joint_paths: covariance shape {joint_cov.shape}, expected {(dim, dim)}")
    try:
        factor = la.cholesky(joint_cov, lower=True)
    except la.LinAlgError as e:
        raise SingularCovarianceError(f"Failed to factor joint attack covariance: {e}") from e
    flat = z.reshape(trials, dim)
    centered = flat - np.broadcast_to(means, z.shape).reshape(trials, dim)
    white = la.solve_triangular(factor, centered.T, lower=True).T
    terms = 0.5 * (np.square(flat) - np.square(white)) - np.log(np.diag(factor))
    return np.cumsum(terms.reshape(trials, steps, m).sum(axis=2), axis=1)


# ---------------------------------------------------------------------------
# ROC and decay rate
# ---------------------------------------------------------------------------

def estimate_roc(
    trials_h0: np.ndarray,
    trials_h1: np.ndarray,
    spec: DetectorSpec,
    settings: Settings = DEFAULT_SETTINGS,
) -> List[RocRecord]:
    """逐时刻估计虚警率 α_k 与检测率 β_k（统计量 ≥ 阈值即报警）"""
    h0 = np.atleast_2d(np.asarray(trials_h0, dtype=float))
    h1 = np.atleast_2d(np.asarray(trials_h1, dtype=float))
    if h0.shape[1] != h1.shape[1]:
        raise ValidationError(f"estimate_roc: horizons differ ({h0.shape[1]} vs {h1.shape[1]})")
    n0, n1 = h0.shape[0], h1.shape[0]
    if min(n0, n1) < settings.min_trials:
        raise InsufficientTrialsError(f"estimate_roc: need at least {settings.min_trials} trials per hypothesis")
    if spec.threshold is None and n1 * spec.delta < 5:
        raise InsufficientTrialsError(
            f"estimate_roc: {n1} trials cannot resolve the {spec.delta} quantile (need trials*delta >= 5)"
        )

    records = []
    index = None if spec.threshold is not None else int(np.floor(spec.delta * n1))
    for k in range(h0.shape[1]):
        if index is None:
            threshold = float(spec.threshold)
        else:
            threshold = float(np.sort(h1[:, k])[index])
        records.append(
            RocRecord(
                k=k,
                alpha=float(np.mean(h0[:, k] >= threshold)),
                beta=float(np.mean(h1[:, k] >= threshold)),
                threshold=threshold,
            )
        )
    return records


def decay_rate(
    alphas: Sequence[float],
    k_min: int,
    trials: Optional[int] = None,
    settings: Settings = DEFAULT_SETTINGS,
) -> float:
    """−log α_k 对 (k+1) 的最小二乘斜率"""
    a = np.asarray(alphas, dtype=float)
    k = np.arange(a.shape[0])
    window = k >= k_min
    censored = np.flatnonzero((a <= 0.0) & window)
    if censored.size and censored[0] - k_min >= settings.min_decay_points:
        window &= k < censored[0]
    elif censored.size:
        if trials is None:
            raise ValidationError("decay_rate: zero false-alarm rates need the trial count for the floor")
        a = np.where(a > 0.0, a, 1.0 / (2.0 * trials))
    if int(window.sum()) < settings.min_decay_points:
        raise ValidationError(
            f"decay_rate: only {int(window.sum())} usable points (need {settings.min_decay_points})"
        )
    slope, _ = np.polyfit(k[window] + 1.0, -np.log(a[window]), 1)
    return float(slope)


def roc_frame(records: Sequence[RocRecord], detector: str, scenario_id: str, seed: int) -> pd.DataFrame:
    frame = pd.DataFrame(
        {
            "k": [r.k for r in records],
            "alpha": [r.alpha for r in records],
            "beta": [r.beta for r in records],
            "threshold": [r.threshold for r in records],
        }
    )
    frame["detector"] = detector
    frame["scenario_id"] = scenario_id
    frame["seed"] = seed
    return frame
