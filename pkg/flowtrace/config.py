"""
flowtrace configuration
数值容差与运行参数
"""

import os
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class Settings:
    # model
    psd_tol: float = 1e-8
    symmetry_tol: float = 1e-8
    singular_tol: float = 1e-12

    # estimation
    riccati_tol: float = 1e-12
    riccati_max_iter: int = 100_000
    riccati_residual_tol: float = 1e-8
    lyapunov_residual_tol: float = 1e-10

    # stealth
    rank_rtol: float = 1e-9
    pencil_probes: int = 32
    pencil_probe_seed: int = 0x5EED
    synthesis_tol: float = 1e-9

    # infoflow
    max_joint_dim: int = 2000
    gap_tol: float = 1e-9

    # engine
    burn_in: int = 500
    divergence_limit: float = 1e150
    calibration_tol: float = 0.01
    jobs: int = 1

    # detection
    k_min: int = 10
    min_decay_points: int = 10
    min_trials: int = 100

    # cli
    significant_digits: int = 12

    @classmethod
    def from_env(cls) -> "Settings":
        """从环境变量读取配置"""
        settings = cls()
        jobs = os.environ.get("FLOWTRACE_JOBS")
        if jobs:
            settings = replace(settings, jobs=max(1, int(jobs)))
        burn_in = os.environ.get("FLOWTRACE_BURN_IN")
        if burn_in:
            settings = replace(settings, burn_in=int(burn_in))
        return settings


DEFAULT_SETTINGS = Settings()
