"""
flowtrace charts
信息流曲线与ROC图（SVG输出）
"""

import logging
import os
from pathlib import Path
from typing import Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .engine import ExperimentSummary  # noqa: E402

logger = logging.getLogger(__name__)

BACKGROUND = "#0E1117"
COLORS = {
    "mean_perstep_kl": "#4781D7",
    "cum_if_lowerbound": "#00D7B6",
    "exact_if": "#F47600",
    "epsilon_bound": "#ED1131",
}


def _style_axes(ax) -> None:
    ax.set_facecolor(BACKGROUND)
    ax.tick_params(colors="white")
    ax.grid(True, alpha=0.3, color="gray", linestyle="--")
    ax.set_axisbelow(True)
    for spine in ax.spines.values():
        spine.set_color("gray")


def _save_svg(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    fig.savefig(tmp, format="svg", facecolor=BACKGROUND, metadata={"Date": None})
    plt.close(fig)
    os.replace(tmp, path)
    return path


def plot_if_curve(summary: ExperimentSummary, path: Union[str, Path]) -> Path:
    """信息流曲线：逐步KL、累计下界、精确值与水印 ε"""
    frame = summary.ifcurve_frame()
    plt.style.use("dark_background")
    fig, ax = plt.subplots(figsize=(10, 6))
    fig.patch.set_facecolor(BACKGROUND)
    _style_axes(ax)

    ax.plot(frame["k"], frame["mean_perstep_kl"], color=COLORS["mean_perstep_kl"], alpha=0.6, linewidth=1,
            label="per-step KL")
    ax.plot(frame["k"], frame["cum_if_lowerbound"], color=COLORS["cum_if_lowerbound"], linewidth=2,
            label="IF lower bound")
    if frame["exact_if"].notna().any():
        ax.plot(frame["k"], frame["exact_if"], color=COLORS["exact_if"], linestyle="--", linewidth=2,
                label="exact IF")
    if summary.epsilon is not None:
        ax.axhline(summary.epsilon, color=COLORS["epsilon_bound"], linestyle=":", linewidth=1.5,
                   label=f"epsilon = {summary.epsilon:.4g}")

    ax.set_xlabel("k", fontsize=12, color="white")
    ax.set_ylabel("nats", fontsize=12, color="white")
    ax.set_title(f"{summary.scenario_id}: {summary.attack_kind} information flow", fontsize=14,
                 color="white", fontweight="bold")
    ax.legend(loc="upper right", facecolor=BACKGROUND, edgecolor="gray")
    fig.tight_layout()
    out = _save_svg(fig, path)
    logger.info(f"IF curve written to {out}")
    return out


def plot_roc(summary: ExperimentSummary, path: Union[str, Path]) -> Path:
    """α_k、β_k 随时间变化（对数坐标）"""
    frame = summary.roc_frame()
    plt.style.use("dark_background")
    fig, ax = plt.subplots(figsize=(10, 6))
    fig.patch.set_facecolor(BACKGROUND)
    _style_axes(ax)

    floor = 1.0 / (2.0 * summary.trials)
    ax.semilogy(frame["k"], np.maximum(frame["alpha"], floor), color="#ED1131", linewidth=2, label="alpha")
    ax.semilogy(frame["k"], np.maximum(frame["beta"], floor), color="#00D7B6", linewidth=2, label="beta")
    ax.set_xlabel("k", fontsize=12, color="white")
    ax.set_title(f"{summary.scenario_id}: {summary.detector.kind} detector", fontsize=14, color="white",
                 fontweight="bold")
    ax.legend(loc="lower left", facecolor=BACKGROUND, edgecolor="gray")
    fig.tight_layout()
    return _save_svg(fig, path)
