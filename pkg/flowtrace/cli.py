#!/usr/bin/env python3
"""
flowtrace command line
子命令：simulate / stealth-audit / fdi / replay / watermark-design / roc
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from .config import Settings
from .detection import DetectorSpec
from .engine import ExperimentSummary, build_policy, calibrate_watermark, optimal_watermark, run_experiment, simulate_trial
from .errors import FlowtraceError
from .estimation import design_lqg, lqg_cost, steady_state_filter
from .infoflow import if_replay_watermark_bound
from .model import ScenarioConfig, SystemModel, load_model, validate_scenario
from .stealth import pencil_rank_test, synthesize_zero_flow_attack

logger = logging.getLogger(__name__)

USAGE_ERROR = 1


class CliUsageError(Exception):
    pass


class FlowtraceArgumentParser(argparse.ArgumentParser):
    """参数错误时以退出码1结束"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _float_format(settings: Settings) -> str:
    return f"%.{settings.significant_digits}g"


def write_csv(frame: pd.DataFrame, path: Path, settings: Settings) -> Path:
    """原子写入CSV（临时文件 + 重命名）"""
    tmp = path.with_name(f".{path.name}.tmp")
    frame.to_csv(tmp, index=False, float_format=_float_format(settings), lineterminator="\n")
    os.replace(tmp, path)
    logger.info(f"wrote {path}")
    return path


def write_json(document: dict, path: Path) -> Path:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def _out_dir(args) -> Optional[Path]:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise CliUsageError(f"output directory {out} is not writable")
    return out


def _columns(prefix: str, count: int) -> List[str]:
    return [f"{prefix}{i + 1}" for i in range(count)]


# ---------------------------------------------------------------------------
# scenario overrides
# ---------------------------------------------------------------------------

def _scenario(args, model: SystemModel, scenario: ScenarioConfig, settings: Settings) -> ScenarioConfig:
    changes = {}
    for name in ("seed", "trials", "horizon"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    if getattr(args, "watermark_deltaJ", None) is not None:
        changes["watermark_delta_j"] = args.watermark_deltaJ
    detector = scenario.detector
    if getattr(args, "detector", None) is not None:
        detector = replace(detector, kind=args.detector)
    if getattr(args, "delta", None) is not None:
        detector = DetectorSpec(kind=detector.kind, window=detector.window, delta=args.delta, k_min=detector.k_min)
    changes["detector"] = detector
    return validate_scenario(replace(scenario, **changes), model, settings)


def _load(args, settings: Settings):
    model, channels, scenario = load_model(args.model, settings)
    return model, channels, _scenario(args, model, scenario, settings)


def _print_summary(summary: ExperimentSummary) -> None:
    report = summary.report
    print(f"\n📊 {summary.scenario_id}: {summary.attack_kind} attack, T={summary.horizon}, trials={summary.trials}")
    print(f"  • IF lower bound: {report.lower_bound_if:.6g}")
    if report.exact_if is not None:
        print(f"  • exact IF:       {report.exact_if:.6g} (gap {report.information_gap:.3g})")
    if summary.epsilon is not None:
        print(f"  • epsilon:        {summary.epsilon:.6g}")
    print(f"  • J* = {summary.j_star:.6g}, J = {summary.j_watermark:.6g}, dJ/J* = {summary.delta_j_ratio:.4f}")
    if summary.decay_rate is not None:
        print(f"  • false-alarm decay rate: {summary.decay_rate:.4f}")
    if summary.diverged:
        print(f"  ⚠️ {summary.diverged} diverged trials excluded")


def _experiment(args, settings: Settings, kind: Optional[str], outputs: Sequence[str]) -> int:
    model, channels, scenario = _load(args, settings)
    if kind is not None and scenario.attack_kind != kind:
        scenario = replace(scenario, attack_kind=kind, attack_params={})
    if kind == "fdi" and args.epsilon is not None:
        scenario = replace(scenario, attack_params={"epsilon": args.epsilon})
    scenario_id = Path(args.model).stem
    print(f"🔬 running {scenario.attack_kind} experiment on {scenario_id} ...")
    summary = run_experiment(
        scenario, model, channels, scenario_id=scenario_id, jobs=args.jobs, progress=not args.quiet, settings=settings
    )
    _print_summary(summary)

    out = _out_dir(args)
    if out is not None:
        if "ifcurve" in outputs:
            write_csv(summary.ifcurve_frame(), out / "ifcurve.csv", settings)
            if args.format == "csv+svg":
                from .charts import plot_if_curve

                plot_if_curve(summary, out / "ifcurve.svg")
        if "roc" in outputs:
            if summary.roc:
                write_csv(summary.roc_frame(), out / "roc.csv", settings)
                if args.format == "csv+svg":
                    from .charts import plot_roc

                    plot_roc(summary, out / "roc.svg")
            else:
                print("⚠️ too few trials for an ROC estimate; roc.csv not written")
        print(f"✅ results saved to {out}")
    return 0


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args, settings: Settings) -> int:
    model, channels, scenario = _load(args, settings)
    law = design_lqg(model, settings=settings)
    watermark_cov = scenario.watermark_cov
    if scenario.watermark_delta_j is not None:
        base = steady_state_filter(model, law, settings=settings)
        shape = np.eye(model.p) if watermark_cov is None else watermark_cov
        watermark_cov = calibrate_watermark(model, law, base, shape, scenario.watermark_delta_j, settings) * shape
    ssf = steady_state_filter(model, law, watermark_cov, settings)
    policy = build_policy(scenario, model, channels, settings)
    mode = "steady" if scenario.attack_kind == "replay" else "time_varying"
    record = simulate_trial(
        model, law, ssf, policy, watermark_cov, scenario.horizon, scenario.seed,
        channels=channels, filter_mode=mode, settings=settings,
    )

    parts = [
        pd.DataFrame({"k": np.arange(scenario.horizon + 1)}),
        pd.DataFrame(record.x, columns=_columns("x", model.n)),
        pd.DataFrame(record.u, columns=_columns("u", model.p)),
        pd.DataFrame(record.y, columns=_columns("y", model.m)),
        pd.DataFrame(record.z, columns=_columns("z", model.m)),
        pd.DataFrame({"chi2": record.chi2}),
    ]
    frame = pd.concat(parts, axis=1)
    print(f"🏁 simulated {scenario.attack_kind} trial, T={scenario.horizon}, seed={scenario.seed}")
    print(f"  • mean chi2 per step: {np.nanmean(record.chi2):.4f} (dof {model.m})")
    if record.diverged:
        print("  ⚠️ trajectory diverged")
    out = _out_dir(args)
    if out is not None:
        write_csv(frame, out / "trajectory.csv", settings)
        print(f"✅ trajectory saved to {out / 'trajectory.csv'}")
    return 0


def cmd_stealth_audit(args, settings: Settings) -> int:
    model, channels, scenario = _load(args, settings)
    report = pencil_rank_test(model, channels, settings)
    print(f"🔍 pencil rank test over {len(report.rank_profile)} probes (full rank = {report.columns})")
    print(report.frame().to_string(index=False))
    print(f"\n  • stealthy_exists: {report.stealthy_exists}")
    if report.witness_lambda is not None:
        lam = report.witness_lambda
        print(f"  • witness lambda:  {lam.real:+.6f}{lam.imag:+.6f}j")
    print(f"  • left_invertible: {report.left_invertible}")

    witness = synthesize_zero_flow_attack(model, channels, scenario.horizon, settings)
    if witness is None:
        print("  • no zero-information-flow attack over this horizon")
        return 0
    print(f"  • witness synthesized, max |dy| = {witness.max_output_deviation:.3e}")
    out = _out_dir(args)
    if out is not None:
        T = scenario.horizon
        ua = np.vstack([witness.ua_seq, np.full((1, channels.p_prime), np.nan)])
        frame = pd.concat(
            [
                pd.DataFrame({"k": np.arange(T + 1)}),
                pd.DataFrame(ua, columns=_columns("ua", channels.p_prime)),
                pd.DataFrame(witness.da_seq, columns=_columns("da", channels.m_prime)),
            ],
            axis=1,
        )
        write_csv(frame, out / "witness.csv", settings)
        print(f"✅ witness saved to {out / 'witness.csv'}")
    return 0


def cmd_watermark_design(args, settings: Settings) -> int:
    model, channels, scenario = _load(args, settings)
    target = scenario.watermark_delta_j
    if target is None:
        raise CliUsageError("watermark-design needs --watermark-deltaJ or scenario.watermark_delta_j")
    law = design_lqg(model, settings=settings)
    base = steady_state_filter(model, law, settings=settings)
    shape = np.eye(model.p) if scenario.watermark_cov is None else scenario.watermark_cov
    multiplier = calibrate_watermark(model, law, base, shape, target, settings)
    watermark_cov = multiplier * shape
    j_star = lqg_cost(model, law, None, base, settings)
    j_watermark = lqg_cost(model, law, watermark_cov, base, settings)
    ssf = steady_state_filter(model, law, watermark_cov, settings)
    epsilon = if_replay_watermark_bound(ssf, law, model, watermark_cov)
    best_cov, best_epsilon = optimal_watermark(model, law, base, target, settings)

    print(f"💧 watermark design for dJ/J* = {target}")
    print(f"  • J*:            {j_star:.6g}")
    print(f"  • multiplier:    {multiplier:.6g}")
    print(f"  • J(Q):          {j_watermark:.6g}")
    print(f"  • dJ/J*:         {(j_watermark - j_star) / j_star:.6f}")
    print(f"  • epsilon:       {epsilon:.6g}")
    print(f"  • optimal-shape epsilon: {best_epsilon:.6g}")
    out = _out_dir(args)
    if out is not None:
        document = {
            "delta_j_target": target,
            "j_star": j_star,
            "multiplier": multiplier,
            "watermark_cov": np.asarray(watermark_cov).tolist(),
            "j_watermark": j_watermark,
            "delta_j_ratio": (j_watermark - j_star) / j_star,
            "epsilon": epsilon,
            "optimal_watermark_cov": best_cov.tolist(),
            "optimal_epsilon": best_epsilon,
        }
        write_json(document, out / "watermark.json")
        print(f"✅ design saved to {out / 'watermark.json'}")
    return 0


def cmd_fdi(args, settings: Settings) -> int:
    return _experiment(args, settings, "fdi", ("ifcurve", "roc"))


def cmd_replay(args, settings: Settings) -> int:
    return _experiment(args, settings, "replay", ("ifcurve", "roc"))


def cmd_roc(args, settings: Settings) -> int:
    return _experiment(args, settings, None, ("roc",))


COMMANDS = {
    "simulate": cmd_simulate,
    "stealth-audit": cmd_stealth_audit,
    "fdi": cmd_fdi,
    "replay": cmd_replay,
    "watermark-design": cmd_watermark_design,
    "roc": cmd_roc,
}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser(settings: Settings) -> argparse.ArgumentParser:
    common = FlowtraceArgumentParser(add_help=False)
    common.add_argument("--model", required=True, metavar="PATH", help="模型文件 (JSON)")
    common.add_argument("--out", metavar="DIR", help="输出目录")
    common.add_argument("--seed", type=int, help="主随机种子 (覆盖模型文件)")
    common.add_argument("--horizon", type=int, metavar="T", help="时域长度 T")
    noise = common.add_mutually_exclusive_group()
    noise.add_argument("--verbose", action="store_true", help="DEBUG 日志")
    noise.add_argument("--quiet", action="store_true", help="只输出警告")

    experiment = FlowtraceArgumentParser(add_help=False)
    experiment.add_argument("--trials", type=int, help="每个假设的蒙特卡洛试验数")
    experiment.add_argument("--jobs", type=int, default=settings.jobs,
                            help=f"并行线程数 (默认: FLOWTRACE_JOBS 或 {settings.jobs})")
    experiment.add_argument("--watermark-deltaJ", dest="watermark_deltaJ", type=float, metavar="RATIO",
                            help="水印代价 dJ/J*")
    experiment.add_argument("--detector", choices=("chi2", "np"), help="检测器类型")
    experiment.add_argument("--delta", type=float, help="检测率目标 beta >= 1 - delta")
    experiment.add_argument("--format", choices=("csv", "csv+svg"), default="csv", help="输出格式 (默认: csv)")

    parser = FlowtraceArgumentParser(
        prog="flowtrace", description="线性随机控制系统攻击的KL信息流分析"
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=FlowtraceArgumentParser)
    sub.required = True
    sub.add_parser("simulate", parents=[common], help="单次闭环仿真，输出 trajectory.csv")
    sub.add_parser("stealth-audit", parents=[common], help="矩阵束秩检验与零信息流攻击合成")
    fdi = sub.add_parser("fdi", parents=[common, experiment], help="FDI 攻击信息流与 ROC")
    fdi.add_argument("--epsilon", type=float, help="每步残差偏置 |dz|^2 = 2*epsilon")
    sub.add_parser("replay", parents=[common, experiment], help="重放攻击信息流与 ROC (可选水印)")
    design = sub.add_parser("watermark-design", parents=[common], help="水印协方差标定")
    design.add_argument("--watermark-deltaJ", dest="watermark_deltaJ", type=float, metavar="RATIO",
                        help="水印代价 dJ/J*")
    sub.add_parser("roc", parents=[common, experiment], help="按模型文件中的攻击估计 ROC")
    return parser


def _configure_logging(args) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = Settings.from_env()
    parser = build_parser(settings)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _configure_logging(args)
    if getattr(args, "jobs", 1) < 1:
        print("❌ --jobs must be at least 1", file=sys.stderr)
        return USAGE_ERROR

    try:
        return COMMANDS[args.command](args, settings)
    except FileNotFoundError as e:
        print(f"❌ model file not found: {e.filename}", file=sys.stderr)
        return USAGE_ERROR
    except CliUsageError as e:
        print(f"❌ {e}", file=sys.stderr)
        return USAGE_ERROR
    except FlowtraceError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
