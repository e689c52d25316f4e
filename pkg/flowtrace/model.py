"""
flowtrace model layer
被控对象、攻击通道与实验场景的定义、校验与模型文件读写
"""

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from .config import DEFAULT_SETTINGS, Settings
from .detection import DetectorSpec, as_float, as_integer
from .errors import (
    ChannelError,
    DimensionMismatchError,
    ModelParseError,
    NonPSDError,
    SingularMatrixError,
    ValidationError,
)

logger = logging.getLogger(__name__)

ATTACK_KINDS = ("none", "fdi", "zero_dynamics", "replay")
SYSTEM_FIELDS = ("A", "B", "C", "Q", "R", "x0_mean", "x0_cov")
ATTACK_FIELDS = ("Ba", "sensors")
SCENARIO_FIELDS = (
    "horizon",
    "trials",
    "seed",
    "attack_kind",
    "watermark_cov",
    "watermark_delta_j",
    "detector",
)


def _frozen(array: np.ndarray) -> np.ndarray:
    out = np.array(array, dtype=float, copy=True)
    out.setflags(write=False)
    return out


def _arrays_equal(left: Any, right: Any, names: Sequence[str]) -> bool:
    return all(np.array_equal(getattr(left, name), getattr(right, name)) for name in names)


@dataclass(frozen=True, eq=False)
class SystemModel:
    """x_{k+1} = A x_k + B u_k + w_k,  y_k = C x_k + v_k"""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x0_mean: np.ndarray
    x0_cov: np.ndarray

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]

    @property
    def m(self) -> int:
        return self.C.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SystemModel):
            return NotImplemented
        return _arrays_equal(self, other, SYSTEM_FIELDS)


@dataclass(frozen=True, eq=False)
class AttackChannels:
    """攻击者可注入的执行器方向 Ba 与被篡改的传感器集合（从1开始编号）"""

    Ba: np.ndarray
    sensors: Tuple[int, ...] = ()

    @property
    def p_prime(self) -> int:
        return self.Ba.shape[1]

    @property
    def m_prime(self) -> int:
        return len(self.sensors)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttackChannels):
            return NotImplemented
        return np.array_equal(self.Ba, other.Ba) and self.sensors == other.sensors


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    horizon: int = 200
    trials: int = 1000
    seed: int = 1
    attack_kind: str = "none"
    attack_params: Dict[str, Any] = field(default_factory=dict)
    watermark_cov: Optional[np.ndarray] = None
    watermark_delta_j: Optional[float] = None
    detector: DetectorSpec = field(default_factory=DetectorSpec)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ScenarioConfig):
            return NotImplemented
        if (self.watermark_cov is None) != (other.watermark_cov is None):
            return False
        if self.watermark_cov is not None and not np.array_equal(self.watermark_cov, other.watermark_cov):
            return False
        return (
            self.horizon == other.horizon
            and self.trials == other.trials
            and self.seed == other.seed
            and self.attack_kind == other.attack_kind
            and self.attack_params == other.attack_params
            and self.watermark_delta_j == other.watermark_delta_j
            and self.detector == other.detector
        )


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def _matrix(value: Any, name: str, shape: Tuple[Optional[int], Optional[int]]) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as e:
        raise ModelParseError(f"{name}: not a numeric matrix ({e})", field=name) from e
    if arr.ndim == 1 and arr.size == 0 and shape[0] is not None:
        arr = arr.reshape(shape[0], 0)
    if arr.ndim != 2:
        raise DimensionMismatchError(f"{name}: expected a matrix, got {arr.ndim}-d data", field=name)
    rows, cols = shape
    if (rows is not None and arr.shape[0] != rows) or (cols is not None and arr.shape[1] != cols):
        want = f"{rows if rows is not None else '*'}x{cols if cols is not None else '*'}"
        raise DimensionMismatchError(
            f"{name}: expected {want}, got {arr.shape[0]}x{arr.shape[1]}", field=name
        )
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: non-finite entries", field=name)
    return arr


def _vector(value: Any, name: str, size: int) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as e:
        raise ModelParseError(f"{name}: not a numeric vector ({e})", field=name) from e
    if arr.ndim != 1 or arr.shape[0] != size:
        raise DimensionMismatchError(f"{name}: expected a {size}-vector, got shape {arr.shape}", field=name)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: non-finite entries", field=name)
    return arr


def symmetric_psd(M: np.ndarray, name: str, settings: Settings = DEFAULT_SETTINGS) -> np.ndarray:
    """对称化并检查半正定"""
    norm = float(np.linalg.norm(M, 2)) if M.size else 0.0
    asymmetry = float(np.linalg.norm(M - M.T, 2)) if M.size else 0.0
    if asymmetry > settings.symmetry_tol * max(norm, 1.0):
        raise NonPSDError(f"{name}: matrix is not symmetric (asymmetry {asymmetry:.3e})", field=name)
    sym = (M + M.T) / 2.0
    if sym.size:
        smallest = float(np.linalg.eigvalsh(sym)[0])
        if smallest < -settings.psd_tol * norm:
            raise NonPSDError(f"{name}: not positive semidefinite (smallest eigenvalue {smallest:.6g})", field=name)
    return sym


def validate_model(model: SystemModel, settings: Settings = DEFAULT_SETTINGS) -> SystemModel:
    """校验维度、对称性与半正定性，返回对称化后的模型"""
    A = _matrix(model.A, "A", (None, None))
    if A.shape[0] != A.shape[1]:
        raise DimensionMismatchError(f"A: expected a square matrix, got {A.shape[0]}x{A.shape[1]}", field="A")
    n = A.shape[0]
    if n == 0:
        raise DimensionMismatchError("A: state dimension must be at least 1", field="A")
    B = _matrix(model.B, "B", (n, None))
    C = _matrix(model.C, "C", (None, n))
    m = C.shape[0]
    if m == 0:
        raise DimensionMismatchError("C: at least one output is required", field="C")
    Q = symmetric_psd(_matrix(model.Q, "Q", (n, n)), "Q", settings)
    R = symmetric_psd(_matrix(model.R, "R", (m, m)), "R", settings)
    r_eigs = np.linalg.eigvalsh(R)
    if r_eigs[0] <= settings.singular_tol * max(float(r_eigs[-1]), 1.0):
        raise SingularMatrixError("R: measurement-noise covariance must be positive definite", field="R")
    x0_mean = _vector(model.x0_mean, "x0_mean", n)
    x0_cov = symmetric_psd(_matrix(model.x0_cov, "x0_cov", (n, n)), "x0_cov", settings)
    return SystemModel(
        A=_frozen(A),
        B=_frozen(B),
        C=_frozen(C),
        Q=_frozen(Q),
        R=_frozen(R),
        x0_mean=_frozen(x0_mean),
        x0_cov=_frozen(x0_cov),
    )


def build_da(channels: AttackChannels, m: int) -> np.ndarray:
    """传感器选择矩阵 D^a：D[u, v] = 1 当且仅当 u = γ_v"""
    Da = np.zeros((m, len(channels.sensors)))
    for column, sensor in enumerate(channels.sensors):
        if not 1 <= sensor <= m:
            raise ChannelError(f"sensors: index {sensor} outside 1..{m}", field="sensors")
        Da[sensor - 1, column] = 1.0
    return Da


def validate_channels(channels: AttackChannels, model: SystemModel) -> AttackChannels:
    Ba = _matrix(channels.Ba, "Ba", (model.n, None))
    if Ba.shape[1] and np.linalg.matrix_rank(Ba) < Ba.shape[1]:
        raise ChannelError("Ba: attack input matrix must have full column rank", field="Ba")
    sensors = tuple(int(s) for s in channels.sensors)
    if any(b <= a for a, b in zip(sensors, sensors[1:])):
        raise ChannelError("sensors: indices must be strictly increasing", field="sensors")
    build_da(AttackChannels(Ba=Ba, sensors=sensors), model.m)
    return AttackChannels(Ba=_frozen(Ba), sensors=sensors)


def no_channels(model: SystemModel) -> AttackChannels:
    return AttackChannels(Ba=_frozen(np.zeros((model.n, 0))), sensors=())


def validate_scenario(scenario: ScenarioConfig, model: SystemModel, settings: Settings = DEFAULT_SETTINGS) -> ScenarioConfig:
    horizon = as_integer(scenario.horizon, "scenario.horizon")
    trials = as_integer(scenario.trials, "scenario.trials")
    seed = as_integer(scenario.seed, "scenario.seed")
    if horizon < 1:
        raise ValidationError("scenario.horizon: must be at least 1", field="horizon")
    if trials < 1:
        raise ValidationError("scenario.trials: must be at least 1", field="trials")
    if not 0 <= seed < 2 ** 64:
        raise ValidationError("scenario.seed: must be an unsigned 64-bit integer", field="seed")
    if scenario.attack_kind not in ATTACK_KINDS:
        raise ValidationError(
            f"scenario.attack_kind: unknown kind '{scenario.attack_kind}' (expected one of {', '.join(ATTACK_KINDS)})",
            field="attack_kind",
        )
    wm = scenario.watermark_cov
    if wm is not None:
        wm = _frozen(symmetric_psd(_matrix(wm, "watermark_cov", (model.p, model.p)), "watermark_cov", settings))
    delta_j = scenario.watermark_delta_j
    if delta_j is not None:
        delta_j = as_float(delta_j, "scenario.watermark_delta_j")
        if not delta_j > 0:
            raise ValidationError("scenario.watermark_delta_j: must be positive", field="watermark_delta_j")
    return replace(
        scenario,
        horizon=horizon,
        trials=trials,
        seed=seed,
        watermark_cov=wm,
        watermark_delta_j=delta_j,
    )


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

def _reject_unknown(block: Dict[str, Any], allowed: Sequence[str], path: str) -> None:
    for key in block:
        if key not in allowed:
            raise ModelParseError(f"{path}{key}: unknown key", field=f"{path}{key}")


def _require_object(value: Any, path: str) -> Dict[str, Any]:
    if not isinstance(value, dict):
        raise ModelParseError(f"{path}: expected an object", field=path)
    return value


def _numeric(value: Any, path: str) -> np.ndarray:
    try:
        return np.asarray(value, dtype=float)
    except (TypeError, ValueError) as e:
        raise ModelParseError(f"{path}: not numeric ({e})", field=path) from e


def _parse_field(value: Any, path: str, convert: Callable[[Any, str], Any]) -> Any:
    """转换标量字段，失败时报告字段路径"""
    try:
        return convert(value, path)
    except ModelParseError:
        raise
    except ValidationError as e:
        raise ModelParseError(str(e), field=path) from e


def _parse_attack_kind(value: Any) -> Tuple[str, Dict[str, Any]]:
    if isinstance(value, str):
        return value, {}
    block = dict(_require_object(value, "scenario.attack_kind"))
    kind = block.pop("kind", None)
    if not isinstance(kind, str):
        raise ModelParseError("scenario.attack_kind.kind: missing attack kind", field="scenario.attack_kind.kind")
    return kind, block


def parse_model(text: str, settings: Settings = DEFAULT_SETTINGS) -> Tuple[SystemModel, AttackChannels, ScenarioConfig]:
    """解析模型文件文本"""
    if not text.strip():
        raise ModelParseError("empty document", line=1)
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelParseError(f"invalid JSON: {e.msg} (column {e.colno})", line=e.lineno) from e

    document = _require_object(document, "<document>")
    _reject_unknown(document, ("system", "attack", "scenario"), "")
    if "system" not in document:
        raise ModelParseError("system: missing block", field="system")

    system = _require_object(document["system"], "system")
    _reject_unknown(system, SYSTEM_FIELDS, "system.")
    missing = [name for name in SYSTEM_FIELDS if name not in system]
    if missing:
        raise ModelParseError(f"system.{missing[0]}: missing field", field=f"system.{missing[0]}")

    raw = SystemModel(**{name: _numeric(system[name], f"system.{name}") for name in SYSTEM_FIELDS})
    model = validate_model(raw, settings)

    attack = _require_object(document.get("attack", {}), "attack")
    _reject_unknown(attack, ATTACK_FIELDS, "attack.")
    Ba = _numeric(attack.get("Ba", [[] for _ in range(model.n)]), "attack.Ba")
    sensors = attack.get("sensors", [])
    if not isinstance(sensors, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in sensors):
        raise ModelParseError("attack.sensors: expected a list of integers", field="attack.sensors")
    channels = validate_channels(AttackChannels(Ba=Ba, sensors=tuple(sensors)), model)

    block = _require_object(document.get("scenario", {}), "scenario")
    _reject_unknown(block, SCENARIO_FIELDS, "scenario.")
    kind, params = _parse_attack_kind(block.get("attack_kind", "none"))
    detector_block = _require_object(block.get("detector", {}), "scenario.detector")
    try:
        detector = DetectorSpec.from_dict(detector_block)
    except ValidationError as e:
        path = f"scenario.{e.field}" if e.field and not e.field.startswith("scenario.") else "scenario.detector"
        message = str(e)
        if e.field and message.startswith(e.field):
            message = path + message[len(e.field):]
        raise ModelParseError(message, field=path) from e
    wm = block.get("watermark_cov")
    delta_j = block.get("watermark_delta_j")
    scenario = ScenarioConfig(
        horizon=_parse_field(block.get("horizon", 200), "scenario.horizon", as_integer),
        trials=_parse_field(block.get("trials", 1000), "scenario.trials", as_integer),
        seed=_parse_field(block.get("seed", 1), "scenario.seed", as_integer),
        attack_kind=kind,
        attack_params=params,
        watermark_cov=None if wm is None else _numeric(wm, "scenario.watermark_cov"),
        watermark_delta_j=None if delta_j is None else _parse_field(delta_j, "scenario.watermark_delta_j", as_float),
        detector=detector,
    )
    scenario = validate_scenario(scenario, model, settings)
    logger.debug(f"parsed model n={model.n} p={model.p} m={model.m}, attack '{scenario.attack_kind}'")
    return model, channels, scenario


def load_model(
    source: Union[str, Path, TextIO], settings: Settings = DEFAULT_SETTINGS
) -> Tuple[SystemModel, AttackChannels, ScenarioConfig]:
    """从文件路径或文件对象加载模型"""
    if hasattr(source, "read"):
        return parse_model(source.read(), settings)  # type: ignore[union-attr]
    with open(source, "r", encoding="utf-8") as fh:
        return parse_model(fh.read(), settings)


def model_document(model: SystemModel, channels: AttackChannels, scenario: ScenarioConfig) -> Dict[str, Any]:
    system = {name: getattr(model, name).tolist() for name in SYSTEM_FIELDS}
    attack = {"Ba": channels.Ba.tolist(), "sensors": list(channels.sensors)}
    block: Dict[str, Any] = {
        "horizon": scenario.horizon,
        "trials": scenario.trials,
        "seed": scenario.seed,
        "attack_kind": (
            {"kind": scenario.attack_kind, **scenario.attack_params}
            if scenario.attack_params
            else scenario.attack_kind
        ),
    }
    if scenario.watermark_cov is not None:
        block["watermark_cov"] = np.asarray(scenario.watermark_cov).tolist()
    if scenario.watermark_delta_j is not None:
        block["watermark_delta_j"] = scenario.watermark_delta_j
    block["detector"] = scenario.detector.to_dict()
    return {"system": system, "attack": attack, "scenario": block}


def save_model(
    model: SystemModel,
    channels: AttackChannels,
    scenario: ScenarioConfig,
    path: Optional[Union[str, Path]] = None,
) -> str:
    """序列化为JSON；给定路径时原子写入"""
    text = json.dumps(model_document(model, channels, scenario), indent=2) + "\n"
    if path is not None:
        target = Path(path)
        tmp = target.with_name(f".{target.name}.tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, target)
    return text
