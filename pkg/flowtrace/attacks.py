"""
flowtrace attack library
攻击策略：无攻击、虚假数据注入(FDI)、零动态攻击、重放攻击
"""

import logging
from typing import Optional

import numpy as np
from scipy import linalg as la

from .errors import ChannelError, HorizonError, ValidationError
from .estimation import SteadyStateFilter, covariance_schedule
from .model import AttackChannels, SystemModel, build_da

logger = logging.getLogger(__name__)


class AttackPolicy:
    """Attack policy interface.

    ``actuator_input(k)`` returns u^a_k (p′) and ``sensor_input(k, y_pu)``
    returns d^a_k (m′). ``y_pu`` is the live output on the attacked
    sensors; output-independent policies never read it.
    """

    kind = "none"
    output_independent = True

    def __init__(self, p_prime: int, m_prime: int):
        self.p_prime = p_prime
        self.m_prime = m_prime

    def actuator_input(self, k: int) -> np.ndarray:
        return np.zeros(self.p_prime)

    def sensor_input(self, k: int, y_pu: Optional[np.ndarray]) -> np.ndarray:
        return np.zeros(self.m_prime)

    def check(self, channels: AttackChannels, model: SystemModel, T: int) -> None:
        if (self.p_prime, self.m_prime) != (channels.p_prime, channels.m_prime):
            raise ChannelError(
                f"{self.kind} policy emits ({self.p_prime}, {self.m_prime}) inputs, "
                f"channels expect ({channels.p_prime}, {channels.m_prime})"
            )

    def __repr__(self) -> str:
        return f"{type(self).__name__}(kind={self.kind!r}, p'={self.p_prime}, m'={self.m_prime})"


class NoAttack(AttackPolicy):
    pass


def no_attack(channels: AttackChannels) -> NoAttack:
    return NoAttack(channels.p_prime, channels.m_prime)


class FdiPolicy(AttackPolicy):
    """固定序列注入，与输出无关"""

    kind = "fdi"

    def __init__(self, ua_seq: np.ndarray, da_seq: np.ndarray, kind: str = "fdi"):
        ua = np.array(ua_seq, dtype=float)
        da = np.array(da_seq, dtype=float)
        if ua.ndim != 2 or da.ndim != 2:
            raise ValidationError("fdi sequences must be 2-d arrays (steps x channels)")
        super().__init__(ua.shape[1], da.shape[1])
        ua.setflags(write=False)
        da.setflags(write=False)
        self.ua_seq = ua
        self.da_seq = da
        self.kind = kind

    def actuator_input(self, k: int) -> np.ndarray:
        if k < self.ua_seq.shape[0]:
            return self.ua_seq[k]
        return np.zeros(self.p_prime)

    def sensor_input(self, k: int, y_pu: Optional[np.ndarray]) -> np.ndarray:
        if k < self.da_seq.shape[0]:
            return self.da_seq[k]
        return np.zeros(self.m_prime)

    def check(self, channels: AttackChannels, model: SystemModel, T: int) -> None:
        super().check(channels, model, T)
        if self.ua_seq.shape[0] < T or self.da_seq.shape[0] < T + 1:
            raise HorizonError(
                f"{self.kind} sequences cover ({self.ua_seq.shape[0]}, {self.da_seq.shape[0]}) steps, "
                f"horizon {T} needs ({T}, {T + 1})"
            )

    def scaled(self, factor: float) -> "FdiPolicy":
        return FdiPolicy(self.ua_seq * factor, self.da_seq * factor, kind=self.kind)


def fdi_policy(ua_seq, da_seq) -> FdiPolicy:
    """ua_seq: (T, p′)，da_seq: (T+1, m′)"""
    return FdiPolicy(ua_seq, da_seq)


def constant_fdi_policy(channels: AttackChannels, T: int, sensor_bias=None, actuator_bias=None) -> FdiPolicy:
    """常值偏置注入"""
    sensor = np.zeros(channels.m_prime) if sensor_bias is None else np.asarray(sensor_bias, dtype=float)
    actuator = np.zeros(channels.p_prime) if actuator_bias is None else np.asarray(actuator_bias, dtype=float)
    if sensor.shape != (channels.m_prime,) or actuator.shape != (channels.p_prime,):
        raise ChannelError("constant FDI bias does not match the attack channels")
    return FdiPolicy(np.tile(actuator, (T, 1)), np.tile(sensor, (T + 1, 1)))


def fdi_bias_attack(
    model: SystemModel,
    channels: AttackChannels,
    eps: float,
    T: int,
    direction=None,
    ssf: Optional[SteadyStateFilter] = None,
) -> FdiPolicy:
    """Sensor injection with ‖Δz_k‖² = 2ε at every step.

    With every sensor attacked the residue bias is pinned to
    √(2ε)·direction by inverting the Δz recursion; otherwise the first
    attacked sensor is scaled each step onto the 2ε sphere.
    """
    if channels.m_prime == 0:
        raise ChannelError("fdi_bias_attack needs at least one attacked sensor")
    if eps < 0:
        raise ValidationError("fdi_bias_attack: eps must be nonnegative")
    A, C = model.A, model.C
    Da = build_da(channels, model.m)
    if ssf is None:
        _, K, Pz_is = covariance_schedule(model, T)
    else:
        K = np.broadcast_to(ssf.K, (T + 1,) + ssf.K.shape)
        Pz_is = np.broadcast_to(ssf.Pz_inv_sqrt, (T + 1, model.m, model.m))

    target = None
    if channels.m_prime == model.m:
        unit = np.ones(model.m) if direction is None else np.asarray(direction, dtype=float)
        target = np.sqrt(2.0 * eps) * unit / np.linalg.norm(unit)

    radius2 = 2.0 * eps
    delta_e = np.zeros(model.n)
    da = np.zeros((T + 1, channels.m_prime))
    for k in range(T + 1):
        a = Pz_is[k] @ C @ delta_e
        if target is not None:
            sol, *_ = la.lstsq(Pz_is[k] @ Da, target - a)
            da[k] = sol
        else:
            b = Pz_is[k] @ Da[:, 0]
            ab, bb = float(a @ b), float(b @ b)
            disc = ab * ab - bb * (float(a @ a) - radius2)
            if disc < 0:
                raise ValidationError(f"fdi_bias_attack: residue bias 2*eps unreachable at step {k}")
            roots = [(-ab + np.sqrt(disc)) / bb, (-ab - np.sqrt(disc)) / bb]
            da[k, 0] = min(roots, key=lambda s: (abs(s), -s))
        if k < T:
            AK = A @ K[k]
            delta_e = (A - AK @ C) @ delta_e - AK @ Da @ da[k]
    logger.debug(f"designed FDI sequence with |dz|^2 = {radius2:.6g} over {T + 1} steps")
    return FdiPolicy(np.zeros((T, channels.p_prime)), da)


def zero_dynamics_policy(witness) -> FdiPolicy:
    """将零信息流见证序列包装为与输出无关的攻击策略"""
    return FdiPolicy(witness.ua_seq, witness.da_seq, kind="zero_dynamics")


class ReplayBuffer:
    """录制的 y_{−N}..y_{−N+T}"""

    def __init__(self, recorded_y: np.ndarray):
        data = np.array(recorded_y, dtype=float)
        data.setflags(write=False)
        self.recorded_y = data

    def __len__(self) -> int:
        return self.recorded_y.shape[0]

    def playback(self, k: int) -> np.ndarray:
        if not 0 <= k < len(self):
            raise HorizonError(f"replay index {k} outside recorded window of {len(self)} samples")
        return self.recorded_y[k]


class ReplayPolicy(AttackPolicy):
    """重放攻击：用录制数据替换全部传感器输出"""

    kind = "replay"
    output_independent = False

    def __init__(self, n_rec: Optional[int], p_prime: int = 0, m_prime: int = 0, buffer: Optional[ReplayBuffer] = None):
        super().__init__(p_prime, m_prime)
        self.n_rec = n_rec
        self.buffer = buffer

    def bind(self, buffer: ReplayBuffer) -> "ReplayPolicy":
        """每个试验绑定自己的录制数据"""
        if self.n_rec is not None and len(buffer) < self.n_rec:
            raise HorizonError(f"recording holds {len(buffer)} samples, replay needs {self.n_rec}")
        return ReplayPolicy(self.n_rec, self.p_prime, buffer.recorded_y.shape[1], buffer)

    def sensor_input(self, k: int, y_pu: Optional[np.ndarray]) -> np.ndarray:
        if self.buffer is None:
            raise HorizonError("replay policy used before a recording was bound")
        return self.buffer.playback(k) - np.asarray(y_pu, dtype=float)

    def check(self, channels: AttackChannels, model: SystemModel, T: int) -> None:
        if channels.m_prime != model.m:
            raise ChannelError(
                f"replay requires all sensors: attacker holds {channels.m_prime} of {model.m}",
                field="sensors",
            )
        if self.n_rec is not None and self.n_rec < T + 1:
            raise HorizonError(f"replay window {self.n_rec} shorter than horizon {T} + 1")


def replay_policy(n_rec: Optional[int] = None, channels: Optional[AttackChannels] = None) -> ReplayPolicy:
    if channels is None:
        return ReplayPolicy(n_rec)
    return ReplayPolicy(n_rec, channels.p_prime, channels.m_prime)
