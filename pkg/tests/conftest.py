"""
共享测试夹具：双积分器模型文件、标量模型工厂、攻击通道工厂
"""

from pathlib import Path

import numpy as np
import pytest

from flowtrace.model import AttackChannels, SystemModel, load_model, validate_channels, validate_model

FIXTURE_PATH = Path(__file__).resolve().parent.parent / "flowtrace" / "data" / "double_integrator.model"
PHI = (1.0 + np.sqrt(5.0)) / 2.0


def make_model(A, B, C, Q=None, R=None, x0_mean=None, x0_cov=None) -> SystemModel:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n, m = A.shape[0], C.shape[0]
    return validate_model(
        SystemModel(
            A=A,
            B=np.asarray(B, dtype=float).reshape(n, -1),
            C=C,
            Q=np.eye(n) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float)),
            R=np.eye(m) if R is None else np.atleast_2d(np.asarray(R, dtype=float)),
            x0_mean=np.zeros(n) if x0_mean is None else np.asarray(x0_mean, dtype=float),
            x0_cov=np.eye(n) if x0_cov is None else np.atleast_2d(np.asarray(x0_cov, dtype=float)),
        )
    )


def make_channels(model: SystemModel, Ba=None, sensors=()) -> AttackChannels:
    Ba = np.zeros((model.n, 0)) if Ba is None else np.asarray(Ba, dtype=float).reshape(model.n, -1)
    return validate_channels(AttackChannels(Ba=Ba, sensors=tuple(sensors)), model)


@pytest.fixture
def fixture_path() -> Path:
    return FIXTURE_PATH


@pytest.fixture
def double_integrator():
    """(model, channels, scenario)"""
    return load_model(FIXTURE_PATH)


@pytest.fixture
def scalar_model() -> SystemModel:
    """a = b = c = q = r = 1"""
    return make_model([[1.0]], [[1.0]], [[1.0]])


@pytest.fixture
def model_factory():
    return make_model


@pytest.fixture
def channels_factory():
    return make_channels


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行全规模蒙特卡洛测试")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 全规模蒙特卡洛测试，需 --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
