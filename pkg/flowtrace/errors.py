"""
flowtrace errors
异常层级：每个异常携带CLI退出码
"""

from typing import Optional


class FlowtraceError(Exception):
    """所有flowtrace异常的基类"""

    exit_code = 3

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


# Validation errors (exit code 2)

class ValidationError(FlowtraceError):
    """输入不满足模型约束"""

    exit_code = 2


class ModelParseError(ValidationError):
    """模型文件无法解析"""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, field)
        self.line = line


class DimensionMismatchError(ValidationError):
    pass


class NonPSDError(ValidationError):
    pass


class SingularMatrixError(ValidationError):
    pass


class ChannelError(ValidationError):
    """攻击通道配置错误"""


class HorizonError(ValidationError):
    pass


class PreconditionError(ValidationError):
    pass


class InsufficientTrialsError(ValidationError):
    pass


# Numeric failures (exit code 3)

class NumericError(FlowtraceError):
    """数值计算失败"""

    exit_code = 3


class ConvergenceError(NumericError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (residual norm {residual:.3e})")
        self.residual = residual


class UnstableError(NumericError):
    def __init__(self, message: str, spectral_radius: float = float("nan")):
        super().__init__(f"{message} (spectral radius {spectral_radius:.6g})")
        self.spectral_radius = spectral_radius


class SingularCovarianceError(NumericError):
    pass


class UnsupportedPolicyError(NumericError):
    pass
