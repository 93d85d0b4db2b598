"""Exception hierarchy shared by all modules."""


class WdriError(Exception):
    """Base class for package errors."""


class InvalidArgument(WdriError, ValueError):
    pass


class StabilityError(WdriError):
    """Time step violates the CFL bound."""

    def __init__(self, dt: float, dt_max: float):
        super().__init__(f"dt={dt:.6g} s exceeds the stability bound {dt_max:.6g} s")
        self.dt = dt
        self.dt_max = dt_max


class DivergenceError(WdriError):
    def __init__(self, step: int):
        super().__init__(f"non-finite wavefield at time step {step}")
        self.step = step


class ConsistencyError(WdriError):
    """Checkpoint or state does not match the model/inputs it is used with."""


class DegenerateInput(WdriError, ValueError):
    pass


class ZeroDirection(WdriError):
    """Data-space direction vanished; the residual is converged."""


class FormatError(WdriError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ConfigError(WdriError):
    def __init__(self, messages: list[str]):
        super().__init__("; ".join(messages))
        self.messages = messages
