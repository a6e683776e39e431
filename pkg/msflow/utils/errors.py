"""Exception hierarchy shared by the msflow pipeline."""


class MsflowError(Exception):
    """Base class for all msflow errors."""


class InputError(MsflowError, ValueError):
    """Unreadable or inconsistent input file / configuration."""


class GridMismatchError(MsflowError, ValueError):
    """Two fields live on different grids."""


class MassMismatchError(MsflowError, ValueError):
    """Transport requested between fields of different mass."""


class CellCapExceededError(MsflowError, ValueError):
    """Too many active cells for the exact linear-program solver."""


class DivergenceError(MsflowError, ValueError):
    """A test vector field is not discretely divergence-free."""


class SinkhornConvergenceError(MsflowError, RuntimeError):
    """Entropic solver did not reach the marginal tolerance."""

    def __init__(self, message: str, violation: float, iterations: int):
        super().__init__(f"{message} (violation={violation:.3e}, iterations={iterations})")
        self.violation = violation
        self.iterations = iterations


class InnerSolverError(MsflowError, RuntimeError):
    """The relaxed minimizing-movement solver produced a non-finite iterate."""


class TransportSolverError(MsflowError, RuntimeError):
    """The exact linear-program transport solve failed."""
