from typing import Any, Dict, Optional


class SimulationError(Exception):
    """Base class for every failure raised by the simulator."""

    exit_code = 2

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(SimulationError):
    exit_code = 1


class UsageError(SimulationError):
    exit_code = 1


class DomainError(SimulationError):
    exit_code = 1


class NumericalError(SimulationError):
    pass


class FitError(SimulationError):
    pass


class SensitivityError(SimulationError):
    pass


class StatisticsError(SimulationError):
    pass


class OutputError(SimulationError):
    pass


class AbortBudgetExceeded(SimulationError):
    exit_code = 3

    def __init__(self, n_aborted: int, n_traj: int, budget: float):
        super().__init__(
            f"{n_aborted} of {n_traj} trajectories aborted (budget {budget:.2%})",
            {"n_aborted": n_aborted, "n_traj": n_traj, "budget": budget},
        )
        self.n_aborted = n_aborted
        self.n_traj = n_traj
        self.budget = budget
