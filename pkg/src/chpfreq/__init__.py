"""Frequency regulation by heat pumps in coupled power and district-heating networks."""

__version__ = "0.1.0"

from .dynamics import CoupledModel, DisturbanceSchedule, Step  # noqa: E402
from .equilibrium import equilibrium, mode1_equilibrium, mode2_equilibrium, solve_qp, solve_qp_numeric  # noqa: E402
from .lyapunov import audit, check_monotone, v1e, v1h, v2  # noqa: E402
from .netmodel import CombinedSystem, validate  # noqa: E402
from .solver import SimParams, integrate, integrate_to_steady  # noqa: E402

__all__ = [
    "CombinedSystem",
    "CoupledModel",
    "DisturbanceSchedule",
    "SimParams",
    "Step",
    "audit",
    "check_monotone",
    "equilibrium",
    "integrate",
    "integrate_to_steady",
    "mode1_equilibrium",
    "mode2_equilibrium",
    "solve_qp",
    "solve_qp_numeric",
    "v1e",
    "v1h",
    "v2",
    "validate",
]
