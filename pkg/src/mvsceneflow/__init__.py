"""Joint estimation of two-camera ego-motion and absolute scene flow.

Modules:

* :mod:`~mvsceneflow.geometry`: frame-tagged SE(3) arithmetic
* :mod:`~mvsceneflow.residuals`: measures, parameters and residual blocks
* :mod:`~mvsceneflow.solver`: Levenberg-Marquardt with flow-block elimination
* :mod:`~mvsceneflow.synthworld`: synthetic deforming scenes and their measures
* :mod:`~mvsceneflow.noise`: seeded perturbation of measures
* :mod:`~mvsceneflow.metrics`: ADD metrics
* :mod:`~mvsceneflow.harness`: experiment sweeps and result emission
"""

from .geometry import Frame, Pose, compose, inverse, local, retract
from .residuals import MeasureSet, ParameterSet, ProblemConfig, evaluate_blocks, total_cost
from .solver import SolveOptions, SolveReport, solve

__version__ = "0.1.0"

__all__ = [
    "Frame",
    "MeasureSet",
    "ParameterSet",
    "Pose",
    "ProblemConfig",
    "SolveOptions",
    "SolveReport",
    "compose",
    "evaluate_blocks",
    "inverse",
    "local",
    "retract",
    "solve",
    "total_cost",
]
