"""Particle simulation of one-dimensional McKean-Vlasov SDEs whose drift jumps at 0.

The jump is removed by the map ``G(x) = x + alpha x|x| phi(x/c)``
(:mod:`mvsde.transform`); :mod:`mvsde.simulate` steps the particle system
either directly or in the transformed coordinates, and :mod:`mvsde.analysis`
measures strong convergence on coupled Brownian lattices.
"""

from .errors import (
    ConfigError,
    DegenerateDiffusionError,
    DegenerateFitError,
    DivergedSimulationError,
    ImplicitStepError,
    InversionError,
    LatticeTooLargeError,
    MVSDEError,
    ParameterDomainError,
    SpecViolationError,
    UnsupportedInputError,
)
from .measure import EmpiricalMeasure, empirical_mean, empirical_moment, w2_bruteforce, w2_sorted
from .model import build_model, modulated_jump_model, neuronal_model, systemic_risk_model
from .simulate import SchemeConfig, brownian_lattice, coarsen, run_scheme
from .transform import GeneralTransformSpec, TransformSpec, alpha_from_jump, choose_c

__version__ = "0.1.0"
