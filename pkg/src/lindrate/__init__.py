"""Simulation engine for non-Markovian block master equations.

Deterministic propagation, jump-diffusion wave-function unravellings
(likelihood-weighted and normalized), filtering equations with a
measurement interpretation, and the concrete two-level structured-bath
example with its analytic heterodyne spectrum.
"""

from .blockalg import (BlockDensity, BlockOperator, BlockVector,
                       CouplingOperator, block_sum, outer_blocks, trace_norm)
from .master import (Propagator, classical_reduction, equilibrium, evolve,
                     generator_matrix)
from .model import (AssembledGenerators, CouplingChannel, DiagonalChannel,
                    ObservedCutoffs, PhaseModulation, RateModel, assemble,
                    extended_generator, load_model, rate_generator,
                    tilde_generator, validate)
from .sde_linear import (LinearTrajectory, NoisePath, doleans_density,
                         simulate_linear, step_linear, unravel_weighted)
from .sde_nonlinear import (PhysicalTrajectory, simulate_physical,
                            step_physical, unravel_normalized)
from .sme import (ObservedRecord, instrument_statistic, replay_linear_sme,
                  replay_nonlinear_sme, simulate_linear_sme,
                  simulate_nonlinear_sme, step_linear_sme, step_nonlinear_sme)
from .twolevel import (SpectrumCoefficients, TwoLevelParams, build_model,
                       equilibrium_closed_form, power_monte_carlo,
                       power_quadrature, spectrum_form_a, spectrum_form_b)

__version__ = "0.1.0"

__all__ = [
    "BlockDensity", "BlockOperator", "BlockVector", "CouplingOperator",
    "block_sum", "outer_blocks", "trace_norm",
    "RateModel", "DiagonalChannel", "CouplingChannel", "ObservedCutoffs",
    "PhaseModulation", "AssembledGenerators", "assemble", "validate",
    "rate_generator", "extended_generator", "tilde_generator", "load_model",
    "Propagator", "evolve", "equilibrium", "classical_reduction",
    "generator_matrix",
    "NoisePath", "LinearTrajectory", "step_linear", "simulate_linear",
    "doleans_density", "unravel_weighted",
    "PhysicalTrajectory", "step_physical", "simulate_physical",
    "unravel_normalized",
    "ObservedRecord", "step_linear_sme", "step_nonlinear_sme",
    "simulate_linear_sme", "simulate_nonlinear_sme", "replay_linear_sme",
    "replay_nonlinear_sme", "instrument_statistic",
    "TwoLevelParams", "SpectrumCoefficients", "build_model",
    "equilibrium_closed_form", "spectrum_form_a", "spectrum_form_b",
    "power_quadrature", "power_monte_carlo",
]
