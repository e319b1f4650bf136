"""Time-fractional Navier-Stokes-Fokker-Planck dumbbell model: kernels, Galerkin solver, Monte-Carlo and diagnostics."""
from .fractional_kernels import FractionalOrder, KernelWeights, SampledPath, Scheme, TimeGrid
from .fene_model import ModelParams, PhysicalParams, SpringModel
from .galerkin_solver import SpectralState, StepError

__version__ = "0.1.0"
