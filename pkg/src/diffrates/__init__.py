"""Discrete-time diffusion samplers and their convergence rates on mixture targets."""

from .schedule import Schedule, ScheduleError, ScheduleParams, build_schedule, verify_schedule_properties
from .targets import MixtureTarget, TargetError, marginal_density, moments
from .samplers import ALL_KINDS, SamplerKind, SamplerSpec, run_reverse

__version__ = "0.1.0"
