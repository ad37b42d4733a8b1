"""Self-consistency checks run by ``validate`` and by the test-suite."""

from __future__ import annotations

import math

import numpy as np

from .samplers import StepContext, ddpm_accel_step, ddpm_accel_step_kernel_form
from .schedule import Schedule
from .targets import MixtureTarget, moments, score_jacobian_fd


def random_points(target: MixtureTarget, schedule: Schedule, count: int, seed: int):
    """``(t, x)`` pairs with ``t`` uniform on ``2..T`` and ``x ~ q_t``."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        t = int(rng.integers(2, schedule.T + 1))
        _, ab, gam = schedule.at(t)
        x0 = target.sample(1, rng)[0]
        out.append((t, math.sqrt(ab) * x0 + math.sqrt(gam) * rng.standard_normal(target.dim)))
    return out


def jacobian_errors(target: MixtureTarget, schedule: Schedule, points, h=1e-5) -> np.ndarray:
    """Relative max-norm error of the closed-form Jacobian against central differences.

    The step is ``h (1 + |x|_inf)``.
    """
    errs = []
    for t, x in points:
        x = np.atleast_1d(x)
        J = moments(target, schedule, t, x).jac
        J_fd = score_jacobian_fd(target, schedule, t, x, h * (1 + np.abs(x).max()))
        errs.append(np.abs(J - J_fd).max() / max(np.abs(J).max(), 1e-300))
    return np.array(errs)


def kernel_form_errors(target: MixtureTarget, schedule: Schedule, count: int, seed: int) -> np.ndarray:
    """Max abs difference between the two ways of writing the accelerated stochastic step."""
    rng = np.random.default_rng(seed)
    errs = []
    for t, y in random_points(target, schedule, count, seed):
        z = rng.standard_normal(target.dim)
        ctx = StepContext.at(target, schedule, t, y)
        a = ddpm_accel_step(y, z, ctx)
        b = ddpm_accel_step_kernel_form(y, z, ctx)
        errs.append(np.abs(a - b).max())
    return np.array(errs)
