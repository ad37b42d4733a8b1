"""The four reverse-process update rules and a trajectory runner.

Step maps are pure functions of the current state and a ``StepContext``;
they accept a single point ``(d,)`` or a batch ``(n, d)``.
"""

from __future__ import annotations

import enum
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .schedule import Schedule
from .targets import MixtureTarget, MomentBundle, moments


class SamplerKind(str, enum.Enum):
    ODE_PLAIN = "ODE_PLAIN"
    ODE_ACCEL = "ODE_ACCEL"
    DDPM_PLAIN = "DDPM_PLAIN"
    DDPM_ACCEL = "DDPM_ACCEL"

    @property
    def stochastic(self) -> bool:
        return self in (SamplerKind.DDPM_PLAIN, SamplerKind.DDPM_ACCEL)

    @property
    def accelerated(self) -> bool:
        return self in (SamplerKind.ODE_ACCEL, SamplerKind.DDPM_ACCEL)


ALL_KINDS = tuple(SamplerKind)

# trajectories are grouped in fixed-size blocks; each block owns one RNG
# stream per step, so the draws of trajectory i never depend on n
BLOCK_SIZE = 1024


@dataclass(frozen=True)
class SamplerSpec:
    kind: SamplerKind
    seed: int = 0

    def stream(self, block: int, t: int) -> np.random.Generator:
        """Counter-based stream keyed by ``(seed, block, t)``."""
        ss = np.random.SeedSequence([self.seed, block, t])
        return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class StepContext:
    t: int
    alpha: float
    alpha_bar: float
    one_minus_alpha_bar: float
    sigma: float
    moments: MomentBundle

    @classmethod
    def at(cls, target: MixtureTarget, schedule: Schedule, t: int, x) -> "StepContext":
        alpha, ab, gam = schedule.at(t)
        return cls(t, alpha, ab, gam, math.sqrt(schedule.sigma_sq[t - 1]),
                   moments(target, schedule, t, x))

    @property
    def step(self) -> float:
        return 1.0 - self.alpha


def ode_step(x, ctx: StepContext) -> np.ndarray:
    s = ctx.moments.score
    return (x + 0.5 * ctx.step * s) / math.sqrt(ctx.alpha)


def ode_accel_step(x, ctx: StepContext) -> np.ndarray:
    m = ctx.moments
    d = ctx.step
    s = m.score
    s_sq = np.sum(s * s, axis=-1, keepdims=True)
    coef = 0.5 * d + d * d / (8 * ctx.one_minus_alpha_bar) - d * d / 8 * s_sq
    return (x + coef * s + d * d / 8 * m.w_corr) / math.sqrt(ctx.alpha)


def reverse_mean(y, ctx: StepContext) -> np.ndarray:
    """Noiseless part of the stochastic update, ``(y + (1-alpha) s(y)) / sqrt(alpha)``."""
    return (y + ctx.step * ctx.moments.score) / math.sqrt(ctx.alpha)


def ddpm_step(y, z, ctx: StepContext) -> np.ndarray:
    return reverse_mean(y, ctx) + ctx.sigma * np.asarray(z)


def ddpm_accel_step(y, z, ctx: StepContext) -> np.ndarray:
    m = ctx.moments
    gam = ctx.one_minus_alpha_bar
    z = np.asarray(z, dtype=np.float64)
    s = m.score
    sz = np.sum(s * z, axis=-1, keepdims=True)
    bracket = z + gam * s * sz - m.v(z)
    return reverse_mean(y, ctx) + ctx.sigma * (z - ctx.step / (2 * gam) * bracket)


def kernel_factor(ctx: StepContext) -> np.ndarray:
    """``I - (1-alpha) / (2 (1-alpha_bar)) J_t``: the noise shaping of the accelerated kernel."""
    d = ctx.moments.jac.shape[-1]
    return np.eye(d) - ctx.step / (2 * ctx.one_minus_alpha_bar) * ctx.moments.jac


def ddpm_accel_step_kernel_form(y, z, ctx: StepContext) -> np.ndarray:
    """Same map as ``ddpm_accel_step`` written as ``mu(y) + sigma (I - c J) z``."""
    shaped = np.einsum("...ij,...j->...i", kernel_factor(ctx), np.asarray(z, dtype=np.float64))
    return reverse_mean(y, ctx) + ctx.sigma * shaped


def apply_step(kind: SamplerKind, x, z, ctx: StepContext) -> np.ndarray:
    if kind is SamplerKind.ODE_PLAIN:
        return ode_step(x, ctx)
    if kind is SamplerKind.ODE_ACCEL:
        return ode_accel_step(x, ctx)
    if kind is SamplerKind.DDPM_PLAIN:
        return ddpm_step(x, z, ctx)
    return ddpm_accel_step(x, z, ctx)


@dataclass
class ReverseRun:
    samples: np.ndarray  # (n, d); rows of failed trajectories are NaN
    failed: np.ndarray  # (n,) bool
    failed_at: np.ndarray  # (n,) step at which the state went non-finite, 0 if none

    @property
    def failures(self) -> int:
        return int(self.failed.sum())

    @property
    def good(self) -> np.ndarray:
        return self.samples[~self.failed]


def _run_block(target, schedule, spec, block, rows):
    T = schedule.T
    d = target.dim
    y = spec.stream(block, T).standard_normal((BLOCK_SIZE, d))[:rows]
    failed_at = np.zeros(rows, dtype=np.int64)
    alive = np.ones(rows, dtype=bool)
    for t in range(T, 1, -1):
        z = None
        if spec.kind.stochastic:
            z = spec.stream(block, t).standard_normal((BLOCK_SIZE, d))[:rows]
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        ctx = StepContext.at(target, schedule, t, y[idx])
        with np.errstate(all="ignore"):
            nxt = apply_step(spec.kind, y[idx], None if z is None else z[idx], ctx)
        bad = ~np.all(np.isfinite(nxt), axis=1)
        y[idx] = nxt
        failed_at[idx[bad]] = t
        alive[idx[bad]] = False
    y[~alive] = np.nan
    return y, ~alive, failed_at


def default_threads() -> int:
    return max(1, int(os.environ.get("DIFFRATES_THREADS", "1")))


def run_reverse(target: MixtureTarget, schedule: Schedule, spec: SamplerSpec, n: int,
                threads: int | None = None) -> ReverseRun:
    """Run ``n`` trajectories from ``Y_T ~ N(0, I)`` down to ``Y_1``.

    Trajectory ``i`` draws its initial point from stream ``(seed, i // BLOCK_SIZE, T)``
    and its step-``t`` noise from ``(seed, i // BLOCK_SIZE, t)``, so results do not
    depend on ``n`` or on the thread count.
    """
    threads = default_threads() if threads is None else threads
    n_blocks = -(-n // BLOCK_SIZE)
    jobs = [(b, min(BLOCK_SIZE, n - b * BLOCK_SIZE)) for b in range(n_blocks)]
    run = lambda job: _run_block(target, schedule, spec, *job)
    if threads > 1 and n_blocks > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    if not parts:
        return ReverseRun(np.empty((0, target.dim)), np.zeros(0, bool), np.zeros(0, np.int64))
    ys, fails, at = zip(*parts)
    return ReverseRun(np.concatenate(ys), np.concatenate(fails), np.concatenate(at))
