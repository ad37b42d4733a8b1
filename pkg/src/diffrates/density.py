"""Law of the reverse chain at ``t = 1`` on a one-dimensional grid.

Stochastic samplers propagate a density through the Gaussian transition
kernels step by step. Deterministic samplers are handled by inverting the
composed maps at each output point and applying the change of variables.

Grids follow the forward marginals: the window at step ``t`` is the
requested ``t = 1`` window, recentred on ``sqrt(ab_t) E[X0]`` and rescaled by
the ratio of forward standard deviations. For unit-scale targets this is
nearly the identity; for a point atom it keeps the narrow ``q_1`` resolved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import ndtr

from .samplers import SamplerKind, StepContext, apply_step
from .schedule import Schedule
from .targets import MixtureTarget, marginal_density, moments

MIN_POINTS = 256
_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(16)
_GH_WEIGHTS = _GH_WEIGHTS / math.sqrt(2 * math.pi)
_SQRT_2PI = math.sqrt(2 * math.pi)


class DensityError(RuntimeError):
    """The grid engine could not produce a trustworthy density."""


@dataclass
class DensityGrid:
    lo: float
    hi: float
    values: np.ndarray
    mass_in_window: float = float("nan")
    leaked_mass_bound: float = 0.0
    counts: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if math.isnan(self.mass_in_window):
            self.mass_in_window = float(np.trapezoid(self.values, dx=self.dx))

    @property
    def n_points(self) -> int:
        return len(self.values)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_points)

    @property
    def dx(self) -> float:
        return (self.hi - self.lo) / (self.n_points - 1)

    def same_grid(self, other: "DensityGrid") -> bool:
        return (self.n_points == other.n_points and math.isclose(self.lo, other.lo, abs_tol=1e-12)
                and math.isclose(self.hi, other.hi, abs_tol=1e-12))

    def cdf(self, y) -> np.ndarray:
        """Cumulative distribution from the trapezoid rule, normalised to the window mass."""
        v = self.values
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * self.dx)])
        return np.interp(y, self.x, cum / cum[-1], left=0.0, right=1.0)


# -- windows ---------------------------------------------------------------


def _forward_location_scale(target: MixtureTarget, schedule: Schedule):
    """Per-step centre and standard deviation of the forward marginal ``q_t``."""
    m = float(target.mean()[0])
    v = float(target.covariance()[0, 0])
    ab = schedule.alpha_bar
    return np.sqrt(ab) * m, np.sqrt(ab * v + schedule.one_minus_alpha_bar)


def step_windows(target: MixtureTarget, schedule: Schedule, window) -> tuple[np.ndarray, np.ndarray]:
    """Window bounds for every step, given the window at ``t = 1``."""
    centre, scale = _forward_location_scale(target, schedule)
    ratio = scale / scale[0]
    lo = centre + (window[0] - centre[0]) * ratio
    hi = centre + (window[1] - centre[0]) * ratio
    return lo, hi


def _check_1d(target: MixtureTarget):
    if target.dim != 1:
        raise DensityError(f"grid engines need d = 1, target has d = {target.dim}")


def initial_grid(target: MixtureTarget, schedule: Schedule, window=(-8.0, 8.0),
                 n_points: int = 4096, t_start: int | None = None) -> DensityGrid:
    """Standard normal density on the step-``t_start`` window (default ``T``)."""
    _check_1d(target)
    if n_points < MIN_POINTS:
        raise DensityError(f"need at least {MIN_POINTS} grid points, got {n_points}")
    t_start = schedule.T if t_start is None else t_start
    lo, hi = step_windows(target, schedule, window)
    a, b = lo[t_start - 1], hi[t_start - 1]
    x = np.linspace(a, b, n_points)
    vals = np.exp(-0.5 * x * x) / _SQRT_2PI
    return DensityGrid(a, b, vals, leaked_mass_bound=float(ndtr(a) + ndtr(-b)))


# -- stochastic kernels ----------------------------------------------------


def _kernel_params(target, schedule, t, kind, x):
    """Mean map and standard deviation of the step-``t`` transition at points ``x``."""
    ctx = StepContext.at(target, schedule, t, x[:, None])
    mu = (x + ctx.step * ctx.moments.score[:, 0]) / math.sqrt(ctx.alpha)
    if kind is SamplerKind.DDPM_ACCEL:
        std = ctx.sigma * np.abs(1 - ctx.step / (2 * ctx.one_minus_alpha_bar) * ctx.moments.jac[:, 0, 0])
    else:
        std = np.full_like(x, ctx.sigma)
    return mu, std


def _trapezoid_step(p, xs, ys, mu, std, cutoff=12.0, chunk=256):
    h = xs[1] - xs[0]
    wp = np.full(len(xs), h) * p
    wp[0] *= 0.5
    wp[-1] *= 0.5
    smax = float(std.max())
    out = np.empty(len(ys))
    for j0 in range(0, len(ys), chunk):
        yy = ys[j0:j0 + chunk]
        i0 = int(np.searchsorted(mu, yy[0] - cutoff * smax, side="left"))
        i1 = int(np.searchsorted(mu, yy[-1] + cutoff * smax, side="right"))
        if i1 <= i0:
            out[j0:j0 + chunk] = 0.0
            continue
        u = (yy[:, None] - mu[None, i0:i1]) / std[None, i0:i1]
        K = np.exp(-0.5 * u * u) / (_SQRT_2PI * std[None, i0:i1])
        out[j0:j0 + chunk] = K @ wp[i0:i1]
    return out


def _newton(fun, y, x, scale, max_iter, tol):
    """Plain Newton with a central-difference slope; returns roots and a convergence mask."""
    done = np.zeros(len(x), dtype=bool)
    for _ in range(max_iter):
        h = 1e-6 * (scale + np.abs(x))
        f0, fp, fm = fun(x) - y, fun(x + h), fun(x - h)
        df = (fp - fm) / (2 * h)
        with np.errstate(divide="ignore", invalid="ignore"):
            stepx = np.where(df > 0, f0 / df, np.nan)
        x = x - stepx
        done = np.abs(stepx) <= tol * (scale + np.abs(x))
        if done.all() or not np.all(np.isfinite(x)):
            break
    return x, done & np.isfinite(x)


def _bracketed(fun, y, x, scale, max_iter, tol):
    """Newton safeguarded by bisection; slow but cannot diverge for increasing maps."""
    width = np.full_like(x, scale)
    lo, hi = x - width, x + width
    for _ in range(200):
        bad_lo, bad_hi = fun(lo) > y, fun(hi) < y
        if not (bad_lo.any() or bad_hi.any()):
            break
        width = np.where(bad_lo | bad_hi, 2 * width, width)
        lo = np.where(bad_lo, x - width, lo)
        hi = np.where(bad_hi, x + width, hi)
    else:
        raise DensityError("could not bracket the inverse of a reverse-step map")
    x = np.clip(x, lo, hi)
    for _ in range(max_iter):
        h = 1e-6 * (scale + np.abs(x))
        f = fun(x) - y
        df = (fun(x + h) - fun(x - h)) / (2 * h)
        lo = np.where(f < 0, x, lo)
        hi = np.where(f > 0, x, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = x - f / df
        bisect = ~np.isfinite(cand) | (cand <= lo) | (cand >= hi) | (df <= 0)
        new = np.where(bisect, 0.5 * (lo + hi), cand)
        done = np.abs(new - x) <= tol * (scale + np.abs(x))
        x = new
        if done.all():
            return x
    raise DensityError(f"Newton inversion did not converge in {max_iter} iterations")


def _invert(fun, y, x0, scale, max_iter=100, tol=1e-13):
    """Invert an increasing scalar map, vectorised over ``y``.

    Warm-started Newton handles almost every point; the rest go through a
    bracketed solve. Returns the roots and the map's slope at each root.
    """
    x, ok = _newton(fun, y, np.array(x0, dtype=np.float64), scale, 20, tol)
    if not ok.all():
        # maps act pointwise, so the failed points can be solved on their own
        idx = np.flatnonzero(~ok)
        x0b = np.where(np.isfinite(x[idx]), x[idx], np.asarray(x0)[idx])
        x[idx] = _bracketed(fun, y[idx], x0b, scale, max_iter, tol)
    h = 1e-6 * (scale + np.abs(x))
    df = (fun(x + h) - fun(x - h)) / (2 * h)
    return x, df


def _hermite_step(p, xs, ys, target, schedule, t, kind, scale):
    """Transition for kernels narrower than the grid spacing.

    With ``y = mu(x) + std(x) z`` monotone in ``x`` for each fixed ``z``,
    ``p_new(y) = E_z[ p(x_z(y)) / d_x(mu + std z)(x_z(y)) ]``; the expectation
    over ``z ~ N(0, 1)`` uses Gauss-Hermite nodes and ``p`` a cubic spline.
    """
    spline = CubicSpline(xs, p)
    alpha = schedule.alpha[t - 1]
    out = np.zeros(len(ys))
    guess = math.sqrt(alpha) * ys
    for z, w in zip(_GH_NODES, _GH_WEIGHTS):
        def fmap(x, z=z):
            mu, std = _kernel_params(target, schedule, t, kind, x)
            return mu + std * z
        root, deriv = _invert(fmap, ys, guess, scale)
        if np.any(deriv <= 0):
            raise DensityError(f"step {t}: noisy map not monotone; refine the grid")
        inside = (root >= xs[0]) & (root <= xs[-1])
        out += w * np.where(inside, spline(np.clip(root, xs[0], xs[-1])), 0.0) / deriv
        guess = root
    return out


def _stochastic_step(p, xs, ys, target, schedule, t, kind, scale):
    mu, std = _kernel_params(target, schedule, t, kind, xs)
    slope = np.gradient(mu, xs)
    if np.any(slope <= 0):
        raise DensityError(f"step {t}: reverse mean map is not increasing on the window")
    h = xs[1] - xs[0]
    # trapezoid is spectrally accurate once the kernel spans ~1.5 cells in x
    if np.min(std / slope) >= 1.5 * h:
        return _trapezoid_step(p, xs, ys, mu, std)
    return _hermite_step(p, xs, ys, target, schedule, t, kind, scale)


def propagate_stochastic(grid_T: DensityGrid, target: MixtureTarget, schedule: Schedule,
                         kind: SamplerKind, leak_tol: float = 1e-3,
                         t_start: int | None = None) -> DensityGrid:
    """Push the density on ``grid_T`` (at step ``t_start``) down to ``t = 1``."""
    _check_1d(target)
    kind = SamplerKind(kind)
    if not kind.stochastic:
        raise ValueError(f"{kind.value} is deterministic; use pushforward_deterministic")
    t_start = schedule.T if t_start is None else t_start
    if t_start == 1:
        return grid_T
    centre, scale = _forward_location_scale(target, schedule)
    # recover the t=1 window whose scaled version is grid_T's window
    k = t_start - 1
    base = [centre[0] + (e - centre[k]) * scale[0] / scale[k] for e in (grid_T.lo, grid_T.hi)]
    lo, hi = step_windows(target, schedule, base)

    n = grid_T.n_points
    p = grid_T.values
    leaked = grid_T.leaked_mass_bound
    mass = float(np.trapezoid(p, dx=grid_T.dx))
    for t in range(t_start, 1, -1):
        xs = np.linspace(lo[t - 1], hi[t - 1], n)
        ys = np.linspace(lo[t - 2], hi[t - 2], n)
        p = _stochastic_step(p, xs, ys, target, schedule, t, kind, float(scale[t - 1]))
        new_mass = float(np.trapezoid(p, ys))
        leaked += max(0.0, mass - new_mass)
        mass = new_mass
        if mass < 1 - leak_tol:
            raise DensityError(
                f"step {t}: window mass {mass:.6g} < 1 - leak_tol; widen the grid")
    return DensityGrid(float(lo[0]), float(hi[0]), p, mass, leaked)


def pushforward_deterministic(target: MixtureTarget, schedule: Schedule, kind: SamplerKind,
                              window=(-8.0, 8.0), n_points: int = 4096,
                              leak_tol: float = 1e-3, t_start: int | None = None) -> DensityGrid:
    """Density of ``Y_1`` for a deterministic sampler by change of variables.

    Each evaluation point is pulled back through ``Phi_2, ..., Phi_T``;
    the density is ``N(y_T; 0, 1) / prod_t Phi_t'``.
    """
    _check_1d(target)
    kind = SamplerKind(kind)
    if kind.stochastic:
        raise ValueError(f"{kind.value} is stochastic; use propagate_stochastic")
    if n_points < MIN_POINTS:
        raise DensityError(f"need at least {MIN_POINTS} grid points, got {n_points}")
    t_start = schedule.T if t_start is None else t_start
    _, scale = _forward_location_scale(target, schedule)
    y1 = np.linspace(window[0], window[1], n_points)
    x = y1.copy()
    log_jac = np.zeros(n_points)
    for t in range(2, t_start + 1):
        def phi(u, t=t):
            ctx = StepContext.at(target, schedule, t, u[:, None])
            return apply_step(kind, u[:, None], None, ctx)[:, 0]
        guess = math.sqrt(schedule.alpha[t - 1]) * x
        root, deriv = _invert(phi, x, guess, float(scale[t - 1]))
        if np.any(deriv <= 0) or np.any(np.diff(root) <= 0):
            raise DensityError(f"step {t}: map is not increasing on the window; "
                               "the change of variables does not apply")
        log_jac += np.log(deriv)
        x = root
    vals = np.exp(-0.5 * x * x - log_jac) / _SQRT_2PI
    leaked = float(ndtr(x[0]) + ndtr(-x[-1]))
    grid = DensityGrid(float(window[0]), float(window[1]), vals, leaked_mass_bound=leaked)
    if grid.mass_in_window < 1 - leak_tol:
        raise DensityError(f"window mass {grid.mass_in_window:.6g} < 1 - leak_tol; widen the grid")
    return grid


def reverse_density(target: MixtureTarget, schedule: Schedule, kind: SamplerKind,
                    window=(-8.0, 8.0), n_points: int = 4096, leak_tol: float = 1e-3) -> DensityGrid:
    """Dispatch to the engine that matches the sampler."""
    kind = SamplerKind(kind)
    if kind.stochastic:
        g0 = initial_grid(target, schedule, window, n_points)
        return propagate_stochastic(g0, target, schedule, kind, leak_tol)
    return pushforward_deterministic(target, schedule, kind, window, n_points, leak_tol)


def forward_density(target: MixtureTarget, schedule: Schedule, window=(-8.0, 8.0),
                    n_points: int = 4096, t: int = 1) -> DensityGrid:
    """``q_t`` on the grid, with the exact mass outside the window."""
    _check_1d(target)
    x = np.linspace(window[0], window[1], n_points)
    vals = marginal_density(target, schedule, t, x)
    _, ab, gam = schedule.at(t)
    sd = np.sqrt(ab * target.covs[:, 0, 0] + gam)
    m = math.sqrt(ab) * target.means[:, 0]
    outside = target.weights @ (ndtr((window[0] - m) / sd) + ndtr((m - window[1]) / sd))
    return DensityGrid(float(window[0]), float(window[1]), vals, leaked_mass_bound=float(outside))


# -- closed-form oracle for point atoms ------------------------------------


def gaussian_chain_law(target: MixtureTarget, schedule: Schedule, kind: SamplerKind,
                       t_start: int | None = None) -> tuple[float, float]:
    """Exact ``(mean, variance)`` of ``Y_1`` when the target is a single 1-d atom.

    Every step is then affine in the state with additive Gaussian noise, so
    the law stays Gaussian and can be composed in closed form.
    """
    if target.dim != 1 or target.n_components != 1 or np.any(target.covs != 0):
        raise ValueError("the Gaussian chain needs a single point atom in d = 1")
    kind = SamplerKind(kind)
    c = float(target.means[0, 0])
    t_start = schedule.T if t_start is None else t_start
    mean, var = 0.0, 1.0
    for t in range(t_start, 1, -1):
        alpha, ab, gam = schedule.at(t)
        d = 1 - alpha
        m = math.sqrt(ab) * c
        if kind is SamplerKind.ODE_PLAIN:
            k, noise = d / (2 * gam), 0.0
        elif kind is SamplerKind.ODE_ACCEL:
            k, noise = d / (2 * gam) + d * d / (8 * gam * gam), 0.0
        elif kind is SamplerKind.DDPM_PLAIN:
            k, noise = d / gam, d / alpha
        else:
            k, noise = d / gam, d / alpha * (1 - d / (2 * gam)) ** 2
        # x -> ((1 - k) x + k m) / sqrt(alpha)
        a = (1 - k) / math.sqrt(alpha)
        mean = a * mean + k * m / math.sqrt(alpha)
        var = a * a * var + noise
    return mean, var


# -- samples ---------------------------------------------------------------


def histogram_density(samples, bins: int, window) -> DensityGrid:
    """Normalised histogram on ``window``; bin centres become grid points."""
    x = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    if x.shape[1] != 1:
        raise ValueError("histogram_density takes one coordinate; slice the samples first")
    x = x[:, 0]
    lo, hi = float(window[0]), float(window[1])
    counts, edges = np.histogram(x, bins=bins, range=(lo, hi))
    n_in = int(counts.sum())
    if n_in == 0:
        raise DensityError(f"no samples fall in the window [{lo}, {hi}]")
    width = edges[1] - edges[0]
    vals = counts / (len(x) * width)
    return DensityGrid(lo + width / 2, hi - width / 2, vals, mass_in_window=n_in / len(x),
                       leaked_mass_bound=1 - n_in / len(x), counts=counts)


def ks_statistic(samples, grid: DensityGrid) -> float:
    """Kolmogorov-Smirnov distance between samples and the grid CDF."""
    x = np.sort(np.asarray(samples, dtype=np.float64).reshape(-1))
    n = len(x)
    F = grid.cdf(x)
    ecdf_hi = np.arange(1, n + 1) / n
    ecdf_lo = np.arange(0, n) / n
    return float(max(np.max(ecdf_hi - F), np.max(F - ecdf_lo)))
