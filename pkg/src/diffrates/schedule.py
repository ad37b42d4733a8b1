"""Learning-rate schedule for the variance-preserving forward chain.

The step sizes grow geometrically from ``beta_1 = T**-c0`` at rate
``1 + c1 log T / T`` until they saturate at ``c1 log T / T``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    """Raised for schedule parameters outside the admissible range."""


@dataclass(frozen=True)
class ScheduleParams:
    T: int
    c0: float = 2.0
    c1: float = 4.0

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 2:
            raise ScheduleError(f"T must be an integer >= 2, got {self.T!r}")
        if not self.c0 > 0:
            raise ScheduleError(f"c0 must be positive, got {self.c0!r}")
        if not self.c1 > 0:
            raise ScheduleError(f"c1 must be positive, got {self.c1!r}")
        if self.rate >= 0.5:
            raise ScheduleError(
                f"c1*log(T)/T = {self.rate:.4f} >= 1/2 for T={self.T}, c1={self.c1}; "
                "the schedule could not keep alpha_t >= 1/2"
            )

    @property
    def rate(self) -> float:
        """The saturation step ``c1 log T / T`` (natural log)."""
        return self.c1 * math.log(self.T) / self.T


@dataclass(frozen=True)
class Schedule:
    """Arrays indexed by ``t - 1`` for steps ``t = 1..T``.

    ``one_minus_alpha_bar`` is carried separately because forming
    ``1 - alpha_bar`` by subtraction loses most digits when ``c0`` is large.
    """

    params: ScheduleParams
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    one_minus_alpha_bar: np.ndarray
    sigma_sq: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.beta)

    def _index(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise IndexError(f"step {t} outside 1..{self.T}")
        return t - 1

    def at(self, t: int) -> tuple[float, float, float]:
        """Return ``(alpha_t, alpha_bar_t, 1 - alpha_bar_t)``."""
        i = self._index(t)
        return float(self.alpha[i]), float(self.alpha_bar[i]), float(self.one_minus_alpha_bar[i])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "beta", "alpha", "alpha_bar", "sigma_sq"])
        for i in range(self.T):
            w.writerow([i + 1] + [repr(float(a[i])) for a in
                                  (self.beta, self.alpha, self.alpha_bar, self.sigma_sq)])
        return buf.getvalue()


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def schedule_beta(T: int, c0: float, c1: float) -> np.ndarray:
    """Raw step sizes ``beta_1..beta_T`` without any admissibility check."""
    r = c1 * math.log(T) / T
    beta1 = float(T) ** (-c0)
    t = np.arange(1, T + 1, dtype=np.float64)
    # log-space growth, clipped at the cap, keeps (1 + r)**t finite for large T
    growth = np.exp(np.minimum(math.log(beta1) + t * math.log1p(r), 0.0))
    beta = r * np.minimum(growth, 1.0)
    beta[0] = beta1
    return beta


def build_schedule(params: ScheduleParams) -> Schedule:
    beta = schedule_beta(params.T, params.c0, params.c1)
    alpha = 1.0 - beta

    log_ab = np.cumsum(np.log1p(-beta.astype(np.longdouble)))
    alpha_bar = np.exp(log_ab)
    one_minus = -np.expm1(log_ab)
    sigma_sq = beta / alpha
    return Schedule(
        params=params,
        beta=_frozen(beta),
        alpha=_frozen(alpha),
        alpha_bar=_frozen(alpha_bar),
        one_minus_alpha_bar=_frozen(one_minus),
        sigma_sq=_frozen(sigma_sq),
    )


def schedule_from_beta(beta, c1: float = 4.0) -> Schedule:
    """Wrap an arbitrary beta sequence, bypassing parameter validation.

    Used to probe the property checks with hand-built schedules.
    """
    beta = np.asarray(beta, dtype=np.float64)
    params = object.__new__(ScheduleParams)
    object.__setattr__(params, "T", len(beta))
    object.__setattr__(params, "c0", float("nan"))
    object.__setattr__(params, "c1", c1)
    log_ab = np.cumsum(np.log1p(-beta.astype(np.longdouble)))
    alpha = 1.0 - beta
    return Schedule(params, _frozen(beta), _frozen(alpha), _frozen(np.exp(log_ab)),
                    _frozen(-np.expm1(log_ab)), _frozen(beta / alpha))


def alpha_bar_at(schedule: Schedule, t: int) -> float:
    return float(schedule.alpha_bar[schedule._index(t)])


@dataclass
class PropertyCheck:
    name: str
    passed: bool
    margin: float
    detail: str = ""


@dataclass
class PropertyReport:
    checks: list[PropertyCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> PropertyCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {c.name: {"passed": c.passed, "margin": c.margin, "detail": c.detail}
                for c in self.checks}


_ROUNDOFF = 1e-12


def verify_schedule_properties(schedule: Schedule) -> PropertyReport:
    """Check the four step-size properties used by the convergence analysis.

    Each margin is the slack of the inequality (negative means violated).
    Property (d) uses the constant-free bound ``alpha_bar_T <= (1 - r)**(T/2)``.
    """
    T = schedule.T
    r = schedule.params.c1 * math.log(T) / T
    # equality cases (alpha_t = 1 - r once saturated) must not fail on rounding
    ok = lambda margin: margin >= -_ROUNDOFF
    alpha = schedule.alpha
    gam = schedule.one_minus_alpha_bar

    m_a = min(float(alpha.min()) - (1.0 - r), (1.0 - r) - 0.5)
    a = PropertyCheck("a", ok(m_a), m_a,
                      f"min alpha={alpha.min():.6g}, 1-r={1 - r:.6g}")

    step_ratio = schedule.beta[1:] / gam[:-1]
    m_b = 4 * r - float(step_ratio.max())
    b = PropertyCheck("b", ok(m_b), m_b,
                      f"max (1-alpha_t)/(1-alpha_bar_(t-1))={step_ratio.max():.6g}, 4r={4 * r:.6g}")

    growth = gam[1:] / gam[:-1]
    m_c = min(float(growth.min()) - 1.0, 1.0 + 4 * r - float(growth.max()))
    c = PropertyCheck("c", ok(m_c), m_c,
                      f"ratio range [{growth.min():.6g}, {growth.max():.6g}]")

    bound = (1.0 - r) ** (T / 2) if r < 1 else 0.0
    ab_T = float(schedule.alpha_bar[-1])
    m_d = bound - ab_T
    d = PropertyCheck("d", ok(m_d), m_d, f"alpha_bar_T={ab_T:.6g}, bound={bound:.6g}")
    return PropertyReport([a, b, c, d])
