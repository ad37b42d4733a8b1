"""Distances between grid densities and log-log rate fits."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr

from .density import DensityGrid

KL_FLOOR = 1e-300
PINSKER_TOL = 1e-6
CSV_FIELDS = ("T", "kind", "tv", "tv_corrected", "kl", "grid_points", "leaked_mass")


class GridMismatch(ValueError):
    pass


def _check_same(p: DensityGrid, q: DensityGrid):
    if not p.same_grid(q):
        raise GridMismatch(
            f"grids differ: [{p.lo}, {p.hi}] x {p.n_points} vs [{q.lo}, {q.hi}] x {q.n_points}")


@dataclass(frozen=True)
class TVResult:
    raw: float
    corrected: float

    def __float__(self):
        return self.corrected


def tv_distance(p: DensityGrid, q: DensityGrid) -> TVResult:
    """Half the L1 distance on the window, and the same plus half the leaked mass of both.

    Outside the window the two laws can differ by at most their combined
    leaked mass, so the corrected value is an upper bound on the full TV.
    """
    _check_same(p, q)
    raw = 0.5 * float(np.trapezoid(np.abs(p.values - q.values), dx=p.dx))
    leak = 0.5 * (p.leaked_mass_bound + q.leaked_mass_bound)
    return TVResult(min(raw, 1.0), min(raw + leak, 1.0))


@dataclass(frozen=True)
class KLResult:
    value: float
    clamped_mass: float  # q-mass on cells where p had to be floored


def kl_divergence(q: DensityGrid, p: DensityGrid) -> KLResult:
    """``KL(q || p)`` on the window.

    The integrand ``q log(q/p) - q + p`` is pointwise non-negative and
    integrates to the usual KL when both densities carry unit mass, so
    quadrature error cannot push the result below zero.
    """
    _check_same(p, q)
    qv = np.maximum(q.values, 0.0)
    pv = p.values
    clamped = pv < KL_FLOOR
    pc = np.maximum(pv, KL_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(qv > 0, qv * np.log(qv / pc), 0.0) - qv + pc
    val = float(np.trapezoid(term, dx=p.dx))
    if val < -1e-10:
        raise ArithmeticError(f"KL quadrature returned {val:.3e} < 0")
    clamped_mass = float(np.sum(qv[clamped]) * p.dx)
    return KLResult(max(val, 0.0), clamped_mass)


def gaussian_tv(m1: float, v1: float, m2: float, v2: float) -> float:
    """Exact TV between ``N(m1, v1)`` and ``N(m2, v2)`` in one dimension."""
    if v1 <= 0 or v2 <= 0:
        raise ValueError("variances must be positive")
    # log N1 - log N2 is a quadratic a x^2 + b x + c; TV sums P1 - P2 where it is positive
    a = 0.5 / v2 - 0.5 / v1
    b = m1 / v1 - m2 / v2
    c = 0.5 * (m2 * m2 / v2 - m1 * m1 / v1) + 0.5 * math.log(v2 / v1)
    if abs(a) < 1e-14 * (1 / v1 + 1 / v2):
        if b == 0:
            return 0.0
        roots = [-c / b]
    else:
        disc = b * b - 4 * a * c
        if disc <= 0:
            return 0.0
        sq = math.sqrt(disc)
        roots = sorted([(-b - sq) / (2 * a), (-b + sq) / (2 * a)])
    s1, s2 = math.sqrt(v1), math.sqrt(v2)
    cdf1 = lambda x: float(ndtr((x - m1) / s1))
    cdf2 = lambda x: float(ndtr((x - m2) / s2))
    edges = [-math.inf] + roots + [math.inf]
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid = (lo + hi) / 2 if math.isfinite(lo) and math.isfinite(hi) else (
            hi - 1.0 if math.isfinite(hi) else lo + 1.0)
        if a * mid * mid + b * mid + c > 0:
            total += (cdf1(hi) - cdf1(lo)) - (cdf2(hi) - cdf2(lo))
    return total


# -- rate fitting ----------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    residual: float  # RMS of log-residuals on the points used
    n_points: int
    excluded_T: int | None = None


def _lsq(logT, logV):
    A = np.column_stack([logT, np.ones_like(logT)])
    (slope, icpt), *_ = np.linalg.lstsq(A, logV, rcond=None)
    res = logV - (slope * logT + icpt)
    return float(slope), float(icpt), res


def fit_rate(points, exclude_transient: bool = True, rule: str = "in_sample") -> RateFit:
    """Least squares of ``log TV`` on ``log T``.

    The smallest ``T`` is dropped as pre-asymptotic when its residual exceeds
    three times the RMS residual (at least four points needed). ``rule``
    picks what is compared:

    ``"in_sample"``
        the point's residual in the full fit against that fit's RMS. A single
        residual is at most ``sqrt(n - 1)`` RMS, and an outlier at the end of an
        evenly spaced ``log T`` grid drags the fit towards itself, so this only
        fires from about 14 points upwards.
    ``"deletion"``
        the point's distance from the fit to the other points, against the
        RMS of that fit.

    An absolute floor of 1e-9 keeps exact power laws intact.
    """
    if rule not in ("in_sample", "deletion"):
        raise ValueError(f"unknown exclusion rule {rule!r}")
    pts = sorted((int(T), float(v)) for T, v in points)
    if len(pts) < 3:
        raise ValueError(f"need at least 3 points for a rate fit, got {len(pts)}")
    if any(v <= 0 for _, v in pts):
        raise ValueError("all values must be positive for a log-log fit")
    logT = np.log([T for T, _ in pts])
    logV = np.log([v for _, v in pts])
    slope, icpt, res = _lsq(logT, logV)
    if exclude_transient and len(pts) >= 4:
        s2, i2, r2 = _lsq(logT[1:], logV[1:])
        if rule == "in_sample":
            dev, rms = abs(res[0]), math.sqrt(float(np.mean(res ** 2)))
        else:
            dev, rms = abs(logV[0] - (s2 * logT[0] + i2)), math.sqrt(float(np.mean(r2 ** 2)))
        if dev > max(3 * rms, 1e-9):
            return RateFit(s2, i2, math.sqrt(float(np.mean(r2 ** 2))), len(pts) - 1, pts[0][0])
    return RateFit(slope, icpt, math.sqrt(float(np.mean(res ** 2))), len(pts))


# -- reports ---------------------------------------------------------------


@dataclass
class ConvergenceRow:
    T: int
    kind: str
    tv: float
    tv_corrected: float
    kl: float
    grid_points: int
    leaked_mass: float

    def pinsker_ok(self, tol: float = PINSKER_TOL) -> bool:
        return self.tv <= math.sqrt(self.kl / 2) + tol


@dataclass
class ConvergenceReport:
    rows: list[ConvergenceRow]
    slopes: dict[str, RateFit] = field(default_factory=dict)
    pinsker_ok: bool = True
    notes: list[str] = field(default_factory=list)

    def sorted_rows(self) -> list[ConvergenceRow]:
        return sorted(self.rows, key=lambda r: (r.kind, r.T))

    def fit_slopes(self, use_corrected: bool = True, rule: str = "in_sample") -> None:
        kinds = sorted({r.kind for r in self.rows})
        for k in kinds:
            pts = [(r.T, r.tv_corrected if use_corrected else r.tv)
                   for r in self.rows if r.kind == k]
            if len(pts) < 3:
                self.notes.append(f"{k}: {len(pts)} point(s), slope fit skipped")
                continue
            fit = fit_rate(pts, rule=rule)
            self.slopes[k] = fit
            if fit.excluded_T is not None:
                self.notes.append(f"{k}: T={fit.excluded_T} excluded from the fit as transient")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.sorted_rows():
            w.writerow([r.T, r.kind, repr(r.tv), repr(r.tv_corrected), repr(r.kl),
                        r.grid_points, repr(r.leaked_mass)])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "rows": [asdict(r) for r in self.sorted_rows()],
            "slopes": {k: asdict(self.slopes[k]) for k in sorted(self.slopes)},
            "pinsker_ok": self.pinsker_ok,
            "notes": list(self.notes),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ConvergenceReport":
        doc = json.loads(text)
        rows = [ConvergenceRow(**r) for r in doc["rows"]]
        slopes = {k: RateFit(**v) for k, v in doc.get("slopes", {}).items()}
        return cls(rows, slopes, doc.get("pinsker_ok", True), doc.get("notes", []))


def pinsker_check(report: ConvergenceReport, tol: float = PINSKER_TOL) -> bool:
    """Flag whether ``TV <= sqrt(KL / 2) + tol`` on every row (window TV against window KL)."""
    report.pinsker_ok = all(r.pinsker_ok(tol) for r in report.rows)
    return report.pinsker_ok
