"""Monte Carlo estimates of the conditional quantities, independent of the closed forms.

Given ``X_t = x`` the posterior of ``X_0`` is proportional to
``p_data(x0) exp(-|x - sqrt(ab) x0|^2 / (2 (1 - ab)))``. Drawing ``X_0`` from
``p_data`` and self-normalising these weights gives consistent estimates of
any ``E[f(W) | X_t = x]`` with ``W = (x - sqrt(ab) X_0) / sqrt(1 - ab)``.
Nothing here touches the mixture posterior algebra in ``targets``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .schedule import Schedule
from .targets import MixtureTarget, moments

BATCH = 65536
ROUNDOFF = 1e-10


@dataclass(frozen=True)
class Functional:
    name: str
    p: float | None = None

    def __str__(self):
        return self.name if self.p is None else f"{self.name}({self.p:g})"


G = Functional("G")
SCORE = Functional("SCORE")
NOISE_COV = Functional("NOISE_COV")
W_CORR = Functional("W_CORR")


def MOMENT_P(p: float) -> Functional:
    return Functional("MOMENT_P", float(p))


@dataclass(frozen=True)
class OracleEstimate:
    value: np.ndarray
    std_error: np.ndarray
    n_effective: float
    n: int

    @property
    def reliable(self) -> bool:
        return self.n_effective >= 0.1 * self.n

    def z_scores(self, closed) -> np.ndarray:
        """``|closed - value| / std_error`` with a relative round-off floor on the error.

        Degenerate posteriors (point atoms) have a standard error that is pure
        round-off; the floor keeps the comparison meaningful there.
        """
        diff = np.asarray(closed, dtype=np.float64) - self.value
        scale = np.sqrt(self.std_error ** 2 + (ROUNDOFF * (1 + np.abs(self.value))) ** 2)
        return np.abs(diff) / scale


def _draw_prior(target: MixtureTarget, n: int, seed: int) -> np.ndarray:
    # fixed-size batches with their own streams: the first k draws never depend on n
    parts = []
    for b in range(-(-n // BATCH)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
        parts.append(target.sample(min(BATCH, n - b * BATCH), rng))
    return np.concatenate(parts)


def _weighted(x0, x, ab, gam):
    W = (x[None, :] - math.sqrt(ab) * x0) / math.sqrt(gam)
    logw = -0.5 * np.sum(W * W, axis=1)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    return W, w


def _estimate(w, feats, influence=None):
    """SNIS mean of ``feats`` (n, m) with delta-method errors.

    ``influence`` maps the centred features to the linearised contribution of
    each draw to a nonlinear functional; by default the functional is the mean.
    """
    mean = w @ feats
    centred = feats - mean
    phi = centred if influence is None else influence(centred)
    se = np.sqrt((w * w) @ (phi * phi))
    return mean, se


def mc_conditional(target: MixtureTarget, schedule: Schedule, t: int, x, functional: Functional,
                   n: int = 200_000, seed: int = 0) -> OracleEstimate:
    if n < 10_000:
        raise ValueError(f"n must be at least 1e4, got {n}")
    _, ab, gam = schedule.at(t)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    d = target.dim
    x0 = _draw_prior(target, n, seed)
    W, w = _weighted(x0, x, ab, gam)
    n_eff = float(1.0 / np.sum(w * w))
    rg = math.sqrt(gam)
    name = functional.name

    if name == "G":
        val, se = _estimate(w, rg * W)
    elif name == "SCORE":
        val, se = _estimate(w, -W / rg)
    elif name == "NOISE_COV":
        val, se = _estimate(w, np.einsum("ni,nj->nij", W, W).reshape(n, d * d))
        val, se = val.reshape(d, d), se.reshape(d, d)
    elif name == "MOMENT_P":
        val, se = _estimate(w, np.linalg.norm(W, axis=1)[:, None] ** functional.p)
        val, se = val[0], se[0]
    elif name == "W_CORR":
        sq = np.sum(W * W, axis=1)
        feats = np.concatenate([W, sq[:, None] * W, sq[:, None],
                                np.einsum("ni,nj->nij", W, W).reshape(n, d * d)], axis=1)
        mean = w @ feats
        mW, mT3, mSq, mM2 = mean[:d], mean[d:2 * d], mean[2 * d], mean[2 * d + 1:].reshape(d, d)
        s = -mW / rg
        val = (mT3 / rg + mSq * s + mM2 @ s) / gam

        def influence(c):
            dW, dT3, dSq, dM2 = c[:, :d], c[:, d:2 * d], c[:, 2 * d], c[:, 2 * d + 1:].reshape(n, d, d)
            ds = -dW / rg
            return (dT3 / rg + dSq[:, None] * s + mSq * ds
                    + np.einsum("nij,j->ni", dM2, s) + ds @ mM2.T) / gam

        _, se = _estimate(w, feats, influence)
    else:
        raise ValueError(f"unknown functional {functional}")
    return OracleEstimate(np.asarray(val), np.asarray(se), n_eff, n)


def closed_form(target: MixtureTarget, schedule: Schedule, t: int, x, functional: Functional):
    """The matching closed-form value from ``targets``."""
    m = moments(target, schedule, t, np.atleast_1d(np.asarray(x, dtype=np.float64)))
    name = functional.name
    if name == "G":
        return m.g
    if name == "SCORE":
        return m.score
    if name == "NOISE_COV":
        return m.noise_cov
    if name == "W_CORR":
        return m.w_corr
    raise ValueError(f"no closed form for {functional}")


def random_conditions(target: MixtureTarget, schedule: Schedule, count: int, seed: int,
                      min_noise: float = 0.1) -> list[tuple[int, np.ndarray]]:
    """Random ``(t, x)`` with ``x ~ q_t`` and ``1 - ab_t >= min_noise``.

    Below that noise level the prior proposal puts almost no draws in the
    posterior bulk and the importance weights degenerate.
    """
    rng = np.random.default_rng(seed)
    steps = np.flatnonzero(schedule.one_minus_alpha_bar >= min_noise) + 1
    out = []
    for _ in range(count):
        t = int(rng.choice(steps))
        _, ab, gam = schedule.at(t)
        x0 = target.sample(1, rng)[0]
        out.append((t, math.sqrt(ab) * x0 + math.sqrt(gam) * rng.standard_normal(target.dim)))
    return out


DEFAULT_SUITE = (G, SCORE, NOISE_COV, W_CORR)


def agreement_suite(target: MixtureTarget, schedule: Schedule, conditions, n: int = 200_000,
                    seed: int = 0, z_max: float = 4.0, functionals=DEFAULT_SUITE) -> dict:
    """Compare closed forms with the oracle at every condition.

    Returns a report with, per functional, the largest |z| seen, the smallest
    effective sample size, and a pass flag.
    """
    report = {}
    for f in functionals:
        zs, neffs, worst = [], [], None
        for i, (t, x) in enumerate(conditions):
            est = mc_conditional(target, schedule, t, x, f, n, seed + i)
            z = float(np.max(est.z_scores(closed_form(target, schedule, t, x, f))))
            if worst is None or z > worst[0]:
                worst = (z, t, [float(v) for v in np.atleast_1d(x)])
            zs.append(z)
            neffs.append(est.n_effective)
        report[str(f)] = {
            "max_abs_z": max(zs),
            "worst_t": worst[1],
            "worst_x": worst[2],
            "min_n_effective": min(neffs),
            "passed": max(zs) <= z_max,
        }
    return report


def suite_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


# -- sample-based TV --------------------------------------------------------


class SampleTV(NamedTuple):
    estimate: float
    bias_bound: float
    std_error: float


def mc_sample_tv(samples, q_density: Callable[[np.ndarray], np.ndarray], bins: int, window) -> SampleTV:
    """Binned ``1/2 sum_b |p_hat_b - q_b|`` on a box.

    ``window`` is ``(lo, hi)`` applied to every axis. Bin probabilities of
    ``q`` use a 4-point-per-axis midpoint rule inside each bin. ``bias_bound``
    is the expected inflation from sampling noise alone,
    ``1/2 sum_b sqrt(2 q_b (1 - q_b) / (pi n))``, plus the mass of ``q``
    outside the box; ``std_error`` bounds the spread of the estimate by
    bounded differences (each draw moves it by at most ``1/n``).
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n == 0:
        raise ValueError("no samples")
    lo, hi = float(window[0]), float(window[1])
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogramdd(x, bins=[edges] * d)
    p_hat = counts / n
    # q mass per bin from a refined midpoint rule
    sub = 4
    h = (hi - lo) / (bins * sub)
    mids = lo + h * (np.arange(bins * sub) + 0.5)
    mesh = np.stack(np.meshgrid(*([mids] * d), indexing="ij"), axis=-1).reshape(-1, d)
    qv = np.asarray(q_density(mesh), dtype=np.float64).reshape((bins * sub,) * d) * h ** d
    for ax in range(d):
        qv = np.add.reduceat(qv, np.arange(0, bins * sub, sub), axis=ax)
    q_b = qv
    est = 0.5 * float(np.sum(np.abs(p_hat - q_b)))
    outside = max(0.0, 1.0 - float(q_b.sum()))
    noise = 0.5 * float(np.sum(np.sqrt(2 * np.clip(q_b * (1 - q_b), 0, None) / (math.pi * n))))
    return SampleTV(est, noise + outside, 1.0 / math.sqrt(2 * n))
