"""Gaussian-mixture data distributions and their exact conditional moments.

Every quantity the samplers consume is a posterior expectation over the
forward noise ``W = (x - sqrt(ab) X0) / sqrt(1 - ab)`` given ``X_t = x``.
For a mixture of Gaussians (point atoms are zero-covariance components)
the posterior is again a mixture: component ``k`` has weight ``w_k(x)``
and ``W | x, k ~ N(a_k(x), B_k)`` with

    a_k = sqrt(1 - ab) C_k^{-1} (x - sqrt(ab) mu_k),
    B_k = I - (1 - ab) C_k^{-1},        C_k = ab Sigma_k + (1 - ab) I.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .schedule import Schedule


class TargetError(ValueError):
    """Malformed or inconsistent target definition."""


@dataclass(frozen=True)
class MixtureTarget:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)
    support_radius: float = math.inf
    name: str = ""

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.asarray(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        cov = np.asarray(self.covs, dtype=np.float64)
        K, d = mu.shape
        if K == 0:
            raise TargetError("a target needs at least one component")
        if w.shape != (K,):
            raise TargetError(f"{len(w)} weights for {K} components")
        if cov.shape != (K, d, d):
            raise TargetError(f"covariance array has shape {cov.shape}, expected {(K, d, d)}")
        if np.any(w <= 0):
            raise TargetError("component weights must be positive")
        if abs(w.sum() - 1.0) > 1e-9:
            raise TargetError(f"component weights sum to {w.sum()!r}, not 1")
        for k in range(K):
            if not np.allclose(cov[k], cov[k].T, atol=1e-12):
                raise TargetError(f"covariance of component {k} is not symmetric")
            if np.linalg.eigvalsh(cov[k]).min() < -1e-12:
                raise TargetError(f"covariance of component {k} is not PSD")
        if np.all(cov == 0) and np.any(np.linalg.norm(mu, axis=1) > self.support_radius):
            raise TargetError("point atom lies outside the declared support radius")
        for name, val in (("weights", w / w.sum()), ("means", mu), ("covs", cov)):
            val = np.array(val)
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        dev = self.means - m
        return np.einsum("k,kij->ij", self.weights, self.covs) + np.einsum(
            "k,ki,kj->ij", self.weights, dev, dev)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` points from the data distribution."""
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        # symmetric square root handles the singular (point-atom) case
        vals, vecs = np.linalg.eigh(self.covs)
        roots = np.einsum("kij,kj,klj->kil", vecs, np.sqrt(np.clip(vals, 0, None)), vecs)
        return self.means[comp] + np.einsum("nij,nj->ni", roots[comp], z)

    # -- constructors -----------------------------------------------------

    @classmethod
    def point_atoms(cls, locations, weights=None, support_radius=None, name=""):
        """``locations`` is ``(K, d)``; a flat vector is a single atom."""
        loc = np.atleast_2d(np.asarray(locations, dtype=np.float64))
        K, d = loc.shape
        w = np.full(K, 1.0 / K) if weights is None else np.asarray(weights, dtype=np.float64)
        R = float(np.linalg.norm(loc, axis=1).max()) if support_radius is None else support_radius
        return cls(w, loc, np.zeros((K, d, d)), R, name)

    @classmethod
    def gaussian(cls, mean, cov, support_radius=math.inf, name=""):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        d = len(mean)
        return cls(np.ones(1), mean[None, :], _as_cov(cov, d)[None], support_radius, name)

    @classmethod
    def from_dict(cls, spec: dict) -> "MixtureTarget":
        try:
            d = int(spec["dim"])
            comps = spec["components"]
            weights = [float(c["weight"]) for c in comps]
            means = [np.broadcast_to(np.asarray(c["mean"], dtype=np.float64), (d,)) for c in comps]
            covs = [_as_cov(c.get("cov", 0.0), d) for c in comps]
        except (KeyError, TypeError, ValueError) as exc:
            raise TargetError(f"malformed target definition: {exc!r}") from exc
        R = spec.get("support_radius")
        return cls(np.array(weights), np.array(means), np.array(covs),
                   math.inf if R is None else float(R), spec.get("name", ""))

    @classmethod
    def from_json(cls, path) -> "MixtureTarget":
        path = Path(path)
        try:
            spec = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise TargetError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(spec, dict):
            raise TargetError(f"{path}: top level must be an object")
        spec.setdefault("name", path.stem)
        try:
            return cls.from_dict(spec)
        except TargetError as exc:
            raise TargetError(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "components": [
                {"weight": float(w), "mean": m.tolist(), "cov": c.tolist()}
                for w, m, c in zip(self.weights, self.means, self.covs)
            ],
            "support_radius": None if math.isinf(self.support_radius) else self.support_radius,
        }


def _as_cov(cov, d: int) -> np.ndarray:
    """Accept a scalar (isotropic), a diagonal vector or a full matrix."""
    c = np.asarray(cov, dtype=np.float64)
    if c.ndim == 0:
        return float(c) * np.eye(d)
    if c.ndim == 1 and c.shape == (d,):
        return np.diag(c)
    if c.size == d * d:
        return c.reshape(d, d)
    raise TargetError(f"cannot read a {d}x{d} covariance from shape {c.shape}")


# -- posterior machinery ----------------------------------------------------


@dataclass(frozen=True)
class _Posterior:
    log_q: np.ndarray  # (n,)
    weights: np.ndarray  # (n, K)
    a: np.ndarray  # (n, K, d)
    B: np.ndarray  # (K, d, d)


def _posterior(target: MixtureTarget, ab: float, gam: float, x: np.ndarray) -> _Posterior:
    d = target.dim
    C = ab * target.covs + gam * np.eye(d)  # (K, d, d)
    # 1 - ab > 0 for every t >= 1, so C is positive definite
    assert gam > 0, "forward noise variance must be positive"
    Cinv = np.linalg.inv(C)
    _, logdet = np.linalg.slogdet(C)
    diff = x[:, None, :] - math.sqrt(ab) * target.means[None]  # (n, K, d)
    Cd = np.einsum("kij,nkj->nki", Cinv, diff)
    maha = np.einsum("nki,nki->nk", diff, Cd)
    log_comp = np.log(target.weights) - 0.5 * (d * math.log(2 * math.pi) + logdet) - 0.5 * maha
    top = log_comp.max(axis=1, keepdims=True)
    w = np.exp(log_comp - top)
    tot = w.sum(axis=1)
    log_q = top[:, 0] + np.log(tot)
    w /= tot[:, None]
    return _Posterior(log_q, w, math.sqrt(gam) * Cd, np.eye(d) - gam * Cinv)


def _as_batch(target: MixtureTarget, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 and target.dim == 1:
        return x.reshape(1, 1), True
    if x.ndim == 1:
        if target.dim == 1 and len(x) != 1:
            return x[:, None], False
        return x[None, :], True
    return x, False


def marginal_density(target: MixtureTarget, schedule: Schedule, t: int, x, log=False):
    """Exact density of ``X_t`` (a Gaussian mixture) at ``x``."""
    _, ab, gam = schedule.at(t)
    xb, single = _as_batch(target, x)
    lq = _posterior(target, ab, gam, xb).log_q
    out = lq if log else np.exp(lq)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class MomentBundle:
    """Closed-form conditional quantities at ``(t, x)``.

    Array fields carry a leading batch axis when ``moments`` was called
    with a batch of points.
    """

    t: int
    x: np.ndarray
    q_t: np.ndarray
    posterior_weights: np.ndarray
    g: np.ndarray
    score: np.ndarray
    noise_cov: np.ndarray  # E[W W^T | x]
    jac: np.ndarray  # d g / d x
    w_corr: np.ndarray
    noise_mean: np.ndarray  # E[W | x]
    noise_sq_norm: np.ndarray  # E[|W|^2 | x]
    noise_third: np.ndarray  # E[|W|^2 W | x]
    one_minus_alpha_bar: float

    def v(self, z) -> np.ndarray:
        return np.einsum("...ij,...j->...i", self.noise_cov, z)


def moments(target: MixtureTarget, schedule: Schedule, t: int, x) -> MomentBundle:
    """All conditional quantities at step ``t`` for one point or a batch.

    ``w_corr`` is the third-order correction used by the accelerated
    deterministic sampler,

        w(x) = E[ |W|^2 (W / sqrt(1-ab) + s) + W W^T s | x ] / (1 - ab),

    the form that makes the accelerated map agree with the exact transport
    to second order in the step size.
    """
    _, ab, gam = schedule.at(t)
    xb, single = _as_batch(target, x)
    post = _posterior(target, ab, gam, xb)
    w, a, B = post.weights, post.a, post.B
    d = target.dim

    trB = np.trace(B, axis1=1, axis2=2)  # (K,)
    a_sq = np.einsum("nki,nki->nk", a, a)
    Ba = np.einsum("kij,nkj->nki", B, a)

    mean_W = np.einsum("nk,nki->ni", w, a)
    M2 = np.einsum("nk,kij->nij", w, B) + np.einsum("nk,nki,nkj->nij", w, a, a)
    sq_norm = w @ trB + np.einsum("nk,nk->n", w, a_sq)
    third = np.einsum("nk,nki->ni", w, (trB[None, :] + a_sq)[..., None] * a + 2 * Ba)

    rg = math.sqrt(gam)
    score = -mean_W / rg
    g = rg * mean_W
    jac = np.eye(d) + np.einsum("ni,nj->nij", mean_W, mean_W) - M2
    M2s = np.einsum("nij,nj->ni", M2, score)
    w_corr = (third / rg + sq_norm[:, None] * score + M2s) / gam

    fields = dict(
        x=xb, q_t=np.exp(post.log_q), posterior_weights=w, g=g, score=score,
        noise_cov=M2, jac=jac, w_corr=w_corr, noise_mean=mean_W,
        noise_sq_norm=sq_norm, noise_third=third,
    )
    if single:
        fields = {k: v[0] for k, v in fields.items()}
    return MomentBundle(t=t, one_minus_alpha_bar=gam, **fields)


def literal_w_corr(bundle: MomentBundle) -> np.ndarray:
    """The alternative reading ``E[|W|^2 (W/sqrt(1-ab) + s) - W W^T s / (1-ab)]``.

    Kept for comparison only; it does not cancel the cubic terms of the
    accelerated map (see ``tests/test_samplers.py``).
    """
    gam = bundle.one_minus_alpha_bar
    s = bundle.score
    M2s = np.einsum("...ij,...j->...i", bundle.noise_cov, s)
    return (bundle.noise_third / math.sqrt(gam)
            + bundle.noise_sq_norm[..., None] * s - M2s / gam)


def v_apply(target: MixtureTarget, schedule: Schedule, t: int, x, z) -> np.ndarray:
    """``E[W W^T | X_t = x] z``."""
    return moments(target, schedule, t, x).v(np.asarray(z, dtype=np.float64))


def score_jacobian_fd(target: MixtureTarget, schedule: Schedule, t: int, x, h=None) -> np.ndarray:
    """Central-difference Jacobian of ``g_t`` at a single point ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    d = target.dim
    if h is None:
        h = 1e-5 * (1.0 + np.abs(x).max())
    pts = np.concatenate([x + h * np.eye(d), x - h * np.eye(d)])
    g = moments(target, schedule, t, pts).g
    return ((g[:d] - g[d:]) / (2 * h)).T


def sample_forward(target: MixtureTarget, schedule: Schedule, t: int, n: int, seed) -> np.ndarray:
    """i.i.d. draws of ``X_t = sqrt(ab) X0 + sqrt(1 - ab) W``."""
    _, ab, gam = schedule.at(t)
    rng = np.random.default_rng(seed)
    x0 = target.sample(n, rng)
    return math.sqrt(ab) * x0 + math.sqrt(gam) * rng.standard_normal((n, target.dim))
