import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffrates import MixtureTarget, ScheduleParams, TargetError, build_schedule
from diffrates.targets import (literal_w_corr, marginal_density, moments, sample_forward,
                               score_jacobian_fd, v_apply)


def test_json_roundtrip(tmp_path, mixture2d):
    p = tmp_path / "t.json"
    p.write_text(json.dumps(mixture2d.to_dict()))
    back = MixtureTarget.from_json(p)
    assert np.array_equal(back.means, mixture2d.means)
    assert np.array_equal(back.covs, mixture2d.covs)


@pytest.mark.parametrize("cov,expected", [
    (0.5, [[0.5, 0], [0, 0.5]]),
    ([0.5, 2.0], [[0.5, 0], [0, 2.0]]),
    ([1.0, 0.2, 0.2, 1.0], [[1.0, 0.2], [0.2, 1.0]]),
])
def test_cov_forms(cov, expected):
    t = MixtureTarget.from_dict({"dim": 2, "components": [{"weight": 1.0, "mean": [0, 0], "cov": cov}]})
    assert np.allclose(t.covs[0], expected)


def test_bad_json_names_path(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(TargetError, match="broken.json"):
        MixtureTarget.from_json(p)


@pytest.mark.parametrize("spec", [
    {"dim": 1, "components": [{"weight": 0.6, "mean": [0]}, {"weight": 0.6, "mean": [1]}]},
    {"dim": 1, "components": [{"weight": 1.0, "mean": [0], "cov": -1.0}]},
    {"dim": 2, "components": [{"weight": 1.0, "mean": [0, 0], "cov": [[1, 0.5], [0, 1]]}]},
    {"dim": 1, "components": []},
    {"dim": 1, "components": [{"weight": 1.0, "mean": [3.0]}], "support_radius": 2.0},
    {"components": [{"weight": 1.0, "mean": [0]}]},
])
def test_invalid_targets(spec):
    with pytest.raises(TargetError):
        MixtureTarget.from_dict(spec)


def test_point_atom_density_peak(atom):
    sch = build_schedule(ScheduleParams(100, 1.5, 3.5))
    t = int(np.argmin(np.abs(sch.one_minus_alpha_bar - 0.25))) + 1
    gam = sch.one_minus_alpha_bar[t - 1]
    assert marginal_density(atom, sch, t, 0.0) == pytest.approx(1 / math.sqrt(2 * math.pi * gam), rel=1e-14)


def test_standard_normal_is_fixed_point(std_normal, sched100):
    x = np.linspace(-4, 4, 17)
    for t in (1, 37, 100):
        q = marginal_density(std_normal, sched100, t, x)
        assert np.allclose(q, np.exp(-x * x / 2) / math.sqrt(2 * math.pi), rtol=1e-12)
        m = moments(std_normal, sched100, t, x[:, None])
        assert np.allclose(m.score[:, 0], -x, rtol=1e-12, atol=1e-14)


def test_single_gaussian_score_closed_form(sched100):
    mu = np.array([0.5, -1.0])
    S = np.array([[0.7, 0.2], [0.2, 0.4]])
    tgt = MixtureTarget.gaussian(mu, S)
    x = np.array([0.3, 0.8])
    for t in (3, 50, 99):
        _, ab, gam = sched100.at(t)
        C = ab * S + gam * np.eye(2)
        want = -np.linalg.solve(C, x - math.sqrt(ab) * mu)
        assert np.allclose(moments(tgt, sched100, t, x).score, want, rtol=1e-12)


def test_density_matches_forward_histogram(bimodal, sched100):
    # kernel-free estimate: fraction of forward draws in [x - h, x + h]
    rng = np.random.default_rng(3)
    n, h = 400_000, 0.05
    for _ in range(5):
        t = int(rng.integers(1, 101))
        x = float(rng.uniform(-2, 2))
        xs = sample_forward(bimodal, sched100, t, n, seed=int(rng.integers(1 << 30)))[:, 0]
        frac = np.mean(np.abs(xs - x) <= h)
        se = math.sqrt(frac * (1 - frac) / n) / (2 * h)
        # exact window probability divided by 2h; avoids the O(h^2) bias of the midpoint
        grid = np.linspace(x - h, x + h, 201)
        exact = np.trapezoid(marginal_density(bimodal, sched100, t, grid), grid) / (2 * h)
        assert abs(frac / (2 * h) - exact) <= 4 * se


def test_point_atom_moments(atom, sched100):
    x = np.array([0.7])
    for t in (2, 40, 100):
        gam = sched100.one_minus_alpha_bar[t - 1]
        m = moments(atom, sched100, t, x)
        assert m.score == pytest.approx(-x / gam, rel=1e-14)
        assert m.noise_cov[0, 0] == pytest.approx(x[0] ** 2 / gam, rel=1e-13)
        assert m.jac[0, 0] == pytest.approx(1.0, abs=1e-12)
        # corrected third-order term: E[|W|^2 (W/sqrt(g) + s) + W W^T s] / g with W = x / sqrt(g)
        assert m.w_corr[0] == pytest.approx(-x[0] ** 3 / gam ** 3, rel=1e-12)


def test_literal_w_form_on_point_atom(atom, sched100):
    # the alternative reading gives +x^3 / g^3 on a point atom at 0
    x = np.array([0.7])
    t = 40
    gam = sched100.one_minus_alpha_bar[t - 1]
    m = moments(atom, sched100, t, x)
    assert literal_w_corr(m)[0] == pytest.approx(x[0] ** 3 / gam ** 3, rel=1e-12)


def test_v_apply(atom, mixture2d, sched100):
    x = np.array([0.4])
    gam = sched100.one_minus_alpha_bar[29]
    assert v_apply(atom, sched100, 30, x, np.array([0.0])) == pytest.approx([0.0])
    assert v_apply(atom, sched100, 30, x, np.array([2.0]))[0] == pytest.approx(2 * 0.16 / gam, rel=1e-13)
    z = np.array([1.0, -2.0])
    y = np.array([0.3, 0.1])
    m = moments(mixture2d, sched100, 60, y)
    assert np.allclose(v_apply(mixture2d, sched100, 60, y, z), m.noise_cov @ z, rtol=1e-14)


def _random_points(target, sched, n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        t = int(rng.integers(1, sched.T + 1))
        yield t, sample_forward(target, sched, t, 1, int(rng.integers(1 << 30)))[0]


@pytest.mark.parametrize("name", ["bimodal", "mixture2d"])
def test_bundle_invariants(name, request, sched100):
    tgt = request.getfixturevalue(name)
    for t, x in _random_points(tgt, sched100, 30, 11):
        m = moments(tgt, sched100, t, x)
        gam = m.one_minus_alpha_bar
        assert np.abs(m.score * gam + m.g).max() <= 1e-15 * (1 + np.abs(m.g).max())
        d = tgt.dim
        resid = m.jac - np.eye(d) + m.noise_cov - gam * np.outer(m.score, m.score)
        assert np.abs(resid).max() <= 1e-12 * (1 + np.abs(m.noise_cov).max())
        assert np.allclose(m.noise_cov, m.noise_cov.T, atol=1e-14)
        assert np.linalg.eigvalsh(m.noise_cov).min() >= -1e-12
        assert m.posterior_weights.sum() == pytest.approx(1.0, abs=1e-14)
        assert m.q_t > 0


def test_score_is_grad_log_density(mixture2d, sched100):
    for t, x in _random_points(mixture2d, sched100, 20, 5):
        h = 1e-5 * (1 + np.abs(x).max())
        fd = np.array([(marginal_density(mixture2d, sched100, t, x + h * e, log=True)
                        - marginal_density(mixture2d, sched100, t, x - h * e, log=True)) / (2 * h)
                       for e in np.eye(2)])
        s = moments(mixture2d, sched100, t, x).score
        assert np.abs(fd - s).max() <= 1e-5 * max(1.0, np.abs(s).max())


@pytest.mark.parametrize("name", ["atom", "std_normal", "bimodal", "mixture2d"])
def test_jacobian_fd(name, request, sched100):
    tgt = request.getfixturevalue(name)
    for t, x in _random_points(tgt, sched100, 15, 2):
        J = moments(tgt, sched100, t, x).jac
        J_fd = score_jacobian_fd(tgt, sched100, t, x)
        assert np.abs(J - J_fd).max() <= 1e-6 * np.abs(J).max()
        assert np.abs(J_fd - J_fd.T).max() <= 1e-6 * np.abs(J).max()


def test_posterior_weights_permutation(mixture2d, sched100):
    perm = [2, 0, 1]
    other = MixtureTarget(mixture2d.weights[perm], mixture2d.means[perm], mixture2d.covs[perm])
    x = np.array([0.2, -0.4])
    a = moments(mixture2d, sched100, 50, x)
    b = moments(other, sched100, 50, x)
    assert np.allclose(a.posterior_weights[perm], b.posterior_weights, rtol=1e-13)
    assert np.allclose(a.w_corr, b.w_corr, rtol=1e-12)


def test_far_field_no_underflow(bimodal, sched100):
    m = moments(bimodal, sched100, 3, np.array([40.0]))
    assert np.all(np.isfinite(m.score)) and np.isfinite(m.w_corr).all()
    assert m.posterior_weights[1] == pytest.approx(1.0)


def test_batch_matches_single(mixture2d, sched100):
    xs = sample_forward(mixture2d, sched100, 20, 7, seed=1)
    batch = moments(mixture2d, sched100, 20, xs)
    for i, x in enumerate(xs):
        one = moments(mixture2d, sched100, 20, x)
        assert np.allclose(batch.w_corr[i], one.w_corr, rtol=1e-13)
        assert np.allclose(batch.jac[i], one.jac, rtol=1e-13)


def test_sample_forward_point_atom_and_symmetry(atom, sched100):
    xs = sample_forward(atom, sched100, 30, 200_000, seed=0)
    gam = sched100.one_minus_alpha_bar[29]
    assert abs(xs.var() / gam - 1) < 5 * math.sqrt(2 / 200_000)
    two = MixtureTarget.point_atoms(np.array([[-1.0], [1.0]]))
    n = 100_000
    ys = sample_forward(two, sched100, 30, n, seed=4)
    assert abs(ys.mean()) <= 4 / math.sqrt(n)
    assert np.array_equal(sample_forward(two, sched100, 30, 10, 9), sample_forward(two, sched100, 30, 10, 9))


@settings(max_examples=40, deadline=None)
@given(t=st.integers(1, 100), x=st.floats(-6, 6), seed=st.integers(0, 1000))
def test_moment_identities_property(t, x, seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 4))
    w = rng.dirichlet(np.ones(K))
    tgt = MixtureTarget(w, rng.normal(size=(K, 1)), rng.uniform(0, 0.5, size=(K, 1, 1)))
    sch = build_schedule(ScheduleParams(100, 1.5, 3.5))
    m = moments(tgt, sch, t, np.array([x]))
    gam = m.one_minus_alpha_bar
    assert m.noise_cov[0, 0] >= -1e-12
    assert m.jac[0, 0] == pytest.approx(1 + gam * m.score[0] ** 2 - m.noise_cov[0, 0], abs=1e-10)
