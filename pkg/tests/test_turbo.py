import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ar_forward_quad, bg_posterior_quad, forward_support_enum
from tsaga.channel import MacObservation
from tsaga.core import ChainParams, SeededRng, gauss_pdf
from tsaga.sensing import build_operator
from tsaga.turbo import (
    ExtrinsicGaussian,
    PriorMessage,
    denoise_bg,
    denoiser_pass,
    forward_amplitude,
    forward_support,
    linear_estimate,
    log_mixture,
    log_mixture_derivatives,
    message_delta_to_r,
    message_delta_to_s,
    next_prior,
    propagate,
    run_round,
)

FROZEN_BG = [
    ((0.7, 0.3, 0.1, 0.0, 1.0), (0.0489687235720554, 0.044956434159425546)),
    ((2.5, 0.05, 0.3, 1.0, 2.0), (2.463414634146342, 0.048780487804877204)),
    ((-0.2, 1.5, 0.9, -0.5, 0.25), (-0.4076141373095066, 0.2112577332707465)),
    ((8.0, 0.01, 0.001, 0.0, 1.0), (7.920792079207919, 0.00990099009903389)),
]


@pytest.mark.parametrize("args,expected", FROZEN_BG)
def test_denoiser_frozen_quadrature_values(args, expected):
    z, tau, pi, m, phi = args
    mean, var = denoise_bg(z, tau, pi, m, phi)
    assert mean == pytest.approx(expected[0], abs=1e-8)
    assert var == pytest.approx(expected[1], abs=1e-8)


@settings(max_examples=60, deadline=None)
@given(
    z=st.floats(-5, 5),
    tau=st.floats(1e-3, 5),
    pi=st.floats(1e-3, 1 - 1e-3),
    m=st.floats(-2, 2),
    phi=st.floats(1e-2, 5),
)
def test_denoiser_matches_quadrature(z, tau, pi, m, phi):
    mean, var = denoise_bg(z, tau, pi, m, phi)
    ref_mean, ref_var = bg_posterior_quad(z, tau, pi, m, phi)
    assert mean == pytest.approx(ref_mean, abs=1e-8)
    assert var == pytest.approx(ref_var, abs=1e-8)


def test_denoiser_far_tail_is_finite():
    mean, var = denoise_bg(np.array([60.0, -60.0, 0.0]), 1e-4, 1e-6, 0.0, 1.0)
    assert np.all(np.isfinite(mean)) and np.all(np.isfinite(var))
    assert mean[0] == pytest.approx(60.0, rel=1e-3)


def test_denoiser_limits():
    # pi = 1 is a plain Gaussian prior
    mean, var = denoise_bg(1.0, 1.0, 1.0, 0.0, 1.0)
    assert mean == pytest.approx(0.5) and var == pytest.approx(0.5)
    mean, var = denoise_bg(3.0, 1.0, 0.0, 0.0, 1.0)
    assert mean == 0.0 and var == 0.0


def _problem(n=64, s=32, seed=0, sigma2=0.05):
    g = np.random.default_rng(seed)
    op = build_operator(n, s, SeededRng(seed))
    x = np.where(g.random(n) < 0.2, g.standard_normal(n), 0.0)
    y = op.forward(x) + math.sqrt(sigma2) * g.standard_normal(s)
    return op, x, MacObservation(y, sigma2)


def test_linear_estimate_is_dense_lmmse_divided_by_prior():
    op, x, obs = _problem()
    a = op.matrix()
    n = op.n
    mu = np.random.default_rng(5).standard_normal(n) * 0.1
    v = 0.3
    cov = np.linalg.inv(np.eye(n) / v + a.T @ a / obs.sigma2)
    post_mean = cov @ (mu / v + a.T @ obs.y / obs.sigma2)
    post_var = np.trace(cov) / n
    ext_var = 1.0 / (1.0 / post_var - 1.0 / v)
    ext_mean = ext_var * (post_mean / post_var - mu / v)
    ext = linear_estimate(obs, op, ExtrinsicGaussian(mu, v))
    assert ext.var == pytest.approx(ext_var, rel=1e-10)
    assert np.allclose(ext.mean, ext_mean, atol=1e-9)


def test_denoiser_pass_extrinsic_is_gaussian_division():
    g = np.random.default_rng(2)
    z = g.standard_normal(500)
    prior = PriorMessage.iid(500, 0.3, 1.0)
    post_mean, v, fb = denoiser_pass(ExtrinsicGaussian(z, 0.4), prior)
    assert fb.var == pytest.approx(1.0 / (1.0 / v - 1.0 / 0.4))
    assert np.allclose(fb.mean, fb.var * (post_mean / v - z / 0.4))


def test_linear_estimate_rejects_nonpositive_variance():
    op, _, obs = _problem()
    with pytest.raises(ValueError):
        linear_estimate(obs, op, ExtrinsicGaussian(np.zeros(op.n), 0.0))


def test_run_round_recovers_sparse_signal():
    g = np.random.default_rng(0)
    n, s = 4096, 2048
    op = build_operator(n, s, SeededRng(1))
    x = np.where(g.random(n) < 0.1, g.standard_normal(n), 0.0)
    obs = MacObservation(op.forward(x) + 0.01 * g.standard_normal(s), 1e-4)
    res = run_round(obs, op, PriorMessage.iid(n, 0.1, 1.0), x_true=x)
    nmse = np.sum((res.x_hat - x) ** 2) / np.sum(x**2)
    assert nmse < 1e-2
    assert "diverged" not in res.flags
    assert 1 <= res.iterations_run <= 25
    # predicted and measured message errors agree once converged
    assert res.v_trace[-1] == pytest.approx(res.v_emp[-1], rel=0.2)
    assert res.tau_trace[-1] == pytest.approx(res.tau_emp[-1], rel=0.2)


def test_run_round_validates_damping():
    op, _, obs = _problem()
    with pytest.raises(ValueError):
        run_round(obs, op, PriorMessage.iid(op.n, 0.2, 1.0), damping=0.0)


def test_lossless_round_is_exact():
    g = np.random.default_rng(4)
    n = 64
    op = build_operator(n, n, SeededRng(0))
    x = g.standard_normal(n)
    res = run_round(MacObservation(op.forward(x), 0.0), op, PriorMessage.iid(n, 1.0, 1.0))
    assert np.allclose(res.x_hat, x, atol=1e-8)


def test_delta_to_s_matches_direct_ratio():
    ext = ExtrinsicGaussian(np.array([0.1, 1.0, -3.0]), 0.2)
    rm, rv = np.array([0.0, 0.5, -1.0]), np.array([1.0, 0.3, 2.0])
    on = gauss_pdf(ext.mean, rm, rv + ext.var)
    off = gauss_pdf(ext.mean, 0.0, ext.var)
    assert np.allclose(message_delta_to_s(ext, rm, rv), on / (on + off), atol=1e-14)


def test_mixture_derivatives_match_finite_differences():
    ext = ExtrinsicGaussian(np.array([0.3, -1.2, 2.0]), 0.05)
    pi = np.array([0.2, 0.7, 0.95])
    eps = 1e-3
    r = np.array([0.25, -1.0, 2.1])
    d1, d2, _ = log_mixture_derivatives(r, ext, pi, eps)
    h = 1e-5
    f = lambda rr: log_mixture(rr, ext, pi, eps)
    assert np.allclose(d1, (f(r + h) - f(r - h)) / (2 * h), rtol=1e-6, atol=1e-6)
    assert np.allclose(d2, (f(r + h) - 2 * f(r) + f(r - h)) / h**2, rtol=1e-4, atol=1e-3)


def test_delta_to_r_is_second_order_fit():
    ext = ExtrinsicGaussian(np.array([0.8, -0.5]), 0.1)
    pi = np.array([0.9, 0.6])
    mean, var, bad = message_delta_to_r(ext, pi, 1e-7)
    d1, d2, _ = log_mixture_derivatives(ext.mean, ext, pi, 1e-7)
    assert not bad.any()
    assert np.allclose(var, -1 / d2) and np.allclose(mean, ext.mean - d1 / d2)
    # the fit stays centred on the extrinsic mean and is never tighter than it
    assert np.allclose(mean, ext.mean, atol=1e-6) and np.all(var >= 0.1 * (1 - 1e-9))


def test_delta_to_r_fallback_when_not_concave():
    ext = ExtrinsicGaussian(np.array([0.0, 5.0]), 1.0)
    mean, var, bad = message_delta_to_r(ext, np.array([0.5, 0.5]), 1e-3)
    assert np.all(np.isfinite(mean)) and np.all(var > 0)
    with pytest.raises(ValueError):
        message_delta_to_r(ext, np.array([0.5, 0.5]), 1.5)


@pytest.mark.parametrize(
    "ld,lp,p01,p10,expected",
    [(0.3, 0.6, 0.01, 0.0025, 0.3889130434782609), (0.99, 0.01, 0.2, 0.05, 0.4249999999999999),
     (0.0, 0.5, 0.1, 0.1, 0.1)],
)
def test_forward_support_frozen(ld, lp, p01, p10, expected):
    params = ChainParams(0.5, 1.0, p01, p10, 0.1, 1.0)
    assert forward_support(ld, lp, params) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=100)
@given(ld=st.floats(0, 1), lp=st.floats(0, 1), p01=st.floats(0, 1), p10=st.floats(0, 1))
def test_forward_support_matches_enumeration(ld, lp, p01, p10):
    params = ChainParams(0.5, 1.0, p01, p10, 0.1, 1.0)
    got = float(forward_support(ld, lp, params))
    den = ld * lp + (1 - ld) * (1 - lp)
    expected = forward_support_enum(ld, lp, p01, p10) if den > 0 else params.support_step(lp)
    assert got == pytest.approx(expected, abs=1e-12)


def test_forward_amplitude_frozen():
    params = ChainParams(0.5, 1.0, 0.1, 0.1, 0.1, 19.0)
    m, v = forward_amplitude((0.4, 0.5), (-1.0, 2.0), params)
    assert m == pytest.approx(0.10800000000000005, abs=1e-7)
    assert v == pytest.approx(0.514, abs=1e-7)


@settings(max_examples=30, deadline=None)
@given(
    m1=st.floats(-3, 3), v1=st.floats(0.05, 4), m2=st.floats(-3, 3), v2=st.floats(0.05, 4),
    beta=st.floats(0.01, 1.0),
)
def test_forward_amplitude_matches_quadrature(m1, v1, m2, v2, beta):
    params = ChainParams.coupled(0.3, 1.3, 0.1, beta)
    m, v = forward_amplitude((m1, v1), (m2, v2), params)
    rm, rv = ar_forward_quad(m1, v1, m2, v2, 1 - beta, params.innovation_var)
    assert m == pytest.approx(rm, abs=1e-7)
    assert v == pytest.approx(rv, abs=1e-7)


def test_forward_amplitude_flat_previous_message():
    params = ChainParams.coupled(0.3, 1.0, 0.1, 0.2)
    m, v = forward_amplitude((0.5, 0.1), (0.0, np.inf), params)
    assert m == pytest.approx(0.8 * 0.5) and v == pytest.approx(0.64 * 0.1 + params.innovation_var)


def test_next_prior_first_round_is_iid():
    params = ChainParams.coupled(0.2, 2.0, 0.01, 0.1)
    pr = next_prior(None, params, 0, 5)
    assert np.all(pr.pi == 0.2) and np.all(pr.mean == 0) and np.all(pr.var == 2.0)
    assert pr.second_moment() == pytest.approx(0.4)
    with pytest.raises(ValueError):
        next_prior(None, params, -1, 5)


def test_propagate_feeds_next_prior():
    params = ChainParams.coupled(0.2, 1.0, 0.05, 0.1)
    prior = PriorMessage.iid(4, 0.2, 1.0)
    ext = ExtrinsicGaussian(np.array([0.0, 0.01, 2.0, -1.5]), 0.01)
    st_ = propagate(ext, prior, params)
    nxt = next_prior(st_, params, 1)
    assert np.array_equal(nxt.pi, st_.lambda_s_fwd)
    # strong evidence of activity keeps the element likely active next round
    assert nxt.pi[2] > 0.9 and nxt.pi[0] < 0.2
    assert nxt.mean[2] == pytest.approx(0.9 * 2.0 / 1.01, rel=1e-3)
