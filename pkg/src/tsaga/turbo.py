"""Turbo message passing recovery of the aggregated update (TSA-GA).

Within a round, an LMMSE module (handling y = A x + n) and an elementwise
Bernoulli-Gaussian MMSE denoiser exchange extrinsic Gaussian messages.
Across rounds, support and amplitude messages are passed forward along two
Markov chains to build the next round's prior.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .channel import MacObservation
from .core import ChainParams, log_gauss_pdf
from .sensing import SensingOperator

VAR_FLOOR = 1e-12
VAR_CEIL = 1e6
# three consecutive rises only count as divergence once v has climbed this far above its best
DIVERGE_RATIO = 1.1


@dataclass(frozen=True)
class ExtrinsicGaussian:
    mean: np.ndarray
    var: float
    clamped: bool = False


@dataclass(frozen=True)
class PriorMessage:
    """Elementwise prior pi * N(mean, var) + (1 - pi) * delta(x)."""

    pi: np.ndarray
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def iid(cls, n: int, lam: float, gamma: float) -> "PriorMessage":
        return cls(np.full(n, float(lam)), np.zeros(n), np.full(n, float(gamma)))

    @property
    def n(self) -> int:
        return self.pi.size

    def second_moment(self) -> float:
        """Mean of E[x_n^2] under the prior."""
        return float(np.mean(self.pi * (self.mean**2 + self.var)))


@dataclass
class ForwardState:
    """Messages leaving round t towards round t+1, plus the local evidence kept for EM."""

    lambda_s_fwd: np.ndarray
    mu_r_fwd: np.ndarray
    v_r_fwd: np.ndarray
    lambda_delta: np.ndarray
    mu_bar: np.ndarray
    v_bar: np.ndarray
    fallback: int = 0


@dataclass
class RecoveryResult:
    x_hat: np.ndarray
    v_post: float
    iterations_run: int
    ext_final: ExtrinsicGaussian
    tau_trace: list = field(default_factory=list)
    v_trace: list = field(default_factory=list)
    tau_emp: list = field(default_factory=list)
    v_emp: list = field(default_factory=list)
    flags: list = field(default_factory=list)


def _clamp_var(v: float, scale: float) -> tuple[float, bool]:
    lo, hi = VAR_FLOOR * scale, VAR_CEIL * scale
    if not np.isfinite(v) or v > hi:
        return hi, True
    if v < lo:
        return lo, True
    return float(v), False


def lmmse_posterior(obs: MacObservation, op: SensingOperator, prior_ext: ExtrinsicGaussian):
    """Posterior mean and averaged variance of x given y and x ~ N(mean, var I)."""
    v, s2 = prior_ext.var, obs.sigma2
    resid = obs.y - op.forward(prior_ext.mean)
    mu_y = prior_ext.mean + v / (v + s2) * op.adjoint(resid)
    v_y = v - (op.s / op.n) * v * v / (v + s2)
    return mu_y, v_y


def linear_estimate(
    obs: MacObservation, op: SensingOperator, prior_ext: ExtrinsicGaussian, scale: float = 1.0
) -> ExtrinsicGaussian:
    """Extrinsic message from the observation node to every x_n.

    Gaussian division of the LMMSE posterior by the incoming message, written
    in closed form: with AA^T = I the extrinsic mean is
    mu + (N/s) A^T (y - A mu) and the variance (N/s)(v + sigma^2) - v.
    """
    if prior_ext.var <= 0:
        raise ValueError("incoming variance must be positive")
    ratio = op.n / op.s
    v = prior_ext.var
    resid = obs.y - op.forward(prior_ext.mean)
    mean = prior_ext.mean + ratio * op.adjoint(resid)
    var, clamped = _clamp_var(ratio * (v + obs.sigma2) - v, scale)
    return ExtrinsicGaussian(mean, var, clamped)


def denoise_bg(z, tau, pi, mean, var):
    """Posterior mean and variance of x from z = x + N(0, tau) under the spike-and-slab prior.

    Vectorised; all arguments broadcast.
    """
    z = np.asarray(z, dtype=float)
    pi = np.asarray(pi, dtype=float)
    with np.errstate(divide="ignore"):
        logit = (
            np.log(pi)
            - np.log1p(-pi)
            + log_gauss_pdf(z, mean, var + tau)
            - log_gauss_pdf(z, 0.0, tau)
        )
    r = expit(logit)
    slab_var = var * tau / (var + tau)
    slab_mean = (mean * tau + z * var) / (var + tau)
    post_mean = r * slab_mean
    post_var = r * slab_var + r * (1.0 - r) * slab_mean**2
    return post_mean, post_var


def denoiser_pass(ext_in: ExtrinsicGaussian, prior: PriorMessage, scale: float = 1.0):
    """Return (posterior means, averaged posterior variance, extrinsic feedback)."""
    if ext_in.var <= 0:
        raise ValueError("incoming variance must be positive")
    tau, z = ext_in.var, ext_in.mean
    post_mean, post_var = denoise_bg(z, tau, prior.pi, prior.mean, prior.var)
    v = float(np.mean(post_var))
    if v <= 0.0:
        var, _ = _clamp_var(0.0, scale)
        return post_mean, v, ExtrinsicGaussian(post_mean, var, True)
    if v >= tau:
        var, _ = _clamp_var(np.inf, scale)
        return post_mean, v, ExtrinsicGaussian(post_mean, var, True)
    var, clamped = _clamp_var(v * tau / (tau - v), scale)
    mean = (tau * post_mean - v * z) / (tau - v)
    return post_mean, v, ExtrinsicGaussian(mean, var, clamped)


def run_round(
    obs: MacObservation,
    op: SensingOperator,
    prior: PriorMessage,
    i_max: int = 25,
    tol: float = 1e-4,
    x_true: np.ndarray | None = None,
    damping: float = 1.0,
    init_var: float | None = None,
    min_iter: int = 1,
) -> RecoveryResult:
    """Iterate the two turbo modules until the averaged posterior variance settles.

    A small overshoot followed by a slow climb onto the fixed point is normal.
    The round is flagged as diverged, and the best iterate returned, only when
    v keeps rising and ends well above its best value.

    The denoiser-to-observation message starts at zero mean with variance
    equal to the prior's second moment, which is the actual error of that
    all-zero start. Pass ``init_var`` to override.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    scale = float(max(np.mean(prior.var), prior.second_moment(), 1e-300))
    v0 = prior.second_moment() if init_var is None else float(init_var)
    v0, _ = _clamp_var(v0, scale)
    msg = ExtrinsicGaussian(np.zeros(prior.n), v0)
    res = RecoveryResult(x_hat=np.zeros(prior.n), v_post=np.inf, iterations_run=0, ext_final=msg)
    res.v_trace.append(msg.var)
    if x_true is not None:
        res.v_emp.append(float(np.mean((msg.mean - x_true) ** 2)))

    best = (np.inf, None, None)
    rises = 0
    prev_v = None
    for i in range(i_max):
        ext = linear_estimate(obs, op, msg, scale)
        post_mean, v_post, fb = denoiser_pass(ext, prior, scale)
        if ext.clamped or fb.clamped:
            res.flags.append(f"clamp@{i}")
        if damping < 1.0:
            fb = ExtrinsicGaussian(
                damping * fb.mean + (1 - damping) * msg.mean,
                damping * fb.var + (1 - damping) * msg.var,
                fb.clamped,
            )
        res.tau_trace.append(ext.var)
        res.v_trace.append(fb.var)
        if x_true is not None:
            res.tau_emp.append(float(np.mean((ext.mean - x_true) ** 2)))
            res.v_emp.append(float(np.mean((fb.mean - x_true) ** 2)))
        res.iterations_run = i + 1
        if v_post < best[0]:
            best = (v_post, post_mean, ext)
        msg = fb

        if not np.isfinite(v_post):
            res.flags.append("diverged")
            break
        if prev_v is not None:
            rises = rises + 1 if v_post > prev_v * (1 + tol) else 0
            if rises >= 3 and v_post > DIVERGE_RATIO * best[0]:
                res.flags.append("diverged")
                break
            if i + 1 >= min_iter and abs(v_post - prev_v) <= tol * max(prev_v, 1e-300):
                break
        prev_v = v_post

    if "diverged" in res.flags:
        res.v_post, res.x_hat, res.ext_final = best
    else:
        res.x_hat, res.v_post, res.ext_final = post_mean, v_post, ext
    return res


def message_delta_to_s(ext: ExtrinsicGaussian, r_mean: np.ndarray, r_var: np.ndarray) -> np.ndarray:
    """Support evidence: P{s_n = 1} implied by the extrinsic x message and the amplitude message."""
    log_off = log_gauss_pdf(ext.mean, 0.0, ext.var)
    log_on = log_gauss_pdf(ext.mean, r_mean, r_var + ext.var)
    return expit(log_on - log_off)


def _mixture_terms(r, ext: ExtrinsicGaussian, s_fwd, epsilon):
    """Log-weights, means and variances of the two-component delta->r mixture."""
    lam = np.asarray(s_fwd, dtype=float)
    omega = epsilon * lam / ((1.0 - lam) + epsilon * lam)
    mu, v = ext.mean, ext.var
    means = (mu / epsilon, mu)
    variances = (v / epsilon**2, v)
    with np.errstate(divide="ignore"):
        logw = (
            np.log1p(-omega) + log_gauss_pdf(r, means[0], variances[0]),
            np.log(omega) + log_gauss_pdf(r, means[1], variances[1]),
        )
    return logw, means, variances


def log_mixture_derivatives(r, ext: ExtrinsicGaussian, s_fwd, epsilon):
    """First and second derivative in r of the log delta->r mixture message."""
    logw, means, variances = _mixture_terms(r, ext, s_fwd, epsilon)
    top = np.maximum(logw[0], logw[1])
    w0, w1 = np.exp(logw[0] - top), np.exp(logw[1] - top)
    tot = w0 + w1
    w = (w0 / tot, w1 / tot)
    d = [(m - r) / vv for m, vv in zip(means, variances)]
    d1 = w[0] * d[0] + w[1] * d[1]
    d2 = (
        w[0] * (d[0] ** 2 - 1.0 / variances[0])
        + w[1] * (d[1] ** 2 - 1.0 / variances[1])
        - d1**2
    )
    return d1, d2, w


def log_mixture(r, ext: ExtrinsicGaussian, s_fwd, epsilon):
    logw, _, _ = _mixture_terms(r, ext, s_fwd, epsilon)
    return np.logaddexp(logw[0], logw[1])


def message_delta_to_r(ext: ExtrinsicGaussian, s_fwd: np.ndarray, epsilon: float):
    """Gaussian fit of the amplitude message by a second-order expansion of its log.

    Returns (mean, var, fallback_mask); elements where the log-density is not
    locally concave take the moments of the heavier mixture component.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    r0 = ext.mean
    d1, d2, w = log_mixture_derivatives(r0, ext, s_fwd, epsilon)
    bad = d2 >= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        var = -1.0 / d2
        mean = r0 - d1 / d2
    if np.any(bad):
        wide = w[0] >= w[1]
        mean = np.where(bad, np.where(wide, r0 / epsilon, r0), mean)
        var = np.where(bad, np.where(wide, ext.var / epsilon**2, ext.var), var)
    return mean, var, bad


def forward_support(lambda_delta, lambda_prev, params: ChainParams) -> np.ndarray:
    ld = np.asarray(lambda_delta, dtype=float)
    lp = np.asarray(lambda_prev, dtype=float)
    off = (1 - lp) * (1 - ld)
    on = lp * ld
    den = off + on
    safe = den > 0
    out = np.where(
        safe,
        (params.p10 * off + (1 - params.p01) * on) / np.where(safe, den, 1.0),
        params.support_step(lp),
    )
    return np.clip(out, 0.0, 1.0)


def gaussian_product(m1, v1, m2, v2):
    """Moments of the normalised product of two Gaussians; infinite variance means flat."""
    with np.errstate(divide="ignore"):
        p1 = np.where(np.isinf(v1), 0.0, 1.0 / v1)
        p2 = np.where(np.isinf(v2), 0.0, 1.0 / v2)
    h = p1 * np.where(p1 > 0, m1, 0.0) + p2 * np.where(p2 > 0, m2, 0.0)
    prec = p1 + p2
    return h / prec, 1.0 / prec


def forward_amplitude(delta_msg, prev_fwd, params: ChainParams):
    m, v = gaussian_product(delta_msg[0], delta_msg[1], prev_fwd[0], prev_fwd[1])
    a = 1.0 - params.beta
    return a * m, a * a * v + params.innovation_var


def propagate(
    ext: ExtrinsicGaussian, prior: PriorMessage, params: ChainParams
) -> ForwardState:
    """All forward messages of one round, in the order the algorithm computes them."""
    lam_d = message_delta_to_s(ext, prior.mean, prior.var)
    mu_bar, v_bar, bad = message_delta_to_r(ext, prior.pi, params.epsilon)
    lam_fwd = forward_support(lam_d, prior.pi, params)
    mu_fwd, v_fwd = forward_amplitude((mu_bar, v_bar), (prior.mean, prior.var), params)
    return ForwardState(
        lambda_s_fwd=lam_fwd,
        mu_r_fwd=mu_fwd,
        v_r_fwd=v_fwd,
        lambda_delta=lam_d,
        mu_bar=mu_bar,
        v_bar=v_bar,
        fallback=int(np.count_nonzero(bad)),
    )


def next_prior(state: ForwardState | None, params: ChainParams, t: int, n: int | None = None) -> PriorMessage:
    """Prior for round t+1: the IID Bernoulli-Gaussian at t = 0, else the forward messages."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0 or state is None:
        if n is None:
            n = state.lambda_s_fwd.size
        return PriorMessage.iid(n, params.lam, params.gamma)
    return PriorMessage(state.lambda_s_fwd, state.mu_r_fwd, state.v_r_fwd)
