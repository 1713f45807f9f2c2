"""State evolution of the turbo recovery, monotonicity checks and the learning-loss bound.

Within a round the scalar recursion alternates

    tau_i = f(v_i) = (N/s)(v_i + sigma^2) - v_i
    v_{i+1} = g(tau_i) = (1/phi(tau_i) - 1/tau_i)^{-1}

where phi(tau) is the MMSE of x from x + sqrt(tau) w under the round's
effective prior. Across rounds the effective prior is the forward message the
algorithm itself propagates, driven by pseudo-observations at each earlier
round's fixed point. For short chains the exact conditional MMSE is also
available by enumeration and quadrature.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate

from .core import ChainParams, RoundConfig, SeededRng, gauss_pdf, spawn_stream
from .turbo import ExtrinsicGaussian, PriorMessage, denoise_bg, next_prior, propagate


@dataclass
class SeTrace:
    tau: list = field(default_factory=list)
    v: list = field(default_factory=list)
    tau_star: float = float("nan")
    v_star: float = float("nan")
    phi_star: float = float("nan")
    phi_se: float = 0.0
    iterations: int = 0
    sigma2: float = 0.0
    flags: list = field(default_factory=list)


@dataclass(frozen=True)
class ConvexityConstants:
    c: float
    l: float
    g_bound: float
    rho: float

    def __post_init__(self):
        if not 0 < self.c <= self.l:
            raise ValueError("need 0 < c <= L")
        if self.g_bound < 0:
            raise ValueError("gradient bound must be non-negative")
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must lie in [0, 1]")

    @staticmethod
    def sparsification_factor(n: int, k: int) -> float:
        return float(np.sqrt((n - k) / n))


def se_f(v: float, n: int, s: int, sigma2: float) -> float:
    """Extrinsic variance leaving the linear module when its input error is v."""
    if v < 0:
        raise ValueError("v must be non-negative")
    return (n / s) * (v + sigma2) - v


def se_g(tau: float, phi: float) -> float:
    """Extrinsic variance leaving the denoiser; infinite when it adds nothing."""
    if phi <= 0:
        return 0.0
    if phi >= tau:
        return float("inf")
    return 1.0 / (1.0 / phi - 1.0 / tau)


def mmse_mc(
    tau: float, prior: PriorMessage, samples: int, rng: SeededRng
) -> tuple[float, float]:
    """Monte Carlo MMSE (and its standard error) with x drawn from ``prior``.

    ``prior`` may hold one element (an IID prior) or many, in which case
    elements are drawn uniformly.
    """
    if samples < 10_000:
        raise ValueError("need at least 1e4 samples")
    g = rng.generator()
    idx = g.integers(0, prior.n, size=samples) if prior.n > 1 else np.zeros(samples, dtype=int)
    pi, m, phi = prior.pi[idx], prior.mean[idx], prior.var[idx]
    x = (g.random(samples) < pi) * (m + np.sqrt(phi) * g.standard_normal(samples))
    z = x + np.sqrt(tau) * g.standard_normal(samples)
    est, _ = denoise_bg(z, tau, pi, m, phi)
    err = (est - x) ** 2
    return float(err.mean()), float(err.std(ddof=1) / np.sqrt(samples))


def mmse_quad(tau: float, pi: float, mean: float, var: float) -> float:
    """MMSE under a scalar spike-and-slab prior by adaptive quadrature over z.

    The posterior mean switches on within a few sqrt(tau) of zero, so the
    integration range is split there.
    """
    if pi <= 0:
        return 0.0
    sd_tau = np.sqrt(tau)
    sd_wide = np.sqrt(var + tau)
    lo = min(-12 * sd_wide + mean, -40 * sd_tau)
    hi = max(12 * sd_wide + mean, 40 * sd_tau)
    knots = sorted({lo, hi, mean, *(k * sd_tau for k in range(-12, 13))})
    knots = [k for k in knots if lo <= k <= hi]

    def integrand(z):
        dens = (1 - pi) * gauss_pdf(z, 0.0, tau) + pi * gauss_pdf(z, mean, var + tau)
        est, _ = denoise_bg(z, tau, pi, mean, var)
        return float(dens * est * est)

    acc = sum(
        integrate.quad(integrand, a, b, epsabs=1e-14, epsrel=1e-11, limit=200)[0]
        for a, b in zip(knots, knots[1:])
    )
    return max(pi * (mean**2 + var) - acc, 0.0)


def se_recursion(
    n: int,
    s: int,
    sigma2: float,
    mmse: Callable[[float], float],
    v0: float,
    tol: float = 1e-4,
    max_iter: int = 200,
) -> SeTrace:
    """Iterate f and g from v0 until tau settles."""
    if v0 <= 0:
        raise ValueError("v0 must be positive")
    tr = SeTrace(sigma2=sigma2)
    v = v0
    tr.v.append(v)
    for _ in range(max_iter):
        tau = se_f(v, n, s, sigma2)
        tr.tau.append(tau)
        if tau <= 0:
            tr.phi_star = 0.0
            tr.v.append(0.0)
            break
        phi = mmse(tau)
        tr.phi_star = phi
        v = se_g(tau, phi)
        if not np.isfinite(v):
            tr.flags.append("no-progress")
            break
        tr.v.append(v)
        if len(tr.tau) > 1 and abs(tr.tau[-1] - tr.tau[-2]) <= tol * tr.tau[-2]:
            break
    tr.iterations = len(tr.tau)
    tr.tau_star = tr.tau[-1]
    tr.v_star = tr.v[-1]
    return tr


def iid_trace(n: int, s: int, sigma2: float, lam: float, gamma: float, tol: float = 1e-4) -> SeTrace:
    """Single-round recursion for an IID zero-mean Bernoulli-Gaussian prior, by quadrature."""
    return se_recursion(
        n, s, sigma2, lambda tau: mmse_quad(tau, lam, 0.0, gamma), v0=lam * gamma, tol=tol
    )


def simulate_chain(params: ChainParams, rounds: int, size: int, rng: SeededRng):
    """Draw ``size`` independent stationary (support, amplitude) chains; arrays (rounds, size)."""
    g = rng.generator()
    s = np.empty((rounds, size), dtype=bool)
    r = np.empty((rounds, size))
    s[0] = g.random(size) < params.lam
    r[0] = np.sqrt(params.gamma) * g.standard_normal(size)
    sd = np.sqrt(params.innovation_var)
    for t in range(1, rounds):
        u = g.random(size)
        s[t] = np.where(s[t - 1], u >= params.p01, u < params.p10)
        r[t] = (1 - params.beta) * r[t - 1] + sd * g.standard_normal(size)
    return s, r


def se_over_rounds(
    n: int,
    s: int,
    sigma2: float,
    params: ChainParams,
    rounds: int,
    rng: SeededRng,
    population: int = 100_000,
    tol: float = 1e-4,
) -> list[SeTrace]:
    """Round-by-round recursion with the forward-message effective prior.

    A population of scalar chains stands in for the N elements. Each round's
    MMSE function is evaluated with common random numbers so that it is a
    smooth, monotone function of tau.
    """
    sup, amp = simulate_chain(params, rounds, population, spawn_stream(rng, "chain"))
    traces = []
    state = None
    for t in range(rounds):
        prior = next_prior(state, params, t, population)
        x = sup[t] * amp[t]
        w = spawn_stream(rng, f"noise-{t}").generator().standard_normal(population)

        def sq_err(tau):
            est, _ = denoise_bg(x + np.sqrt(tau) * w, tau, prior.pi, prior.mean, prior.var)
            return (est - x) ** 2

        tr = se_recursion(n, s, sigma2, lambda tau: float(sq_err(tau).mean()), params.lam * params.gamma, tol)
        tr.phi_se = float(sq_err(tr.tau_star).std(ddof=1) / np.sqrt(population))
        traces.append(tr)
        ext = ExtrinsicGaussian(x + np.sqrt(tr.tau_star) * w, tr.tau_star)
        state = propagate(ext, prior, params)
    return traces


def _chain_prior_terms(params: ChainParams, t: int):
    """Support-pattern probabilities and the AR amplitude covariance for t rounds."""
    a = 1.0 - params.beta
    # amplitude variances by recursion, so non-stationary (beta, xi) also work
    var = [params.gamma]
    for _ in range(1, t):
        var.append(a * a * var[-1] + params.innovation_var)
    cov = np.empty((t, t))
    for i in range(t):
        for j in range(t):
            lo, hi = min(i, j), max(i, j)
            cov[i, j] = a ** (hi - lo) * var[lo]
    patterns = []
    for pat in itertools.product((0, 1), repeat=t):
        p = params.lam if pat[0] else 1 - params.lam
        for prev, cur in zip(pat, pat[1:]):
            on = params.support_step(float(prev))
            p *= on if cur else 1 - on
        if p > 0:
            patterns.append((np.array(pat, dtype=float), p))
    return patterns, cov


def _axis_rule(tau: float, wide: float, points: int = 6):
    """Composite Gauss-Legendre nodes on the real line, refined near zero on the sqrt(tau) scale."""
    st = np.sqrt(tau)
    pos = {0.0, *(k * st for k in (0.25, 0.5, 1, 1.5, 2, 3, 4, 6, 9, 13)), *(k * wide for k in (0.5, 1, 2, 3, 5, 8, 11))}
    pos = sorted(p for p in pos if p <= max(11 * wide, 13 * st))
    knots = np.array(sorted({-p for p in pos} | set(pos)))
    gx, gw = np.polynomial.legendre.leggauss(points)
    a, b = knots[:-1, None], knots[1:, None]
    nodes = (0.5 * (b - a) * gx + 0.5 * (a + b)).ravel()
    weights = (0.5 * (b - a) * gw).ravel()
    return nodes, weights


def chain_mmse_exact(params: ChainParams, taus: list, points: int | None = None) -> float:
    """MMSE of the newest x given one noisy observation per round, noise variances ``taus``.

    Exact conditioning: sum over the 2^t support patterns, Gaussian algebra for
    the amplitudes, composite tensor quadrature over the observations.
    Practical for t <= 3.
    """
    t = len(taus)
    if not 1 <= t <= 3:
        raise ValueError("exact chain MMSE supports 1 to 3 rounds")
    if points is None:
        points = 6 if t < 3 else 4
    patterns, cov = _chain_prior_terms(params, t)
    rules = [_axis_rule(tau, np.sqrt(cov[j, j] + tau), points) for j, tau in enumerate(taus)]
    grid = np.stack(np.meshgrid(*[r[0] for r in rules], indexing="ij"), axis=-1).reshape(-1, t)
    wgrid = np.ones(1)
    for r in rules:
        wgrid = np.multiply.outer(wgrid, r[1]).ravel() if wgrid.size > 1 else r[1].copy()
    wgrid = wgrid.ravel()

    noise = np.diag(np.asarray(taus, dtype=float))
    dens = np.zeros(grid.shape[0])
    num = np.zeros(grid.shape[0])
    for pat, p in patterns:
        h = np.diag(pat)
        sz = h @ cov @ h + noise
        prec = np.linalg.inv(sz)
        _, logdet = np.linalg.slogdet(sz)
        quadform = np.einsum("ij,jk,ik->i", grid, prec, grid)
        pdf = p * np.exp(-0.5 * (quadform + logdet + t * np.log(2 * np.pi)))
        gain = (cov[t - 1] * pat[t - 1]) @ h @ prec
        dens += pdf
        num += pdf * (grid @ gain)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(dens > 0, num / dens, 0.0)
    second = float(sum(p * pat[t - 1] for pat, p in patterns) * cov[t - 1, t - 1])
    return max(second - float(np.dot(wgrid, dens * cond**2)), 0.0)


def exact_se_over_rounds(
    n: int, s: int, sigma2: float, params: ChainParams, rounds: int, tol: float = 1e-6
) -> list[SeTrace]:
    """Round-by-round recursion with the exact conditional MMSE (rounds <= 3)."""
    traces = []
    past: list = []
    for t in range(rounds):
        v0 = params.lam * params.gamma
        tr = se_recursion(
            n, s, sigma2, lambda tau: chain_mmse_exact(params, past + [tau]), v0, tol=tol
        )
        traces.append(tr)
        past.append(tr.tau_star)
    return traces


@dataclass
class MonotonicityReport:
    violations: list = field(default_factory=list)
    soft: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_within_round(trace: SeTrace, slack: float = 0.0) -> MonotonicityReport:
    """Within-round monotonicity: sigma^2 <= tau_{i+1} <= tau_i and 0 <= v_{i+1} <= v_i.

    ``slack`` is an absolute tolerance for sampled MMSE (e.g. 3 standard errors).
    """
    rep = MonotonicityReport()
    tau, v = trace.tau, trace.v
    for i, tv in enumerate(tau):
        if tv < trace.sigma2 * (1 - 1e-12) - slack:
            rep.violations.append(f"tau[{i}]={tv:.6g} below sigma2={trace.sigma2:.6g}")
    for i in range(1, len(tau)):
        if tau[i] > tau[i - 1] * (1 + 1e-12) + slack:
            rep.violations.append(f"tau rose at {i}: {tau[i - 1]:.6g} -> {tau[i]:.6g}")
    for i in range(1, len(v)):
        if v[i] < 0:
            rep.violations.append(f"v[{i}] negative")
        if v[i] > v[i - 1] * (1 + 1e-12) + slack:
            rep.violations.append(f"v rose at {i}: {v[i - 1]:.6g} -> {v[i]:.6g}")
    return rep


def check_across_rounds(traces: list[SeTrace], stationary: bool = True, k_se: float = 3.0) -> MonotonicityReport:
    """Across-round monotonicity of the fixed points, within k_se standard errors."""
    rep = MonotonicityReport()
    if not stationary:
        rep.soft.append("prior not stationary; monotonicity not implied")
    for t in range(1, len(traces)):
        prev, cur = traces[t - 1], traces[t]
        # tau* is affine in phi*, so one tolerance covers both
        slack_phi = k_se * np.hypot(prev.phi_se, cur.phi_se)
        if cur.phi_star > prev.phi_star + slack_phi + 1e-12 * prev.phi_star:
            rep.violations.append(
                f"phi* rose at round {t}: {prev.phi_star:.6g} -> {cur.phi_star:.6g}"
            )
        slack_tau = slack_phi * 4 * max(1.0, cur.tau_star / max(cur.phi_star, 1e-300)) ** 2
        if cur.tau_star > prev.tau_star + slack_tau + 1e-12 * prev.tau_star:
            rep.violations.append(
                f"tau* rose at round {t}: {prev.tau_star:.6g} -> {cur.tau_star:.6g}"
            )
    return rep


def sparsification_term(g_bound: float, rho: float, t: int) -> float:
    if rho >= 1:
        raise ValueError("rho = 1 (k = 0) leaves the bound undefined")
    return (g_bound * rho * ((1 + rho) * (1 - rho**t) / (1 - rho) + 1)) ** 2


def kappa(recovery_err: float, constants: ConvexityConstants, t: int) -> float:
    """Per-round error term; ``recovery_err`` is the squared recovery error in gradient units."""
    return recovery_err + sparsification_term(constants.g_bound, constants.rho, t)


def loss_bound(
    constants: ConvexityConstants, kappas, initial_gap: float, t: int | None = None
) -> float:
    """Upper bound on E[L(theta_{T+1})] - L(theta*) after T rounds with step 1/L.

    ``kappas[j]`` is the error term of round j + 1; T defaults to len(kappas).
    """
    if constants.rho >= 1:
        raise ValueError("rho = 1 (k = 0) leaves the bound undefined")
    kappas = np.asarray(kappas, dtype=float)
    t = kappas.size if t is None else t
    if t > kappas.size:
        raise ValueError("need one kappa per round")
    q = 1.0 - constants.c / constants.l
    decay = q ** np.arange(t - 1, -1, -1)
    return float(initial_gap * q**t + np.dot(decay, kappas[:t]) / constants.l)


def bound_ceiling(constants: ConvexityConstants, phi1: float) -> float:
    """Limit of the bound for a stationary recovery term as T grows."""
    rho = constants.rho
    return (phi1 + (constants.g_bound * rho * ((1 + rho) / (1 - rho) + 1)) ** 2) / constants.c


@dataclass(frozen=True)
class QuadraticShard:
    """A device's local objective 0.5 (theta - center)^T H (theta - center)."""

    center: np.ndarray
    k_m: int = 1


@dataclass(frozen=True)
class QuadraticTask:
    """Strongly convex quadratic split over devices, with known c, L and optimum.

    H is diagonal with eigenvalues spread over [c, L]. The global loss is the
    K_m-weighted mean of the device losses, minimised at the weighted mean of
    the centers.
    """

    h: np.ndarray
    centers: np.ndarray
    counts: np.ndarray

    @classmethod
    def make(cls, dim: int, n_devices: int, c: float, l: float, rng: SeededRng, spread: float = 1.0):
        g = rng.generator()
        h = np.linspace(c, l, dim)
        # a sparse common optimum plus device-specific offsets
        base = np.where(g.random(dim) < 0.2, 3.0 * g.standard_normal(dim), 0.0)
        centers = base + spread * g.standard_normal((n_devices, dim)) / np.sqrt(dim)
        return cls(h=h, centers=centers, counts=np.ones(n_devices, dtype=int))

    @property
    def dim(self) -> int:
        return self.h.size

    @property
    def c(self) -> float:
        return float(self.h.min())

    @property
    def l(self) -> float:
        return float(self.h.max())

    @property
    def theta_star(self) -> np.ndarray:
        return np.average(self.centers, axis=0, weights=self.counts)

    def shards(self) -> list:
        return [QuadraticShard(c, int(k)) for c, k in zip(self.centers, self.counts)]

    def loss(self, theta, shard: QuadraticShard | None = None) -> float:
        if shard is not None:
            d = theta - shard.center
            return float(0.5 * np.dot(self.h * d, d))
        return float(np.average([self.loss(theta, sh) for sh in self.shards()], weights=self.counts))

    def grad(self, theta, shard: QuadraticShard) -> np.ndarray:
        return self.h * (theta - shard.center)

    def gap(self, theta) -> float:
        d = theta - self.theta_star
        return float(0.5 * np.dot(self.h * d, d))


@dataclass
class BoundReport:
    checkpoints: list
    empirical_gap: list
    bound: list
    bound_kappa_zero: list
    kappas: list
    g_bound: float

    @property
    def holds(self) -> bool:
        return all(e <= b for e, b in zip(self.empirical_gap, self.bound))

    @property
    def control_violated(self) -> bool:
        return any(e > b for e, b in zip(self.empirical_gap, self.bound_kappa_zero))


def verify_bound_empirically(
    task: QuadraticTask,
    s_frac: float,
    k_frac: float,
    sigma_e: float,
    p_bar: float = 500.0,
    rounds: int = 100,
    seeds: int = 10,
    checkpoints: tuple = (10, 20, 50, 100),
    variant: str = "tsa-ga",
    seed0: int = 0,
) -> BoundReport:
    """Run the full pipeline with E = 1 and eta = 1/L and compare the mean gap to the bound.

    The recovery term of each round's kappa is the measured mean squared
    recovery error, converted to gradient units (divided by eta^2). G is the
    largest local gradient norm met along any trajectory.
    """
    from .harness import iterate_rounds

    n = task.dim
    eta = 1.0 / task.l
    s = max(1, int(round(s_frac * n)))
    k = max(1, int(round(k_frac * n)))
    theta0 = np.zeros(n)
    gap0 = task.gap(theta0)
    gaps = np.zeros((seeds, rounds))
    errs = np.zeros((seeds, rounds))
    g_max = 0.0
    shards = task.shards()
    for i in range(seeds):
        rc = RoundConfig(n, s, k, p_bar=p_bar, sigma_e=sigma_e, eta=eta, e_local=1, t_rounds=rounds, seed=seed0 + i)
        for out in iterate_rounds(task, shards, theta0, rc, variant=variant):
            g_max = max(g_max, *(float(np.linalg.norm(task.grad(out.theta_before, sh))) for sh in shards))
            gaps[i, out.t] = task.gap(out.theta)
            errs[i, out.t] = float(np.sum((out.x_hat - out.x_true) ** 2))
    consts = ConvexityConstants(task.c, task.l, g_max, ConvexityConstants.sparsification_factor(n, k))
    rec = errs.mean(axis=0) / eta**2
    kap = [kappa(rec[t], consts, t + 1) for t in range(rounds)]
    cps = [c for c in checkpoints if c <= rounds]
    return BoundReport(
        checkpoints=cps,
        empirical_gap=[float(gaps[:, c - 1].mean()) for c in cps],
        bound=[loss_bound(consts, kap, gap0, c) for c in cps],
        bound_kappa_zero=[loss_bound(consts, np.zeros(rounds), gap0, c) for c in cps],
        kappas=kap,
        g_bound=g_max,
    )
