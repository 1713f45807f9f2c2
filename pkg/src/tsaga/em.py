"""Sliding-window EM learning of the Markov prior parameters.

Each element carries two independent chains inside the window: the binary
support and the AR(1) amplitude. The local evidence for round i is the pair
of messages (lambda_delta, N(mu_bar, v_bar)) produced by the turbo round;
the window is anchored by the forward message that entered its first round.
Forward messages are recomputed under the current parameters, backward
messages run from the newest round, and the resulting pairwise marginals
drive closed-form parameter updates.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import ChainParams, stationary_p10, stationary_xi
from .turbo import PriorMessage, forward_support

LAM_RANGE = (1e-6, 1.0 - 1e-6)
BETA_RANGE = (1e-4, 1.0)


@dataclass(frozen=True)
class RoundEvidence:
    """What one round leaves behind for smoothing."""

    lambda_delta: np.ndarray
    mu_bar: np.ndarray
    v_bar: np.ndarray
    prior: PriorMessage


@dataclass
class WindowArchive:
    t0: int
    rounds: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.t0 < 1:
            raise ValueError("window length must be >= 1")
        self.rounds = deque(self.rounds, maxlen=self.t0)

    def push(self, ev: RoundEvidence) -> None:
        self.rounds.append(ev)

    def __len__(self) -> int:
        return len(self.rounds)

    @property
    def full(self) -> bool:
        return len(self.rounds) == self.t0


@dataclass
class PosteriorMoments:
    """Windowed posterior moments, arrays shaped (rounds, N) or (rounds - 1, N)."""

    es: np.ndarray
    ess: np.ndarray
    er: np.ndarray
    vr: np.ndarray
    err: np.ndarray

    def __post_init__(self):
        if np.any(self.es < -1e-12) or np.any(self.es > 1 + 1e-12):
            raise ValueError("E[s] outside [0, 1]")
        if np.any(self.vr < 0):
            raise ValueError("negative amplitude variance")


def _ar_step(h, p, params: ChainParams):
    """Push a Gaussian in natural form (h, p) through r' = (1-beta) r + noise."""
    a = 1.0 - params.beta
    q = params.innovation_var
    with np.errstate(divide="ignore", invalid="ignore"):
        var = np.where(p > 0, a * a / p + q, np.inf)
        mean = np.where(p > 0, a * h / p, 0.0)
        p_out = np.where(np.isfinite(var) & (var > 0), 1.0 / var, 0.0)
    return mean * p_out, p_out


def forward_support_window(archive: WindowArchive, params: ChainParams) -> list:
    """Support messages entering each archived round, recomputed under ``params``."""
    recs = list(archive.rounds)
    fwd = [recs[0].prior.pi]
    for rec in recs[:-1]:
        fwd.append(forward_support(rec.lambda_delta, fwd[-1], params))
    return fwd


def forward_amplitude_window(archive: WindowArchive, params: ChainParams) -> list:
    """Amplitude messages entering each archived round, in natural form (h, p)."""
    recs = list(archive.rounds)
    p0 = 1.0 / recs[0].prior.var
    fwd = [(recs[0].prior.mean * p0, p0)]
    for rec in recs[:-1]:
        h, p = fwd[-1]
        lp = 1.0 / rec.v_bar
        fwd.append(_ar_step(h + rec.mu_bar * lp, p + lp, params))
    return fwd


def backward_support(archive: WindowArchive, params: ChainParams) -> list:
    """Messages into each round's support from later rounds; the newest is uninformative (1/2)."""
    if len(archive) < 2:
        raise ValueError("window needs at least two rounds")
    recs = list(archive.rounds)
    n = recs[0].lambda_delta.size
    back = [np.full(n, 0.5)]
    for rec in reversed(recs[1:]):
        b = back[0]
        q1 = rec.lambda_delta * b
        q0 = (1.0 - rec.lambda_delta) * (1.0 - b)
        num = params.p01 * q0 + (1.0 - params.p01) * q1
        den = (1.0 - params.p10 + params.p01) * q0 + (1.0 - params.p01 + params.p10) * q1
        back.insert(0, np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.5))
    return back


def backward_amplitude(archive: WindowArchive, params: ChainParams) -> list:
    """Messages into each round's amplitude from later rounds, natural form (h, p).

    The newest round receives a flat message (p = 0). With beta = 1 every
    backward message is flat since the AR kernel forgets its input.
    """
    if len(archive) < 2:
        raise ValueError("window needs at least two rounds")
    recs = list(archive.rounds)
    n = recs[0].mu_bar.size
    a = 1.0 - params.beta
    q = params.innovation_var
    back = [(np.zeros(n), np.zeros(n))]
    for rec in reversed(recs[1:]):
        h, p = back[0]
        lp = 1.0 / rec.v_bar
        h, p = h + rec.mu_bar * lp, p + lp
        with np.errstate(divide="ignore", invalid="ignore"):
            var = np.where(p > 0, 1.0 / p + q, np.inf)
            p_out = np.where(np.isfinite(var), a * a / var, 0.0)
            h_out = np.where(np.isfinite(var), a * (h / p) / var, 0.0)
        back.insert(0, (h_out, p_out))
    return back


def as_moments(h, p):
    """Mean and variance from natural parameters; p must be positive."""
    return h / p, 1.0 / p


def posterior_moments(archive: WindowArchive, params: ChainParams) -> PosteriorMoments:
    recs = list(archive.rounds)
    fs = forward_support_window(archive, params)
    bs = backward_support(archive, params)
    fa = forward_amplitude_window(archive, params)
    ba = backward_amplitude(archive, params)
    w = len(recs)

    # support: alpha_i(s) = fwd * local, beta_i(s) = back
    alpha1 = [fs[i] * recs[i].lambda_delta for i in range(w)]
    alpha0 = [(1 - fs[i]) * (1 - recs[i].lambda_delta) for i in range(w)]
    es = []
    for i in range(w):
        on = alpha1[i] * bs[i]
        off = alpha0[i] * (1 - bs[i])
        es.append(on / (on + off))
    ess = []
    p01, p10 = params.p01, params.p10
    for i in range(1, w):
        c1 = recs[i].lambda_delta * bs[i]
        c0 = (1 - recs[i].lambda_delta) * (1 - bs[i])
        j11 = alpha1[i - 1] * (1 - p01) * c1
        j10 = alpha1[i - 1] * p01 * c0
        j01 = alpha0[i - 1] * p10 * c1
        j00 = alpha0[i - 1] * (1 - p10) * c0
        ess.append(j11 / (j11 + j10 + j01 + j00))

    # amplitude: filtered (forward x local) and smoothed (x backward)
    filt = []
    er, vr = [], []
    for i in range(w):
        lp = 1.0 / recs[i].v_bar
        h, p = fa[i][0] + recs[i].mu_bar * lp, fa[i][1] + lp
        filt.append((h, p))
        m, v = as_moments(h + ba[i][0], p + ba[i][1])
        er.append(m)
        vr.append(v)
    err = []
    a = 1.0 - params.beta
    q = params.innovation_var
    for i in range(1, w):
        m_a, v_a = as_moments(*filt[i - 1])
        lp = 1.0 / recs[i].v_bar
        h_c = recs[i].mu_bar * lp + ba[i][0]
        p_c = lp + ba[i][1]
        v_pred = a * a * v_a + q
        m_pred = a * m_a
        p_i = 1.0 / v_pred + p_c
        v_i = 1.0 / p_i
        m_i = (m_pred / v_pred + h_c) * v_i
        gain = a * v_a / v_pred
        m_prev = m_a + gain * (m_i - m_pred)
        err.append(gain * v_i + m_prev * m_i)
    return PosteriorMoments(
        es=np.array(es), ess=np.array(ess), er=np.array(er), vr=np.array(vr), err=np.array(err)
    )


def beta_objective(a, A, B, C, n, gamma):
    """Expected AR log-likelihood (up to constants) as a function of a = 1 - beta."""
    q = (1.0 - a * a) * gamma
    return -0.5 * n * np.log(q) - (A - 2 * a * B + a * a * C) / (2 * q)


def solve_beta(A: float, B: float, C: float, n: float, gamma: float) -> tuple[float, bool]:
    """Maximise the AR term over beta with xi tied to (beta, gamma).

    Stationarity of the cubic -gamma n a^3 + B a^2 + (gamma n - A - C) a + B
    in a = 1 - beta; the best admissible root wins, clamped to the beta range.
    """
    roots = np.roots([-gamma * n, B, gamma * n - A - C, B])
    cands = [r.real for r in roots if abs(r.imag) < 1e-9 and 0.0 < r.real < 1.0]
    lo, hi = BETA_RANGE
    cands = [min(max(a, 1.0 - hi), 1.0 - lo) for a in cands]
    clamped = not cands
    cands += [1.0 - lo, 1.0 - hi]
    best = max(cands, key=lambda a: beta_objective(a, A, B, C, n, gamma))
    beta = float(np.clip(1.0 - best, lo, hi))
    return beta, clamped or beta in (lo, hi)


def em_update(
    moments: PosteriorMoments, current: ChainParams, flags: list | None = None
) -> ChainParams:
    """One M-step from windowed posterior moments; epsilon is carried over."""
    flags = flags if flags is not None else []
    lam = float(np.clip(np.mean(moments.es), *LAM_RANGE))

    den = float(np.sum(moments.es[:-1]))
    if den < 1e-9:
        p01 = current.p01
        flags.append("p01-kept")
    else:
        p01 = float(np.clip(1.0 - np.sum(moments.ess) / den, 0.0, 1.0))

    # amplitude statistics count only where the support is on: when s = 0 the
    # amplitude is unobserved and exact EM would return its prior moments there
    second = moments.vr + moments.er**2
    w = float(np.sum(moments.es))
    gamma = float(np.sum(moments.es * second) / w) if w > 1e-9 else 0.0
    if not gamma > 0:
        gamma = current.gamma
        flags.append("gamma-kept")

    n = float(np.sum(moments.ess)) if moments.ess.size else 0.0
    if n > 1e-9:
        A = float(np.sum(moments.ess * second[1:]))
        C = float(np.sum(moments.ess * second[:-1]))
        B = float(np.sum(moments.ess * moments.err))
        beta, clamped = solve_beta(A, B, C, n, gamma)
        if clamped:
            flags.append("beta-clamped")
    else:
        beta = current.beta
    return ChainParams(
        lam=lam,
        gamma=gamma,
        p01=p01,
        p10=stationary_p10(lam, p01),
        beta=beta,
        xi=stationary_xi(beta, gamma),
        epsilon=current.epsilon,
    )


def schedule(t: int, t0: int, warmup: int = 10) -> bool:
    """Whether the EM step runs after round t."""
    return t > max(warmup, t0)


def initial_params(
    y: np.ndarray,
    n: int,
    sigma2: float,
    lam: float,
    p01: float = 0.005,
    beta: float = 0.005,
    epsilon: float = 1e-7,
) -> ChainParams:
    """Starting parameters, with gamma matched to the first observation's energy.

    Since A A^T = I, E||y||^2 = s (lambda gamma + sigma2).
    """
    s = y.size
    lam = float(np.clip(lam, *LAM_RANGE))
    energy = float(np.dot(y, y)) - s * sigma2
    gamma = max(energy, 1e-12 * float(np.dot(y, y)) + 1e-300) / (s * lam)
    return ChainParams.coupled(lam, gamma, p01, beta, epsilon)
