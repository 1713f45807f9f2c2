"""Shared domain types, seeded random streams and Gaussian helpers."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def stable_hash64(*parts) -> int:
    """64-bit hash of the string forms of ``parts``, identical on every platform."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class SeededRng:
    """A (seed, stream-id) pair naming one reproducible Philox stream.

    ``generator()`` always returns a fresh generator positioned at the start
    of the stream, so a consumer that needs the same draws twice (common
    random numbers) simply calls it again.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            [self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id & 0xFFFFFFFFFFFFFFFF]
        )
        return np.random.Generator(np.random.Philox(ss))


def spawn_stream(rng: SeededRng, label: str) -> SeededRng:
    """Derive a child stream keyed by ``label``; order of spawning is irrelevant."""
    if not label:
        raise ValueError("stream label must be non-empty")
    return SeededRng(rng.seed, stable_hash64(rng.stream_id, label))


def log_gauss_pdf(x, mean, var):
    var = np.asarray(var, dtype=float)
    if np.any(var <= 0):
        raise ValueError("variance must be positive")
    d = np.asarray(x, dtype=float) - mean
    return -0.5 * (LOG_2PI + np.log(var) + d * d / var)


def gauss_pdf(x, mean, var):
    """Density of N(mean, var) at x. Broadcasts over arrays."""
    return np.exp(log_gauss_pdf(x, mean, var))


def require_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class ChainParams:
    """Markov prior of the aggregated update.

    Each element is ``s * r``: the support ``s`` is a two-state chain with
    death rate ``p01`` and birth rate ``p10``; the amplitude ``r`` is an AR(1)
    process ``r' = (1 - beta) r + beta * w`` with ``w ~ N(0, xi)``.
    """

    lam: float
    gamma: float
    p01: float
    p10: float
    beta: float
    xi: float
    epsilon: float = 1e-7

    def __post_init__(self):
        for name in ("lam", "p01", "p10", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not (self.gamma > 0 and self.xi > 0):
            raise ValueError("gamma and xi must be positive")
        if not 0.0 < self.epsilon <= 1e-3:
            raise ValueError("epsilon must lie in (0, 1e-3]")

    @classmethod
    def coupled(cls, lam, gamma, p01, beta, epsilon=1e-7) -> "ChainParams":
        """Build parameters with p10 and xi tied so (lam, gamma) are stationary."""
        return cls(
            lam=lam,
            gamma=gamma,
            p01=p01,
            p10=stationary_p10(lam, p01),
            beta=beta,
            xi=stationary_xi(beta, gamma),
            epsilon=epsilon,
        )

    @property
    def innovation_var(self) -> float:
        """Per-step AR noise variance beta^2 * xi."""
        return self.beta**2 * self.xi

    def support_step(self, p_active):
        """Marginal P{s'=1} after one chain step from P{s=1} = p_active."""
        return self.p10 * (1.0 - p_active) + (1.0 - self.p01) * p_active

    def with_(self, **kw) -> "ChainParams":
        return replace(self, **kw)


def stationary_p10(lam: float, p01: float) -> float:
    if lam >= 1.0:
        return 1.0
    return min(1.0, lam * p01 / (1.0 - lam))


def stationary_xi(beta: float, gamma: float) -> float:
    # beta^2 xi = gamma (1 - (1-beta)^2) keeps Var[r] = gamma; beta = 0 leaves xi unused
    if beta <= 0.0:
        return gamma
    return (2.0 - beta) * gamma / beta


@dataclass(frozen=True)
class RoundConfig:
    n_model: int
    s_channel: int
    k_sparsity: int
    p_bar: float = 500.0
    sigma_e: float = 1.0
    eta: float = 0.01
    e_local: int = 1
    i_max: int = 25
    t_rounds: int = 100
    t0_window: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.s_channel <= self.n_model:
            raise ValueError("need 0 < s_channel <= n_model")
        # k may exceed s: the temporal prior can carry recovery past the
        # memoryless limit, so only k <= N is enforced here
        if not 0 < self.k_sparsity <= self.n_model:
            raise ValueError("need 0 < k_sparsity <= n_model")
        if not (self.p_bar > 0 and self.eta > 0):
            raise ValueError("p_bar and eta must be positive")
        if self.sigma_e < 0:
            raise ValueError("sigma_e must be non-negative")
        if self.e_local < 1 or self.i_max < 1 or self.t_rounds < 0 or self.t0_window < 1:
            raise ValueError("e_local, i_max, t0_window must be >= 1 and t_rounds >= 0")

    @property
    def support_exceeds_measurements(self) -> bool:
        return self.k_sparsity > self.s_channel
