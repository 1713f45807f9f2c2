"""Seeded partial-DCT compression operator with fast forward/adjoint.

The operator is ``A = R F D``: ``D`` flips signs pseudo-randomly, ``F`` is the
orthonormal type-II DCT and ``R`` keeps ``s`` of its ``N`` rows, so that
``A A^T = I_s``. Applications cost O(N log N).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft

from .core import SeededRng, stable_hash64


@dataclass(frozen=True, eq=False)
class SensingOperator:
    n: int
    s: int
    row_subset: np.ndarray
    signs: np.ndarray
    round_seed: int = 0

    def forward(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return adjoint(self, y)

    def matrix(self) -> np.ndarray:
        """Materialise A as a dense (s, N) array. Meant for small N only."""
        return np.stack([self.forward(e) for e in np.eye(self.n)], axis=1)


def operator_seed(seed: int, t: int) -> int:
    """Seed of the round-``t`` operator; any party knowing ``seed`` derives the same A."""
    return stable_hash64(seed, "op", t)


def build_operator(n: int, s: int, rng: SeededRng) -> SensingOperator:
    if not 0 < s <= n:
        raise ValueError(f"need 0 < s <= n, got s={s}, n={n}")
    g = rng.generator()
    rows = np.sort(g.choice(n, size=s, replace=False))
    signs = np.where(g.random(n) < 0.5, -1.0, 1.0)
    rows.setflags(write=False)
    signs.setflags(write=False)
    return SensingOperator(n=n, s=s, row_subset=rows, signs=signs, round_seed=rng.seed)


def operator_for_round(seed: int, t: int, n: int, s: int) -> SensingOperator:
    return build_operator(n, s, SeededRng(operator_seed(seed, t)))


def forward(op: SensingOperator, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (op.n,):
        raise ValueError(f"expected length {op.n}, got shape {x.shape}")
    return fft.dct(op.signs * x, type=2, norm="ortho")[op.row_subset]


def adjoint(op: SensingOperator, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != (op.s,):
        raise ValueError(f"expected length {op.s}, got shape {y.shape}")
    full = np.zeros(op.n)
    full[op.row_subset] = y
    return op.signs * fft.idct(full, type=2, norm="ortho")
