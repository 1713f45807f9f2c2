"""Gaussian multiple-access channel and server-side rescaling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import SeededRng
from .edge import PowerScaling


@dataclass(frozen=True)
class MacObservation:
    y: np.ndarray
    sigma2: float
    round: int = 0


def transmit(signals: Sequence[np.ndarray], sigma_e: float, rng: SeededRng) -> np.ndarray:
    """Superimpose the device signals and add IID N(0, sigma_e^2) noise."""
    if len(signals) == 0:
        raise ValueError("no signals to transmit")
    s = signals[0].shape
    if any(sig.shape != s for sig in signals):
        raise ValueError("all device signals must have the same length")
    total = np.sum(signals, axis=0)
    if sigma_e > 0:
        total = total + sigma_e * rng.generator().standard_normal(s)
    return total


def rescale(
    y_raw: np.ndarray,
    scaling: PowerScaling,
    sigma_e: float,
    counts: Sequence[int],
    round: int = 0,
) -> MacObservation:
    """Normalise the received sum so its noiseless part is A x with x the K_m-weighted mean."""
    counts = np.asarray(counts, dtype=float)
    if scaling.alpha <= 0:
        raise ValueError("alpha must be positive")
    denom = counts.size * np.sum(np.sqrt(scaling.alpha) * counts)
    if denom <= 0:
        raise ValueError("zero rescaling denominator")
    c = counts.sum() / denom
    return MacObservation(y=c * np.asarray(y_raw, dtype=float), sigma2=float((c * sigma_e) ** 2), round=round)
