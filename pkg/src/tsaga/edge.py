"""Device-side processing for one communication round.

Local gradient descent, error accumulation, top-k sparsification,
compression and power scaling.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .sensing import SensingOperator


@dataclass
class DatasetShard:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int = 10

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (K_m, d) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels outside [0, n_classes)")

    @property
    def k_m(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class ModelState:
    theta: np.ndarray
    round: int = 0


@dataclass
class DeviceState:
    shard: DatasetShard
    delta: np.ndarray
    device_id: int = 0

    @classmethod
    def fresh(cls, shard: DatasetShard, n_model: int, device_id: int = 0) -> "DeviceState":
        return cls(shard=shard, delta=np.zeros(n_model), device_id=device_id)


@dataclass
class PowerScaling:
    """Common power coefficient alpha and per-device weights M K_m / K."""

    alpha: float
    weights: np.ndarray = field(default_factory=lambda: np.ones(1))

    def amplitude(self, device_id: int) -> float:
        """The scalar sqrt(alpha) M K_m / K sent noise-free alongside the signal."""
        return float(np.sqrt(self.alpha) * self.weights[device_id])


class Objective(Protocol):
    dim: int

    def loss(self, theta: np.ndarray, shard: DatasetShard) -> float: ...

    def grad(self, theta: np.ndarray, shard: DatasetShard) -> np.ndarray: ...


@dataclass(frozen=True)
class SoftmaxRegression:
    """Single linear layer with bias and softmax cross-entropy.

    ``theta`` packs the (n_classes, n_features) weight matrix row-major,
    followed by the n_classes biases.
    """

    n_features: int
    n_classes: int = 10

    @property
    def dim(self) -> int:
        return self.n_classes * self.n_features + self.n_classes

    def unpack(self, theta: np.ndarray):
        split = self.n_classes * self.n_features
        return theta[:split].reshape(self.n_classes, self.n_features), theta[split:]

    def logits(self, theta: np.ndarray, features: np.ndarray) -> np.ndarray:
        w, b = self.unpack(theta)
        return features @ w.T + b

    def loss(self, theta, shard):
        logp = log_softmax(self.logits(theta, shard.features), axis=1)
        return float(-logp[np.arange(shard.k_m), shard.labels].mean())

    def grad(self, theta, shard):
        p = softmax(self.logits(theta, shard.features), axis=1)
        p[np.arange(shard.k_m), shard.labels] -= 1.0
        p /= shard.k_m
        return np.concatenate([(p.T @ shard.features).ravel(), p.sum(axis=0)])

    def predict(self, theta, features):
        return np.argmax(self.logits(theta, features), axis=1)


def local_update(
    dev: DeviceState, model: ModelState, eta: float, e_local: int, objective: Objective
) -> np.ndarray:
    """Run ``e_local`` full-batch descent steps from the global model; return the model delta."""
    if e_local < 1:
        raise ValueError("e_local must be >= 1")
    if dev.shard.k_m == 0:
        raise ValueError(f"device {dev.device_id} has an empty shard")
    theta = model.theta.copy()
    for _ in range(e_local):
        theta -= eta * objective.grad(theta, dev.shard)
    return theta - model.theta


def top_k(v: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest-magnitude entries; ties go to the lower index."""
    if not 1 <= k <= v.size:
        raise ValueError(f"k={k} outside [1, {v.size}]")
    keep = np.argsort(-np.abs(v), kind="stable")[:k]
    out = np.zeros_like(v)
    out[keep] = v[keep]
    return out


def accumulate_and_sparsify(dev: DeviceState, g: np.ndarray, k: int) -> np.ndarray:
    g_ec = g + dev.delta
    g_sp = top_k(g_ec, k)
    dev.delta = g_ec - g_sp
    return g_sp


def device_weights(counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    return counts.size * counts / counts.sum()


def choose_alpha(
    signals: Sequence[np.ndarray], p_bar: float, counts: Sequence[int] | None = None
) -> float:
    """Largest common alpha keeping every device's round energy within ``p_bar``.

    ``signals`` are the compressed updates A g_sp before scaling.
    """
    if len(signals) == 0:
        raise ValueError("need at least one device signal")
    weights = device_weights(counts if counts is not None else [1] * len(signals))
    energy = np.array([np.dot(s, s) for s in signals]) * weights**2
    active = energy > 0
    if not active.any():
        return 1.0
    return float(np.min(p_bar / energy[active]))


def power_scaling(
    signals: Sequence[np.ndarray], p_bar: float, counts: Sequence[int] | None = None
) -> PowerScaling:
    counts = counts if counts is not None else [1] * len(signals)
    return PowerScaling(alpha=choose_alpha(signals, p_bar, counts), weights=device_weights(counts))


def compress_and_scale(
    g_sp: np.ndarray, op: SensingOperator, scaling: PowerScaling, device_id: int
) -> np.ndarray:
    return scaling.amplitude(device_id) * op.forward(g_sp)
