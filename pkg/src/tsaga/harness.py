"""Experiment orchestration: the federated round loop, recovery variants, metrics and outputs."""
from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import yaml
from scipy.special import log_softmax

from .channel import MacObservation, rescale, transmit
from .core import ChainParams, RoundConfig, SeededRng, spawn_stream
from .datasets import load_idx_dataset, partition, resolve_data_path, synthetic_classification, shard_manifest, subset
from .edge import (
    DatasetShard,
    DeviceState,
    ModelState,
    Objective,
    SoftmaxRegression,
    accumulate_and_sparsify,
    local_update,
    power_scaling,
)
from .em import RoundEvidence, WindowArchive, em_update, initial_params, posterior_moments, schedule
from .sensing import operator_for_round
from .turbo import ForwardState, PriorMessage, RecoveryResult, next_prior, propagate, run_round

VARIANTS = ("tsa-ga", "no-support", "no-amplitude", "memoryless", "error-free")


class DivergenceError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    """Flat experiment description; every field can appear in a config file."""

    seed: int = 0
    t_rounds: int = 100
    n_devices: int = 25
    k_m: int = 1000
    eta: float = 0.01
    e_local: int = 1
    s_frac: float = 0.1
    k_frac: float = 0.2
    p_bar: float = 500.0
    sigma_e: float = 1.0
    i_max: int = 25
    tol: float = 1e-4
    damping: float = 1.0
    variant: str = "tsa-ga"
    em: bool = True
    em_warmup: int = 10
    t0_window: int = 5
    epsilon: float = 1e-7
    lam0: float | None = None
    p01_0: float = 0.005
    beta0: float = 0.005
    # data
    dataset: str = "synthetic"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    n_features: int = 784
    n_test: int = 2000
    separation: float = 1.0
    noise: float = 1.0
    dead_fraction: float = 0.2
    offset: float = 0.0
    spectrum: float = 30.0
    chi: int | None = None
    # outputs
    out_dir: str | None = None
    metric_every: int = 1
    trace_iterations: bool = False
    # state-evolution analysis
    se_n: int = 16384
    se_sigma2: float = 1e-2
    se_lam: float = 0.1
    se_gamma: float = 1.0
    se_p01: float = 0.05
    se_beta: float = 0.1
    se_rounds: int = 5
    se_population: int = 100_000
    # loss-bound verification
    bound_dim: int = 512
    bound_devices: int = 5
    bound_c: float = 1.0
    bound_l: float = 10.0
    bound_seeds: int = 10

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.dataset not in ("synthetic", "idx"):
            raise ValueError("dataset must be 'synthetic' or 'idx'")
        if self.dataset == "idx":
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(self, name):
                    raise ValueError(f"idx dataset needs {name}")
        if not (0 < self.s_frac <= 1 and 0 < self.k_frac <= 1):
            raise ValueError("s_frac and k_frac must lie in (0, 1]")
        if self.metric_every < 1:
            raise ValueError("metric_every must be >= 1")

    def round_config(self, n_model: int) -> RoundConfig:
        return RoundConfig(
            n_model=n_model,
            s_channel=max(1, int(round(self.s_frac * n_model))),
            k_sparsity=max(1, int(round(self.k_frac * n_model))),
            p_bar=self.p_bar,
            sigma_e=self.sigma_e,
            eta=self.eta,
            e_local=self.e_local,
            i_max=self.i_max,
            t_rounds=self.t_rounds,
            t0_window=self.t0_window,
            seed=self.seed,
        )

    def with_(self, **kw) -> "ExperimentConfig":
        d = asdict(self)
        d.update(kw)
        return ExperimentConfig(**d)


def load_config(path: str | os.PathLike, **overrides) -> ExperimentConfig:
    """Read a flat YAML or JSON document; None-valued overrides are ignored."""
    p = Path(path)
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except OSError as exc:
        raise OSError(f"cannot read config {p}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValueError(f"{p}: config must be a flat key-value mapping")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"{p}: unknown keys {sorted(unknown)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    cfg = ExperimentConfig(**raw)
    if cfg.dataset == "idx":
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            path = resolve_data_path(getattr(cfg, name))
            if not path.is_file():
                raise FileNotFoundError(f"{p}: {name} not found at {path}")
    return cfg


@dataclass
class RoundLog:
    round: int
    accuracy: float
    test_loss: float
    train_loss: float
    nmse: float
    v_final: float
    iterations: int
    alpha: float
    sigma2: float
    lam: float
    gamma: float
    p01: float
    p10: float
    beta: float
    xi: float
    flags: str = ""
    wall_time: float = 0.0


ROUND_COLUMNS = [f.name for f in fields(RoundLog) if f.name != "wall_time"]
PARAM_COLUMNS = ["round", "lam", "p01", "p10", "beta", "gamma", "xi", "em_flags"]


@dataclass
class RoundOutcome:
    """Everything one round produced, yielded by :func:`iterate_rounds`."""

    t: int
    theta_before: np.ndarray
    theta: np.ndarray
    x_true: np.ndarray
    x_hat: np.ndarray
    result: RecoveryResult | None
    obs: MacObservation | None
    alpha: float
    params: ChainParams | None
    em_flags: list = field(default_factory=list)


def recovery_variant(
    variant: str, state: ForwardState | None, params: ChainParams, t: int, n: int
) -> PriorMessage:
    """The prior a variant feeds to the turbo round."""
    if variant not in VARIANTS or variant == "error-free":
        raise ValueError(f"no recovery prior for variant {variant!r}")
    full = next_prior(state, params, t, n)
    if variant == "tsa-ga" or t == 0:
        return full
    pi = full.pi
    mean, var = full.mean, full.var
    if variant in ("no-support", "memoryless"):
        pi = np.full(n, params.lam)
    if variant in ("no-amplitude", "memoryless"):
        mean, var = np.zeros(n), np.full(n, params.gamma)
    return PriorMessage(pi, mean, var)


def iterate_rounds(
    objective: Objective,
    shards: Sequence,
    theta0: np.ndarray,
    rc: RoundConfig,
    variant: str = "tsa-ga",
    em: bool = True,
    em_warmup: int = 10,
    tol: float = 1e-4,
    damping: float = 1.0,
    epsilon: float = 1e-7,
    lam0: float | None = None,
    p01_0: float = 0.005,
    beta0: float = 0.005,
    keep_truth: bool = True,
) -> Iterator[RoundOutcome]:
    """Run the federated loop one round at a time."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    n, s, k = rc.n_model, rc.s_channel, rc.k_sparsity
    root = SeededRng(rc.seed)
    counts = np.array([sh.k_m for sh in shards])
    devices = [DeviceState.fresh(sh, n, m) for m, sh in enumerate(shards)]
    model = ModelState(np.array(theta0, dtype=float), 0)
    params = None
    state = None
    archive = WindowArchive(rc.t0_window)
    lam0 = k / n if lam0 is None else lam0

    for t in range(rc.t_rounds):
        g_sp = []
        for dev in devices:
            g = local_update(dev, model, rc.eta, rc.e_local, objective)
            g_sp.append(accumulate_and_sparsify(dev, g, k))
        x_true = np.average(g_sp, axis=0, weights=counts)
        result = obs = None
        alpha = 1.0
        em_flags: list = []
        if variant == "error-free":
            x_hat = x_true
        else:
            op = operator_for_round(rc.seed, t, n, s)
            compressed = [op.forward(g) for g in g_sp]
            scaling = power_scaling(compressed, rc.p_bar, counts)
            alpha = scaling.alpha
            sent = [scaling.amplitude(m) * c for m, c in enumerate(compressed)]
            y_raw = transmit(sent, rc.sigma_e, spawn_stream(root, f"channel-{t}"))
            obs = rescale(y_raw, scaling, rc.sigma_e, counts, round=t)
            if params is None:
                params = initial_params(obs.y, n, obs.sigma2, lam0, p01_0, beta0, epsilon)
            prior = recovery_variant(variant, state, params, t, n)
            result = run_round(
                obs, op, prior, rc.i_max, tol, x_true if keep_truth else None, damping
            )
            x_hat = result.x_hat
            state = propagate(result.ext_final, prior, params)
            archive.push(RoundEvidence(state.lambda_delta, state.mu_bar, state.v_bar, prior))
            if em and schedule(t + 1, rc.t0_window, em_warmup) and len(archive) >= 2:
                params = em_update(posterior_moments(archive, params), params, em_flags)
        theta_before = model.theta
        theta = theta_before + x_hat
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"non-finite model parameters after round {t}")
        model = ModelState(theta, t + 1)
        yield RoundOutcome(t, theta_before, theta, x_true, x_hat, result, obs, alpha, params, em_flags)


@dataclass
class TrackStep:
    round: int
    nmse: float
    iterations: int
    params: ChainParams


def track_chain(
    truth: ChainParams,
    rounds: int,
    n: int,
    s: int,
    sigma2: float,
    seed: int,
    variant: str = "tsa-ga",
    em: bool = True,
    em_warmup: int = 10,
    t0_window: int = 5,
    lam0: float = 0.1,
    p01_0: float = 0.005,
    beta0: float = 0.005,
    i_max: int = 25,
    tol: float = 1e-4,
) -> list[TrackStep]:
    """Recover a signal drawn from the Markov prior ``truth`` over successive rounds.

    Observations are y = A x + N(0, sigma2) with a fresh operator per round;
    no learning loop is involved.
    """
    from .se import simulate_chain

    if variant == "error-free":
        raise ValueError("tracking needs a recovery variant")
    root = SeededRng(seed)
    sup, amp = simulate_chain(truth, rounds, n, spawn_stream(root, "signal"))
    params = None
    state = None
    archive = WindowArchive(t0_window)
    steps = []
    for t in range(rounds):
        x = sup[t] * amp[t]
        op = operator_for_round(seed, t, n, s)
        noise = spawn_stream(root, f"channel-{t}").generator().standard_normal(s)
        obs = MacObservation(op.forward(x) + np.sqrt(sigma2) * noise, sigma2, t)
        if params is None:
            params = initial_params(obs.y, n, sigma2, lam0, p01_0, beta0, truth.epsilon)
        prior = recovery_variant(variant, state, params, t, n)
        res = run_round(obs, op, prior, i_max, tol)
        state = propagate(res.ext_final, prior, params)
        archive.push(RoundEvidence(state.lambda_delta, state.mu_bar, state.v_bar, prior))
        if em and schedule(t + 1, t0_window, em_warmup) and len(archive) >= 2:
            params = em_update(posterior_moments(archive, params), params)
        ref = float(np.sum(x**2))
        err = float(np.sum((res.x_hat - x) ** 2))
        steps.append(TrackStep(t + 1, err / ref if ref > 0 else err, res.iterations_run, params))
    return steps


def evaluate(objective: SoftmaxRegression, model: ModelState, test: DatasetShard) -> tuple[float, float]:
    """Test accuracy (argmax class) and mean cross-entropy."""
    if test.k_m == 0:
        raise ValueError("empty test set")
    logits = objective.logits(model.theta, test.features)
    acc = float(np.mean(np.argmax(logits, axis=1) == test.labels))
    loss = float(-log_softmax(logits, axis=1)[np.arange(test.k_m), test.labels].mean())
    return acc, loss


def build_task(cfg: ExperimentConfig):
    """Return (objective, shards, test set) for a config."""
    root = SeededRng(cfg.seed)
    if cfg.dataset == "idx":
        train = load_idx_dataset(cfg.train_images, cfg.train_labels)
        test = load_idx_dataset(cfg.test_images, cfg.test_labels)
    else:
        total = cfg.n_devices * cfg.k_m + cfg.n_test
        data = synthetic_classification(
            total,
            cfg.n_features,
            spawn_stream(root, "data"),
            separation=cfg.separation,
            dead_fraction=cfg.dead_fraction,
            noise=cfg.noise,
            offset=cfg.offset,
            spectrum=cfg.spectrum,
        )
        cut = cfg.n_devices * cfg.k_m
        train, test = subset(data, np.arange(cut)), subset(data, np.arange(cut, total))
    shards = partition(train, cfg.n_devices, cfg.k_m, cfg.chi, spawn_stream(root, "partition"))
    objective = SoftmaxRegression(train.features.shape[1], train.n_classes)
    return objective, shards, test


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    logs: list
    model: ModelState
    shards: list
    iteration_rows: list = field(default_factory=list)
    timings: list = field(default_factory=list)

    @property
    def diverged_rounds(self) -> list:
        return [lg.round for lg in self.logs if "diverged" in lg.flags]


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    objective, shards, test = build_task(cfg)
    rc = cfg.round_config(objective.dim)
    counts = np.array([sh.k_m for sh in shards], dtype=float)
    logs, rows, timings = [], [], []
    model = ModelState(np.zeros(objective.dim), 0)
    start = time.perf_counter()
    rounds = iterate_rounds(
        objective,
        shards,
        model.theta,
        rc,
        variant=cfg.variant,
        em=cfg.em,
        em_warmup=cfg.em_warmup,
        tol=cfg.tol,
        damping=cfg.damping,
        epsilon=cfg.epsilon,
        lam0=cfg.lam0,
        p01_0=cfg.p01_0,
        beta0=cfg.beta0,
    )
    for out in rounds:
        model = ModelState(out.theta, out.t + 1)
        last = out.t == rc.t_rounds - 1
        if (out.t + 1) % cfg.metric_every == 0 or last:
            acc, test_loss = evaluate(objective, model, test)
            train_loss = float(
                np.average([objective.loss(model.theta, sh) for sh in shards], weights=counts)
            )
        else:
            acc = test_loss = train_loss = float("nan")
        res, p = out.result, out.params
        err = float(np.sum((out.x_hat - out.x_true) ** 2))
        ref = float(np.sum(out.x_true**2))
        flags = list(res.flags) if res else []
        flags += out.em_flags
        wall = time.perf_counter() - start
        logs.append(
            RoundLog(
                round=out.t + 1,
                accuracy=acc,
                test_loss=test_loss,
                train_loss=train_loss,
                nmse=err / ref if ref > 0 else 0.0,
                v_final=res.v_post if res else 0.0,
                iterations=res.iterations_run if res else 0,
                alpha=out.alpha,
                sigma2=out.obs.sigma2 if out.obs else 0.0,
                lam=p.lam if p else float("nan"),
                gamma=p.gamma if p else float("nan"),
                p01=p.p01 if p else float("nan"),
                p10=p.p10 if p else float("nan"),
                beta=p.beta if p else float("nan"),
                xi=p.xi if p else float("nan"),
                flags=";".join(sorted(set(f.split("@")[0] for f in flags))),
                wall_time=wall,
            )
        )
        timings.append((out.t + 1, wall))
        if cfg.trace_iterations and res is not None:
            for i, tau in enumerate(res.tau_trace):
                rows.append(
                    (
                        out.t + 1,
                        i + 1,
                        res.v_trace[i + 1],
                        tau,
                        res.v_emp[i + 1] / (ref / objective.dim) if res.v_emp and ref > 0 else float("nan"),
                    )
                )
    return ExperimentResult(cfg, logs, model, shards, rows, timings)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _write_csv(path: Path, header: list, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def emit_outputs(result: ExperimentResult | list, out_dir: str | os.PathLike) -> dict:
    """Write rounds.csv, params.csv, config.json, shards.json and timings.csv.

    rounds.csv excludes wall time so that reruns are byte-identical; timings
    live in their own file.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    logs = result.logs if isinstance(result, ExperimentResult) else list(result)
    paths = {"rounds": out / "rounds.csv", "params": out / "params.csv"}
    _write_csv(paths["rounds"], ROUND_COLUMNS, ([getattr(lg, c) for c in ROUND_COLUMNS] for lg in logs))
    _write_csv(
        paths["params"],
        PARAM_COLUMNS,
        (
            [lg.round, lg.lam, lg.p01, lg.p10, lg.beta, lg.gamma, lg.xi,
             ";".join(f for f in lg.flags.split(";") if f in ("p01-kept", "gamma-kept", "beta-clamped"))]
            for lg in logs
        ),
    )
    if isinstance(result, ExperimentResult):
        paths["config"] = out / "config.json"
        paths["shards"] = out / "shards.json"
        paths["timings"] = out / "timings.csv"
        try:
            paths["config"].write_text(json.dumps(asdict(result.config), indent=1, sort_keys=True) + "\n")
            paths["shards"].write_text(json.dumps(shard_manifest(result.shards), indent=1) + "\n")
        except OSError as exc:
            raise OSError(f"cannot write outputs in {out}: {exc}") from exc
        _write_csv(paths["timings"], ["round", "wall_time"], result.timings)
        if result.config.trace_iterations:
            paths["iterations"] = out / "iterations.csv"
            _write_csv(paths["iterations"], ["round", "iteration", "v", "tau", "nmse_emp"], result.iteration_rows)
    return paths
