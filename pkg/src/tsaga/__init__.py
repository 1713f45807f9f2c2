"""Over-the-air federated edge learning with temporal-structure-assisted turbo recovery.

Modules: core (types, seeded RNG), sensing (partial DCT), edge (devices and
local training), channel (multiple-access channel), turbo (recovery and
forward messages), em (parameter learning), se (state evolution and the loss
bound) and harness (experiments and outputs).
"""
from .core import ChainParams, RoundConfig, SeededRng, spawn_stream
from .harness import ExperimentConfig, RoundLog, emit_outputs, load_config, run_experiment
from .turbo import PriorMessage, RecoveryResult, run_round

__version__ = "0.1.0"

__all__ = [
    "ChainParams",
    "ExperimentConfig",
    "PriorMessage",
    "RecoveryResult",
    "RoundConfig",
    "RoundLog",
    "SeededRng",
    "emit_outputs",
    "load_config",
    "run_experiment",
    "run_round",
    "spawn_stream",
]
