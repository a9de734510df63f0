"""Seeding helpers and the shared training log."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

SEED_ENV_VAR = "SEQDENOISE_SEED"
DEFAULT_SEED = 0


def resolve_seed(seed: int | None) -> int:
    """Explicit seed, else the SEQDENOISE_SEED env var, else 0."""
    if seed is not None:
        return int(seed)
    env = os.environ.get(SEED_ENV_VAR)
    return int(env) if env else DEFAULT_SEED


def child_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent deterministic stream for a (seed, component-key) pair."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


@dataclass
class EpochStats:
    epoch: int
    objective: float
    dev_f1: float | None
    seconds: float


@dataclass
class TrainingLog:
    entries: list[EpochStats] = field(default_factory=list)
    selected_epoch: int | None = None
    notes: list[str] = field(default_factory=list)

    def add(self, stats: EpochStats) -> None:
        self.entries.append(stats)

    def objective_trace(self) -> list[float]:
        return [e.objective for e in self.entries]

    def dev_trace(self) -> list[float]:
        return [e.dev_f1 for e in self.entries if e.dev_f1 is not None]
