"""Expectation engines: exhaustive enumeration and seeded Monte Carlo.

Every expectation in the package is a weighted sum over a set of rollouts,
each row holding an input ``x``, its generated levels and a weight. The exact
engine enumerates inputs (and, for stochastic generation, every chain with its
probability); the Monte Carlo engine draws rows with equal weight.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .attention_model import WeightMatrix, deterministic_levels, forward_level, sample_levels
from .boolean_task import TaskSpec, all_inputs

DEFAULT_BUDGET = 2 ** 26
CHUNK_ROWS = 8192


class EngineMode(enum.Enum):
    EXACT = "exact"
    MC = "mc"


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class ExpectationEngine:
    mode: EngineMode = EngineMode.EXACT
    sample_count: int = 50_000
    seed: int = 0
    budget_cap: int = DEFAULT_BUDGET

    def __post_init__(self):
        object.__setattr__(self, "mode", EngineMode(self.mode))
        if self.sample_count < 2:
            raise ValueError("sample_count must be at least 2")
        if self.budget_cap < 1:
            raise ValueError("budget_cap must be positive")

    @classmethod
    def exact(cls, budget_cap: int = DEFAULT_BUDGET) -> "ExpectationEngine":
        return cls(EngineMode.EXACT, budget_cap=budget_cap)

    @classmethod
    def mc(cls, sample_count: int = 50_000, seed: int = 0) -> "ExpectationEngine":
        return cls(EngineMode.MC, sample_count=sample_count, seed=seed)

    @property
    def is_exact(self) -> bool:
        return self.mode is EngineMode.EXACT

    def to_json(self) -> dict:
        if self.is_exact:
            return {"mode": "exact", "budget_cap": self.budget_cap}
        return {"mode": "mc", "sample_count": self.sample_count, "seed": self.seed}


def enumeration_cost(task: TaskSpec, stochastic: bool) -> int:
    chains = 2 ** (task.k - 1) if stochastic else 1
    return 2 ** task.d * chains * (task.k - 1)


def check_budget(task: TaskSpec, engine: ExpectationEngine, stochastic: bool) -> None:
    cost = enumeration_cost(task, stochastic)
    if cost > engine.budget_cap:
        raise BudgetExceeded(
            f"exact enumeration needs {cost} evaluations (cap {engine.budget_cap}); use the MC engine"
        )


@dataclass(frozen=True, eq=False)
class Rollouts:
    """Weighted rows: ``x`` (n, d), ``levels[t - 1]`` (n, d_t), ``weights`` (n,).

    ``qhat`` holds the generation-time scores for deterministic rollouts.
    """

    x: np.ndarray
    levels: tuple[np.ndarray, ...]
    weights: np.ndarray
    exact: bool
    qhat: tuple[np.ndarray, ...] | None = field(default=None)

    def level(self, t: int) -> np.ndarray:
        return self.x if t == 0 else self.levels[t - 1]

    def __len__(self) -> int:
        return len(self.weights)


def mc_inputs(task: TaskSpec, engine: ExpectationEngine) -> np.ndarray:
    rng = np.random.default_rng([engine.seed, 0])
    return np.where(rng.random((engine.sample_count, task.d)) < 0.5, 1, -1).astype(np.int8)


def enumerate_chains(task: TaskSpec, W: WeightMatrix, X: np.ndarray, base_weight: float, upto: int | None = None):
    """Every chain for every row of ``X``, weighted by its probability.

    Rows are x-major: the chains of input ``i`` are contiguous.
    """
    upto = task.depth if upto is None else upto
    X = np.asarray(X, dtype=np.int8)
    weights = np.full(len(X), base_weight)
    cols = [X]
    for t in range(1, upto + 1):
        _, probs = forward_level(task, W, cols[-1], t)
        patterns = all_inputs(task.width(t))
        n, r = len(weights), len(patterns)
        pick = np.where(patterns[None, :, :] > 0, probs[:, None, :], 1.0 - probs[:, None, :])
        weights = (weights[:, None] * pick.prod(axis=2)).ravel()
        cols = [np.repeat(c, r, axis=0) for c in cols]
        cols.append(np.tile(patterns, (n, 1)))
    return Rollouts(cols[0], tuple(cols[1:]), weights, exact=True)


def rollouts(task: TaskSpec, W: WeightMatrix, engine: ExpectationEngine, stochastic: bool = True, step: int = 0) -> Rollouts:
    """Rows for expectations under the policy (stochastic) or sign generation."""
    if engine.is_exact:
        check_budget(task, engine, stochastic)
        X = all_inputs(task.d)
        if stochastic:
            return enumerate_chains(task, W, X, 2.0 ** -task.d)
        levels, qhat = deterministic_levels(task, W, X)
        return Rollouts(X, tuple(levels), np.full(len(X), 2.0 ** -task.d), True, tuple(qhat))
    X = mc_inputs(task, engine)
    weights = np.full(len(X), 1.0 / len(X))
    if stochastic:
        rng = np.random.default_rng([engine.seed, 1, step])
        return Rollouts(X, tuple(sample_levels(task, W, X, rng)), weights, False)
    levels, qhat = deterministic_levels(task, W, X)
    return Rollouts(X, tuple(levels), weights, False, tuple(qhat))


def weighted_mean(values, ro: Rollouts) -> tuple[np.ndarray | float, np.ndarray | float]:
    """Weighted mean over rows and its standard error (0 for exact rollouts)."""
    values = np.asarray(values, dtype=float)
    w = ro.weights.reshape((-1,) + (1,) * (values.ndim - 1))
    mean = (w * values).sum(axis=0)
    if ro.exact:
        se = np.zeros_like(mean)
    else:
        n = len(values)
        se = values.std(axis=0, ddof=1) / np.sqrt(n)
    if np.ndim(mean) == 0:
        return float(mean), float(se)
    return mean, se


def exact_expectation(task: TaskSpec, W: WeightMatrix, f, engine: ExpectationEngine | None = None, stochastic: bool = True) -> float:
    """Exact expectation of ``f(rollouts) -> per-row values`` by enumeration."""
    engine = engine or ExpectationEngine.exact()
    if not engine.is_exact:
        raise ValueError("exact_expectation needs an EXACT engine")
    ro = rollouts(task, W, engine, stochastic)
    mean, _ = weighted_mean(f(ro), ro)
    return mean


def mc_expectation(task: TaskSpec, W: WeightMatrix, f, engine: ExpectationEngine, stochastic: bool = True, step: int = 0):
    if engine.is_exact:
        raise ValueError("mc_expectation needs an MC engine")
    ro = rollouts(task, W, engine, stochastic, step)
    return weighted_mean(f(ro), ro)


def expectation(task: TaskSpec, W: WeightMatrix, f, engine: ExpectationEngine, stochastic: bool = True, step: int = 0):
    """Dispatch on the engine mode; always returns ``(mean, standard_error)``."""
    ro = rollouts(task, W, engine, stochastic, step)
    return weighted_mean(f(ro), ro)
