"""Independent checks: finite differences, pattern-mass statistics and
level-mean recursions, all against exhaustive enumeration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention_model import WeightMatrix, deterministic_levels, forward_level
from .boolean_task import FunctionKind, TaskSpec, all_inputs, ground_truth_levels
from .engine import (  # re-exported: the engines are part of the oracle toolkit
    BudgetExceeded,
    EngineMode,
    ExpectationEngine,
    enumerate_chains,
    exact_expectation,
    expectation,
    mc_expectation,
    rollouts,
    weighted_mean,
)
from .rl_finetune import block_rewards, expected_reward, policy_gradient
from .sft_finetune import population_loss, sft_gradient

__all__ = [
    "AbcdStats",
    "BudgetExceeded",
    "EngineMode",
    "ExpectationEngine",
    "FdReport",
    "LevelMeanStats",
    "abcd",
    "exact_expectation",
    "expectation",
    "fd_check",
    "finite_difference",
    "level_mean_stats",
    "mc_expectation",
]

FD_STEP = 1e-5
FD_TOL = 1e-6


def finite_difference(objective, W: WeightMatrix, entry: tuple[int, int, int], h: float = FD_STEP) -> float:
    if h <= 0:
        raise ValueError("h must be positive")
    t, l, p = entry
    up, down = objective(W.with_entry(t, l, p, h)), objective(W.with_entry(t, l, p, -h))
    value = (up - down) / (2 * h)
    if math.isnan(value):
        raise ValueError(f"objective returned NaN around entry {entry}")
    return value


@dataclass
class FdReport:
    trainer: str
    checked: int = 0
    skipped: list[tuple[int, int, int]] = field(default_factory=list)
    failures: list[tuple[int, int, int]] = field(default_factory=list)
    worst: float = 0.0
    tolerance: float = FD_TOL

    @property
    def total(self) -> int:
        return self.checked + len(self.skipped)

    @property
    def skipped_fraction(self) -> float:
        return len(self.skipped) / self.total if self.total else 0.0

    @property
    def passed(self) -> bool:
        return not self.failures and self.checked > 0 and self.skipped_fraction <= 0.10

    def to_json(self) -> dict:
        return {
            "trainer": self.trainer,
            "checked": self.checked,
            "skipped": [list(e) for e in self.skipped],
            "failures": [list(e) for e in self.failures],
            "worst_deviation": self.worst,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def _reachable_xi(task: TaskSpec, W: WeightMatrix, stochastic: bool):
    """|xi| per level over every row the engine can reach (weight > 0)."""
    engine = ExpectationEngine.exact()
    if stochastic:
        ro = rollouts(task, W, engine, True)
        keep = ro.weights > 0
    else:
        ro = rollouts(task, W, engine, False)
        keep = np.ones(len(ro), dtype=bool)
    return [np.abs(forward_level(task, W, ro.level(t - 1)[keep], t)[0]) for t in range(1, task.depth + 1)]


def fd_check(task: TaskSpec, W: WeightMatrix, trainer: str = "rl", h: float = FD_STEP, tol: float = FD_TOL) -> FdReport:
    """Compare analytical gradients with central differences on every entry.

    RL entries at level t are checked against E[r_t]; SFT entries against the
    population loss. For AND/OR, entries whose column has a reachable
    |xi| <= 10h sit on a kink and are skipped; SFT entries are also skipped
    when a generated token flips inside the stencil.
    """
    engine = ExpectationEngine.exact()
    report = FdReport(trainer, tolerance=tol)
    kinked = task.kind is not FunctionKind.PARITY
    xi_abs = _reachable_xi(task, W, stochastic=(trainer == "rl"))
    if trainer == "rl":
        grad = policy_gradient(task, W, engine)
    elif trainer == "sft":
        grad = sft_gradient(task, W, engine)
        X = all_inputs(task.d)
        base_levels, _ = deterministic_levels(task, W, X)
    else:
        raise ValueError(f"unknown trainer {trainer!r}")
    for t, l, p in W.entries():
        if kinked and np.any(xi_abs[t - 1][:, l] <= 10 * h):
            report.skipped.append((t, l, p))
            continue
        if trainer == "rl":
            objective = lambda M, t=t: float(block_rewards(task, M, engine)[0][t - 1])
        else:
            flipped = False
            for sign in (1, -1):
                moved, _ = deterministic_levels(task, W.with_entry(t, l, p, sign * h), X)
                flipped |= any(not np.array_equal(a, b) for a, b in zip(moved, base_levels))
            if flipped:
                report.skipped.append((t, l, p))
                continue
            objective = lambda M: population_loss(task, M, engine)[0]
        deviation = abs(finite_difference(objective, W, (t, l, p), h) - grad.block(t)[l, p])
        report.checked += 1
        report.worst = max(report.worst, deviation)
        if deviation > tol:
            report.failures.append((t, l, p))
    return report


@dataclass(frozen=True)
class AbcdStats:
    """Masses of the four sign patterns on (child, child, non-child) tokens
    jointly with the activation event, for the AND (above) and OR (below)
    threshold sets."""

    a: float
    b: float
    c: float
    d: float
    a_bar: float
    b_bar: float
    c_bar: float
    d_bar: float
    strict: bool = True

    def terms(self, below: bool = False) -> tuple[float, float, float, float]:
        """Expansion terms (i)-(iv): E[I], E[I y_i1], E[I y_i1 y_i2], E[I y_i1 y_i2 y_p']."""
        a, b, c, d = (self.a_bar, self.b_bar, self.c_bar, self.d_bar) if below else (self.a, self.b, self.c, self.d)
        return a + 3 * b + 3 * c + d, a + b - c - d, a - b - c + d, a - 3 * b + 3 * c - d

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in ("a", "b", "c", "d", "a_bar", "b_bar", "c_bar", "d_bar", "strict")}


def level_distribution(task: TaskSpec, W: WeightMatrix, t: int, source: str = "policy"):
    """Rows and weights of level t-1 tokens under the policy or the ground truth."""
    X = all_inputs(task.d)
    w = np.full(len(X), 2.0 ** -task.d)
    if t == 1:
        return X, w
    if source == "ground_truth":
        return ground_truth_levels(task, X)[t - 2], w
    if source != "policy":
        raise ValueError(f"unknown token source {source!r}")
    ro = enumerate_chains(task, W, X, 2.0 ** -task.d, upto=t - 1)
    return ro.level(t - 1), ro.weights


def abcd(task: TaskSpec, t: int, l: int, p_prime: int, W: WeightMatrix, source: str = "policy", strict: bool = True) -> AbcdStats:
    """Pattern masses for column (t, l) with the non-child position ``p_prime``.

    With the strict activation derivative the AND event is
    ``sum(other tokens) > -sum(A tokens)`` and the OR event ``< -sum(A)``;
    ``strict=False`` gives the non-strict (>=, <=) sets.
    """
    if task.kind is FunctionKind.PARITY:
        raise ValueError("abcd statistics are defined for AND and OR")
    scores = W.scores(t)[l]
    if np.ptp(scores) > 1e-12:
        raise ValueError("abcd needs uniform attention scores on the column")
    i1, i2 = task.children[t - 1][l]
    if p_prime in (i1, i2) or not 0 <= p_prime < task.width(t - 1):
        raise ValueError("p_prime must be a non-child position of the column")
    prev, w = level_distribution(task, W, t, source)
    trio = prev[:, [i1, i2, p_prime]].astype(int)
    s_a = trio.sum(axis=1)
    rest = prev.sum(axis=1).astype(int) - s_a
    above = rest > -s_a if strict else rest >= -s_a
    below = rest < -s_a if strict else rest <= -s_a
    plus = (trio > 0).sum(axis=1)
    out = []
    for event in (above, below):
        # each class has C(3, m) sign patterns, equally likely by exchangeability
        for m, count in ((3, 1), (2, 3), (1, 3), (0, 1)):
            out.append(float(np.sum(w * (event & (plus == m)))) / count)
    return AbcdStats(*out, strict=strict)


@dataclass(frozen=True)
class LevelMeanStats:
    t: int
    c1: float
    c1_previous: float | None
    brute_tokens: tuple[float, ...]
    brute_previous: float
    variants: dict
    tolerance: float = 1e-12

    @property
    def brute(self) -> float:
        return float(np.mean(self.brute_tokens))

    @property
    def equal_means(self) -> bool:
        return float(np.ptp(self.brute_tokens)) <= self.tolerance

    @property
    def deviations(self) -> dict:
        return {k: (None if v is None else abs(v - self.brute)) for k, v in self.variants.items()}

    @property
    def matches(self) -> tuple[str, ...]:
        return tuple(k for k, v in self.deviations.items() if v is not None and v <= self.tolerance)

    @property
    def c2(self) -> float:
        return self.variants["linear_current"]

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "c1": self.c1,
            "c1_previous": self.c1_previous,
            "brute": self.brute,
            "brute_tokens": list(self.brute_tokens),
            "brute_previous": self.brute_previous,
            "variants": self.variants,
            "deviations": self.deviations,
            "matches": list(self.matches),
            "equal_means": self.equal_means,
        }


def _common_c1(W: WeightMatrix, t: int) -> float:
    s = np.sort(W.scores(t), axis=1)
    if np.max(np.ptp(s, axis=0)) > 1e-12:
        raise ValueError(f"columns of level {t} do not share one multiset of scores")
    return float(np.sum(s[0] ** 2))


def level_mean_stats(task: TaskSpec, W: WeightMatrix, t: int) -> LevelMeanStats:
    """Brute-force E[y^(t)_l] beside the one-step recursion candidates.

    Each candidate is evaluated from the brute-force mean of level t-1:
    ``linear_current`` uses the current level's sum of squared scores,
    ``linear_previous`` the previous level's, ``squared_previous`` its square.
    """
    if task.kind is not FunctionKind.PARITY:
        raise ValueError("level_mean_stats is defined for parity tasks")
    c1 = _common_c1(W, t)
    c1_prev = _common_c1(W, t - 1) if t >= 2 else None
    ro = enumerate_chains(task, W, all_inputs(task.d), 2.0 ** -task.d, upto=t)
    means = ro.weights @ ro.level(t).astype(float)
    prev_mean = float(np.mean(ro.weights @ ro.level(t - 1).astype(float)))
    q = prev_mean ** 2

    def step(c):
        return None if c is None else 2 * q + 2 * (1 - q) * c - 1

    variants = {
        "linear_current": step(c1),
        "linear_previous": step(c1_prev),
        "squared_previous": step(None if c1_prev is None else c1_prev ** 2),
    }
    return LevelMeanStats(t, c1, c1_prev, tuple(float(m) for m in means), prev_mean, variants)
