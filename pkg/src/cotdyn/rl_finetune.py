"""RL fine-tuning with immediate rewards and sign policy ascent."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .attention_model import WeightMatrix, forward_level, optimal_scores, softmax_distance
from .boolean_task import FunctionKind, TaskSpec, all_inputs, phi2, psi_prime
from .engine import CHUNK_ROWS, ExpectationEngine, Rollouts, enumerate_chains, rollouts, weighted_mean

# sign() treats an exact-engine entry as zero when it is this small relative
# to the weighted sum of absolute per-row contributions
ZERO_RTOL = 1e-9
# SFT on the MC engine counts |mean| <= 3 standard errors as zero; the RL
# ascent only freezes entries whose estimate is exactly zero
SFT_ZERO_SE = 3.0


@dataclass(frozen=True, eq=False)
class GradientField:
    """One value per unmasked weight entry, laid out like ``WeightMatrix.blocks``."""

    task: TaskSpec
    values: tuple[np.ndarray, ...]
    stderr: tuple[np.ndarray, ...] | None = None
    magnitude: tuple[np.ndarray, ...] | None = None
    zero_se: float = 0.0

    def block(self, t: int) -> np.ndarray:
        return self.values[t - 1]

    def column_sums(self) -> list[np.ndarray]:
        return [v.sum(axis=1) for v in self.values]

    def signs(self) -> tuple[np.ndarray, ...]:
        out = []
        for i, v in enumerate(self.values):
            if self.stderr is not None:
                zero = np.abs(v) <= self.zero_se * self.stderr[i]
            elif self.magnitude is not None:
                zero = np.abs(v) <= ZERO_RTOL * self.magnitude[i]
            else:
                zero = v == 0
            out.append(np.where(zero, 0, np.sign(v)).astype(np.int8))
        return tuple(out)

    def nonzero_levels(self) -> tuple[int, ...]:
        return tuple(t for t, s in enumerate(self.signs(), start=1) if np.any(s != 0))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values])

    def __neg__(self) -> "GradientField":
        return GradientField(self.task, tuple(-v for v in self.values), self.stderr, self.magnitude, self.zero_se)


def block_terms(scores: np.ndarray, prev: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """Per-row ``coef_l * (prev_p - xi_l) * sigma_lp``, shape (n, d_t, d_{t-1}).

    ``prev_p - xi_l`` is formed as ``2 prev_p m_{-prev_p}`` with ``m_+``/``m_-``
    the attention mass on +1/-1 tokens, so agreeing tokens give exactly 0.
    """
    pos = (prev > 0).astype(float)
    m_plus = pos @ scores.T
    m_minus = (1.0 - pos) @ scores.T
    diff = np.where(prev[:, None, :] > 0, 2.0 * m_minus[:, :, None], -2.0 * m_plus[:, :, None])
    return coef[:, :, None] * diff * scores[None, :, :]


def reduce_block(scores, prev, coef, ro: Rollouts):
    """Weighted sum of ``block_terms`` in fixed-order chunks.

    Returns ``(value, stderr, magnitude)``; stderr is None for exact rollouts.
    """
    shape = scores.shape
    total = np.zeros(shape)
    absolute = np.zeros(shape)
    squares = np.zeros(shape)
    n = len(ro)
    for lo in range(0, n, CHUNK_ROWS):
        hi = min(n, lo + CHUNK_ROWS)
        terms = block_terms(scores, prev[lo:hi], coef[lo:hi])
        w = ro.weights[lo:hi, None, None]
        total += (w * terms).sum(axis=0)
        absolute += (w * np.abs(terms)).sum(axis=0)
        if not ro.exact:
            squares += (terms * terms).sum(axis=0)
    if ro.exact:
        return total, None, absolute
    var = np.maximum(squares - n * total * total, 0.0) / (n - 1)
    return total, np.sqrt(var / n), absolute


def assemble(task: TaskSpec, parts, zero_se: float = 0.0) -> GradientField:
    values = tuple(p[0] for p in parts)
    stderr = None if parts[0][1] is None else tuple(p[1] for p in parts)
    return GradientField(task, values, stderr, tuple(p[2] for p in parts), zero_se)


def node_labels(task: TaskSpec, prev: np.ndarray, t: int) -> np.ndarray:
    """phi2 of each node's children in ``prev`` (the label for level ``t``)."""
    ch = task.child_array(t)
    return phi2(task.kind, prev[..., ch[:, 0]].astype(np.int64), prev[..., ch[:, 1]].astype(np.int64))


def step_reward(task: TaskSpec, t: int, prev, cur):
    prev, cur = np.asarray(prev), np.asarray(cur)
    if prev.shape[-1] != task.width(t - 1) or cur.shape[-1] != task.width(t):
        raise ValueError("level sizes do not match the task")
    r = (cur * node_labels(task, prev, t)).sum(axis=-1) / (task.k - 1)
    return float(r) if np.ndim(r) == 0 else r


def per_row_rewards(task: TaskSpec, ro: Rollouts) -> np.ndarray:
    """Rewards r_t per row, shape (n, T)."""
    return np.stack([step_reward(task, t, ro.level(t - 1), ro.level(t)) for t in range(1, task.depth + 1)], axis=1)


def block_rewards(task: TaskSpec, W: WeightMatrix, engine: ExpectationEngine, step: int = 0):
    """``(E[r_t] for t = 1..T, standard errors)``."""
    ro = rollouts(task, W, engine, True, step)
    return weighted_mean(per_row_rewards(task, ro), ro)


def expected_reward(task: TaskSpec, W: WeightMatrix, engine: ExpectationEngine, step: int = 0) -> float:
    ro = rollouts(task, W, engine, True, step)
    mean, _ = weighted_mean(per_row_rewards(task, ro).sum(axis=1), ro)
    return mean


def gamma(task: TaskSpec, W: WeightMatrix, prev, t: int, l: int, j: int) -> float:
    prev = np.asarray(prev)
    xi, _ = forward_level(task, W, prev, t)
    label = node_labels(task, prev, t)[l]
    return float(2.0 / (task.k - 1) * psi_prime(task.kind, xi[l]) * label * prev[j])


def _rl_coef(task: TaskSpec, W: WeightMatrix, prev: np.ndarray, t: int) -> np.ndarray:
    xi, _ = forward_level(task, W, prev, t)
    return 2.0 / (task.k - 1) * psi_prime(task.kind, xi) * node_labels(task, prev, t)


def gradient_from_rollouts(task: TaskSpec, W: WeightMatrix, ro: Rollouts) -> GradientField:
    parts = []
    for t in range(1, task.depth + 1):
        prev = ro.level(t - 1)
        parts.append(reduce_block(W.scores(t), prev, _rl_coef(task, W, prev, t), ro))
    return assemble(task, parts)


def policy_gradient(task: TaskSpec, W: WeightMatrix, engine: ExpectationEngine, step: int = 0) -> GradientField:
    """Immediate-reward policy gradient; block t is d E[r_t] / d W_t."""
    return gradient_from_rollouts(task, W, rollouts(task, W, engine, True, step))


def _score_terms(task: TaskSpec, W: WeightMatrix, ro: Rollouts, t: int, strict: bool = False):
    """Per-row gradient of ln p(y^(t) | y^(t-1)), shape (n, d_t, d_{t-1})."""
    prev, cur = ro.level(t - 1), ro.level(t)
    xi, probs = forward_level(task, W, prev, t)
    p_token = np.where(cur > 0, probs, 1.0 - probs)
    impossible = p_token <= 0.0
    if strict and np.any(impossible):
        row, l = np.argwhere(impossible)[0]
        raise ValueError(f"token {l} of level {t} has zero probability under W")
    ratio = np.where(impossible, 0.0, cur * psi_prime(task.kind, xi) / np.where(impossible, 1.0, p_token))
    return block_terms(W.scores(t), prev, ratio)


def logprob_gradient(task: TaskSpec, W: WeightMatrix, x, chain) -> GradientField:
    x = np.asarray(x)
    if not chain.complete:
        raise ValueError("logprob_gradient needs a complete chain")
    ro = Rollouts(x[None, :], tuple(v[None, :] for v in chain.levels), np.ones(1), True)
    return GradientField(task, tuple(_score_terms(task, W, ro, t, strict=True)[0] for t in range(1, task.depth + 1)))


def _weighted_score_gradient(task, W, ro: Rollouts, returns_for_level) -> GradientField:
    values = []
    for t in range(1, task.depth + 1):
        g = _score_terms(task, W, ro, t)
        values.append(np.einsum("n,nlp->lp", ro.weights * returns_for_level(t), g))
    return GradientField(task, tuple(values))


def reward_to_go_gradient(task: TaskSpec, W: WeightMatrix, engine: ExpectationEngine | None = None) -> GradientField:
    """Score-function gradient weighted by future rewards; equals d E[sum r] / dW."""
    ro = rollouts(task, W, engine or ExpectationEngine.exact(), True)
    to_go = np.cumsum(per_row_rewards(task, ro)[:, ::-1], axis=1)[:, ::-1]
    return _weighted_score_gradient(task, W, ro, lambda t: to_go[:, t - 1])


def full_return_gradient(task: TaskSpec, W: WeightMatrix, engine: ExpectationEngine | None = None) -> GradientField:
    ro = rollouts(task, W, engine or ExpectationEngine.exact(), True)
    total = per_row_rewards(task, ro).sum(axis=1)
    return _weighted_score_gradient(task, W, ro, lambda t: total)


def immediate_score_gradient(task: TaskSpec, W: WeightMatrix, engine: ExpectationEngine | None = None) -> GradientField:
    """Score-function gradient with each block weighted by its own reward only."""
    ro = rollouts(task, W, engine or ExpectationEngine.exact(), True)
    rewards = per_row_rewards(task, ro)
    return _weighted_score_gradient(task, W, ro, lambda t: rewards[:, t - 1])


@dataclass(eq=False)
class TraceStep:
    step: int
    weights: WeightMatrix
    gradient: GradientField
    signs: tuple[np.ndarray, ...]
    reward: float
    reward_se: float
    distance: float
    wall_clock: float = field(default=0.0, compare=False)

    def summary(self) -> dict:
        return {
            "step": self.step,
            "expected_reward": self.reward,
            "reward_standard_error": self.reward_se,
            "distance_to_optimal": self.distance,
            "nonzero_levels": [t for t, s in enumerate(self.signs, start=1) if np.any(s != 0)],
        }


@dataclass(eq=False)
class TrainTrace:
    task: TaskSpec
    eta: float
    engine: ExpectationEngine
    steps: list[TraceStep]

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def final(self) -> WeightMatrix:
        return self.steps[-1].weights


def sign_ascent(task: TaskSpec, W0: WeightMatrix, eta: float, S: int, engine: ExpectationEngine) -> TrainTrace:
    if eta <= 0 or S < 1:
        raise ValueError("need eta > 0 and S >= 1")
    target = optimal_scores(task)
    W, steps = W0, []
    for s in range(S + 1):
        began = time.perf_counter()
        ro = rollouts(task, W, engine, True, s)
        grad = gradient_from_rollouts(task, W, ro)
        reward, reward_se = weighted_mean(per_row_rewards(task, ro).sum(axis=1), ro)
        signs = grad.signs()
        steps.append(TraceStep(s, W, grad, signs, reward, reward_se, softmax_distance(W, target), time.perf_counter() - began))
        if s < S:
            W = W.updated([eta * sg for sg in signs])
    return TrainTrace(task, eta, engine, steps)


def one_update_eta(d: int, epsilon: float = 0.05) -> float:
    """Step size from the one-update learning bound for accuracy ``epsilon``."""
    return math.log((d - 2) * (2 - epsilon) / (4 * epsilon))


def one_update_distance(d: int, eta: float) -> float:
    return 1.0 / (0.5 + math.exp(2 * eta) / (d - 2))


def parity_closed_form(task: TaskSpec, eta: float, s: int, t: int, relevant: bool) -> float:
    """Attention score after ``s`` sign-ascent steps for parity (level ``t``)."""
    if task.kind is not FunctionKind.PARITY:
        raise ValueError("the closed form holds for parity tasks only")
    width = task.width(t - 1)
    if relevant:
        return 0.5 / (1.0 + (width - 2) / 2.0 * math.exp(-2.0 * eta * s))
    return 1.0 / (width - 2 + 2.0 * math.exp(2.0 * eta * s))


@dataclass(frozen=True)
class SeparationMargin:
    child_value: float
    nonchild_positions: tuple[int, ...]
    nonchild_values: tuple[float, ...]
    margins: tuple[float, ...]

    @property
    def min_margin(self) -> float:
        return min(self.margins) if self.margins else math.inf

    @property
    def satisfied(self) -> bool:
        return self.min_margin > 0


def separation_from_rows(task: TaskSpec, t: int, l: int, prev: np.ndarray, coef_l: np.ndarray, weights: np.ndarray) -> SeparationMargin:
    expected = (weights[:, None] * coef_l[:, None] * prev).sum(axis=0)
    i1, i2 = task.children[t - 1][l]
    others = tuple(p for p in range(task.width(t - 1)) if p not in (i1, i2))
    child = float(expected[i1])
    vals = tuple(float(expected[p]) for p in others)
    return SeparationMargin(child, others, vals, tuple(child - v for v in vals))


def rl_separation_margin(task: TaskSpec, W: WeightMatrix, engine: ExpectationEngine, t: int, l: int) -> SeparationMargin:
    ro = rollouts(task, W, engine, True)
    prev = ro.level(t - 1)
    return separation_from_rows(task, t, l, prev, _rl_coef(task, W, prev, t)[:, l], ro.weights)


def final_output_gradient(task: TaskSpec, W: WeightMatrix, x, engine: ExpectationEngine | None = None) -> GradientField:
    """Gradient of E_y[y^(T) | x] over every chain for a single input."""
    engine = engine or ExpectationEngine.exact()
    if not engine.is_exact:
        raise ValueError("final_output_gradient enumerates chains; use an EXACT engine")
    if 2 ** (task.k - 1) * (task.k - 1) > engine.budget_cap:
        raise ValueError("chain enumeration exceeds the engine budget")
    ro = enumerate_chains(task, W, np.asarray(x, dtype=np.int8)[None, :], 1.0)
    answer = ro.levels[-1][:, 0].astype(float)
    return _weighted_score_gradient(task, W, ro, lambda t: answer)


@dataclass(frozen=True)
class VarianceReport:
    variance: float
    M: float
    bound: float
    statement_bound: float
    family_size: int
    satisfied: bool

    def to_json(self) -> dict:
        return {
            "variance": self.variance,
            "M": self.M,
            "bound": self.bound,
            "statement_bound": self.statement_bound,
            "family_size": self.family_size,
            "satisfied": self.satisfied,
        }


def parity_family(d: int, subsets=None) -> np.ndarray:
    """Columns are h_S(x) for every subset S (or the given bitmasks), rows x."""
    X = all_inputs(d).astype(float)
    masks = np.arange(2 ** d) if subsets is None else np.asarray(subsets)
    bits = ((masks[:, None] >> np.arange(d - 1, -1, -1)) & 1).astype(bool)
    return np.prod(np.where(bits[None, :, :], X[:, None, :], 1.0), axis=2)


def final_reward_variance(task: TaskSpec, W: WeightMatrix, engine: ExpectationEngine | None = None, subsets=None) -> VarianceReport:
    engine = engine or ExpectationEngine.exact()
    if task.d > 10:
        raise ValueError("the parity-family sweep is limited to d <= 10")
    if not engine.is_exact:
        raise ValueError("final_reward_variance is an exact computation")
    ro = enumerate_chains(task, W, all_inputs(task.d), 1.0)
    answer = ro.levels[-1][:, 0].astype(float)
    per_row = np.concatenate(
        [(_score_terms(task, W, ro, t) * (ro.weights * answer)[:, None, None]).reshape(len(ro), -1) for t in range(1, task.depth + 1)],
        axis=1,
    )
    V = per_row.reshape(2 ** task.d, -1, per_row.shape[1]).sum(axis=1)
    H = parity_family(task.d, subsets)
    G = H.T @ V / 2 ** task.d
    variance = float(np.mean(np.sum((G - G.mean(axis=0)) ** 2, axis=1)))
    M = float(np.mean(np.sum(V * V, axis=1)))
    size = H.shape[1]
    return VarianceReport(variance, M, 2 * M / size, M / size, size, variance <= 2 * M / size)
