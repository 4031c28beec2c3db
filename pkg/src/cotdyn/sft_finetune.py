"""Supervised fine-tuning on self-generated chains (no teacher forcing)."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .attention_model import WeightMatrix, forward_level, init_weights, optimal_scores, softmax_distance
from .boolean_task import TaskSpec, ground_truth_levels, psi_prime
from .engine import ExpectationEngine, Rollouts, rollouts, weighted_mean
from .rl_finetune import (
    SFT_ZERO_SE,
    GradientField,
    SeparationMargin,
    TraceStep,
    TrainTrace,
    assemble,
    node_labels,
    reduce_block,
    separation_from_rows,
)


def hinge(score, label):
    return np.maximum(0.0, 1.0 - np.asarray(score) * label) if np.ndim(score) else max(0.0, 1.0 - score * label)


def _level_losses(task: TaskSpec, ro: Rollouts, labels) -> np.ndarray:
    """Per-row, per-level hinge losses, shape (n, T)."""
    out = []
    for t in range(1, task.depth + 1):
        margin = 1.0 - ro.qhat[t - 1] * labels[t - 1]
        # q-hat lies in [-1, 1] so the hinge never clips
        assert np.all(margin >= -1e-12), "hinge clipped: generation score outside [-1, 1]"
        out.append(margin.sum(axis=1) / (task.k - 1))
    return np.stack(out, axis=1)


def population_loss(task: TaskSpec, W: WeightMatrix, engine: ExpectationEngine) -> tuple[float, np.ndarray]:
    ro = rollouts(task, W, engine, stochastic=False)
    per_level, _ = weighted_mean(_level_losses(task, ro, ground_truth_levels(task, ro.x)), ro)
    per_level = np.atleast_1d(per_level)
    return float(per_level.sum()), per_level


def block_gradient(task: TaskSpec, W: WeightMatrix, t: int, ro: Rollouts, labels):
    """Loss gradient for level ``t``.

    The forward pass reads the *generated* level t-1 from ``ro``; ``labels``
    (the ground truth for level t) only enter as targets.
    """
    prev = ro.level(t - 1)
    xi, _ = forward_level(task, W, prev, t)
    coef = -2.0 / (task.k - 1) * psi_prime(task.kind, xi) * labels[t - 1]
    return reduce_block(W.scores(t), prev, coef, ro)


def gradient_from_rollouts(task: TaskSpec, W: WeightMatrix, ro: Rollouts, labels=None) -> GradientField:
    labels = ground_truth_levels(task, ro.x) if labels is None else labels
    return assemble(task, [block_gradient(task, W, t, ro, labels) for t in range(1, task.depth + 1)], SFT_ZERO_SE)


def sft_gradient(task: TaskSpec, W: WeightMatrix, engine: ExpectationEngine) -> GradientField:
    """Gradient of the population loss (descent direction is its negative)."""
    return gradient_from_rollouts(task, W, rollouts(task, W, engine, stochastic=False))


@dataclass(frozen=True)
class StepwiseEntry:
    step: int
    nonzero_levels: tuple[int, ...]
    level_losses: tuple[float, ...]
    distance: float

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "nonzero_levels": list(self.nonzero_levels),
            "level_losses": list(self.level_losses),
            "distance_to_optimal": self.distance,
        }


@dataclass(frozen=True)
class StepwiseReport:
    entries: tuple[StepwiseEntry, ...]

    def support(self, s: int) -> tuple[int, ...]:
        return self.entries[s].nonzero_levels

    def is_stepwise(self, depth: int) -> bool:
        """True when iteration s moves exactly level s+1 (nothing after depth)."""
        for e in self.entries:
            want = (e.step + 1,) if e.step < depth else ()
            if e.nonzero_levels != want:
                return False
        return True

    def to_json(self) -> list[dict]:
        return [e.to_json() for e in self.entries]


def sign_descent(task: TaskSpec, W0: WeightMatrix, eta: float, S: int, engine: ExpectationEngine) -> tuple[TrainTrace, StepwiseReport]:
    if eta <= 0 or S < 1:
        raise ValueError("need eta > 0 and S >= 1")
    target = optimal_scores(task)
    W, steps, entries = W0, [], []
    for s in range(S + 1):
        began = time.perf_counter()
        ro = rollouts(task, W, engine, stochastic=False)
        labels = ground_truth_levels(task, ro.x)
        grad = gradient_from_rollouts(task, W, ro, labels)
        per_level, per_level_se = weighted_mean(_level_losses(task, ro, labels), ro)
        per_level = np.atleast_1d(per_level)
        signs = grad.signs()
        distance = softmax_distance(W, target)
        steps.append(
            TraceStep(s, W, grad, signs, float(per_level.sum()), float(np.sqrt(np.sum(np.square(per_level_se)))), distance, time.perf_counter() - began)
        )
        entries.append(StepwiseEntry(s, grad.nonzero_levels(), tuple(float(v) for v in per_level), distance))
        if s < S:
            W = W.updated([-eta * sg for sg in signs])
    return TrainTrace(task, eta, engine, steps), StepwiseReport(tuple(entries))


def sft_separation_margin(task: TaskSpec, t: int, l: int, engine: ExpectationEngine) -> SeparationMargin:
    """Child-vs-non-child gap of the critical component on ground-truth levels at uniform scores."""
    W = init_weights(task)
    ro = rollouts(task, W, engine, stochastic=False)
    prev = ro.x if t == 1 else ground_truth_levels(task, ro.x)[t - 2]
    xi, _ = forward_level(task, W, prev, t)
    coef = 2.0 / (task.k - 1) * psi_prime(task.kind, xi) * node_labels(task, prev, t)
    return separation_from_rows(task, t, l, prev, coef[:, l], ro.weights)
