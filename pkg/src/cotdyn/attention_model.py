"""One-layer masked attention over the chain, plus both generation modes."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .boolean_task import Chain, TaskSpec, psi


def _frozen(arr) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Unmasked attention logits.

    ``blocks[t - 1]`` has shape ``(d_t, d_{t-1})``: row ``l`` is the column of
    the full matrix that generates token ``l`` of level ``t``, restricted to the
    ``d_{t-1}`` positions of level ``t - 1`` it may attend to. Every other entry
    of the full matrix is masked and simply not stored.
    """

    task: TaskSpec
    blocks: tuple[np.ndarray, ...]

    def __post_init__(self):
        blocks = tuple(_frozen(b) for b in self.blocks)
        if len(blocks) != self.task.depth:
            raise ValueError("one weight block per generated level is required")
        for t, b in enumerate(blocks, start=1):
            want = (self.task.width(t), self.task.width(t - 1))
            if b.shape != want:
                raise ValueError(f"level {t} block has shape {b.shape}, expected {want}")
            if not np.all(np.isfinite(b)):
                raise ValueError(f"level {t} block has non-finite entries")
        object.__setattr__(self, "blocks", blocks)

    def block(self, t: int) -> np.ndarray:
        return self.blocks[t - 1]

    def scores(self, t: int) -> np.ndarray:
        b = self.blocks[t - 1]
        e = np.exp(b - b.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def all_scores(self) -> tuple[np.ndarray, ...]:
        return tuple(self.scores(t) for t in range(1, self.task.depth + 1))

    def updated(self, deltas) -> "WeightMatrix":
        return WeightMatrix(self.task, tuple(b + np.asarray(g) for b, g in zip(self.blocks, deltas)))

    def with_entry(self, t: int, l: int, p: int, delta: float) -> "WeightMatrix":
        blocks = [b.copy() for b in self.blocks]
        blocks[t - 1][l, p] += delta
        return WeightMatrix(self.task, tuple(blocks))

    def entries(self):
        """Yield every unmasked entry as ``(t, l, p)``."""
        for t, b in enumerate(self.blocks, start=1):
            for l in range(b.shape[0]):
                for p in range(b.shape[1]):
                    yield t, l, p

    @property
    def entry_count(self) -> int:
        return sum(b.size for b in self.blocks)


@dataclass(frozen=True, eq=False)
class ScoreColumn:
    column: int
    scores: np.ndarray


def init_weights(task: TaskSpec, value: float = 1.0) -> WeightMatrix:
    return WeightMatrix(
        task,
        tuple(np.full((task.width(t), task.width(t - 1)), value) for t in range(1, task.depth + 1)),
    )


def column_index(task: TaskSpec, t: int, l: int) -> int:
    """Global 0-based position of token ``l`` of level ``t`` in z = (x, y)."""
    return task.offsets[t - 1] + l


def column_level(task: TaskSpec, c: int) -> tuple[int, int]:
    for t in range(1, task.depth + 1):
        if task.offsets[t - 1] <= c < task.offsets[t]:
            return t, c - task.offsets[t - 1]
    raise ValueError(f"column {c} is not a generated token (x occupies 0..{task.d - 1})")


def attention_scores(W: WeightMatrix, c: int) -> ScoreColumn:
    t, l = column_level(W.task, c)
    return ScoreColumn(c, W.scores(t)[l])


def _xi(scores: np.ndarray, prev) -> np.ndarray:
    xi = np.asarray(prev, dtype=float) @ scores.T
    # scores sum to one, so anything past +-1 is rounding
    return np.clip(xi, -1.0, 1.0)


def forward_level(task: TaskSpec, W: WeightMatrix, prev, t: int):
    """Return ``(xi, probs)`` for level ``t``; ``prev`` may carry batch axes."""
    prev = np.asarray(prev)
    if np.any((prev != 1) & (prev != -1)):
        raise ValueError("forward pass needs a fully generated +-1 predecessor level")
    xi = _xi(W.scores(t), prev)
    return xi, psi(task.kind, xi)


def sample_levels(task: TaskSpec, W: WeightMatrix, X, rng: np.random.Generator) -> list[np.ndarray]:
    """Sample every level on-policy for a batch of inputs ``X`` of shape (n, d)."""
    prev = np.asarray(X, dtype=np.int8)
    out = []
    for t in range(1, task.depth + 1):
        _, probs = forward_level(task, W, prev, t)
        prev = np.where(rng.random(probs.shape) < probs, 1, -1).astype(np.int8)
        out.append(prev)
    return out


def deterministic_levels(task: TaskSpec, W: WeightMatrix, X) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Sign-threshold generation for a batch; returns (levels, scores q-hat)."""
    prev = np.asarray(X, dtype=np.int8)
    levels, qhat = [], []
    for t in range(1, task.depth + 1):
        _, probs = forward_level(task, W, prev, t)
        q = 2.0 * probs - 1.0
        prev = np.where(q >= 0, 1, -1).astype(np.int8)
        levels.append(prev)
        qhat.append(q)
    return levels, qhat


def generate_stochastic(task: TaskSpec, W: WeightMatrix, x, rng_seed: int) -> Chain:
    x = np.asarray(x, dtype=np.int8)
    levels = sample_levels(task, W, x[None, :], np.random.default_rng(rng_seed))
    return Chain(x, tuple(v[0] for v in levels))


def generate_deterministic(task: TaskSpec, W: WeightMatrix, x) -> Chain:
    x = np.asarray(x, dtype=np.int8)
    levels, _ = deterministic_levels(task, W, x[None, :])
    return Chain(x, tuple(v[0] for v in levels))


def optimal_scores(task: TaskSpec) -> tuple[np.ndarray, ...]:
    out = []
    for t in range(1, task.depth + 1):
        s = np.zeros((task.width(t), task.width(t - 1)))
        ch = task.child_array(t)
        rows = np.arange(task.width(t))
        s[rows, ch[:, 0]] = 0.5
        s[rows, ch[:, 1]] = 0.5
        out.append(s)
    return tuple(out)


def optimal_weights(task: TaskSpec, gap: float = 60.0) -> WeightMatrix:
    """Finite logits whose softmax is within ~e^-gap of the optimal scores."""
    return WeightMatrix(task, tuple(np.where(s > 0, gap, 0.0) for s in optimal_scores(task)))


def uniform_scores(task: TaskSpec) -> tuple[np.ndarray, ...]:
    return init_weights(task).all_scores()


def softmax_distance(W: WeightMatrix, ref) -> float:
    """Largest column-wise L1 distance between ``softmax(W)`` and ``ref``."""
    if len(ref) != W.task.depth:
        raise ValueError("reference does not match the task's level structure")
    worst = 0.0
    for t, r in enumerate(ref, start=1):
        r = np.asarray(r, dtype=float)
        s = W.scores(t)
        if r.shape != s.shape:
            raise ValueError(f"reference level {t} has shape {r.shape}, expected {s.shape}")
        worst = max(worst, float(np.abs(s - r).sum(axis=1).max()))
    return worst


def long_csv(task: TaskSpec, blocks, kind: str) -> str:
    """Long-format CSV: a JSON header line then rows ``t,l,p,value``."""
    buf = io.StringIO()
    header = {"d": task.d, "k": task.k, "kind": task.kind.value, "seed": task.seed, "content": kind}
    buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "l", "p", "value"])
    for t, b in enumerate(blocks, start=1):
        for l in range(b.shape[0]):
            for p in range(b.shape[1]):
                w.writerow([t, l, p, repr(float(b[l, p]))])
    return buf.getvalue()


def weights_csv(W: WeightMatrix) -> str:
    return long_csv(W.task, W.blocks, "weights")


def scores_csv(W: WeightMatrix) -> str:
    return long_csv(W.task, W.all_scores(), "scores")


def read_long_csv(text: str) -> tuple[dict, list[np.ndarray]]:
    lines = text.splitlines()
    header = json.loads(lines[0][2:])
    rows = list(csv.DictReader(lines[1:]))
    depth = max(int(r["t"]) for r in rows)
    shapes = {}
    for r in rows:
        t, l, p = int(r["t"]), int(r["l"]), int(r["p"])
        a, b = shapes.get(t, (0, 0))
        shapes[t] = (max(a, l + 1), max(b, p + 1))
    blocks = [np.zeros(shapes[t]) for t in range(1, depth + 1)]
    for r in rows:
        blocks[int(r["t"]) - 1][int(r["l"]), int(r["p"])] = float(r["value"])
    return header, blocks
