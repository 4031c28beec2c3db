"""Sparse Boolean tasks and their binary-tree decomposition.

Positions are 0-based throughout the library. Level 0 is the input ``x``;
level ``t`` (1..T) holds the ``k / 2**t`` intermediate tokens of the tree.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class FunctionKind(enum.Enum):
    PARITY = "PARITY"
    AND = "AND"
    OR = "OR"

    @classmethod
    def parse(cls, value: "str | FunctionKind") -> "FunctionKind":
        if isinstance(value, FunctionKind):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ValueError(f"unknown function kind {value!r}") from None


@dataclass(frozen=True)
class TaskSpec:
    kind: FunctionKind
    d: int
    k: int
    seed: int
    relevant: tuple[int, ...]
    # children[t - 1][j] = (i1, i2), positions inside level t - 1
    children: tuple[tuple[tuple[int, int], ...], ...] = field(repr=False)

    @property
    def depth(self) -> int:
        return len(self.children)

    @property
    def level_widths(self) -> tuple[int, ...]:
        return (self.d,) + tuple(self.k >> t for t in range(1, self.depth + 1))

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.cumsum(self.level_widths))

    def width(self, t: int) -> int:
        return self.level_widths[t]

    def child_array(self, t: int) -> np.ndarray:
        """Children of level ``t`` as an int array of shape (d_t, 2)."""
        return np.asarray(self.children[t - 1], dtype=np.intp)

    def columns(self):
        """Yield ``(t, l)`` for every generated token in generation order."""
        for t in range(1, self.depth + 1):
            for l in range(self.width(t)):
                yield t, l

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "d": self.d,
            "k": self.k,
            "seed": self.seed,
            "B": list(self.relevant),
            "children": [[list(pair) for pair in level] for level in self.children],
        }


def build_task(kind: "FunctionKind | str", d: int, k: int, seed: int = 0) -> TaskSpec:
    kind = FunctionKind.parse(kind)
    if k < 2 or k > d or k & (k - 1):
        raise ValueError(f"need k a power of two with 2 <= k <= d, got d={d}, k={k}")
    rng = np.random.default_rng(seed)
    relevant = tuple(sorted(int(i) for i in rng.choice(d, size=k, replace=False)))
    depth = k.bit_length() - 1
    levels = [tuple((relevant[2 * j], relevant[2 * j + 1]) for j in range(k // 2))]
    for t in range(2, depth + 1):
        levels.append(tuple((2 * j, 2 * j + 1) for j in range(k >> t)))
    return TaskSpec(kind, d, k, seed, relevant, tuple(levels))


def phi2(kind: FunctionKind, z1, z2):
    """The 2-sparse function applied at every tree node (works elementwise)."""
    if kind is FunctionKind.PARITY:
        return z1 * z2
    if kind is FunctionKind.AND:
        return (z1 * z2 + z1 + z2 - 1) // 2 if _is_int(z1, z2) else (z1 * z2 + z1 + z2 - 1) / 2
    return (-z1 * z2 + z1 + z2 + 1) // 2 if _is_int(z1, z2) else (-z1 * z2 + z1 + z2 + 1) / 2


def _is_int(*values) -> bool:
    return all(np.issubdtype(np.asarray(v).dtype, np.integer) for v in values)


def _check_range(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if np.any(np.isnan(z)) or np.any(z < -1.0) or np.any(z > 1.0):
        raise ValueError("activation input outside [-1, 1]; attention scores are not normalized")
    return z


def psi(kind: FunctionKind, z):
    z = _check_range(z)
    if kind is FunctionKind.PARITY:
        out = z * z
    elif kind is FunctionKind.AND:
        out = np.maximum(z, 0.0)
    else:
        out = np.minimum(z, 0.0) + 1.0
    return float(out) if out.ndim == 0 else out


def psi_prime(kind: FunctionKind, z):
    # indicators are strict, so the derivative is 0 exactly at the kink
    z = _check_range(z)
    if kind is FunctionKind.PARITY:
        out = 2.0 * z
    elif kind is FunctionKind.AND:
        out = (z > 0).astype(float)
    else:
        out = (z < 0).astype(float)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class Chain:
    x: np.ndarray
    levels: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen_tokens(self.x))
        object.__setattr__(self, "levels", tuple(_frozen_tokens(v) for v in self.levels))

    def level(self, t: int) -> np.ndarray:
        return self.x if t == 0 else self.levels[t - 1]

    @property
    def complete(self) -> bool:
        return all(np.all(v != 0) for v in self.levels)

    @property
    def answer(self) -> int:
        return int(self.levels[-1][0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Chain):
            return NotImplemented
        return (
            np.array_equal(self.x, other.x)
            and len(self.levels) == len(other.levels)
            and all(np.array_equal(a, b) for a, b in zip(self.levels, other.levels))
        )

    def __repr__(self) -> str:
        parts = [self.x.tolist()] + [v.tolist() for v in self.levels]
        return f"Chain({parts})"


def _frozen_tokens(values) -> np.ndarray:
    arr = np.array(values, dtype=np.int8)
    arr.setflags(write=False)
    return arr


def _check_input(task: TaskSpec, x) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != task.d:
        raise ValueError(f"input has length {x.shape[-1]}, task expects d={task.d}")
    return x.astype(np.int64)


def ground_truth_levels(task: TaskSpec, x) -> list[np.ndarray]:
    """Ground-truth levels 1..T for one input or a batch (leading axes kept)."""
    prev = _check_input(task, x)
    out = []
    for t in range(1, task.depth + 1):
        ch = task.child_array(t)
        prev = phi2(task.kind, prev[..., ch[:, 0]], prev[..., ch[:, 1]])
        out.append(prev)
    return out


def ground_truth_chain(task: TaskSpec, x) -> Chain:
    return Chain(np.asarray(x), tuple(ground_truth_levels(task, x)))


def target(task: TaskSpec, x):
    x = _check_input(task, x)
    sub = x[..., list(task.relevant)]
    if task.kind is FunctionKind.PARITY:
        out = np.prod(sub, axis=-1)
    elif task.kind is FunctionKind.AND:
        out = np.where(np.all(sub == 1, axis=-1), 1, -1)
    else:
        out = np.where(np.any(sub == 1, axis=-1), 1, -1)
    return int(out) if np.ndim(out) == 0 else out


def all_inputs(d: int) -> np.ndarray:
    """All 2**d points of {-1, +1}^d, shape (2**d, d), in binary order."""
    codes = np.arange(1 << d, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(d - 1, -1, -1)) & 1
    return (2 * bits - 1).astype(np.int8)
