"""Run configuration, artifact emission and run manifests."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attention_model import init_weights, optimal_scores, scores_csv, uniform_scores, weights_csv
from .boolean_task import TaskSpec, build_task
from .engine import ExpectationEngine
from .rl_finetune import one_update_eta, sign_ascent
from .sft_finetune import sign_descent

OUTPUT_ROOT_ENV = "COTDYN_OUTPUT_ROOT"
MASKED = "M"


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


@dataclass(frozen=True)
class RunConfig:
    kind: str = "PARITY"
    d: int = 20
    k: int = 16
    task_seed: int = 0
    trainer: str = "rl"
    eta: float | None = None
    epsilon: float = 0.05
    steps: int = 1
    engine: str = "mc"
    sample_count: int = 50_000
    mc_seed: int = 0
    out_dir: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", self.kind.upper())
        object.__setattr__(self, "trainer", self.trainer.lower())
        object.__setattr__(self, "engine", self.engine.lower())
        if self.trainer not in ("rl", "sft"):
            raise ValueError(f"trainer must be rl or sft, got {self.trainer!r}")
        if self.engine not in ("exact", "mc"):
            raise ValueError(f"engine must be exact or mc, got {self.engine!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0 < self.epsilon < 2:
            raise ValueError("epsilon must lie in (0, 2)")

    @property
    def resolved_eta(self) -> float:
        return self.eta if self.eta is not None else one_update_eta(self.d, self.epsilon)

    def task(self) -> TaskSpec:
        return build_task(self.kind, self.d, self.k, self.task_seed)

    def expectation_engine(self) -> ExpectationEngine:
        if self.engine == "exact":
            return ExpectationEngine.exact()
        return ExpectationEngine.mc(self.sample_count, self.mc_seed)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class RunManifest:
    config: dict
    checksums: dict[str, str]
    versions: dict[str, str]
    checks: dict[str, bool]
    wall_clock: float = field(default=0.0)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_json(self) -> dict:
        # wall-clock goes to timing.log so the manifest itself is reproducible
        return {"config": self.config, "checksums": self.checksums, "versions": self.versions, "checks": self.checks}


def _row_labels(task: TaskSpec) -> list[str]:
    labels = [f"x{i + 1}" for i in range(task.d)]
    for t in range(1, task.depth):
        labels += [f"y{t}_{j + 1}" for j in range(task.width(t))]
    return labels


def grid_csv(task: TaskSpec, blocks, fmt=str) -> str:
    """Matrix layout: rows are attended positions, columns generated tokens."""
    rows = _row_labels(task)
    cols = [(t, l) for t, l in task.columns()]
    grid = [[MASKED] * len(cols) for _ in rows]
    for c, (t, l) in enumerate(cols):
        start = task.offsets[t - 2] if t >= 2 else 0
        for p, value in enumerate(blocks[t - 1][l]):
            grid[start + p][c] = fmt(value)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["position"] + [f"y{t}_{l + 1}" for t, l in cols])
    for label, row in zip(rows, grid):
        w.writerow([label] + row)
    return buf.getvalue()


def sign_grid_csv(task: TaskSpec, signs) -> str:
    return grid_csv(task, signs, lambda v: str(int(v)))


def ground_truth_matrix(task: TaskSpec) -> str:
    return grid_csv(task, optimal_scores(task), lambda v: repr(float(v)))


def read_grid_csv(text: str) -> tuple[list[str], list[str], list[list[str]]]:
    rows = list(csv.reader(io.StringIO(text)))
    return rows[0][1:], [r[0] for r in rows[1:]], [r[1:] for r in rows[1:]]


def init_sign_pattern(task: TaskSpec) -> tuple[np.ndarray, ...]:
    """sign(optimal - uniform): +1 on children, -1 elsewhere, 0 in width-2 columns."""
    return tuple(np.sign(np.round(o - u, 15)).astype(np.int8) for o, u in zip(optimal_scores(task), uniform_scores(task)))


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def dump_json(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def versions() -> dict[str, str]:
    return {"cotdyn": __version__, "numpy": np.__version__, "python": platform.python_version()}


def write_manifest(out: Path, config: dict, checks: dict[str, bool], began: float) -> RunManifest:
    files = sorted(p for p in out.iterdir() if p.is_file() and p.name not in ("manifest.json", "timing.log") and not p.name.endswith(".tmp"))
    manifest = RunManifest(config, {p.name: sha256(p) for p in files}, versions(), checks, time.perf_counter() - began)
    write_atomic(out / "timing.log", f"wall_clock_seconds {manifest.wall_clock:.3f}\n")
    write_atomic(out / "manifest.json", dump_json(manifest.to_json()))
    return manifest


def run_experiment(config: RunConfig) -> RunManifest:
    out = Path(config.out_dir) if config.out_dir else default_output_root() / f"{config.trainer}-{config.kind.lower()}-d{config.d}-k{config.k}"
    out.mkdir(parents=True, exist_ok=True)
    (out / ".failed").unlink(missing_ok=True)
    began = time.perf_counter()
    try:
        return _run(config, out, began)
    except BaseException as exc:
        (out / ".failed").write_text(f"{type(exc).__name__}: {exc}\n")
        raise


def _run(config: RunConfig, out: Path, began: float) -> RunManifest:
    task = config.task()
    engine = config.expectation_engine()
    eta = config.resolved_eta
    W0 = init_weights(task)
    write_atomic(out / "task.json", dump_json(task.to_json()))
    write_atomic(out / "ground_truth.csv", ground_truth_matrix(task))
    checks: dict[str, bool] = {}
    if config.trainer == "rl":
        trace = sign_ascent(task, W0, eta, config.steps, engine)
        objective = "expected_reward"
    else:
        trace, report = sign_descent(task, W0, eta, config.steps, engine)
        objective = "population_loss"
        write_atomic(out / "stepwise.json", dump_json(report.to_json()))
        checks["stepwise_support"] = all(
            e.nonzero_levels == ((e.step + 1,) if e.step < task.depth else ()) for e in report.entries[: task.depth]
        )
        checks["later_levels_frozen"] = all(
            all(t <= e.step + 1 for t in e.nonzero_levels) for e in report.entries
        )
    for st in trace.steps:
        write_atomic(out / f"signs_step{st.step:03d}.csv", sign_grid_csv(task, st.signs))
    write_atomic(out / "scores_final.csv", scores_csv(trace.final))
    write_atomic(out / "weights_final.csv", weights_csv(trace.final))
    steps = []
    for st in trace.steps:
        entry = st.summary()
        entry[objective] = entry.pop("expected_reward")
        entry[objective + "_standard_error"] = entry.pop("reward_standard_error")
        steps.append(entry)
    trace_doc = {
        "config": config.to_json(),
        "eta": eta,
        "engine": engine.to_json(),
        "sign_zero_convention": "deterministic generation maps a score of exactly 0 to +1",
        "steps": steps,
    }
    write_atomic(out / "trace.json", dump_json(trace_doc))
    if config.trainer == "rl":
        checks["init_sign_pattern"] = all(np.array_equal(a, b) for a, b in zip(trace.steps[0].signs, init_sign_pattern(task)))
    return write_manifest(out, config.to_json(), checks, began)


def verify_manifest(out: Path) -> bool:
    manifest = json.loads((Path(out) / "manifest.json").read_text())
    return all(sha256(Path(out) / name) == digest for name, digest in manifest["checksums"].items())
