"""Command-line entry point: ``cotdyn <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .acceptance import CRITERIA, run_criterion
from .attention_model import WeightMatrix, init_weights, optimal_weights
from .boolean_task import build_task
from .engine import ExpectationEngine
from .experiment import (
    RunConfig,
    default_output_root,
    dump_json,
    ground_truth_matrix,
    run_experiment,
    write_atomic,
    write_manifest,
)
from .oracle import abcd, fd_check, level_mean_stats
from .rl_finetune import final_reward_variance, parity_closed_form, rl_separation_margin, sign_ascent
from .sft_finetune import sft_separation_margin

CONFIG_FLAGS = {
    "kind": "kind",
    "d": "d",
    "k": "k",
    "seed": "task_seed",
    "eta": "eta",
    "epsilon": "epsilon",
    "steps": "steps",
    "engine": "engine",
    "samples": "sample_count",
    "mc_seed": "mc_seed",
    "out_dir": "out_dir",
}


def _task_flags(p: argparse.ArgumentParser, kind="PARITY", d=8, k=8) -> None:
    p.add_argument("--kind", default=kind, type=str.upper, choices=["PARITY", "AND", "OR"])
    p.add_argument("--d", type=int, default=d)
    p.add_argument("--k", type=int, default=k)
    p.add_argument("--seed", type=int, default=0, help="task seed (draws the relevant coordinates)")
    p.add_argument("--out-dir", default=None)


def _weight_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--weights", choices=["init", "random", "optimal"], default="init")
    p.add_argument("--weight-seed", type=int, default=0)


def _train_parser(sub, name: str, help_text: str, sft: bool) -> None:
    p = sub.add_parser(name, help=help_text)
    p.add_argument("--config", type=Path, help="flat JSON RunConfig; flags override it")
    p.add_argument("--kind", type=str.upper, choices=["PARITY", "AND", "OR"])
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int, help="task seed")
    p.add_argument("--eta", type=float, help="step size (default: one-update bound at --epsilon)")
    if sft:
        p.add_argument("--epsilon", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--engine", choices=["exact", "mc"])
    p.add_argument("--samples", type=int)
    p.add_argument("--mc-seed", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(trainer="sft" if sft else "rl")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cotdyn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _train_parser(sub, "rl-train", "sign policy ascent with immediate rewards", sft=False)
    _train_parser(sub, "sft-train", "sign gradient descent on the hinge population loss", sft=True)

    p = sub.add_parser("verify-closed-form", help="compare parity training with the closed-form scores")
    _task_flags(p)
    p.add_argument("--etas", type=float, nargs="+", default=[0.5, 1.0, 3.0])
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--rtol", type=float, default=1e-9)

    p = sub.add_parser("fd-check", help="central finite differences against analytical gradients")
    _task_flags(p, d=4, k=4)
    _weight_flags(p)
    p.add_argument("--trainer", choices=["rl", "sft", "both"], default="both")

    p = sub.add_parser("check-separation", help="child vs non-child margins of the critical component")
    _task_flags(p, d=8, k=4)
    p.add_argument("--trainer", choices=["rl", "sft", "both"], default="both")

    p = sub.add_parser("abcd-report", help="pattern masses for AND/OR at uniform scores")
    _task_flags(p, kind="AND", d=8, k=4)
    p.add_argument("--t", type=int, default=1)
    p.add_argument("--l", type=int, default=0)
    p.add_argument("--p-prime", type=int, default=None)
    p.add_argument("--source", choices=["policy", "ground_truth"], default="policy")

    p = sub.add_parser("level-stats", help="level means against the recursion candidates (parity)")
    _task_flags(p)
    _weight_flags(p)

    p = sub.add_parser("variance-final-reward", help="final-reward gradient variance over all parities")
    _task_flags(p, d=6, k=4)

    p = sub.add_parser("ground-truth", help="write the optimal score matrix as a grid CSV")
    _task_flags(p, d=20, k=16)

    p = sub.add_parser("accept", help="run the acceptance criteria")
    p.add_argument("--only", type=int, nargs="+", choices=sorted(CRITERIA))
    p.add_argument("--out-dir", default=None)
    return parser


def config_from_args(args) -> RunConfig:
    data = {}
    if args.config is not None:
        data.update(json.loads(args.config.read_text()))
    for flag, key in CONFIG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    data["trainer"] = args.trainer
    return RunConfig.from_json(data)


def _out(args, name: str) -> Path:
    out = Path(args.out_dir) if getattr(args, "out_dir", None) else default_output_root() / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _weights(task, args) -> WeightMatrix:
    if args.weights == "optimal":
        return optimal_weights(task)
    if args.weights == "random":
        rng = np.random.default_rng(args.weight_seed)
        return WeightMatrix(task, tuple(rng.normal(size=b.shape) for b in init_weights(task).blocks))
    return init_weights(task)


def _report(args, name: str, payload: dict, checks: dict[str, bool]) -> int:
    began = time.perf_counter()
    checks = {key: bool(ok) for key, ok in checks.items()}
    out = _out(args, name)
    write_atomic(out / "report.json", dump_json({"checks": checks, **payload}))
    write_manifest(out, {k: v for k, v in vars(args).items() if isinstance(v, (int, float, str, list, type(None)))}, checks, began)
    for key, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {key}")
    print(f"report written to {out / 'report.json'}")
    return 0 if all(checks.values()) else 1


def cmd_train(args) -> int:
    manifest = run_experiment(config_from_args(args))
    for key, ok in manifest.checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {key}")
    print(f"{len(manifest.checksums)} artifacts written ({manifest.wall_clock:.1f}s)")
    return 0 if manifest.passed else 1


def cmd_closed_form(args) -> int:
    task = build_task("PARITY", args.d, args.k, args.seed)
    rows = []
    for eta in args.etas:
        trace = sign_ascent(task, init_weights(task), eta, args.steps, ExpectationEngine.exact())
        worst = 0.0
        for st in trace.steps:
            for t in range(1, task.depth + 1):
                scores = st.weights.scores(t)
                for l, pair in enumerate(task.children[t - 1]):
                    for p in range(scores.shape[1]):
                        ref = parity_closed_form(task, eta, st.step, t, p in pair)
                        worst = max(worst, abs(scores[l, p] - ref) / ref)
        rows.append({"eta": eta, "worst_relative_deviation": worst})
    checks = {f"eta={r['eta']}": r["worst_relative_deviation"] <= args.rtol for r in rows}
    return _report(args, "verify-closed-form", {"task": task.to_json(), "results": rows}, checks)


def cmd_fd(args) -> int:
    task = build_task(args.kind, args.d, args.k, args.seed)
    W = _weights(task, args)
    trainers = ["rl", "sft"] if args.trainer == "both" else [args.trainer]
    reports = {tr: fd_check(task, W, tr) for tr in trainers}
    checks = {f"fd_{tr}": r.passed for tr, r in reports.items()}
    return _report(args, "fd-check", {"task": task.to_json(), "reports": {tr: r.to_json() for tr, r in reports.items()}}, checks)


def _margin_json(m) -> dict:
    return {
        "child_value": m.child_value,
        "nonchild_positions": list(m.nonchild_positions),
        "margins": list(m.margins),
        "min_margin": m.min_margin if m.margins else None,
    }


def cmd_separation(args) -> int:
    task = build_task(args.kind, args.d, args.k, args.seed)
    engine, W = ExpectationEngine.exact(), init_weights(task)
    trainers = ["rl", "sft"] if args.trainer == "both" else [args.trainer]
    results, checks = {}, {}
    for tr in trainers:
        rows = []
        for t, l in task.columns():
            if task.width(t - 1) <= 2:
                continue  # only children: nothing to separate
            m = rl_separation_margin(task, W, engine, t, l) if tr == "rl" else sft_separation_margin(task, t, l, engine)
            rows.append({"t": t, "l": l, **_margin_json(m)})
        results[tr] = rows
        checks[f"{tr}_separation"] = all(r["min_margin"] > 0 for r in rows)
    return _report(args, "check-separation", {"task": task.to_json(), "margins": results}, checks)


def cmd_abcd(args) -> int:
    task = build_task(args.kind, args.d, args.k, args.seed)
    W = init_weights(task)
    i1, i2 = task.children[args.t - 1][args.l]
    p_prime = args.p_prime if args.p_prime is not None else next(p for p in range(task.width(args.t - 1)) if p not in (i1, i2))
    strict = abcd(task, args.t, args.l, p_prime, W, args.source)
    loose = abcd(task, args.t, args.l, p_prime, W, args.source, strict=False)
    engine = ExpectationEngine.exact()
    if args.source == "policy":
        margin = rl_separation_margin(task, W, engine, args.t, args.l)
    else:
        margin = sft_separation_margin(task, args.t, args.l, engine)
    value = dict(zip(margin.nonchild_positions, margin.margins))[p_prime]
    mass = strict.b if task.kind.value == "AND" else strict.c_bar
    predicted = 8 * mass / (task.k - 1)
    payload = {
        "task": task.to_json(),
        "p_prime": p_prime,
        "strict": strict.to_json(),
        "non_strict": loose.to_json(),
        "terms": list(strict.terms(below=task.kind.value == "OR")),
        "margin": value,
        "predicted_margin": predicted,
    }
    checks = {"margin_identity": abs(value - predicted) <= 1e-12, "margin_positive": value > 0}
    return _report(args, "abcd-report", payload, checks)


def cmd_level_stats(args) -> int:
    task = build_task("PARITY", args.d, args.k, args.seed)
    W = _weights(task, args)
    stats = [level_mean_stats(task, W, t) for t in range(1, task.depth + 1)]
    checks = {}
    for s in stats:
        checks[f"t{s.t}_equal_means"] = s.equal_means
        checks[f"t{s.t}_recursion_match"] = bool(s.matches)
    return _report(args, "level-stats", {"task": task.to_json(), "levels": [s.to_json() for s in stats]}, checks)


def cmd_variance(args) -> int:
    task = build_task(args.kind, args.d, args.k, args.seed)
    r = final_reward_variance(task, init_weights(task))
    return _report(args, "variance-final-reward", {"task": task.to_json(), **r.to_json()}, {"bound_satisfied": r.satisfied})


def cmd_ground_truth(args) -> int:
    task = build_task(args.kind, args.d, args.k, args.seed)
    out = _out(args, "ground-truth")
    write_atomic(out / "ground_truth.csv", ground_truth_matrix(task))
    write_atomic(out / "task.json", dump_json(task.to_json()))
    print(f"wrote {out / 'ground_truth.csv'}")
    return 0


def cmd_accept(args) -> int:
    results = []
    for n in args.only or sorted(CRITERIA):
        r = run_criterion(n)
        print(r.line(), flush=True)
        results.append(r)
    out = _out(args, "accept")
    doc = [{"criterion": r.number, "title": r.title, "passed": r.passed, "detail": r.detail} for r in results]
    write_atomic(out / "accept.json", dump_json(doc))
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} criteria passed")
    return 0 if passed == len(results) else 1


COMMANDS = {
    "rl-train": cmd_train,
    "sft-train": cmd_train,
    "verify-closed-form": cmd_closed_form,
    "fd-check": cmd_fd,
    "check-separation": cmd_separation,
    "abcd-report": cmd_abcd,
    "level-stats": cmd_level_stats,
    "variance-final-reward": cmd_variance,
    "ground-truth": cmd_ground_truth,
    "accept": cmd_accept,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
