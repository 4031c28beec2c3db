"""The ten acceptance criteria as callable checks."""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention_model import WeightMatrix, deterministic_levels, init_weights, optimal_scores, softmax_distance
from .boolean_task import all_inputs, build_task, target
from .engine import ExpectationEngine
from .experiment import RunConfig, init_sign_pattern, run_experiment
from .oracle import abcd, fd_check, level_mean_stats
from .rl_finetune import (
    final_reward_variance,
    one_update_distance,
    one_update_eta,
    parity_closed_form,
    policy_gradient,
    rl_separation_margin,
    sign_ascent,
)
from .sft_finetune import sft_gradient, sft_separation_margin, sign_descent

KINDS = ("PARITY", "AND", "OR")
EXACT = ExpectationEngine.exact()


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    detail: str
    seconds: float = 0.0
    budget: float | None = None

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] criterion {self.number}: {self.title} ({self.seconds:.1f}s) - {self.detail}"


def _accuracy(task, W) -> int:
    X = all_inputs(task.d)
    levels, _ = deterministic_levels(task, W, X)
    return int(np.sum(levels[-1][:, 0] == target(task, X)))


def sign_pattern_at_init(task_d: int = 20, task_k: int = 16, samples: int = 50_000, seed: int = 0):
    task = build_task("PARITY", task_d, task_k, 0)
    signs = policy_gradient(task, init_weights(task), ExpectationEngine.mc(samples, seed)).signs()
    want = init_sign_pattern(task)
    bad = sum(int(np.sum(s != w)) for s, w in zip(signs, want))
    return task, signs, bad


def criterion_1() -> tuple[bool, str]:
    task, signs, bad = sign_pattern_at_init()
    two_each = all(np.all((s > 0).sum(axis=1) == 2) for s in signs if s.shape[1] > 2)
    frozen = int(sum(s.shape[0] for s in signs if s.shape[1] == 2))
    detail = (
        f"misclassified cells {bad}; every column wider than 2 has exactly two +1 (children): {two_each}; "
        f"{frozen} width-2 column(s) have identically zero gradient (sign 0)"
    )
    return bad == 0 and two_each, detail


def criterion_2() -> tuple[bool, str]:
    task = build_task("PARITY", 20, 16, 0)
    _, report = sign_descent(task, init_weights(task), one_update_eta(20), 4, ExpectationEngine.mc(50_000, 0))
    rows, ok = [], True
    for s in range(4):
        support = report.support(s)
        rows.append(f"s={s}:{list(support)}")
        ok &= support == (s + 1,)
    return ok, "nonzero-gradient levels per iteration " + " ".join(rows) + " (required exactly [s+1])"


def criterion_3() -> tuple[bool, str]:
    task = build_task("PARITY", 8, 8, 0)
    worst = 0.0
    for eta in (0.5, 1.0, 3.0):
        trace = sign_ascent(task, init_weights(task), eta, 5, EXACT)
        for st in trace.steps:
            for t in range(1, task.depth + 1):
                scores = st.weights.scores(t)
                for l, (i1, i2) in enumerate(task.children[t - 1]):
                    for p in range(scores.shape[1]):
                        ref = parity_closed_form(task, eta, st.step, t, p in (i1, i2))
                        worst = max(worst, abs(scores[l, p] - ref) / ref)
    return worst <= 1e-9, f"worst relative deviation {worst:.3e} over eta in (0.5, 1, 3), s = 0..5"


def criterion_4() -> tuple[bool, str]:
    eta = one_update_eta(8)
    want = one_update_distance(8, eta)
    parts, ok = [], True
    for kind in KINDS:
        task = build_task(kind, 8, 8, 0)
        W1 = sign_ascent(task, init_weights(task), eta, 1, EXACT).final
        dist = softmax_distance(W1, optimal_scores(task))
        acc = _accuracy(task, W1)
        good = abs(dist - want) <= 1e-12 and dist <= 0.05 and acc == 256
        ok &= good
        parts.append(f"{kind}: distance {dist:.12f} (formula {want:.12f}) accuracy {acc}/256")
    return ok, "; ".join(parts)


def criterion_5() -> tuple[bool, str]:
    eta = one_update_eta(8)
    parts, ok = [], True
    for kind in KINDS:
        task = build_task(kind, 8, 8, 0)
        trace, _ = sign_descent(task, init_weights(task), eta, task.depth, EXACT)
        uniform = init_weights(task).all_scores()
        frozen = all(
            np.allclose(trace.steps[s].weights.scores(t), uniform[t - 1], rtol=0, atol=1e-15)
            for s in range(task.depth)
            for t in range(s + 2, task.depth + 1)
        )
        final = trace.final
        dist = softmax_distance(final, optimal_scores(task))
        acc = _accuracy(task, final)
        good = frozen and dist <= 0.05 and acc == 256
        ok &= good
        parts.append(f"{kind}: distance {dist:.2e} accuracy {acc}/256 later levels frozen {frozen}")
    return ok, "; ".join(parts)


def _random_weights(task, rng) -> WeightMatrix:
    return WeightMatrix(task, tuple(rng.normal(size=b.shape) for b in init_weights(task).blocks))


def criterion_6() -> tuple[bool, str]:
    rng = np.random.default_rng(2024)
    parts, ok = [], True
    for kind in KINDS:
        task = build_task(kind, 4, 4, 0)
        points = [init_weights(task), _random_weights(task, rng)] if kind == "PARITY" else [_random_weights(task, rng)]
        for trainer in ("rl", "sft"):
            reports = [fd_check(task, W, trainer) for W in points]
            checked = sum(r.checked for r in reports)
            skipped = sum(len(r.skipped) for r in reports)
            worst = max(r.worst for r in reports)
            good = all(r.passed for r in reports) and (kind != "PARITY" or skipped == 0)
            ok &= good
            parts.append(f"{kind}/{trainer}: {checked} checked, {skipped} skipped, worst {worst:.1e}")
    return ok, "; ".join(parts)


def criterion_7() -> tuple[bool, str]:
    parts, ok = [], True
    for kind in ("AND", "OR"):
        task = build_task(kind, 8, 4, 0)
        W = init_weights(task)
        worst = 0.0
        positive = True
        for l in range(task.width(1)):
            rl = rl_separation_margin(task, W, EXACT, 1, l)
            sft = sft_separation_margin(task, 1, l, EXACT)
            for p, m_rl, m_sft in zip(rl.nonchild_positions, rl.margins, sft.margins):
                st = abcd(task, 1, l, p, W)
                ref = 8 * (st.b if kind == "AND" else st.c_bar) / (task.k - 1)
                st_gt = abcd(task, 1, l, p, W, source="ground_truth")
                ref_gt = 8 * (st_gt.b if kind == "AND" else st_gt.c_bar) / (task.k - 1)
                worst = max(worst, abs(m_rl - ref), abs(m_sft - ref_gt))
                positive &= m_rl > 0 and m_sft > 0
        ok &= worst <= 1e-12 and positive
        parts.append(f"{kind}: max |margin - 8x/(k-1)| {worst:.1e}, all positive {positive}")
    task = build_task("PARITY", 8, 4, 0)
    trace = sign_ascent(task, init_weights(task), 1.0, 5, EXACT)
    mins = [min(rl_separation_margin(task, st.weights, EXACT, 1, l).min_margin for l in range(task.width(1))) for st in trace.steps]
    ok &= all(m > 0 for m in mins)
    parts.append("PARITY min margin per step " + ", ".join(f"{m:.4f}" for m in mins))
    return ok, "; ".join(parts)


def criterion_8() -> tuple[bool, str]:
    r6 = final_reward_variance(build_task("PARITY", 6, 4, 0), init_weights(build_task("PARITY", 6, 4, 0)))
    r7 = final_reward_variance(build_task("PARITY", 7, 4, 0), init_weights(build_task("PARITY", 7, 4, 0)))
    ratio = r7.variance / r6.variance
    ok = r6.satisfied and 0.3 <= ratio <= 0.7
    return ok, f"d=6 variance {r6.variance:.3e} <= 2M/|H| {r6.bound:.3e}: {r6.satisfied}; d=7/d=6 ratio {ratio:.3f}"


def criterion_9() -> tuple[bool, str]:
    rng = np.random.default_rng(99)
    worst_sum, worst_norm = 0.0, 0.0
    for i in range(50):
        task = build_task(KINDS[i % 3], 6, 4, i)
        W = WeightMatrix(task, tuple(rng.normal(scale=2.0, size=b.shape) for b in init_weights(task).blocks))
        for grad in (policy_gradient(task, W, EXACT), sft_gradient(task, W, EXACT)):
            worst_sum = max(worst_sum, max(float(np.abs(s).max()) for s in grad.column_sums()))
        worst_norm = max(worst_norm, max(float(np.abs(s.sum(axis=1) - 1).max()) for s in W.all_scores()))
    # equal means, and the base level of the recursion, at W(0)
    task = build_task("PARITY", 8, 8, 0)
    at_init = [level_mean_stats(task, init_weights(task), t) for t in range(1, task.depth + 1)]
    equal = all(s.equal_means for s in at_init)
    base = at_init[0].matches == ("linear_current",)
    # identification where the product factorization holds: level-1 tokens read
    # disjoint input blocks, so they are independent with nonzero mean
    task12 = build_task("PARITY", 12, 8, 0)
    block1 = np.zeros((4, 12))
    for l in range(4):
        block1[l, 3 * l : 3 * l + 3] = 60.0
    W12 = WeightMatrix(task12, (block1, np.zeros((2, 4)), np.zeros((1, 2))))
    ident = level_mean_stats(task12, W12, 2)
    identified = ident.matches == ("linear_current",)
    ok = worst_sum <= 1e-10 and worst_norm <= 1e-12 and equal and base and identified
    init_dev = ", ".join(f"t={s.t}: {min(v for v in s.deviations.values() if v is not None):.3f}" for s in at_init[1:])
    detail = (
        f"column sums max {worst_sum:.1e}; score normalization max {worst_norm:.1e}; equal means {equal}; "
        f"t=1 base matches {list(at_init[0].matches)}; independent-token check matches {list(ident.matches)} "
        f"(deviations {', '.join(f'{k}={v:.2e}' for k, v in ident.deviations.items() if v is not None)}); "
        f"at W(0) tokens are correlated and the best variant misses by {init_dev}"
    )
    return ok, detail


REPRO_CONFIGS = (
    RunConfig(kind="PARITY", d=6, k=4, trainer="rl", eta=1.0, steps=3, engine="exact"),
    RunConfig(kind="AND", d=10, k=8, trainer="sft", steps=3, engine="mc", sample_count=4000, mc_seed=7),
    RunConfig(kind="OR", d=10, k=8, trainer="rl", steps=2, engine="mc", sample_count=4000, mc_seed=3),
)


def criterion_10() -> tuple[bool, str]:
    ok, parts = True, []
    with tempfile.TemporaryDirectory() as tmp:
        for i, cfg in enumerate(REPRO_CONFIGS):
            out = Path(tmp) / f"cfg{i}"
            config = RunConfig.from_json({**cfg.to_json(), "out_dir": str(out)})
            digests = []
            for _ in range(2):
                run_experiment(config)
                files = sorted(p for p in out.iterdir() if p.suffix in (".csv", ".json"))
                digests.append({p.name: p.read_bytes() for p in files})
            same = digests[0] == digests[1]
            ok &= same
            parts.append(f"{cfg.trainer}/{cfg.kind}/{cfg.engine}: {len(digests[0])} files identical {same}")
    return ok, "; ".join(parts)


CRITERIA = {
    1: ("sign of the policy gradient at init (d=20, k=16, MC 50,000)", criterion_1, 120.0),
    2: ("step-wise SFT gradient support (d=20, k=16, MC 50,000)", criterion_2, 300.0),
    3: ("closed-form parity score dynamics", criterion_3, 60.0),
    4: ("one-update RL learning", criterion_4, 360.0),
    5: ("T-update SFT learning", criterion_5, None),
    6: ("gradients match central finite differences", criterion_6, None),
    7: ("separation margins", criterion_7, None),
    8: ("final-reward gradient variance", criterion_8, 120.0),
    9: ("structural identities", criterion_9, None),
    10: ("reproducible artifacts", criterion_10, None),
}


def run_criterion(number: int) -> CriterionResult:
    title, fn, budget = CRITERIA[number]
    began = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as exc:  # a crash is a failed criterion, reported as such
        passed, detail = False, f"raised {type(exc).__name__}: {exc}"
    seconds = time.perf_counter() - began
    if budget is not None and seconds > budget:
        passed, detail = False, detail + f"; exceeded runtime budget {budget:.0f}s"
    return CriterionResult(number, title, bool(passed), detail, seconds, budget)


def run_all(numbers=None) -> list[CriterionResult]:
    return [run_criterion(n) for n in (numbers or sorted(CRITERIA))]
