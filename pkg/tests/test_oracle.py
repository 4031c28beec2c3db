import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cotdyn.attention_model import WeightMatrix, init_weights, optimal_weights
from cotdyn.boolean_task import build_task
from cotdyn.engine import BudgetExceeded, ExpectationEngine, rollouts
from cotdyn.oracle import (
    abcd,
    exact_expectation,
    fd_check,
    finite_difference,
    level_mean_stats,
    mc_expectation,
)
from cotdyn.rl_finetune import rl_separation_margin
from cotdyn.sft_finetune import sft_separation_margin

EXACT = ExpectationEngine.exact()


def random_weights(task, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return WeightMatrix(task, tuple(rng.normal(scale=scale, size=b.shape) for b in init_weights(task).blocks))


class TestEngines:
    def test_total_probability(self):
        task = build_task("PARITY", 6, 4, 0)
        for W in (init_weights(task), random_weights(task, 1)):
            assert exact_expectation(task, W, lambda ro: np.ones(len(ro))) == pytest.approx(1.0, abs=1e-14)

    def test_inputs_are_centered(self):
        task = build_task("AND", 6, 4, 0)
        means = exact_expectation(task, init_weights(task), lambda ro: ro.x.astype(float))
        np.testing.assert_allclose(means, 0, atol=1e-15)

    def test_first_level_mean(self):
        task = build_task("PARITY", 8, 8, 0)
        got = exact_expectation(task, init_weights(task), lambda ro: ro.levels[0][:, 0].astype(float))
        assert got == pytest.approx(2 * (1 / 8) - 1, abs=1e-14)

    def test_budget_refusal(self):
        task = build_task("PARITY", 20, 16, 0)
        with pytest.raises(BudgetExceeded):
            rollouts(task, init_weights(task), EXACT, True)

    def test_mc_determinism(self):
        task = build_task("OR", 8, 4, 0)
        eng = ExpectationEngine.mc(2000, 5)
        f = lambda ro: ro.levels[-1][:, 0].astype(float)
        assert mc_expectation(task, init_weights(task), f, eng) == mc_expectation(task, init_weights(task), f, eng)

    def test_mc_agrees_with_exact_on_random_functionals(self):
        task = build_task("PARITY", 4, 4, 0)
        W = random_weights(task, 3)
        eng = ExpectationEngine.mc(50_000, 1)
        rng = np.random.default_rng(0)
        for _ in range(20):
            coef = rng.normal(size=7)

            def f(ro, coef=coef):
                z = np.concatenate([ro.x, ro.levels[0], ro.levels[1]], axis=1).astype(float)
                return np.tanh(z @ coef)

            exact = exact_expectation(task, W, f)
            mean, se = mc_expectation(task, W, f, eng)
            assert abs(mean - exact) <= 5 * se

    def test_standard_error_scaling(self):
        task = build_task("PARITY", 6, 4, 0)
        f = lambda ro: ro.levels[0][:, 0].astype(float)
        _, se1 = mc_expectation(task, init_weights(task), f, ExpectationEngine.mc(20_000, 2))
        _, se2 = mc_expectation(task, init_weights(task), f, ExpectationEngine.mc(40_000, 2))
        assert 0.6 <= se2 / se1 <= 0.82

    def test_engine_wrong_mode(self):
        task = build_task("PARITY", 4, 4, 0)
        with pytest.raises(ValueError):
            exact_expectation(task, init_weights(task), lambda ro: ro.weights, ExpectationEngine.mc(10))
        with pytest.raises(ValueError):
            mc_expectation(task, init_weights(task), lambda ro: ro.weights, EXACT)


class TestFiniteDifference:
    def test_linear_calibration(self):
        task = build_task("AND", 4, 4, 0)
        W = random_weights(task, 0)
        obj = lambda M: sum(float(b.sum()) for b in M.blocks)
        for entry in W.entries():
            assert finite_difference(obj, W, entry) == pytest.approx(1.0, abs=1e-9)

    def test_nan_raises(self):
        task = build_task("AND", 4, 4, 0)
        with pytest.raises(ValueError):
            finite_difference(lambda M: float("nan"), init_weights(task), (1, 0, 0))

    @pytest.mark.parametrize("trainer", ["rl", "sft"])
    def test_parity_all_entries(self, trainer):
        task = build_task("PARITY", 4, 4, 0)
        for W in (init_weights(task), random_weights(task, 7), optimal_weights(task, gap=3.0)):
            report = fd_check(task, W, trainer)
            assert report.passed and not report.skipped, report.to_json()

    @pytest.mark.parametrize("kind", ["AND", "OR"])
    @pytest.mark.parametrize("trainer", ["rl", "sft"])
    def test_kinked_kinds(self, kind, trainer):
        task = build_task(kind, 4, 4, 0)
        report = fd_check(task, random_weights(task, 11), trainer)
        assert report.passed and report.skipped_fraction <= 0.10

    def test_kink_guard_engages_at_init(self):
        # AND at uniform scores: xi = mean(x) hits 0 exactly, so level-1 entries are skipped
        task = build_task("AND", 4, 4, 0)
        report = fd_check(task, init_weights(task), "rl")
        assert any(e[0] == 1 for e in report.skipped)


class TestAbcd:
    @pytest.mark.parametrize("kind", ["AND", "OR"])
    def test_margin_identity_at_init(self, kind):
        task = build_task(kind, 8, 4, 0)
        W = init_weights(task)
        for l in range(2):
            m = rl_separation_margin(task, W, EXACT, 1, l)
            for p, value in zip(m.nonchild_positions, m.margins):
                s = abcd(task, 1, l, p, W)
                mass = s.b if kind == "AND" else s.c_bar
                assert value == pytest.approx(8 * mass / 3, abs=1e-12)
                assert value > 0

    @pytest.mark.parametrize("kind", ["AND", "OR"])
    def test_terms_match_direct_enumeration(self, kind):
        task = build_task(kind, 8, 8, 0)
        W = init_weights(task)
        for t, source in ((1, "policy"), (2, "policy"), (2, "ground_truth")):
            i1, i2 = task.children[t - 1][0]
            p = next(q for q in range(task.width(t - 1)) if q not in (i1, i2))
            s = abcd(task, t, 0, p, W, source)
            from cotdyn.oracle import level_distribution

            prev, w = level_distribution(task, W, t, source)
            total = prev.sum(axis=1)
            ind = (total > 0) if kind == "AND" else (total < 0)
            direct = [
                np.sum(w * ind),
                np.sum(w * ind * prev[:, i1]),
                np.sum(w * ind * prev[:, i1] * prev[:, i2]),
                np.sum(w * ind * prev[:, i1] * prev[:, i2] * prev[:, p]),
            ]
            np.testing.assert_allclose(s.terms(below=kind == "OR"), direct, atol=1e-12)

    def test_masses_are_probabilities(self):
        task = build_task("OR", 8, 4, 0)
        s = abcd(task, 1, 0, 5, init_weights(task))
        for v in s.to_json().values():
            if not isinstance(v, bool):
                assert 0.0 <= v <= 1.0

    def test_non_strict_sets_disagree(self):
        task = build_task("AND", 8, 4, 0)
        W = init_weights(task)
        m = rl_separation_margin(task, W, EXACT, 1, 0)
        loose = abcd(task, 1, 0, m.nonchild_positions[0], W, strict=False)
        assert abs(m.margins[0] - 8 * loose.b / 3) > 1e-3

    def test_preconditions(self):
        task = build_task("AND", 8, 4, 0)
        with pytest.raises(ValueError):
            abcd(task, 1, 0, 4, random_weights(task, 0))
        with pytest.raises(ValueError):
            abcd(task, 1, 0, task.children[0][0][0], init_weights(task))
        with pytest.raises(ValueError):
            abcd(build_task("PARITY", 8, 4, 0), 1, 0, 4, init_weights(build_task("PARITY", 8, 4, 0)))

    @pytest.mark.parametrize("kind", ["AND", "OR"])
    def test_sft_margin_uses_ground_truth_masses(self, kind):
        task = build_task(kind, 8, 8, 0)
        W = init_weights(task)
        for t in (1, 2):
            m = sft_separation_margin(task, t, 0, EXACT)
            for p, value in zip(m.nonchild_positions, m.margins):
                s = abcd(task, t, 0, p, W, source="ground_truth")
                mass = s.b if kind == "AND" else s.c_bar
                assert value == pytest.approx(8 * mass / 7, abs=1e-12)


class TestLevelMeans:
    def test_first_level_base(self):
        task = build_task("PARITY", 8, 8, 0)
        s = level_mean_stats(task, init_weights(task), 1)
        assert s.brute == pytest.approx(-0.75, abs=1e-14)
        assert s.c1 == pytest.approx(1 / 8)
        assert s.matches == ("linear_current",)

    def test_equal_means_along_training(self):
        from cotdyn.rl_finetune import sign_ascent

        task = build_task("PARITY", 8, 8, 0)
        trace = sign_ascent(task, init_weights(task), 1.0, 5, EXACT)
        for st in trace.steps:
            for t in (1, 2, 3):
                s = level_mean_stats(task, st.weights, t)
                assert s.equal_means
                assert abs(s.brute) < 1

    def test_independent_tokens_identify_linear_recursion(self):
        task = build_task("PARITY", 12, 8, 0)
        block = np.zeros((4, 12))
        for l in range(4):
            block[l, 3 * l : 3 * l + 3] = 60.0
        W = WeightMatrix(task, (block, np.zeros((2, 4)), np.zeros((1, 2))))
        s = level_mean_stats(task, W, 2)
        assert s.brute == pytest.approx(-1 / 3, abs=1e-12)
        assert s.matches == ("linear_current",)

    def test_correlated_tokens_break_the_recursion(self):
        task = build_task("PARITY", 4, 4, 0)
        s = level_mean_stats(task, init_weights(task), 2)
        assert s.brute == pytest.approx(0.625, abs=1e-14)
        assert s.variants["linear_current"] == pytest.approx(0.25)
        assert s.matches == ()

    def test_condition_checked(self):
        task = build_task("PARITY", 8, 8, 0)
        with pytest.raises(ValueError):
            level_mean_stats(task, random_weights(task, 0), 1)
