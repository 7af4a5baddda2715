"""Leader gradient identification: scoring, ratio adaptation, selection."""

import math

import numpy as np
import pytest

import oracles
from gapsl.errors import ConfigError, CoordinationSkipped
from gapsl.geometry import GradientVector
from gapsl.lgi import (
    LgiConfig,
    LgiState,
    ScoreSet,
    consistency_scores,
    leader_gradient,
    run_lgi,
    select_top,
    selection_ratio,
)


def cohort_of(vectors, round_t=1):
    return [GradientVector(i, round_t, np.asarray(v, dtype=np.float64)) for i, v in enumerate(vectors)]


class TestConsistencyScores:
    def test_identical_gradients_score_zero(self):
        cohort = cohort_of([[1.0, 2.0]] * 3)
        scores = consistency_scores(cohort)
        assert all(s == 0.0 for s in scores.scores.values())

    def test_hand_computed_three_client_cohort(self):
        s = 1 / math.sqrt(2)
        cohort = cohort_of([[1.0, 0.0], [0.0, 1.0], [s, s]])
        scores = consistency_scores(cohort).scores
        assert abs(scores[0] - 3 * math.pi / 8) < 1e-12
        assert abs(scores[1] - 3 * math.pi / 8) < 1e-12
        assert abs(scores[2] - math.pi / 4) < 1e-12

    def test_fuzz_matches_double_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            size = int(rng.integers(2, 7))
            vectors = {i: list(rng.normal(size=4)) for i in range(size)}
            cohort = cohort_of(list(vectors.values()))
            got = consistency_scores(cohort).scores
            ref = oracles.lgi_reference(vectors, None, None, 1, 10, 20, 80)["scores"]
            assert all(abs(got[i] - ref[i]) <= 1e-9 for i in vectors)

    def test_degenerate_clients_excluded(self):
        cohort = cohort_of([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
        scores = consistency_scores(cohort)
        assert scores.excluded == (1,)
        assert set(scores.scores) == {0, 2}
        # remaining pair scores against each other only
        assert abs(scores.scores[0] - math.pi / 2) < 1e-12

    def test_fewer_than_two_usable_skips_coordination(self):
        with pytest.raises(CoordinationSkipped):
            consistency_scores(cohort_of([[0.0, 0.0], [1.0, 0.0]]))


class TestSelectionRatio:
    def test_final_round_most_stable_hits_k_max(self):
        cfg = LgiConfig(total_rounds=10, k_min=20, k_max=80)
        state = LgiState(nu_min=0.1, nu_max=0.5, round=10)
        # nu == historic minimum -> stability 1, t == T -> time factor 1
        k = selection_ratio(state, cfg, ScoreSet(10, {0: 1.0, 1: 1.2}))
        # scores {1.0, 1.2} -> nu = 0.1 == nu_min
        assert abs(k - 80.0) < 1e-12

    def test_most_volatile_round_pins_k_min(self):
        cfg = LgiConfig(total_rounds=10, k_min=20, k_max=80)
        state = LgiState(nu_min=0.0, nu_max=0.1, round=7)
        k = selection_ratio(state, cfg, ScoreSet(7, {0: 1.0, 1: 1.2}))  # nu = 0.1 = nu_max
        assert abs(k - 20.0) < 1e-12

    def test_direct_substitution_example(self):
        # k_min 20, k_max 80, t/T = 0.5, stability 0.5 -> 20 + 0.25*60 = 35
        cfg = LgiConfig(total_rounds=10, k_min=20, k_max=80)
        state = LgiState(nu_min=0.0, nu_max=0.2, round=5)
        k = selection_ratio(state, cfg, ScoreSet(5, {0: 1.0, 1: 1.2}))  # nu = 0.1, stability 0.5
        assert abs(k - 35.0) < 1e-12

    def test_extremes_updated_before_ratio(self):
        cfg = LgiConfig(total_rounds=4, k_min=20, k_max=80)
        state = LgiState(round=1)
        # first round: extremes adopt nu, degenerate span -> temporal schedule
        k = selection_ratio(state, cfg, ScoreSet(1, {0: 0.5, 1: 1.5}))
        assert abs(k - (20 + 0.25 * 60)) < 1e-12
        assert state.nu_min == state.nu_max == 0.5

    def test_extremes_monotone_over_stream(self):
        cfg = LgiConfig(total_rounds=50, k_min=20, k_max=80)
        state = LgiState()
        rng = np.random.default_rng(1)
        prev_min, prev_max = math.inf, -math.inf
        for t in range(1, 51):
            state.round = t
            scores = {i: float(rng.uniform(0, math.pi)) for i in range(5)}
            k = selection_ratio(state, cfg, ScoreSet(t, scores))
            assert 20.0 <= k <= 80.0
            assert state.nu_min <= prev_min + 1e-15
            assert state.nu_max >= prev_max - 1e-15
            prev_min, prev_max = state.nu_min, state.nu_max

    def test_round_out_of_range_rejected(self):
        cfg = LgiConfig(total_rounds=5)
        with pytest.raises(ConfigError):
            selection_ratio(LgiState(round=0), cfg, ScoreSet(0, {0: 1.0}))
        with pytest.raises(ConfigError):
            selection_ratio(LgiState(round=6), cfg, ScoreSet(6, {0: 1.0}))


class TestSelectTop:
    def test_k_100_selects_everyone(self):
        scores = ScoreSet(1, {0: 0.3, 1: 0.1, 2: 0.2})
        assert select_top(scores, 100.0, 3) == (1, 2, 0)[0:3] or set(select_top(scores, 100.0, 3)) == {0, 1, 2}

    def test_hand_case_selects_most_consistent(self):
        scores = ScoreSet(1, {0: 3 * math.pi / 8, 1: 3 * math.pi / 8, 2: math.pi / 4})
        assert select_top(scores, 30.0, 3) == (2,)  # ceil(0.9) = 1

    def test_tie_breaks_by_client_id(self):
        scores = ScoreSet(1, {0: 0.5, 1: 0.5, 2: 0.5})
        assert select_top(scores, 20.0, 3) == (0,)

    def test_ceiling_count(self):
        scores = ScoreSet(1, {i: float(i) for i in range(10)})
        assert len(select_top(scores, 35.0, 10)) == 4  # ceil(3.5)
        assert len(select_top(scores, 20.0, 10)) == 2

    def test_floor_of_one(self):
        scores = ScoreSet(1, {0: 0.5, 1: 0.6})
        assert len(select_top(scores, 1.0, 2)) == 1


class TestLeaderGradient:
    def test_single_selection_returns_it_exactly(self):
        cohort = cohort_of([[1.0, 2.0], [5.0, 6.0]])
        leader = leader_gradient(cohort, (1,))
        assert np.array_equal(leader.values, [5.0, 6.0])

    def test_mean_of_two(self):
        cohort = cohort_of([[1.0, 0.0], [0.0, 1.0]])
        leader = leader_gradient(cohort, (0, 1))
        assert np.allclose(leader.values, [0.5, 0.5])

    def test_full_selection_is_global_mean(self):
        rng = np.random.default_rng(2)
        vs = [rng.normal(size=6) for _ in range(5)]
        leader = leader_gradient(cohort_of(vs), tuple(range(5)))
        assert np.max(np.abs(leader.values - np.mean(vs, axis=0))) <= 1e-9

    def test_empty_selection_skips(self):
        with pytest.raises(CoordinationSkipped):
            leader_gradient(cohort_of([[1.0, 0.0]]), ())


class TestRunLgi:
    def test_identical_two_client_cohort_temporal_schedule(self):
        cfg = LgiConfig(total_rounds=10, k_min=20, k_max=80)
        state = LgiState()
        cohort = cohort_of([[1.0, 1.0], [1.0, 1.0]], round_t=4)
        out = run_lgi(cohort, state, cfg, round_t=4)
        assert np.array_equal(out.leader.values, [1.0, 1.0])
        assert abs(out.k_percent - (20 + 0.4 * 60)) < 1e-12

    def test_fuzz_matches_independent_reimplementation(self):
        # dim >= 3: in the plane, angle sums around the circle can tie two
        # scores exactly, and the id tie-break then hinges on float noise
        rng = np.random.default_rng(3)
        cfg = LgiConfig(total_rounds=20, k_min=20, k_max=80)
        for _ in range(150):
            state = LgiState(
                nu_min=None if rng.random() < 0.3 else float(rng.uniform(0, 0.2)),
                nu_max=None,
            )
            if state.nu_min is not None:
                state.nu_max = state.nu_min + float(rng.uniform(0, 0.4))
            size = int(rng.integers(2, 7))
            dim = int(rng.integers(3, 9))
            t = int(rng.integers(1, 21))
            vectors = {i: list(rng.normal(size=dim)) for i in range(size)}
            ref = oracles.lgi_reference(vectors, state.nu_min, state.nu_max, t, 20, 20, 80)
            out = run_lgi(cohort_of(list(vectors.values()), round_t=t), state, cfg, round_t=t)
            assert all(abs(out.scores.scores[i] - ref["scores"][i]) <= 1e-9 for i in vectors)
            assert abs(out.k_percent - ref["k"]) <= 1e-9
            assert list(out.selected) == ref["selected"]
            assert np.max(np.abs(out.leader.values - np.array(ref["leader"]))) <= 1e-9
            assert abs(state.nu_min - ref["nu_min"]) <= 1e-12
            assert abs(state.nu_max - ref["nu_max"]) <= 1e-12

    def test_constant_cohort_k_strictly_increasing_in_t(self):
        cfg = LgiConfig(total_rounds=30, k_min=20, k_max=80)
        state = LgiState()
        rng = np.random.default_rng(4)
        vs = [list(rng.normal(size=5)) for _ in range(4)]
        ks = [run_lgi(cohort_of(vs, t), state, cfg, round_t=t).k_percent for t in range(1, 31)]
        assert all(a < b for a, b in zip(ks, ks[1:]))

    def test_selection_boundary_scores_ordered(self):
        rng = np.random.default_rng(5)
        cfg = LgiConfig(total_rounds=10)
        for _ in range(100):
            state = LgiState()
            size = int(rng.integers(3, 8))
            vs = [list(rng.normal(size=4)) for _ in range(size)]
            out = run_lgi(cohort_of(vs, 3), state, cfg, round_t=3)
            inside = [out.scores.scores[i] for i in out.selected]
            outside = [s for i, s in out.scores.scores.items() if i not in out.selected]
            assert 1 <= len(out.selected) <= size
            if outside:
                assert max(inside) <= min(outside) + 1e-15

    def test_leader_permutation_invariance(self):
        rng = np.random.default_rng(6)
        vs = [rng.normal(size=5) for _ in range(5)]
        cohort = cohort_of(vs, 2)
        cfg = LgiConfig(total_rounds=10)
        out_a = run_lgi(cohort, LgiState(), cfg, round_t=2)
        shuffled = [cohort[i] for i in (3, 1, 4, 0, 2)]
        out_b = run_lgi(shuffled, LgiState(), cfg, round_t=2)
        assert out_a.selected == out_b.selected
        assert np.array_equal(out_a.leader.values, out_b.leader.values)

    def test_selection_scale_invariance(self):
        rng = np.random.default_rng(7)
        vs = [rng.normal(size=6) for _ in range(5)]
        cfg = LgiConfig(total_rounds=10)
        out_a = run_lgi(cohort_of(vs, 3), LgiState(), cfg, round_t=3)
        out_b = run_lgi(cohort_of([v * 37.5 for v in vs], 3), LgiState(), cfg, round_t=3)
        assert out_a.selected == out_b.selected
        assert abs(out_a.k_percent - out_b.k_percent) <= 1e-9
        assert all(
            abs(out_a.scores.scores[i] - out_b.scores.scores[i]) <= 1e-9 for i in range(5)
        )

    def test_mode_all_equals_k_forced_100(self):
        rng = np.random.default_rng(8)
        vs = [rng.normal(size=4) for _ in range(5)]
        cfg_100 = LgiConfig(total_rounds=10, k_min=100, k_max=100)
        forced = run_lgi(cohort_of(vs, 1), LgiState(), cfg_100, round_t=1)
        every = run_lgi(cohort_of(vs, 1), LgiState(), LgiConfig(total_rounds=10), round_t=1, mode="all")
        assert forced.selected == every.selected == tuple(range(5))
        assert np.array_equal(forced.leader.values, every.leader.values)

    def test_mode_random_uses_adaptive_count(self):
        rng = np.random.default_rng(9)
        vs = [rng.normal(size=4) for _ in range(6)]
        cfg = LgiConfig(total_rounds=10, k_min=50, k_max=50)
        out = run_lgi(cohort_of(vs, 1), LgiState(), cfg, round_t=1, mode="random", rng=np.random.default_rng(0))
        assert len(out.selected) == 3  # ceil(50% of 6)

    def test_mismatched_lengths_rejected(self):
        cohort = [GradientVector(0, 1, np.ones(3)), GradientVector(1, 1, np.ones(4))]
        with pytest.raises(ConfigError):
            run_lgi(cohort, LgiState(), LgiConfig(total_rounds=5), round_t=1)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            LgiConfig(total_rounds=10, k_min=0.0)
        with pytest.raises(ConfigError):
            LgiConfig(total_rounds=10, k_min=60, k_max=40)
        with pytest.raises(ConfigError):
            LgiConfig(total_rounds=0)
