from __future__ import annotations

import math
from itertools import combinations

import numpy as np
import pytest

from unweaver.core import Scenario, Story, canonicalize, scenario_of
from unweaver.metrics import (
    PairCounts,
    StoryEval,
    bell_number,
    co_membership,
    evaluate_assignments,
    expected_ri_chance,
    expected_ri_single_thread,
    expected_thread_count_chance,
    iter_partitions,
    pair_counts,
    rand_index,
    rand_index_matrix,
    ri_by_length,
    sample_uniform_partition,
    stirling2,
    summarize,
    tfa,
    thread_count_error,
)


def ri_bruteforce(g, p) -> float:
    """Independent oracle: explicit loop over clip pairs."""
    t = len(g)
    agree = 0
    for i, j in combinations(range(t), 2):
        agree += (g[i] == g[j]) == (p[i] == p[j])
    return agree / math.comb(t, 2)


class TestRandIndex:
    def test_identical_partitions(self):
        assert rand_index([1, 1, 2], [1, 1, 2]) == 1.0

    def test_hand_worked_example(self):
        # G={{1,2},{3}} vs P=singletons: one pair disagrees (FN), two agree.
        assert rand_index([1, 1, 2], [1, 2, 3]) == pytest.approx(2 / 3)

    def test_symmetry_on_random_partitions(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            t = int(rng.integers(2, 9))
            g = canonicalize(rng.integers(1, 4, size=t) + 0).labels
            p = canonicalize(rng.integers(1, 4, size=t) + 0).labels
            assert rand_index(g, p) == rand_index(p, g)

    def test_accepts_set_of_sets(self):
        g = frozenset({frozenset({1, 2}), frozenset({3})})
        assert rand_index(g, [1, 1, 2]) == 1.0

    def test_matches_bruteforce_exhaustively_small(self):
        for t in (2, 3, 4, 5):
            parts = list(iter_partitions(t))
            for g in parts:
                for p in parts:
                    assert rand_index(g, p) == pytest.approx(ri_bruteforce(g, p))

    def test_single_clip_rejected(self):
        with pytest.raises(ValueError):
            rand_index([1], [1])

    def test_mismatched_universes_rejected(self):
        with pytest.raises(ValueError):
            rand_index([1, 1], [1, 1, 2])


class TestPairCounts:
    def test_counts_sum_to_pairs(self):
        pc = pair_counts([1, 1, 2, 3], [1, 2, 2, 3])
        assert pc.total == math.comb(4, 2)
        assert pc == PairCounts(tp=0, fp=1, tn=4, fn=1)


class TestBellStirling:
    def test_base_cases(self):
        assert bell_number(0) == 1
        assert bell_number(1) == 1
        assert stirling2(3, 2) == 3
        assert stirling2(5, 5) == 1
        assert stirling2(5, 1) == 1

    def test_bell_small_values(self):
        assert bell_number(3) == 5
        assert bell_number(10) == 115975

    def test_bell_matches_enumeration(self):
        for t in range(1, 11):
            assert bell_number(t) == sum(1 for _ in iter_partitions(t))

    def test_stirling_sums_to_bell(self):
        for t in range(0, 13):
            assert sum(stirling2(t, n) for n in range(0, t + 1)) == bell_number(t)

    def test_stirling_matches_enumeration_by_block_count(self):
        for t in range(1, 9):
            counts: dict[int, int] = {}
            for labels in iter_partitions(t):
                counts[max(labels)] = counts.get(max(labels), 0) + 1
            for n in range(1, t + 1):
                assert stirling2(t, n) == counts.get(n, 0)

    def test_range_guards(self):
        with pytest.raises(ValueError):
            bell_number(31)
        with pytest.raises(ValueError):
            bell_number(-1)
        with pytest.raises(ValueError):
            stirling2(10, 11)
        with pytest.raises(ValueError):
            stirling2(31, 2)


class TestExpectedRi:
    def test_single_thread_truth_is_one(self):
        assert expected_ri_single_thread([1] * 7) == 1.0

    def test_hand_worked_two_one(self):
        assert expected_ri_single_thread([1, 1, 2]) == pytest.approx(1 / 3)

    def test_single_thread_matches_actual_baseline(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            t = int(rng.integers(2, 10))
            g = canonicalize(rng.integers(1, 4, size=t) + 0).labels
            assert expected_ri_single_thread(g) == pytest.approx(
                rand_index(g, [1] * t)
            )

    def test_chance_value_t3(self):
        assert expected_ri_chance([1, 1, 1]) == pytest.approx(0.4)

    def test_chance_value_t10_single_thread(self):
        expected = bell_number(9) / bell_number(10)
        assert expected == pytest.approx(21147 / 115975)
        assert expected_ri_chance([1] * 10) == pytest.approx(expected)
        assert expected_ri_chance([1] * 10) == pytest.approx(0.1823, abs=5e-4)

    def test_chance_matches_enumeration(self):
        rng = np.random.default_rng(2)
        for t in range(2, 9):
            for _ in range(3):
                g = canonicalize(rng.integers(1, 4, size=t) + 0).labels
                co_g = co_membership(g)
                total = 0.0
                count = 0
                for p in iter_partitions(t):
                    total += float(np.mean(co_g == co_membership(p)))
                    count += 1
                assert expected_ri_chance(g) == pytest.approx(total / count, abs=1e-9)

    def test_chance_thread_count_enumeration(self):
        for t in range(1, 10):
            mean_threads = np.mean([max(p) for p in iter_partitions(t)])
            assert expected_thread_count_chance(t) == pytest.approx(mean_threads, abs=1e-9)

    def test_chance_thread_count_t3(self):
        assert expected_thread_count_chance(3) == pytest.approx(2.0)


class TestUniformPartitionSampler:
    def test_matches_enumeration_frequencies(self):
        rng = np.random.default_rng(3)
        t = 4
        parts = list(iter_partitions(t))
        counts = {p: 0 for p in parts}
        n = 30000
        for _ in range(n):
            counts[sample_uniform_partition(t, rng)] += 1
        expected = n / len(parts)
        chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
        # 14 degrees of freedom; 0.999 quantile is about 36.1
        assert chi2 < 36.1


class TestThreadCountError:
    def test_signed_difference(self):
        assert thread_count_error([1, 1, 2], [1, 2, 3]) == 1
        assert thread_count_error([1, 2, 3], [1, 1, 1]) == -2

    def test_single_thread_baseline_identity(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            t = int(rng.integers(2, 9))
            g = canonicalize(rng.integers(1, 4, size=t) + 0).labels
            n = len(set(g))
            assert thread_count_error(g, [1] * t) == 1 - n


def _story(labels, seed=0):
    rng = np.random.default_rng(seed)
    return Story(
        id=f"m{seed}",
        clips=rng.normal(size=(len(labels), 3)).astype(np.float32),
        ground_truth=canonicalize(labels),
    )


class TestTfa:
    def test_perfect_oracle_scores_one_everywhere(self):
        stories = [_story([1, 1, 2, 1]), _story([1, 2, 2])]
        report = tfa(lambda s, t: 1.0, stories)
        assert report.overall == 1.0
        assert all(v == 1.0 for v in report.by_threads.values())

    def test_single_thread_baseline_hand_example(self):
        from unweaver.baselines import tfa_score_single_thread

        story = _story([1, 2, 1])
        assert tfa_score_single_thread(story, 2) == 0.0  # truth is New
        assert tfa_score_single_thread(story, 3) == pytest.approx(0.5)

    def test_chance_probability_formula(self):
        from unweaver.baselines import tfa_score_chance

        story = _story([1, 2, 1, 3])
        assert tfa_score_chance(story, 2) == pytest.approx(1 / 2)
        assert tfa_score_chance(story, 3) == pytest.approx(1 / 3)
        assert tfa_score_chance(story, 4) == pytest.approx(1 / 3)

    def test_always_new_predictor_equals_new_frequency(self):
        """Cross-check the aggregate two ways, per the sanity property."""
        rng = np.random.default_rng(5)
        stories = []
        for i in range(30):
            labels = [1]
            for _ in range(int(rng.integers(1, 8))):
                labels.append(int(rng.integers(1, max(labels) + 2)))
            stories.append(_story(labels, seed=i))

        def always_new(story, t):
            truth = story.ground_truth
            return 1.0 if scenario_of(truth, t) == Scenario.NEW else 0.0

        report = tfa(always_new, stories)
        decisions = [
            scenario_of(s.ground_truth, t)
            for s in stories
            if len(s) >= 2
            for t in range(2, len(s) + 1)
        ]
        frequency = sum(1 for d in decisions if d == Scenario.NEW) / len(decisions)
        assert report.overall == pytest.approx(frequency)

    def test_single_clip_stories_excluded_entirely(self):
        stories = [_story([1]), _story([1, 1])]
        report = tfa(lambda s, t: 1.0, stories)
        assert sum(report.counts.values()) == 1

    def test_prefix_vs_story_grouping(self):
        story = _story([1, 1, 2])
        prefix = tfa(lambda s, t: 1.0, [story], grouping="prefix")
        by_story = tfa(lambda s, t: 1.0, [story], grouping="story")
        assert set(prefix.counts) == {1, 2}  # t=2 sees 1 thread, t=3 sees 2
        assert set(by_story.counts) == {2}

    def test_by_step_series(self):
        stories = [_story([1, 1, 1]), _story([1, 2])]
        report = tfa(lambda s, t: 1.0, stories)
        assert set(report.by_step) == {2, 3}


class TestReports:
    def _evals(self):
        stories = [_story([1, 1], seed=1), _story([1, 2], seed=2), _story([1, 1, 2], seed=3)]
        preds = [(1, 1), (1, 1), (1, 2, 2)]
        return evaluate_assignments(stories, preds)

    def test_bucket_averages_single_story_buckets(self):
        evals = self._evals()
        report = summarize(evals)
        assert report.bucket_counts == {1: 1, 2: 2}
        assert report.ri_by_bucket[1] == 1.0

    def test_overall_weights_stories_equally(self):
        evals = self._evals()
        report = summarize(evals)
        assert report.ri_overall == pytest.approx(np.mean([e.ri for e in evals]))
        assert report.ri_bucket_mean == pytest.approx(
            np.mean(list(report.ri_by_bucket.values()))
        )

    def test_empty_results_rejected(self):
        with pytest.raises(ValueError):
            summarize([])

    def test_table_is_deterministic(self):
        evals = self._evals()
        assert summarize(evals).format_table("m") == summarize(evals).format_table("m")

    def test_ri_by_length_bins(self):
        evals = [
            StoryEval("a", 4, 1, 1, 1.0, 0),
            StoryEval("b", 6, 1, 1, 0.5, 0),
            StoryEval("c", 7, 1, 1, 0.7, 0),
        ]
        bins = ri_by_length(evals, bin_width=5)
        assert bins["0-4"] == pytest.approx(1.0)
        assert bins["5-9"] == pytest.approx(0.6)


class TestRandIndexMatrix:
    def test_matches_pairwise_calls(self):
        parts = list(iter_partitions(4))
        co = np.stack([co_membership(p) for p in parts])
        matrix = rand_index_matrix(co, co)
        for i, g in enumerate(parts):
            for j, p in enumerate(parts):
                assert matrix[i, j] == pytest.approx(rand_index(g, p))
