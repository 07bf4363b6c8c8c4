from __future__ import annotations

import numpy as np
import pytest

from unweaver.core import Scenario, Story, ThreadAssignment, canonicalize
from unweaver.train import (
    AdamState,
    GradReport,
    LossConfig,
    NonFiniteLossError,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    finetune,
    finite_diff_check,
    focal_loss,
    loss_and_grads,
    mean_online_ri,
    pretrain,
    teacher_forced_rollout,
)
from tests.conftest import SMALL_DIMS, make_model


def story_of(labels, seed=0, dim=SMALL_DIMS.clip_dim) -> Story:
    rng = np.random.default_rng(seed)
    return Story(
        id=f"story-{labels}-{seed}",
        clips=rng.normal(size=(len(labels), dim)).astype(np.float32),
        ground_truth=canonicalize(labels),
    )


def uniform_dists(labels):
    """Ground-truth-shaped uniform distributions for a label sequence."""
    dists = []
    for t in range(1, len(labels) + 1):
        n = 1 if t == 1 else max(labels[: t - 1]) + 1
        dists.append(np.full(n, 1.0 / n))
    return dists


class TestTeacherForcedRollout:
    def test_single_clip_story(self, selector, updater):
        m = make_model(selector, updater)
        dists = teacher_forced_rollout(m, story_of([1]))
        assert len(dists) == 1
        np.testing.assert_allclose(dists[0], [1.0])

    def test_distribution_lengths_track_forced_bank(self, selector):
        m = make_model(selector, "gru")
        dists = teacher_forced_rollout(m, story_of([1, 2, 1, 3, 2]))
        assert [len(d) for d in dists] == [1, 2, 3, 3, 4]

    def test_forced_lengths_do_not_depend_on_model_decisions(self):
        # A controller that would always answer "new" still sees a 2-option
        # distribution at t=2 because the bank is forced to one thread.
        m = make_model("linear", "last_clip")
        m.params["new_thread_logit"][:] = 10.0
        dists = teacher_forced_rollout(m, story_of([1, 2]))
        assert len(dists[1]) == 2

    def test_missing_ground_truth_rejected(self):
        m = make_model("linear", "gru")
        bare = Story(id="no-truth", clips=np.zeros((2, 6), dtype=np.float32))
        with pytest.raises(ValueError, match="ground truth"):
            teacher_forced_rollout(m, bare)

    def test_forced_bank_independent_of_controller(self):
        """Swapping the selector leaves the forced bank trajectory unchanged,
        so distributions differ but their shapes and the update inputs match."""
        story = story_of([1, 2, 1, 1, 3])
        m_lin = make_model("linear", "gru", seed=3)
        m_tr = make_model("transformer", "gru", seed=3)
        # Same GRU parameters: copy them over.
        for k, v in m_lin.params.items():
            if k.startswith("gru."):
                m_tr.params[k] = v.copy()
        from unweaver.controller import update_thread

        def forced_states(model):
            bank = {}
            states = []
            for t, y in enumerate(story.ground_truth.labels, start=1):
                prev = bank.get(y, np.zeros(SMALL_DIMS.thread_dim, dtype=np.float32))
                bank[y] = update_thread(model, story.clips[t - 1], prev)
                states.append(bank[y].copy())
            return states

        for a, b in zip(forced_states(m_lin), forced_states(m_tr)):
            np.testing.assert_array_equal(a, b)

    def test_greedy_decoding_differs_from_forcing(self):
        """A controller that errs at t=2 diverges from the forced history."""
        from unweaver.controller import unweave_online

        m = make_model("linear", "last_clip")
        m.params["new_thread_logit"][:] = 10.0  # always starts new threads
        story = story_of([1, 1, 1])
        online, _ = unweave_online(m, story.clips)
        assert online.labels != story.ground_truth.labels


class TestFocalLoss:
    def test_reduces_to_nll(self):
        cfg = LossConfig(alpha_continue=1, alpha_resume=1, alpha_new=1, gamma=0)
        labels = (1, 1)
        dists = [np.array([1.0]), np.array([0.5, 0.5])]
        assert focal_loss(dists, ThreadAssignment(labels), cfg) == pytest.approx(
            0.6931, abs=1e-4
        )

    def test_focal_exponent_value(self):
        cfg = LossConfig(alpha_continue=1, alpha_resume=1, alpha_new=1, gamma=2)
        labels = (1, 1)
        dists = [np.array([1.0]), np.array([0.9, 0.1])]
        assert focal_loss(dists, ThreadAssignment(labels), cfg) == pytest.approx(
            1.0536e-3, abs=1e-6
        )

    def test_perfect_confidence_zero_loss(self):
        cfg = LossConfig()
        labels = (1, 1, 2)
        dists = [np.array([1.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        assert focal_loss(dists, ThreadAssignment(labels), cfg) == pytest.approx(0.0)

    def test_nll_identity_on_random_distributions(self):
        rng = np.random.default_rng(0)
        cfg = LossConfig(alpha_continue=1, alpha_resume=1, alpha_new=1, gamma=0)
        for _ in range(1000):
            labels = [1]
            for _ in range(rng.integers(1, 6)):
                labels.append(int(rng.integers(1, max(labels) + 2)))
            y = canonicalize(labels)
            dists = []
            for t in range(1, len(labels) + 1):
                n = 1 if t == 1 else max(y.labels[: t - 1]) + 1
                p = rng.dirichlet(np.ones(n))
                dists.append(p)
            expected = -sum(
                np.log(dists[t - 1][y.labels[t - 1] - 1]) for t in range(2, len(labels) + 1)
            )
            assert focal_loss(dists, y, cfg) == pytest.approx(expected, abs=1e-9)

    def test_alpha_scales_loss_linearly(self):
        y = canonicalize([1, 1, 2, 1])
        dists = uniform_dists(y.labels)
        base = LossConfig(alpha_continue=1, alpha_resume=5, alpha_new=2, gamma=2)
        doubled = LossConfig(alpha_continue=2, alpha_resume=10, alpha_new=4, gamma=2)
        assert focal_loss(dists, y, base) * 2 == pytest.approx(
            focal_loss(dists, y, doubled), rel=1e-12
        )

    def test_saturation_counted_not_raised(self):
        from unweaver.train import TrainStats

        stats = TrainStats()
        y = ThreadAssignment((1, 1))
        dists = [np.array([1.0]), np.array([0.0, 1.0])]  # truth prob is 0
        value = focal_loss(dists, y, LossConfig(), stats)
        assert np.isfinite(value)
        assert stats.saturations == 1

    def test_rejects_zero_alpha(self):
        with pytest.raises(ValueError):
            LossConfig(alpha_continue=0.0)

    def test_rejects_wrong_distribution_length(self):
        y = ThreadAssignment((1, 1))
        with pytest.raises(ValueError, match="length"):
            focal_loss([np.array([1.0]), np.array([1.0])], y, LossConfig())


class TestLossAndGrads:
    def test_alpha_doubling_doubles_gradients(self):
        m = make_model("linear", "gru")
        batch = [story_of([1, 2, 1, 1])]
        base = LossConfig(alpha_continue=1, alpha_resume=4, alpha_new=2, gamma=2)
        double = LossConfig(alpha_continue=2, alpha_resume=8, alpha_new=4, gamma=2)
        l1, g1, _ = loss_and_grads(m, batch, base)
        l2, g2, _ = loss_and_grads(m, batch, double)
        assert l2 == pytest.approx(2 * l1, rel=1e-5)
        for k in g1:
            np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-4, atol=1e-7)

    def test_new_thread_logit_gets_gradient_via_denominator(self):
        """Even when the new-thread option is never the forced target, its
        logit receives gradient through the softmax normalizer."""
        m = make_model("linear", "gru")
        batch = [story_of([1, 1, 1])]  # never a New decision after t=1
        _, grads, _ = loss_and_grads(m, batch, LossConfig())
        assert abs(grads["new_thread_logit"][0]) > 0

    def test_gamma_suppresses_confident_gradients(self):
        """On a confident batch the gradient norm decreases monotonically in
        the focal exponent."""
        m = make_model("linear", "gru", seed=11)
        story = story_of([1, 1, 1, 1], seed=5)
        # Finetune the model briefly so it is confident on this story.
        cfg = LossConfig(alpha_continue=1, alpha_resume=1, alpha_new=1, gamma=0)
        params = {k: v.copy() for k, v in m.params.items()}
        state = AdamState.initial(params)
        from dataclasses import replace

        for _ in range(150):
            mm = replace(m, params=params)
            _, grads, _ = loss_and_grads(mm, [story], cfg)
            params, state = adam_step(params, grads, state, 1e-2)
        confident = replace(m, params=params)
        dists = teacher_forced_rollout(confident, story)
        assert min(d.max() for d in dists[1:]) > 0.5
        norms = []
        for gamma in (0.0, 1.0, 2.0, 4.0, 8.0):
            _, grads, _ = loss_and_grads(
                confident,
                [story],
                LossConfig(alpha_continue=1, alpha_resume=1, alpha_new=1, gamma=gamma),
            )
            norms.append(np.sqrt(sum(float((g**2).sum()) for g in grads.values())))
        assert all(b < a for a, b in zip(norms, norms[1:]))

    def test_non_finite_loss_names_story(self):
        m = make_model("linear", "gru")
        m.params["new_thread_logit"][:] = np.inf
        with pytest.raises(NonFiniteLossError, match="bad-story"):
            loss_and_grads(
                m,
                [
                    Story(
                        id="bad-story",
                        clips=np.zeros((2, 6), dtype=np.float32),
                        ground_truth=ThreadAssignment((1, 1)),
                    )
                ],
                LossConfig(),
            )


class TestFiniteDiffCheck:
    def test_gradients_within_tolerance(self, selector, updater, mixed_story):
        m = make_model(selector, updater)
        report = finite_diff_check(m, mixed_story, eps=1e-4, max_coords=40)
        assert report.overall < 1e-4, report.format()

    def test_corrupted_gradient_flagged(self, mixed_story, monkeypatch):
        """Self-test: biasing one analytic gradient by +1 must be caught.

        Uses unit temperature and uniform weights so gradients are O(1) and
        an absolute +1 bias is a real corruption."""
        import unweaver.train as train_mod

        m = make_model("linear", "gru", tau=1.0)
        cfg = LossConfig(alpha_continue=1, alpha_resume=1, alpha_new=1, gamma=0)
        real = train_mod.loss_and_grads

        def corrupted(model, stories, loss_cfg, **kwargs):
            loss, grads, stats = real(model, stories, loss_cfg, **kwargs)
            grads["new_thread_logit"] = grads["new_thread_logit"] + 1.0
            return loss, grads, stats

        clean = finite_diff_check(m, mixed_story, cfg, eps=1e-4, max_coords=10)
        assert clean.per_group["new_thread_logit"] < 1e-4
        monkeypatch.setattr(train_mod, "loss_and_grads", corrupted)
        report = finite_diff_check(m, mixed_story, cfg, eps=1e-4, max_coords=10)
        assert report.per_group["new_thread_logit"] > 1e-2
        assert report.overall > 1e-2

    def test_report_format_lists_groups(self, mixed_story):
        m = make_model("linear", "gru")
        report = finite_diff_check(m, mixed_story, max_coords=5)
        text = report.format()
        assert "new_thread_logit" in text and "overall" in text


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        params = {"w": np.ones((2, 2))}
        grads = {"w": np.zeros((2, 2))}
        new, state = adam_step(params, grads, AdamState.initial(params), lr=0.1)
        np.testing.assert_array_equal(new["w"], params["w"])
        assert state.step == 1

    def test_first_step_moves_against_sign(self):
        params = {"w": np.zeros(3)}
        grads = {"w": np.array([1.0, -2.0, 0.5])}
        new, _ = adam_step(params, grads, AdamState.initial(params), lr=0.01)
        # Bias correction makes the first step magnitude ~lr.
        np.testing.assert_allclose(new["w"], -0.01 * np.sign(grads["w"]), rtol=1e-3)

    def test_pure_function_of_inputs(self):
        rng = np.random.default_rng(0)
        params = {"w": rng.normal(size=4)}
        grads = {"w": rng.normal(size=4)}
        state = AdamState.initial(params)
        a_params, a_state = adam_step(params, grads, state, lr=0.05)
        b_params, b_state = adam_step(params, grads, state, lr=0.05)
        np.testing.assert_array_equal(a_params["w"], b_params["w"])
        np.testing.assert_array_equal(a_state.m["w"], b_state.m["w"])
        assert a_state.step == b_state.step == 1


def _batch_iter(stories, size):
    while True:
        yield stories[:size]


class TestPretrain:
    def test_zero_steps_returns_model_unchanged(self):
        m = make_model("linear", "gru")
        cfg = TrainConfig(steps=0, batch_size=2, lr_schedule=((0, 1e-3),), seed=0)
        out = pretrain(m, _batch_iter([story_of([1, 1])], 2), cfg)
        assert out is m

    def test_determinism_bitwise(self):
        stories = [story_of([1, 2, 1], seed=s) for s in range(4)]
        cfg = TrainConfig(steps=5, batch_size=2, lr_schedule=((0, 1e-3),), seed=7)

        def run():
            m = make_model("transformer", "gru", seed=3)
            return pretrain(m, _batch_iter(stories, 2), cfg)

        a, b = run(), run()
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()

    def test_divergence_aborts_with_checkpoint(self, tmp_path, monkeypatch):
        import unweaver.train as train_mod

        m = make_model("linear", "gru")
        stories = [story_of([1, 2])]
        cfg = TrainConfig(
            steps=10, batch_size=1, lr_schedule=((0, 1e-3),), seed=0, checkpoint_interval=2
        )
        saved = []

        def save(model, path):
            saved.append(path)

        real = train_mod.loss_and_grads
        calls = {"n": 0}

        def exploding(model, batch, loss_cfg, **kwargs):
            calls["n"] += 1
            if calls["n"] > 5:
                raise NonFiniteLossError("poison")
            return real(model, batch, loss_cfg, **kwargs)

        monkeypatch.setattr(train_mod, "loss_and_grads", exploding)
        with pytest.raises(TrainingDiverged, match="poison") as err:
            pretrain(m, _batch_iter(stories, 1), cfg, checkpoint_dir=tmp_path, save_checkpoint=save)
        assert err.value.checkpoint_path is not None
        assert saved  # a good checkpoint was written before the abort

    def test_lr_schedule_lookup(self):
        cfg = TrainConfig(steps=10, lr_schedule=((0, 1e-3), (5, 1e-4)), seed=0)
        assert cfg.lr_at(0) == 1e-3
        assert cfg.lr_at(4) == 1e-3
        assert cfg.lr_at(5) == 1e-4
        with pytest.raises(ValueError):
            TrainConfig(steps=1, lr_schedule=((0, 1e-3), (0, 1e-4)))
        with pytest.raises(ValueError):
            TrainConfig(steps=1, lr_schedule=((5, 1e-3),))

    def test_training_log_written(self, tmp_path):
        m = make_model("linear", "gru")
        cfg = TrainConfig(steps=3, batch_size=1, lr_schedule=((0, 1e-3),), seed=0)
        log = tmp_path / "log.csv"
        pretrain(m, _batch_iter([story_of([1, 2, 1])], 1), cfg, log_path=log)
        lines = log.read_text().strip().splitlines()
        assert lines[0].startswith("step,loss,lr")
        assert len(lines) == 4


class TestFinetune:
    def _separable_stories(self, count, seed):
        """Two well-separated activity directions; threads are obvious."""
        rng = np.random.default_rng(seed)
        a = np.zeros(6, dtype=np.float32)
        a[0] = 1.0
        b = np.zeros(6, dtype=np.float32)
        b[1] = 1.0
        stories = []
        for i in range(count):
            labels, clips = [], []
            current = 0
            for t in range(6):
                if t > 0 and rng.random() < 0.3:
                    current = 1 - current
                labels.append(current + 1)
                base = a if current == 0 else b
                clips.append(base + 0.05 * rng.normal(size=6).astype(np.float32))
            stories.append(
                Story(
                    id=f"sep-{seed}-{i}",
                    clips=np.stack(clips).astype(np.float32),
                    ground_truth=canonicalize(labels),
                )
            )
        return stories

    def test_empty_split_rejected(self):
        m = make_model("linear", "gru")
        cfg = TrainConfig(steps=1, lr_schedule=((0, 1e-3),), seed=0)
        with pytest.raises(ValueError, match="non-empty"):
            finetune(m, [], [story_of([1, 1])], cfg)

    def test_patience_zero_stops_after_first_non_improvement(self):
        m = make_model("linear", "gru")
        train_set = self._separable_stories(8, 0)
        cfg = TrainConfig(
            steps=50, batch_size=4, lr_schedule=((0, 0.0),), seed=0, patience=0, eval_interval=1
        )
        # lr 0 means no improvement is possible; the loop must stop early.
        out = finetune(m, train_set, train_set, cfg)
        for k in out.params:
            np.testing.assert_array_equal(out.params[k], m.params[k])

    def test_val_ri_reaches_train_ri_on_separable_data(self):
        m = make_model("linear", "gru", seed=5)
        train_set = self._separable_stories(12, 1)
        cfg = TrainConfig(
            steps=120, batch_size=6, lr_schedule=((0, 5e-3),), seed=0, patience=5, eval_interval=20
        )
        out = finetune(m, train_set, train_set, cfg)
        assert mean_online_ri(out, train_set) >= 0.9
