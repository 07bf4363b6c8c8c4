"""End-to-end pipelines: data preparation, training regimes, evaluation.

Three disjoint streams (train/val/test worlds spawned from the master seed)
mirror the source-video splits: synthetic pretraining and natural training
stories come from the train stream, threshold fitting and early stopping use
the val stream, and reported numbers come from the test stream only.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .baselines import (
    ClusteringConfig,
    PredictabilityConfig,
    fit_predictability,
    fit_threshold,
    online_cluster,
    predict_single_thread,
    predictability,
    tfa_score_chance,
    tfa_score_cluster,
    tfa_score_predictability,
    tfa_score_single_thread,
)
from .config import RunConfig
from .controller import Model, init_model, unweave_online
from .core import Story
from .metrics import (
    MetricsReport,
    ScoreFn,
    TfaReport,
    evaluate_assignments,
    expected_ri_chance,
    expected_thread_count_chance,
    summarize,
    tfa,
)
from .storygen import (
    FeatureStream,
    extract_natural_stories,
    generate_stream,
    synthetic_batches,
)
from .train import (
    LossConfig,
    finetune,
    mean_online_ri,
    pretrain,
    teacher_forced_rollout,
)


@dataclass(frozen=True)
class DataBundle:
    """Streams and natural-story splits for one run.

    Each split owns disjoint streams (fresh activity directions per stream),
    so evaluation always measures transfer to unseen feature geometry."""

    train_streams: list[FeatureStream]
    val_streams: list[FeatureStream]
    test_streams: list[FeatureStream]
    natural_train: list[Story]
    natural_val: list[Story]
    natural_test: list[Story]


def _natural_split(
    cfg: RunConfig, streams: list[FeatureStream], count: int, name: str
) -> list[Story]:
    rng = np.random.default_rng(cfg.component_seed(f"natural-{name}"))
    stories: list[Story] = []
    per_stream = [count // len(streams)] * len(streams)
    for i in range(count % len(streams)):
        per_stream[i] += 1
    for stream, n in zip(streams, per_stream):
        stories.extend(
            extract_natural_stories(
                stream,
                window_len=cfg.eval.natural_window,
                clip_len=cfg.eval.natural_clip_len,
                rng=rng,
                count=n,
                prefix=f"nat-{name}",
            )
        )
    return stories


def build_data(cfg: RunConfig) -> DataBundle:
    splits = {
        "train": cfg.eval.train_streams,
        "val": cfg.eval.val_streams,
        "test": cfg.eval.test_streams,
    }
    streams = {
        name: [
            generate_stream(cfg.world_config(f"stream-{name}", index=i))
            for i in range(count)
        ]
        for name, count in splits.items()
    }
    return DataBundle(
        train_streams=streams["train"],
        val_streams=streams["val"],
        test_streams=streams["test"],
        natural_train=_natural_split(cfg, streams["train"], cfg.eval.train_stories, "train"),
        natural_val=_natural_split(cfg, streams["val"], cfg.eval.val_stories, "val"),
        natural_test=_natural_split(cfg, streams["test"], cfg.eval.test_stories, "test"),
    )


def init_run_model(cfg: RunConfig, seed: int | None = None) -> Model:
    return init_model(
        selector=cfg.model.selector,
        updater=cfg.model.updater,
        dims=cfg.model.dims(cfg.world.clip_dim),
        seed=cfg.component_seed("model-init") if seed is None else seed,
        tau=cfg.model.tau,
        dropout_rate=cfg.model.dropout_rate,
        learned_empty=cfg.model.learned_empty,
    )


def pretrain_model(
    cfg: RunConfig,
    bundle: DataBundle,
    log_path: Path | None = None,
    checkpoint_dir: Path | None = None,
) -> Model:
    """SS regime: train on freshly woven synthetic stories."""
    from .persist import save_checkpoint

    model = init_run_model(cfg)
    batches = synthetic_batches(
        bundle.train_streams,
        cfg.story,
        cfg.train.batch_size,
        seed=cfg.component_seed("pretrain-batches"),
    )
    return pretrain(
        model,
        batches,
        cfg.train.pretrain_config(cfg.component_seed("pretrain-loop")),
        loss_cfg=cfg.loss,
        log_path=log_path,
        checkpoint_dir=checkpoint_dir,
        save_checkpoint=lambda m, p: save_checkpoint(m, p),
    )


def finetune_model(
    cfg: RunConfig,
    model: Model,
    bundle: DataBundle,
    seed: int | None = None,
    log_path: Path | None = None,
) -> Model:
    """AS stage: finetune on natural train stories, early stop on val RI."""
    loop_seed = cfg.component_seed("finetune-loop") if seed is None else seed
    return finetune(
        model,
        bundle.natural_train,
        bundle.natural_val,
        cfg.train.finetune_config(loop_seed),
        loss_cfg=cfg.loss,
        log_path=log_path,
    )


def train_regime(
    cfg: RunConfig,
    bundle: DataBundle,
    regime: str,
    pretrained: Model | None = None,
    seed: int | None = None,
) -> Model:
    """SS = pretrain only; AS = finetune from random init; SS+AS = both."""
    if regime == "ss":
        return pretrained if pretrained is not None else pretrain_model(cfg, bundle)
    if regime == "as":
        return finetune_model(cfg, init_run_model(cfg, seed), bundle, seed=seed)
    if regime == "ss+as":
        base = pretrained if pretrained is not None else pretrain_model(cfg, bundle)
        return finetune_model(cfg, base, bundle, seed=seed)
    raise ValueError(f"unknown regime {regime!r} (expected ss, as, or ss+as)")


# -- evaluation -------------------------------------------------------------------


def model_assignments(model: Model, stories: Sequence[Story]):
    return [unweave_online(model, s.clips)[0] for s in stories]


def make_model_scorer(model: Model) -> ScoreFn:
    """Forced-history 0/1 scorer for TFA; rollouts are cached per story."""
    cache: dict[str, list[np.ndarray]] = {}

    def score(story: Story, t: int) -> float:
        dists = cache.get(story.id)
        if dists is None:
            dists = teacher_forced_rollout(model, story)
            cache[story.id] = dists
        predicted = int(np.argmax(dists[t - 1])) + 1
        return 1.0 if predicted == story.ground_truth.labels[t - 1] else 0.0

    return score


def make_cluster_scorer(cfg: ClusteringConfig) -> ScoreFn:
    return lambda story, t: tfa_score_cluster(story, t, cfg)


def make_predictability_scorer(cfg: PredictabilityConfig) -> ScoreFn:
    return lambda story, t: tfa_score_predictability(story, t, cfg)


@dataclass(frozen=True)
class MethodEval:
    """One method's scores on a story set."""

    name: str
    report: MetricsReport
    tfa_prefix: TfaReport | None
    tfa_story: TfaReport | None


def evaluate_method(
    name: str,
    stories: Sequence[Story],
    assignments=None,
    score_fn: ScoreFn | None = None,
    analytic_ri: Callable[[Story], float] | None = None,
    analytic_dn: Callable[[Story], float] | None = None,
) -> MethodEval:
    """Score a method from its predicted assignments (or analytic forms)."""
    scorable = [s for s in stories if len(s) >= 2]
    if analytic_ri is not None:
        from .metrics import StoryEval

        evals = []
        for s in scorable:
            truth = s.ground_truth.labels
            n_truth = len(set(truth))
            dn = analytic_dn(s) if analytic_dn is not None else float("nan")
            evals.append(
                StoryEval(
                    story_id=s.id,
                    length=len(s),
                    truth_threads=n_truth,
                    pred_threads=n_truth + int(round(dn)) if analytic_dn else n_truth,
                    ri=analytic_ri(s),
                    dn=int(round(dn)) if analytic_dn else 0,
                )
            )
        report = summarize(evals)
    else:
        report = summarize(evaluate_assignments(scorable, assignments))
    tfa_prefix = tfa(score_fn, scorable, grouping="prefix") if score_fn else None
    tfa_story = tfa(score_fn, scorable, grouping="story") if score_fn else None
    return MethodEval(name=name, report=report, tfa_prefix=tfa_prefix, tfa_story=tfa_story)


def evaluate_baselines(
    stories: Sequence[Story],
    val_stories: Sequence[Story],
) -> tuple[list[MethodEval], ClusteringConfig, PredictabilityConfig]:
    """Fit thresholds on the validation set, then evaluate every baseline."""
    scorable = [s for s in stories if len(s) >= 2]
    cluster_cfg = fit_threshold(val_stories)
    predict_cfg = fit_predictability(val_stories)
    evals = [
        evaluate_method(
            "single-thread",
            scorable,
            assignments=[predict_single_thread(s) for s in scorable],
            score_fn=tfa_score_single_thread,
        ),
        evaluate_method(
            "chance",
            scorable,
            score_fn=tfa_score_chance,
            analytic_ri=lambda s: expected_ri_chance(s.ground_truth.labels),
            analytic_dn=lambda s: expected_thread_count_chance(len(s))
            - len(set(s.ground_truth.labels)),
        ),
        evaluate_method(
            "online-clustering",
            scorable,
            assignments=[online_cluster(s, cluster_cfg) for s in scorable],
            score_fn=make_cluster_scorer(cluster_cfg),
        ),
        evaluate_method(
            "predictability",
            scorable,
            assignments=[predictability(s, predict_cfg) for s in scorable],
            score_fn=make_predictability_scorer(predict_cfg),
        ),
    ]
    return evals, cluster_cfg, predict_cfg


def evaluate_model(model: Model, stories: Sequence[Story], name: str = "model") -> MethodEval:
    scorable = [s for s in stories if len(s) >= 2]
    return evaluate_method(
        name,
        scorable,
        assignments=model_assignments(model, scorable),
        score_fn=make_model_scorer(model),
    )


def regime_comparison(
    cfg: RunConfig,
    bundle: DataBundle,
    seeds: Sequence[int],
    pretrained: Model | None = None,
) -> dict:
    """Mean test RI for AS vs SS+AS over finetune seeds (shared pretrain)."""
    if pretrained is None:
        pretrained = pretrain_model(cfg, bundle)
    rows = []
    for seed in seeds:
        as_model = train_regime(cfg, bundle, "as", seed=seed)
        ssas_model = train_regime(cfg, bundle, "ss+as", pretrained=pretrained, seed=seed)
        rows.append(
            {
                "seed": seed,
                "ri_as": mean_online_ri(as_model, bundle.natural_test),
                "ri_ss_as": mean_online_ri(ssas_model, bundle.natural_test),
            }
        )
    diffs = [r["ri_ss_as"] - r["ri_as"] for r in rows]
    return {
        "per_seed": rows,
        "median_gain": float(np.median(diffs)),
        "ri_ss": mean_online_ri(pretrained, bundle.natural_test),
    }
