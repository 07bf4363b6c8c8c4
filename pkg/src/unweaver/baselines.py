"""Non-learnt and lightly-fitted baselines for the unweaving task.

``single_thread`` puts everything in one thread; the analytic random-chance
expectations live in :mod:`unweaver.metrics`. ``online_cluster`` greedily
joins the most similar existing thread when the mean member cosine beats a
threshold. ``predictability`` detects feature-change boundaries (smoothed
with a Laplacian-of-Gaussian kernel) and splits the story at them, so its
output never resumes a thread.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Story, ThreadAssignment
from .metrics import rand_index


@dataclass(frozen=True)
class ClusteringConfig:
    """Join threshold on mean member cosine similarity."""

    threshold: float = 0.645

    def __post_init__(self) -> None:
        if not np.isfinite(self.threshold):
            raise ValueError("threshold must be finite")


@dataclass(frozen=True)
class PredictabilityConfig:
    """Boundary scoring settings, all in clip units."""

    sigma: float = 1.5
    window: int = 3
    stride: int = 1
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.sigma <= 0 or self.window < 1 or self.stride < 1:
            raise ValueError("sigma and window must be positive")


def predict_single_thread(story: Story) -> ThreadAssignment:
    return ThreadAssignment(tuple([1] * len(story)))


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(u) * np.linalg.norm(v)), 1e-12)
    return float(np.dot(u, v)) / denom


def _mean_member_similarity(clip: np.ndarray, members: Sequence[np.ndarray]) -> float:
    return float(np.mean([_cosine(clip, m) for m in members]))


def _pairwise_cosines(clips: np.ndarray) -> np.ndarray:
    norms = np.maximum(np.linalg.norm(clips, axis=1, keepdims=True), 1e-12)
    unit = clips / norms
    return unit @ unit.T


def _cluster_labels(cos: np.ndarray, threshold: float) -> tuple[int, ...]:
    labels = [1]
    members: list[list[int]] = [[0]]
    for t in range(1, cos.shape[0]):
        sims = [float(np.mean(cos[t, m])) for m in members]
        best = int(np.argmax(sims))
        if sims[best] > threshold:
            labels.append(best + 1)
            members[best].append(t)
        else:
            members.append([t])
            labels.append(len(members))
    return tuple(labels)


def online_cluster(story: Story, cfg: ClusteringConfig) -> ThreadAssignment:
    """Greedy online clustering: join the best thread or start a new one."""
    return ThreadAssignment(_cluster_labels(_pairwise_cosines(story.clips), cfg.threshold))


def cluster_decision_forced(story: Story, t: int, cfg: ClusteringConfig) -> int:
    """Clustering decision at step t with clusters forced to the truth.

    Members at step t are clips 1..t-1 grouped by their ground-truth labels;
    returns the 1-based decision (existing thread or new)."""
    labels = story.ground_truth.labels
    n = max(labels[: t - 1])
    groups: dict[int, list[np.ndarray]] = {}
    for i in range(t - 1):
        groups.setdefault(labels[i], []).append(story.clips[i])
    sims = [_mean_member_similarity(story.clips[t - 1], groups[i + 1]) for i in range(n)]
    best = int(np.argmax(sims))
    if sims[best] > cfg.threshold:
        return best + 1
    return n + 1


THRESHOLD_GRID = np.round(np.arange(-1.0, 1.0 + 1e-9, 0.005), 6)


def fit_threshold(val_stories: Sequence[Story]) -> ClusteringConfig:
    """Grid-search the join threshold for best mean RI (ties -> smallest)."""
    if not val_stories:
        raise ValueError("empty validation set")
    usable = [s for s in val_stories if len(s) >= 2]
    if not usable:
        raise ValueError("no scorable validation stories")
    cos = [_pairwise_cosines(s.clips) for s in usable]
    best_thr, best_ri = None, -1.0
    for thr in THRESHOLD_GRID:
        ri = float(
            np.mean(
                [
                    rand_index(s.ground_truth.labels, _cluster_labels(c, float(thr)))
                    for s, c in zip(usable, cos)
                ]
            )
        )
        if ri > best_ri:
            best_thr, best_ri = float(thr), ri
    return ClusteringConfig(threshold=best_thr)


def _log_kernel(sigma: float, window: int) -> np.ndarray:
    """Negated Laplacian-of-Gaussian sampled at integer offsets.

    k(x) = (1 - x^2/sigma^2) * exp(-x^2 / (2 sigma^2)), peak 1 at the center
    with negative side lobes, so convolving the dissimilarity signal yields a
    sharp positive response at feature-change points.
    """
    xs = np.arange(-window, window + 1, dtype=np.float64)
    return (1.0 - (xs / sigma) ** 2) * np.exp(-(xs**2) / (2 * sigma**2))


def boundary_scores(story: Story, cfg: PredictabilityConfig) -> np.ndarray:
    """Smoothed change score for each inter-clip edge (edge e sits between
    clips e and e+1, 1-based); zero-padded at the ends."""
    clips = story.clips
    dissim = np.array(
        [1.0 - _cosine(clips[i], clips[i + 1]) for i in range(len(story) - 1)]
    )
    if dissim.size == 0:
        return dissim
    kernel = _log_kernel(cfg.sigma, cfg.window)
    padded = np.pad(dissim, cfg.window)
    return np.convolve(padded, kernel, mode="valid")


def predictability(story: Story, cfg: PredictabilityConfig) -> ThreadAssignment:
    """Split the story at smoothed-change local maxima above the threshold.

    Threads are runs between boundaries, numbered left to right; no label is
    ever reused, so the output contains no resumes.
    """
    scores = boundary_scores(story, cfg)
    return _labels_from_boundaries(len(story), predictability_boundaries(scores, cfg))


def _labels_from_boundaries(length: int, boundaries: set[int]) -> ThreadAssignment:
    labels = []
    current = 1
    for i in range(length):
        labels.append(current)
        if (i + 1) in boundaries:
            current += 1
    return ThreadAssignment(tuple(labels))


def predictability_boundaries(scores: np.ndarray, cfg: PredictabilityConfig) -> set[int]:
    """Edges (1-based) that are local maxima above the threshold, honoring the
    evaluation stride."""
    boundaries = set()
    for e in range(len(scores)):
        if e % cfg.stride != 0:
            continue
        left = scores[e - 1] if e > 0 else -math.inf
        right = scores[e + 1] if e + 1 < len(scores) else -math.inf
        if scores[e] > cfg.threshold and scores[e] >= left and scores[e] >= right:
            boundaries.add(e + 1)
    return boundaries


def fit_predictability(val_stories: Sequence[Story], cfg: PredictabilityConfig | None = None) -> PredictabilityConfig:
    """Fit the boundary threshold on validation mean RI (grid 0..2).

    Boundary scores are threshold-independent, so they are computed once."""
    if not val_stories:
        raise ValueError("empty validation set")
    base = cfg or PredictabilityConfig()
    usable = [s for s in val_stories if len(s) >= 2]
    if not usable:
        raise ValueError("no scorable validation stories")
    all_scores = [boundary_scores(s, base) for s in usable]
    best_thr, best_ri = None, -1.0
    for thr in np.round(np.arange(0.0, 2.0 + 1e-9, 0.005), 6):
        candidate = PredictabilityConfig(
            sigma=base.sigma, window=base.window, stride=base.stride, threshold=float(thr)
        )
        total = 0.0
        for story, scores in zip(usable, all_scores):
            assignment = _labels_from_boundaries(
                len(story), predictability_boundaries(scores, candidate)
            )
            total += rand_index(story.ground_truth.labels, assignment.labels)
        ri = total / len(usable)
        if ri > best_ri:
            best_thr, best_ri = float(thr), ri
    return PredictabilityConfig(
        sigma=base.sigma, window=base.window, stride=base.stride, threshold=best_thr
    )


# -- forced-history TFA score functions ------------------------------------------


def tfa_score_single_thread(story: Story, t: int) -> float:
    """1/N(y_{1:t-1}) when the truth continues or resumes, 0 on a new thread."""
    labels = story.ground_truth.labels
    n_prev = max(labels[: t - 1])
    if labels[t - 1] > n_prev:
        return 0.0
    return 1.0 / n_prev


def tfa_score_chance(story: Story, t: int) -> float:
    """Uniform over the N(y_{1:t-1}) existing threads plus the new option."""
    labels = story.ground_truth.labels
    return 1.0 / (max(labels[: t - 1]) + 1)


def tfa_score_cluster(story: Story, t: int, cfg: ClusteringConfig) -> float:
    return 1.0 if cluster_decision_forced(story, t, cfg) == story.ground_truth.labels[t - 1] else 0.0


def tfa_score_predictability(story: Story, t: int, cfg: PredictabilityConfig) -> float:
    """Correct iff (continue and no boundary) or (new and boundary); a
    resume in the truth is always scored incorrect."""
    from .core import Scenario, scenario_of

    boundaries = predictability_boundaries(boundary_scores(story, cfg), cfg)
    scenario = scenario_of(story.ground_truth, t)
    crossed = (t - 1) in boundaries
    if scenario == Scenario.CONTINUE:
        return 0.0 if crossed else 1.0
    if scenario == Scenario.NEW:
        return 1.0 if crossed else 0.0
    return 0.0
