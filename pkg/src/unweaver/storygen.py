"""Synthetic feature-world streams, story weaving, and natural-story slicing.

A stream stands in for a long unlabelled video: the timeline is split into
activity segments (geometric dwell times), each activity owns a random unit
centroid and a drift direction, and per-timestep features are unit-normalized
``centroid + drift * t * direction + noise * gaussian``. Latent activity ids
are recorded for diagnostics and oracle labels but are hidden from models.

Synthetic stories are built by sampling separated thread spans from one
stream and randomly interleaving their clips without violating each thread's
internal order. Natural stories slice a contiguous window into consecutive
clips and use the latent ids as oracle thread labels (recurring activities
map back to the same thread).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .core import Provenance, Story, ThreadAssignment, canonicalize

# Desk-scale time mapping: one "second" of source video is 4 timesteps, so the
# reference setup (1 s clips, 2-4 s gaps, 60 s separation) becomes clip length
# 4, gaps 8..16, separation 240.
TIMESTEPS_PER_SECOND = 4


@dataclass(frozen=True)
class WorldConfig:
    """Generative settings for one synthetic feature stream.

    Besides per-activity centroids, drift, and isotropic noise, streams carry
    a slowly varying nuisance component confined to the first
    ``nuisance_dims`` coordinates (an Ornstein-Uhlenbeck walk with the given
    stationary scale and correlation timescale). It stands in for
    camera/lighting state: temporally close clips share it regardless of
    activity, distant clips of one activity do not, and because the subspace
    is fixed across streams a learned embedding can suppress it while a raw
    feature-similarity threshold cannot.
    """

    clip_dim: int = 32
    activities: int = 48
    mean_dwell: int = 240
    noise: float = 0.12
    drift: float = 1e-4
    length: int = 12288
    nuisance_dims: int = 4
    nuisance_scale: float = 0.8
    nuisance_timescale: int = 120
    seed: int = 0

    def __post_init__(self) -> None:
        if self.activities < 2:
            raise ValueError("need at least two latent activities")
        if self.length < 1 or self.mean_dwell < 1:
            raise ValueError("lengths must be positive")
        if self.noise < 0 or self.drift < 0:
            raise ValueError("noise and drift must be non-negative")
        if not (0 <= self.nuisance_dims < self.clip_dim):
            raise ValueError("nuisance_dims must be < clip_dim")
        if self.nuisance_scale < 0 or self.nuisance_timescale < 1:
            raise ValueError("nuisance scale/timescale must be non-negative")


@dataclass(frozen=True)
class FeatureStream:
    """Per-timestep features plus hidden latent activity ids."""

    stream_id: str
    features: np.ndarray  # (length, clip_dim)
    latent_ids: np.ndarray  # (length,)

    def __post_init__(self) -> None:
        if self.features.shape[0] != self.latent_ids.shape[0]:
            raise ValueError("features and latent ids must align")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite features")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class SynthStoryConfig:
    """Sampling settings for woven synthetic stories."""

    clips_per_story: int = 10
    max_threads: int = 4
    clip_len: int = 4
    gap_min: int = 8
    gap_max: int = 16
    separation: int = 240
    min_stream_len: int = 840  # analogue of discarding too-short videos

    def __post_init__(self) -> None:
        if not (1 <= self.max_threads <= self.clips_per_story):
            raise ValueError("need 1 <= max_threads <= clips_per_story")
        if self.gap_min > self.gap_max or self.gap_min < 0:
            raise ValueError("need 0 <= gap_min <= gap_max")
        if self.separation <= self.gap_max:
            raise ValueError("separation must exceed the largest within-thread gap")
        if self.clip_len < 1:
            raise ValueError("clip length must be positive")


def generate_stream(cfg: WorldConfig, rng: np.random.Generator | None = None) -> FeatureStream:
    """Sample one stream: segment the timeline, then emit noisy drifting features."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    centroids = rng.normal(size=(cfg.activities, cfg.clip_dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    directions = rng.normal(size=(cfg.activities, cfg.clip_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    ids = np.empty(cfg.length, dtype=np.int64)
    pos = 0
    current = -1
    while pos < cfg.length:
        nxt = int(rng.integers(0, cfg.activities))
        while nxt == current:
            nxt = int(rng.integers(0, cfg.activities))
        current = nxt
        dwell = int(rng.geometric(1.0 / cfg.mean_dwell))
        ids[pos : pos + dwell] = current
        pos += dwell

    t = np.arange(cfg.length)[:, None]
    feats = (
        centroids[ids]
        + cfg.drift * t * directions[ids]
        + cfg.noise * rng.normal(size=(cfg.length, cfg.clip_dim))
    )
    if cfg.nuisance_dims > 0 and cfg.nuisance_scale > 0:
        rho = np.exp(-1.0 / cfg.nuisance_timescale)
        shocks = rng.normal(size=(cfg.length, cfg.nuisance_dims))
        walk = np.empty_like(shocks)
        walk[0] = shocks[0]
        scale = np.sqrt(1.0 - rho * rho)
        for i in range(1, cfg.length):
            walk[i] = rho * walk[i - 1] + scale * shocks[i]
        feats[:, : cfg.nuisance_dims] += cfg.nuisance_scale * walk
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    return FeatureStream(
        stream_id=f"world-{cfg.seed}",
        features=feats.astype(np.float32),
        latent_ids=ids,
    )


def sample_composition(total: int, parts: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform positive composition of ``total`` into ``parts`` ordered parts.

    Sampled by choosing parts-1 distinct cut points from {1..total-1}, which
    is uniform over all C(total-1, parts-1) compositions.
    """
    if parts < 1 or parts > total:
        raise ValueError(f"need 1 <= parts <= total, got {parts} > {total}")
    if parts == 1:
        return (total,)
    cuts = np.sort(rng.choice(np.arange(1, total), size=parts - 1, replace=False))
    bounds = np.concatenate([[0], cuts, [total]])
    return tuple(int(x) for x in np.diff(bounds))


@dataclass(frozen=True)
class ThreadPlan:
    """Placement of one synthetic thread: per-clip start offsets in the stream."""

    clip_offsets: tuple[int, ...]

    @property
    def start(self) -> int:
        return self.clip_offsets[0]


def _span_offsets(start: int, clips: int, clip_len: int, gaps: Sequence[int]) -> tuple[int, ...]:
    offsets = [start]
    for gap in gaps:
        offsets.append(offsets[-1] + clip_len + gap)
    assert len(offsets) == clips
    return tuple(offsets)


def plan_threads(
    stream_len: int,
    composition: Sequence[int],
    cfg: SynthStoryConfig,
    rng: np.random.Generator,
    max_attempts: int = 1000,
) -> list[ThreadPlan]:
    """Place each thread's clip span so spans are pairwise separated.

    Gaps between adjacent clips of a thread are drawn per pair from
    U{gap_min..gap_max}. Placement samples span starts uniformly and rejects
    layouts violating the separation; persistent failure raises the same
    "stream too short" error used to discard inadequate streams.
    """
    for _ in range(max_attempts):
        spans = []
        feasible = True
        for clips in composition:
            gaps = [int(rng.integers(cfg.gap_min, cfg.gap_max + 1)) for _ in range(clips - 1)]
            length = clips * cfg.clip_len + sum(gaps)
            if stream_len < length:
                feasible = False
                break
            start = int(rng.integers(0, stream_len - length + 1))
            spans.append((start, start + length, gaps, clips))
        if not feasible:
            continue
        ordered = sorted(spans)
        ok = all(
            ordered[i + 1][0] - ordered[i][1] >= cfg.separation
            for i in range(len(ordered) - 1)
        )
        if ok:
            return [
                ThreadPlan(_span_offsets(start, clips, cfg.clip_len, gaps))
                for start, _, gaps, clips in spans
            ]
    raise ValueError("stream too short")


def _clip_feature(stream: FeatureStream, offset: int, clip_len: int) -> np.ndarray:
    window = stream.features[offset : offset + clip_len]
    mean = window.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm > 0:
        mean = mean / norm
    return mean.astype(np.float32)


def _clip_latent(stream: FeatureStream, offset: int, clip_len: int) -> int:
    """Majority latent id over the clip window; exact ties go to the earlier
    (first-appearing) activity."""
    window = [int(x) for x in stream.latent_ids[offset : offset + clip_len]]
    counts: dict[int, int] = {}
    for v in window:
        counts[v] = counts.get(v, 0) + 1
    best_id, best_count = window[0], 0
    for v in dict.fromkeys(window):  # first-appearance order
        if counts[v] > best_count:
            best_id, best_count = v, counts[v]
    return best_id


def weave(
    threads: Sequence[Sequence[int]],
    rng: np.random.Generator,
) -> tuple[tuple[int, ...], ThreadAssignment]:
    """Interleave thread clip slots into a story order.

    ``threads`` holds each thread's clip identifiers in temporal order (any
    payload; here stream offsets). Builds the repeated-index template, applies
    a uniform random permutation of it, and realizes each slot with the next
    unused clip of that thread, so within-thread order is preserved. Returns
    the woven clip identifiers and the canonical ground-truth assignment.
    """
    if not threads or any(len(th) == 0 for th in threads):
        raise ValueError("need at least one non-empty thread")
    template = np.repeat(np.arange(len(threads)), [len(th) for th in threads])
    shuffled = rng.permutation(template)
    cursors = [0] * len(threads)
    woven: list[int] = []
    for thread_idx in shuffled:
        i = int(thread_idx)
        woven.append(threads[i][cursors[i]])
        cursors[i] += 1
    return tuple(woven), canonicalize([int(x) + 1 for x in shuffled])


def sample_synthetic_story(
    stream: FeatureStream,
    cfg: SynthStoryConfig,
    rng: np.random.Generator,
    story_id: str | None = None,
) -> Story:
    """Sample thread count, composition, placement, then weave one story."""
    if len(stream) < cfg.min_stream_len:
        raise ValueError("stream too short")
    n = int(rng.integers(1, cfg.max_threads + 1))
    composition = sample_composition(cfg.clips_per_story, n, rng)
    plans = plan_threads(len(stream), composition, cfg, rng)
    offsets, truth = weave([plan.clip_offsets for plan in plans], rng)
    clips = np.stack([_clip_feature(stream, off, cfg.clip_len) for off in offsets])
    latents = tuple(_clip_latent(stream, off, cfg.clip_len) for off in offsets)
    if story_id is None:
        digest = hashlib.sha1(repr(offsets).encode()).hexdigest()[:10]
        story_id = f"{stream.stream_id}-synth-{digest}"
    return Story(
        id=story_id,
        clips=clips,
        ground_truth=truth,
        provenance=Provenance(
            stream_id=stream.stream_id,
            start_offset=min(offsets),
            source_offsets=offsets,
            latent_ids=latents,
        ),
    )


def synthetic_batches(
    streams: FeatureStream | Sequence[FeatureStream],
    cfg: SynthStoryConfig,
    batch_size: int,
    seed: int,
) -> Iterator[list[Story]]:
    """Endless fresh batches, reproducible from the seed.

    Each story draws its source stream uniformly from ``streams``, so a model
    cannot succeed by memorizing any single stream's activity directions.
    """
    pool = [streams] if isinstance(streams, FeatureStream) else list(streams)
    if not pool:
        raise ValueError("need at least one stream")
    rng = np.random.default_rng(seed)
    counter = 0
    while True:
        batch = []
        for _ in range(batch_size):
            stream = pool[int(rng.integers(0, len(pool)))]
            batch.append(
                sample_synthetic_story(
                    stream, cfg, rng, story_id=f"{stream.stream_id}-synth-{counter}"
                )
            )
            counter += 1
        yield batch


def extract_natural_stories(
    stream: FeatureStream,
    window_len: int,
    clip_len: int,
    rng: np.random.Generator,
    count: int = 1,
    prefix: str = "natural",
) -> list[Story]:
    """Slice contiguous windows into consecutive clips with oracle threads.

    The ground-truth thread of a clip is its majority latent activity within
    the window; a recurring activity maps back to the same thread (resumption
    semantics). Windows are placed uniformly at random.
    """
    if window_len > len(stream):
        raise ValueError("window longer than stream")
    if window_len < 2 * clip_len:
        raise ValueError("window must hold at least two clips")
    stories = []
    clips_per_story = window_len // clip_len
    for k in range(count):
        start = int(rng.integers(0, len(stream) - window_len + 1))
        offsets = tuple(start + i * clip_len for i in range(clips_per_story))
        clips = np.stack([_clip_feature(stream, off, clip_len) for off in offsets])
        latents = tuple(_clip_latent(stream, off, clip_len) for off in offsets)
        truth = canonicalize([lat + 1 for lat in latents])
        stories.append(
            Story(
                id=f"{stream.stream_id}-{prefix}-{k}-{start}",
                clips=clips,
                ground_truth=truth,
                provenance=Provenance(
                    stream_id=stream.stream_id,
                    start_offset=start,
                    source_offsets=offsets,
                    latent_ids=latents,
                ),
            )
        )
    return stories
