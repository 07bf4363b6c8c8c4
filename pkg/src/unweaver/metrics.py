"""Partition metrics for unweaving: Rand index, TFA, thread-count error,
and exact chance-baseline expectations via Bell and Stirling numbers.

Partitions are accepted either as per-clip label sequences or as sets of
clip-index sets; internally everything is reduced to labels. Counting
functions use Python's exact integers (guarded to T <= 30 per contract) and
only the final ratios are evaluated in floating point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .core import Story

MAX_COUNT_T = 30


def _as_labels(partition) -> tuple[int, ...]:
    """Normalize a partition (labels or set-of-sets) to a label tuple."""
    if isinstance(partition, (frozenset, set)):
        universe = sorted(x for block in partition for x in block)
        if len(universe) != len(set(universe)):
            raise ValueError("blocks overlap")
        rank = {x: i for i, x in enumerate(universe)}
        labels = [0] * len(universe)
        for b, block in enumerate(sorted(partition, key=min), start=1):
            for x in block:
                labels[rank[x]] = b
        return tuple(labels)
    labels = tuple(int(x) for x in partition)
    if not labels:
        raise ValueError("empty partition")
    return labels


def co_membership(labels: Sequence[int]) -> np.ndarray:
    """Boolean same-block indicator for each clip pair (i < j)."""
    lab = np.asarray(labels)
    t = lab.shape[0]
    iu = np.triu_indices(t, 1)
    return (lab[:, None] == lab[None, :])[iu]


@dataclass(frozen=True)
class PairCounts:
    """Pairwise confusion counts between a ground-truth and predicted partition."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def pair_counts(truth, predicted) -> PairCounts:
    g = co_membership(_as_labels(truth))
    p = co_membership(_as_labels(predicted))
    if g.shape != p.shape:
        raise ValueError("partitions cover different universes")
    tp = int(np.sum(g & p))
    fp = int(np.sum(~g & p))
    fn = int(np.sum(g & ~p))
    tn = int(np.sum(~g & ~p))
    return PairCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def rand_index(truth, predicted) -> float:
    """Fraction of clip pairs whose same/different-thread relation matches."""
    g = _as_labels(truth)
    p = _as_labels(predicted)
    if len(g) != len(p):
        raise ValueError("partitions cover different universes")
    if len(g) < 2:
        raise ValueError("Rand index needs at least two clips")
    return float(np.mean(co_membership(g) == co_membership(p)))


def rand_index_matrix(co_rows: np.ndarray, co_cols: np.ndarray) -> np.ndarray:
    """Pairwise Rand indices between two stacks of co-membership rows.

    Used to evaluate every partition pair at once; rows are the vectors
    produced by :func:`co_membership`.
    """
    a = co_rows.astype(np.float32)
    b = co_cols.astype(np.float32)
    pairs = a.shape[1]
    agree = a @ b.T + (1.0 - a) @ (1.0 - b).T
    return agree / pairs


# -- set-partition counting ------------------------------------------------------


def bell_number(t: int) -> int:
    """Number of partitions of a t-set, via the Bell triangle."""
    if t < 0 or t > MAX_COUNT_T:
        raise ValueError(f"t must be in [0, {MAX_COUNT_T}]")
    if t == 0:
        return 1
    row = [1]
    for _ in range(t - 1):
        nxt = [row[-1]]
        for value in row:
            nxt.append(nxt[-1] + value)
        row = nxt
    return row[-1]


def stirling2(t: int, n: int) -> int:
    """Partitions of a t-set into exactly n non-empty blocks."""
    if t < 0 or t > MAX_COUNT_T or n < 0 or n > t:
        raise ValueError(f"need 0 <= n <= t <= {MAX_COUNT_T}")
    if t == 0:
        return 1 if n == 0 else 0
    prev = [1] + [0] * t  # row for t=0
    for _ in range(t):
        cur = [0] * (t + 1)
        for k in range(1, t + 1):
            cur[k] = k * prev[k] + prev[k - 1]
        prev = cur
    return prev[n]


def iter_partitions(t: int) -> Iterator[tuple[int, ...]]:
    """All partitions of {1..t} as canonical label tuples (restricted growth)."""
    if t < 1:
        raise ValueError("t must be >= 1")
    labels = [1] * t

    def rec(i: int, max_label: int):
        if i == t:
            yield tuple(labels)
            return
        for lab in range(1, max_label + 2):
            labels[i] = lab
            yield from rec(i + 1, max(max_label, lab))

    labels[0] = 1
    yield from rec(1, 1)


def sample_uniform_partition(t: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform random partition of {1..t} (urn method: draw the urn count
    with weight u^t / (u! B(t)), place elements uniformly, drop empty urns)."""
    if t < 1:
        raise ValueError("t must be >= 1")
    max_urns = t + 40
    log_w = np.array(
        [t * math.log(u) - math.lgamma(u + 1) for u in range(1, max_urns + 1)]
    )
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    urns = int(rng.choice(max_urns, p=w)) + 1
    assignment = rng.integers(0, urns, size=t)
    mapping: dict[int, int] = {}
    labels = []
    for a in assignment:
        if int(a) not in mapping:
            mapping[int(a)] = len(mapping) + 1
        labels.append(mapping[int(a)])
    return tuple(labels)


# -- closed-form expectations -----------------------------------------------------


def _same_pair_fraction(labels: Sequence[int]) -> float:
    labs = _as_labels(labels)
    t = len(labs)
    if t < 2:
        raise ValueError("need at least two clips")
    sizes: dict[int, int] = {}
    for lab in labs:
        sizes[lab] = sizes.get(lab, 0) + 1
    same = sum(math.comb(s, 2) for s in sizes.values())
    return same / math.comb(t, 2)


def expected_ri_single_thread(truth) -> float:
    """Expected RI of the predict-one-thread baseline (deterministic)."""
    return _same_pair_fraction(truth)


def expected_ri_chance(truth) -> float:
    """Expected RI of a uniform random partition against ``truth``."""
    labs = _as_labels(truth)
    t = len(labs)
    if t < 2 or t > MAX_COUNT_T:
        raise ValueError(f"need 2 <= T <= {MAX_COUNT_T}")
    p_same = bell_number(t - 1) / bell_number(t)
    s = _same_pair_fraction(labs)
    return p_same * s + (1.0 - p_same) * (1.0 - s)


def thread_count_error(truth, predicted) -> int:
    """Signed difference: predicted thread count minus ground-truth count."""
    g = _as_labels(truth)
    p = _as_labels(predicted)
    if len(g) != len(p):
        raise ValueError("partitions cover different universes")
    return len(set(p)) - len(set(g))


def expected_thread_count_chance(t: int) -> float:
    """Expected thread count of a uniform random partition of t clips."""
    if t < 1 or t > MAX_COUNT_T:
        raise ValueError(f"need 1 <= T <= {MAX_COUNT_T}")
    total = bell_number(t)
    weighted = sum(stirling2(t, n) * n for n in range(1, t + 1))
    return weighted / total


# -- teacher-forcing accuracy ------------------------------------------------------

ScoreFn = Callable[[Story, int], float]
"""Probability that the decision at 1-based step t is correct when the
history is forced to the ground truth. Deterministic predictors return 0/1."""


@dataclass(frozen=True)
class TfaReport:
    grouping: str  # "prefix" (threads observed up to t) or "story"
    by_threads: dict[int, float]
    counts: dict[int, int]
    overall: float
    by_step: dict[int, float]  # clips observed -> accuracy

    def bucket(self, n: int) -> float:
        return self.by_threads.get(n, float("nan"))


def tfa(score_fn: ScoreFn, stories: Iterable[Story], grouping: str = "prefix") -> TfaReport:
    """Aggregate forced-history decision accuracy.

    Single-clip stories are excluded from numerator and denominator alike;
    scoring starts at t=2 (the first clip has no alternatives).
    """
    if grouping not in ("prefix", "story"):
        raise ValueError("grouping must be 'prefix' or 'story'")
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    step_sums: dict[int, float] = {}
    step_counts: dict[int, int] = {}
    total = 0.0
    n_total = 0
    for story in stories:
        if story.ground_truth is None:
            raise ValueError(f"story {story.id!r} has no ground truth")
        if len(story) < 2:
            continue
        labels = story.ground_truth.labels
        for t in range(2, len(story) + 1):
            score = float(score_fn(story, t))
            key = max(labels[:t]) if grouping == "prefix" else max(labels)
            sums[key] = sums.get(key, 0.0) + score
            counts[key] = counts.get(key, 0) + 1
            step_sums[t] = step_sums.get(t, 0.0) + score
            step_counts[t] = step_counts.get(t, 0) + 1
            total += score
            n_total += 1
    if n_total == 0:
        raise ValueError("no scorable decisions (all stories single-clip?)")
    return TfaReport(
        grouping=grouping,
        by_threads={k: sums[k] / counts[k] for k in sorted(sums)},
        counts=dict(sorted(counts.items())),
        overall=total / n_total,
        by_step={t: step_sums[t] / step_counts[t] for t in sorted(step_sums)},
    )


# -- per-story evaluation and bucketed reports --------------------------------------


@dataclass(frozen=True)
class StoryEval:
    story_id: str
    length: int
    truth_threads: int
    pred_threads: int
    ri: float
    dn: int


def evaluate_assignments(
    stories: Sequence[Story], predictions: Sequence
) -> list[StoryEval]:
    """Score predicted assignments story by story (stories need >= 2 clips)."""
    if len(stories) != len(predictions):
        raise ValueError("one prediction per story required")
    out = []
    for story, pred in zip(stories, predictions):
        if story.ground_truth is None:
            raise ValueError(f"story {story.id!r} has no ground truth")
        if len(story) < 2:
            continue
        truth = story.ground_truth.labels
        plabs = _as_labels(pred.labels if hasattr(pred, "labels") else pred)
        out.append(
            StoryEval(
                story_id=story.id,
                length=len(story),
                truth_threads=len(set(truth)),
                pred_threads=len(set(plabs)),
                ri=rand_index(truth, plabs),
                dn=thread_count_error(truth, plabs),
            )
        )
    return out


@dataclass(frozen=True)
class MetricsReport:
    """Bucketed averages in the shape of the headline results table."""

    per_story: tuple[StoryEval, ...]
    ri_by_bucket: dict[int, float]
    dn_by_bucket: dict[int, float]
    bucket_counts: dict[int, int]
    ri_overall: float
    dn_overall: float
    ri_bucket_mean: float
    tfa_report: TfaReport | None = None

    def format_table(self, name: str = "model") -> str:
        buckets = sorted(self.bucket_counts)
        header = ["method"] + [f"RI({b})" for b in buckets] + ["RI(avg)"]
        header += [f"dN({b})" for b in buckets] + ["dN(avg)"]
        if self.tfa_report:
            header += [f"TFA({b})" for b in sorted(self.tfa_report.by_threads)]
            header += ["TFA(avg)"]
        row = [name]
        row += [f"{self.ri_by_bucket[b]:.3f}" for b in buckets]
        row += [f"{self.ri_overall:.3f}"]
        row += [f"{self.dn_by_bucket[b]:+.2f}" for b in buckets]
        row += [f"{self.dn_overall:+.2f}"]
        if self.tfa_report:
            row += [
                f"{self.tfa_report.by_threads[b]:.3f}"
                for b in sorted(self.tfa_report.by_threads)
            ]
            row += [f"{self.tfa_report.overall:.3f}"]
        widths = [max(len(h), len(r)) for h, r in zip(header, row)]
        fmt = "  ".join(f"{{:>{w}}}" for w in widths)
        return fmt.format(*header) + "\n" + fmt.format(*row)


def summarize(evals: Sequence[StoryEval], tfa_report: TfaReport | None = None) -> MetricsReport:
    """Bucket per-story scores by ground-truth thread count.

    Overall averages weight stories equally; a bucket-mean average is also
    reported since the headline table convention is ambiguous.
    """
    if not evals:
        raise ValueError("no per-story results to summarize")
    buckets: dict[int, list[StoryEval]] = {}
    for ev in evals:
        buckets.setdefault(ev.truth_threads, []).append(ev)
    ri_by_bucket = {b: float(np.mean([e.ri for e in evs])) for b, evs in sorted(buckets.items())}
    dn_by_bucket = {b: float(np.mean([e.dn for e in evs])) for b, evs in sorted(buckets.items())}
    return MetricsReport(
        per_story=tuple(evals),
        ri_by_bucket=ri_by_bucket,
        dn_by_bucket=dn_by_bucket,
        bucket_counts={b: len(evs) for b, evs in sorted(buckets.items())},
        ri_overall=float(np.mean([e.ri for e in evals])),
        dn_overall=float(np.mean([e.dn for e in evals])),
        ri_bucket_mean=float(np.mean(list(ri_by_bucket.values()))),
        tfa_report=tfa_report,
    )


def ri_by_length(evals: Sequence[StoryEval], bin_width: int = 5) -> dict[str, float]:
    """Mean RI binned by story length (robustness-to-length table)."""
    bins: dict[tuple[int, int], list[float]] = {}
    for ev in evals:
        lo = (ev.length // bin_width) * bin_width
        bins.setdefault((lo, lo + bin_width - 1), []).append(ev.ri)
    return {f"{lo}-{hi}": float(np.mean(v)) for (lo, hi), v in sorted(bins.items())}
