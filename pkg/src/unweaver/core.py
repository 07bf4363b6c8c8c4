"""Domain types for stream unweaving and the thread-bank state machine.

Thread indices are 1-based throughout the in-memory model; serialized forms
(JSONL stories, annotation records) are 0-based. All types here are immutable
values; ``bank_apply`` returns a fresh bank and never mutates its input.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class Scenario(enum.Enum):
    """Classification of a ground-truth decision at step t >= 2.

    A return to any non-current existing thread counts as a resume, even when
    only a single clip intervened.
    """

    CONTINUE = "continue"
    NEW = "new"
    RESUME = "resume"


@dataclass(frozen=True)
class ThreadAssignment:
    """Per-clip thread labels in first-appearance canonical numbering."""

    labels: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.labels:
            raise ValueError("empty story")
        if self.labels[0] != 1:
            raise ValueError("canonical assignment must start at thread 1")
        seen_max = 1
        for y in self.labels[1:]:
            if y < 1 or y > seen_max + 1:
                raise ValueError(
                    f"label {y} breaks first-appearance numbering (max so far {seen_max})"
                )
            seen_max = max(seen_max, y)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def thread_count(self) -> int:
        return max(self.labels)

    def threads_up_to(self, t: int) -> int:
        """Number of threads observed in the first ``t`` clips (1-based)."""
        return max(self.labels[:t])


def canonicalize(labels: Sequence[int]) -> ThreadAssignment:
    """Relabel an arbitrary partition labelling by first appearance."""
    if len(labels) == 0:
        raise ValueError("empty story")
    mapping: dict[int, int] = {}
    out = []
    for raw in labels:
        if raw not in mapping:
            mapping[raw] = len(mapping) + 1
        out.append(mapping[raw])
    return ThreadAssignment(tuple(out))


def scenario_of(assignment: ThreadAssignment, t: int) -> Scenario:
    """Scenario of the decision at 1-based step ``t`` (t >= 2)."""
    if t < 2:
        raise ValueError("no scenario for first clip")
    if t > len(assignment):
        raise ValueError(f"step {t} beyond story of length {len(assignment)}")
    y = assignment.labels
    prior_max = max(y[: t - 1])
    if y[t - 1] == prior_max + 1:
        return Scenario.NEW
    if y[t - 1] == y[t - 2]:
        return Scenario.CONTINUE
    return Scenario.RESUME


def partition_of(assignment: ThreadAssignment) -> frozenset[frozenset[int]]:
    """Partition of 1-based clip indices induced by an assignment."""
    blocks: dict[int, set[int]] = {}
    for idx, label in enumerate(assignment.labels, start=1):
        blocks.setdefault(label, set()).add(idx)
    return frozenset(frozenset(b) for b in blocks.values())


@dataclass(frozen=True)
class ThreadBank:
    """Ordered fixed-size state vectors, one per discovered thread.

    Storage is exactly ``count * state_dim`` floats regardless of how many
    clips have been consumed.
    """

    states: Array  # shape (count, state_dim)

    def __post_init__(self) -> None:
        if self.states.ndim != 2:
            raise ValueError("bank states must be a (count, dim) array")

    @property
    def count(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @staticmethod
    def empty(state_dim: int, dtype=np.float32) -> "ThreadBank":
        return ThreadBank(np.zeros((0, state_dim), dtype=dtype))


UpdateFn = Callable[[Array, Array], Array]


def bank_apply(
    bank: ThreadBank,
    clip: Array,
    decision: int,
    updater: UpdateFn,
    empty_state: Array | None = None,
) -> ThreadBank:
    """Apply one decision to the bank, leaving untouched slots bit-identical.

    ``decision`` is 1-based; ``count + 1`` appends a new thread initialized
    from ``empty_state`` (zeros when omitted).
    """
    n = bank.count
    if decision < 1 or decision > n + 1:
        raise ValueError(f"decision {decision} out of range for bank of {n} threads")
    if decision == n + 1:
        if empty_state is None:
            empty_state = np.zeros(bank.state_dim, dtype=bank.states.dtype)
        new_state = np.asarray(updater(clip, empty_state))
        states = np.concatenate([bank.states, new_state.reshape(1, -1)], axis=0)
    else:
        new_state = np.asarray(updater(clip, bank.states[decision - 1]))
        states = bank.states.copy()
        states[decision - 1] = new_state
    return ThreadBank(states)


@dataclass(frozen=True)
class DecisionDistribution:
    """Probabilities over joining threads 1..n plus starting a new one."""

    probs: Array  # length n + 1; final entry is the new-thread option
    chosen: int

    def __post_init__(self) -> None:
        p = self.probs
        if p.ndim != 1 or p.size < 1:
            raise ValueError("probs must be a non-empty vector")
        if np.any(p < -1e-9) or np.any(p > 1 + 1e-9):
            raise ValueError("probabilities outside [0, 1]")
        if abs(float(p.sum()) - 1.0) > 1e-6:
            raise ValueError("probabilities must sum to 1 within 1e-6")
        if self.chosen != int(np.argmax(p)) + 1:
            raise ValueError("chosen must be the lowest argmax index (1-based)")


@dataclass(frozen=True)
class Provenance:
    """Where a story's clips came from inside a source stream.

    ``source_offsets`` follow story order; they must increase strictly within
    each ground-truth thread (the arrow of time inside a thread), and
    globally when the story carries no thread structure.
    """

    stream_id: str
    start_offset: int
    source_offsets: tuple[int, ...]
    latent_ids: tuple[int, ...] | None = None


@dataclass(frozen=True)
class Story:
    """An ordered clip sequence, optionally with ground-truth threads."""

    id: str
    clips: Array  # shape (T, clip_dim)
    ground_truth: ThreadAssignment | None = None
    provenance: Provenance | None = None

    def __post_init__(self) -> None:
        if self.clips.ndim != 2 or self.clips.shape[0] == 0:
            raise ValueError("clips must be a non-empty (T, dim) array")
        if not np.all(np.isfinite(self.clips)):
            raise ValueError(f"story {self.id}: non-finite clip features")
        if self.ground_truth is not None and len(self.ground_truth) != len(self):
            raise ValueError(
                f"story {self.id}: ground truth length {len(self.ground_truth)} "
                f"!= clip count {len(self)}"
            )
        if self.provenance is not None:
            offs = self.provenance.source_offsets
            if len(offs) != len(self):
                raise ValueError(f"story {self.id}: provenance offsets misaligned")
            if self.ground_truth is None:
                series = [offs]
            else:
                per_thread: dict[int, list[int]] = {}
                for off, lab in zip(offs, self.ground_truth.labels):
                    per_thread.setdefault(lab, []).append(off)
                series = list(per_thread.values())
            for chain in series:
                if any(b <= a for a, b in zip(chain, chain[1:])):
                    raise ValueError(
                        f"story {self.id}: source offsets must increase within a thread"
                    )

    def __len__(self) -> int:
        return self.clips.shape[0]

    @property
    def clip_dim(self) -> int:
        return self.clips.shape[1]


def validate_clip(clip: Array, clip_dim: int) -> None:
    if clip.shape != (clip_dim,):
        raise ValueError(f"clip shape {clip.shape} != ({clip_dim},)")
    if not np.all(np.isfinite(clip)):
        raise ValueError("clip has non-finite entries")
