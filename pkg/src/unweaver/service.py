"""HTTP service backing the annotation UI.

Serves stories from a JSONL pool, hands each one to at most one annotator at
a time, validates submissions (order preservation and partition shape), and
appends accepted records to an append-only JSONL log. Replaying the log
reconstructs service state exactly, so restarts lose nothing.

Endpoints (JSON, versioned under /api/):
  GET  /api/next?annotator=ID   next unannotated story for this annotator
                                (re-serves their in-flight story; 204 when
                                the pool is exhausted for them)
  POST /api/annotations         {story_id, annotator, threads|skipped}
  GET  /api/stories/{id}        story plus any saved annotation
  GET  /healthz                 service status
  /                             static annotator UI bundle, when configured

Submissions carry ``threads``: a list of tracks, each an ordered list of
0-based clip indices. Tracks must be strictly increasing (the UI forbids
reordering clips) and together cover every clip exactly once.
"""

from __future__ import annotations

import threading
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Query, Response
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .core import Story, canonicalize
from .persist import AnnotationRecord, append_annotation, read_annotations, read_stories


class AnnotationPayload(BaseModel):
    story_id: str
    annotator: str
    threads: list[list[int]] | None = None
    skipped: bool = False


def fit_projection(stories: list[Story]) -> np.ndarray:
    """2-D display projection (top principal components of pooled clips)."""
    clips = np.concatenate([s.clips for s in stories], axis=0)
    centered = clips - clips.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return vt[:2].T  # (clip_dim, 2)


class AnnotationLedger:
    """In-memory assignment/annotation state with a single serialized writer."""

    def __init__(self, stories: list[Story], log_path: Path, seed: int = 0):
        self.stories = {s.id: s for s in stories}
        order = list(self.stories)
        np.random.default_rng(seed).shuffle(order)
        self.order = order
        self.log_path = Path(log_path)
        self.lock = threading.Lock()
        self.assigned: dict[str, str] = {}  # story id -> annotator
        self.skipped: dict[str, set[str]] = {}  # story id -> annotators who skipped
        self.annotations: dict[str, AnnotationRecord] = {}
        for record in read_annotations(self.log_path):
            self._apply(record)

    def _apply(self, record: AnnotationRecord) -> None:
        if record.skipped:
            self.skipped.setdefault(record.story_id, set()).add(record.annotator)
            self.assigned.pop(record.story_id, None)
        else:
            self.annotations[record.story_id] = record
            self.assigned.pop(record.story_id, None)

    def next_for(self, annotator: str) -> Story | None:
        with self.lock:
            for sid in self.order:  # re-serve an in-flight assignment first
                if self.assigned.get(sid) == annotator and sid not in self.annotations:
                    return self.stories[sid]
            for sid in self.order:
                if sid in self.annotations:
                    continue
                if sid in self.assigned:
                    continue
                if annotator in self.skipped.get(sid, set()):
                    continue
                self.assigned[sid] = annotator
                return self.stories[sid]
        return None

    def submit(self, record: AnnotationRecord) -> None:
        with self.lock:
            if not record.skipped and record.story_id in self.annotations:
                raise KeyError(record.story_id)
            append_annotation(self.log_path, record)
            self._apply(record)


def validate_threads(threads: list[list[int]], length: int) -> str | None:
    """Return a reason string when the submission is invalid, else None."""
    if not threads or any(len(t) == 0 for t in threads):
        return "threads must be non-empty lists of clip indices"
    flat = [i for track in threads for i in track]
    if sorted(flat) != list(range(length)):
        return f"threads must cover clips 0..{length - 1} exactly once"
    for track in threads:
        if any(b <= a for a, b in zip(track, track[1:])):
            return "clip order within a thread must follow the source order"
    return None


def threads_to_labels(threads: list[list[int]]) -> tuple[int, ...]:
    """Canonical 1-based labels from track contents."""
    length = sum(len(t) for t in threads)
    raw = [0] * length
    for k, track in enumerate(threads):
        for i in track:
            raw[i] = k + 1
    return canonicalize(raw).labels


def labels_to_threads(labels: tuple[int, ...]) -> list[list[int]]:
    tracks: dict[int, list[int]] = {}
    for idx, lab in enumerate(labels):
        tracks.setdefault(lab, []).append(idx)
    return [tracks[k] for k in sorted(tracks)]


def story_payload(story: Story, projection: np.ndarray, record: AnnotationRecord | None) -> dict:
    coords = story.clips @ projection
    span = np.abs(coords).max() or 1.0
    coords = (coords / span).round(4)
    return {
        "id": story.id,
        "clip_count": len(story),
        "clips": [
            {"index": i, "glyph": [float(x), float(y)]}
            for i, (x, y) in enumerate(coords)
        ],
        "annotation": (
            {
                "annotator": record.annotator,
                "threads": labels_to_threads(record.labels),
                "labels": [y - 1 for y in record.labels],
            }
            if record is not None and record.labels is not None
            else None
        ),
    }


def create_app(
    pool_path: Path,
    log_path: Path,
    static_dir: Path | None = None,
    seed: int = 0,
) -> FastAPI:
    stories = read_stories(pool_path)
    if not stories:
        raise ValueError(f"story pool {pool_path} is empty")
    ledger = AnnotationLedger(stories, log_path, seed=seed)
    projection = fit_projection(stories)
    app = FastAPI(title="unweaver annotation service")

    @app.get("/healthz")
    def healthz():
        with ledger.lock:
            return {
                "status": "ok",
                "pool": len(ledger.stories),
                "annotated": len(ledger.annotations),
            }

    @app.get("/api/next")
    def next_story(annotator: str = Query(..., min_length=1)):
        story = ledger.next_for(annotator)
        if story is None:
            return Response(status_code=204)
        return story_payload(story, projection, None)

    @app.get("/api/stories/{story_id}")
    def get_story(story_id: str):
        story = ledger.stories.get(story_id)
        if story is None:
            return JSONResponse({"error": "unknown story"}, status_code=404)
        record = ledger.annotations.get(story_id)
        return story_payload(story, projection, record)

    @app.post("/api/annotations")
    def post_annotation(payload: AnnotationPayload):
        story = ledger.stories.get(payload.story_id)
        if story is None:
            return JSONResponse({"error": "unknown story"}, status_code=404)
        if payload.skipped:
            record = AnnotationRecord(
                story_id=payload.story_id,
                annotator=payload.annotator,
                labels=None,
                skipped=True,
                timestamp=time.time(),
            )
            ledger.submit(record)
            return {"status": "skipped"}
        if payload.threads is None:
            return JSONResponse(
                {"error": "either threads or skipped=true is required"},
                status_code=422,
            )
        reason = validate_threads(payload.threads, len(story))
        if reason is not None:
            return JSONResponse({"error": reason}, status_code=422)
        record = AnnotationRecord(
            story_id=payload.story_id,
            annotator=payload.annotator,
            labels=threads_to_labels(payload.threads),
            skipped=False,
            timestamp=time.time(),
        )
        try:
            ledger.submit(record)
        except KeyError:
            return JSONResponse(
                {"error": "story already annotated"}, status_code=409
            )
        return {"status": "saved", "labels": [y - 1 for y in record.labels]}

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app
