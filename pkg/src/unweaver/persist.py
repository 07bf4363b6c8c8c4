"""On-disk formats: story JSONL, model checkpoints, annotation log, reports.

Stories are one JSON object per line with 0-based thread labels::

    {"id": str,
     "clips": [[float, ...], ...],
     "ground_truth": [int, ...] | null,
     "provenance": {"stream_id": str, "start_offset": int,
                    "source_offsets": [int, ...],
                    "latent_ids": [int, ...] | null} | null}

Floats are decimal-encoded (shortest round-tripping repr), so write-read is
value-exact for float32 features. Checkpoints are npz containers holding
every parameter tensor plus a JSON metadata entry (variant tags, dimensions,
temperature, dropout, dtype, and seed lineage); they round-trip bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .controller import Dims, Model
from .core import Provenance, Story, ThreadAssignment, canonicalize
from .train import AdamState


# -- stories ---------------------------------------------------------------------


def story_to_json(story: Story) -> dict:
    doc = {
        "id": story.id,
        "clips": [[float(x) for x in clip] for clip in story.clips],
        "ground_truth": (
            [y - 1 for y in story.ground_truth.labels] if story.ground_truth else None
        ),
        "provenance": None,
    }
    if story.provenance is not None:
        doc["provenance"] = {
            "stream_id": story.provenance.stream_id,
            "start_offset": story.provenance.start_offset,
            "source_offsets": list(story.provenance.source_offsets),
            "latent_ids": (
                list(story.provenance.latent_ids)
                if story.provenance.latent_ids is not None
                else None
            ),
        }
    return doc


def story_from_json(doc: dict) -> Story:
    truth = None
    if doc.get("ground_truth") is not None:
        truth = ThreadAssignment(tuple(y + 1 for y in doc["ground_truth"]))
    prov = None
    if doc.get("provenance") is not None:
        p = doc["provenance"]
        prov = Provenance(
            stream_id=p["stream_id"],
            start_offset=int(p["start_offset"]),
            source_offsets=tuple(int(x) for x in p["source_offsets"]),
            latent_ids=(
                tuple(int(x) for x in p["latent_ids"])
                if p.get("latent_ids") is not None
                else None
            ),
        )
    return Story(
        id=doc["id"],
        clips=np.asarray(doc["clips"], dtype=np.float32),
        ground_truth=truth,
        provenance=prov,
    )


def write_stories(path: Path, stories: Iterable[Story]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for story in stories:
            fh.write(json.dumps(story_to_json(story), separators=(",", ":")))
            fh.write("\n")


def read_stories(path: Path) -> list[Story]:
    with open(path) as fh:
        return [story_from_json(json.loads(line)) for line in fh if line.strip()]


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(model: Model, path: Path, adam: AdamState | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "unweaver-checkpoint-v1",
        "selector": model.selector,
        "updater": model.updater,
        "dims": asdict(model.dims),
        "tau": model.tau,
        "dropout_rate": model.dropout_rate,
        "learned_empty": model.learned_empty,
        "dtype": np.dtype(model.dtype).name,
        "seed_info": model.seed_info or {},
        "adam_step": adam.step if adam is not None else None,
    }
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    if adam is not None:
        arrays.update({f"adam_m/{k}": v for k, v in adam.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in adam.v.items()})
    arrays["__meta__"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)


def load_checkpoint(path: Path) -> tuple[Model, AdamState | None]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        params = {
            k[len("param/") :]: data[k] for k in data.files if k.startswith("param/")
        }
        adam = None
        if meta.get("adam_step") is not None:
            adam = AdamState(
                step=int(meta["adam_step"]),
                m={k[len("adam_m/") :]: data[k] for k in data.files if k.startswith("adam_m/")},
                v={k[len("adam_v/") :]: data[k] for k in data.files if k.startswith("adam_v/")},
            )
    model = Model(
        selector=meta["selector"],
        updater=meta["updater"],
        dims=Dims(**meta["dims"]),
        tau=float(meta["tau"]),
        dropout_rate=float(meta["dropout_rate"]),
        learned_empty=bool(meta["learned_empty"]),
        params=params,
        seed_info=meta.get("seed_info", {}),
    )
    return model, adam


# -- annotation records --------------------------------------------------------------


@dataclass(frozen=True)
class AnnotationRecord:
    """One saved (or skipped) annotation; labels are serialized 0-based."""

    story_id: str
    annotator: str
    labels: tuple[int, ...] | None  # canonical 1-based labels, None when skipped
    skipped: bool
    timestamp: float

    def to_json(self) -> dict:
        return {
            "story_id": self.story_id,
            "annotator": self.annotator,
            "assignment": [y - 1 for y in self.labels] if self.labels else None,
            "skipped": self.skipped,
            "timestamp": self.timestamp,
        }

    @staticmethod
    def from_json(doc: dict) -> "AnnotationRecord":
        labels = None
        if doc.get("assignment") is not None:
            labels = canonicalize([y + 1 for y in doc["assignment"]]).labels
        return AnnotationRecord(
            story_id=doc["story_id"],
            annotator=doc["annotator"],
            labels=labels,
            skipped=bool(doc.get("skipped", False)),
            timestamp=float(doc.get("timestamp", 0.0)),
        )


def append_annotation(path: Path, record: AnnotationRecord) -> None:
    """Append one record and flush; the log is never rewritten."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(record.to_json(), separators=(",", ":")))
        fh.write("\n")
        fh.flush()


def read_annotations(path: Path) -> list[AnnotationRecord]:
    if not Path(path).exists():
        return []
    with open(path) as fh:
        return [AnnotationRecord.from_json(json.loads(line)) for line in fh if line.strip()]


# -- misc artifacts --------------------------------------------------------------------


def write_json(path: Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    import csv

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    return rows[0], rows[1:]


def iter_jsonl(path: Path) -> Iterator[dict]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
