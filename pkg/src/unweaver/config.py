"""Run configuration: named profiles, JSON schema validation, seed lineage.

A run config is a single JSON document with ``profile``, ``seed``,
``out_dir``, and the section objects below. Loading merges the named
profile's defaults with any sections present in the file, then validates
against the published schema (unknown keys are rejected). Every random
stream used anywhere in a run is derived from the master seed and a fixed
component index, so artifacts are reproducible from (config, seed) alone.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .controller import Dims
from .storygen import SynthStoryConfig, WorldConfig
from .train import LossConfig, TrainConfig

PROFILES: dict[str, dict] = {
    "desk": {
        "world": {
            "clip_dim": 32,
            "activities": 48,
            "mean_dwell": 240,
            "noise": 0.12,
            "drift": 1e-4,
            "length": 12288,
            "nuisance_dims": 4,
            "nuisance_scale": 0.8,
            "nuisance_timescale": 120,
        },
        "story": {
            "clips_per_story": 10,
            "max_threads": 4,
            "clip_len": 4,
            "gap_min": 8,
            "gap_max": 16,
            "separation": 240,
            "min_stream_len": 840,
        },
        "model": {
            "selector": "transformer",
            "updater": "gru",
            "thread_dim": 32,
            "embed_dim": 64,
            "heads": 4,
            "ff_dim": 128,
            "tau": 0.05,
            "dropout_rate": 0.2,
            "learned_empty": False,
        },
        "train": {
            "pretrain_steps": 2000,
            "batch_size": 16,
            "pretrain_lr": [[0, 3e-3], [1000, 3e-4]],
            "finetune_steps": 300,
            "finetune_lr": 3e-4,
            "patience": 3,
            "eval_interval": 25,
            "grad_clip": None,
            "checkpoint_interval": 500,
        },
        "loss": {
            "alpha_continue": 1.0,
            "alpha_resume": 100.0,
            "alpha_new": 10.0,
            "gamma": 2.0,
        },
        "eval": {
            "natural_window": 120,
            "natural_clip_len": 4,
            "train_streams": 16,
            "val_streams": 4,
            "test_streams": 4,
            "train_stories": 120,
            "val_stories": 40,
            "test_stories": 60,
        },
    },
    "paper-scale": {
        "world": {
            "clip_dim": 256,
            "activities": 64,
            "mean_dwell": 960,
            "noise": 0.05,
            "drift": 2e-5,
            "length": 65536,
            "nuisance_dims": 16,
            "nuisance_scale": 0.8,
            "nuisance_timescale": 480,
        },
        "story": {
            "clips_per_story": 10,
            "max_threads": 4,
            "clip_len": 4,
            "gap_min": 8,
            "gap_max": 16,
            "separation": 240,
            "min_stream_len": 840,
        },
        "model": {
            "selector": "transformer",
            "updater": "gru",
            "thread_dim": 256,
            "embed_dim": 512,
            "heads": 4,
            "ff_dim": 2048,
            "tau": 0.05,
            "dropout_rate": 0.2,
            "learned_empty": False,
        },
        "train": {
            "pretrain_steps": 50_000,
            "batch_size": 16,
            "pretrain_lr": [[0, 2e-4], [25_000, 2e-5]],
            "finetune_steps": 1000,
            "finetune_lr": 2e-5,
            "patience": 5,
            "eval_interval": 50,
            "grad_clip": None,
            "checkpoint_interval": 5000,
        },
        "loss": {
            "alpha_continue": 1.0,
            "alpha_resume": 100.0,
            "alpha_new": 10.0,
            "gamma": 2.0,
        },
        "eval": {
            "natural_window": 120,
            "natural_clip_len": 4,
            "train_streams": 48,
            "val_streams": 8,
            "test_streams": 8,
            "train_stories": 400,
            "val_stories": 120,
            "test_stories": 150,
        },
    },
}

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_BOOL = {"type": "boolean"}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["profile", "seed", "out_dir"],
    "properties": {
        "profile": {"type": "string", "enum": sorted(PROFILES)},
        "seed": _INT,
        "out_dir": {"type": "string"},
        "world": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "clip_dim": _INT,
                "activities": _INT,
                "mean_dwell": _INT,
                "noise": _NUM,
                "drift": _NUM,
                "length": _INT,
                "nuisance_dims": _INT,
                "nuisance_scale": _NUM,
                "nuisance_timescale": _INT,
            },
        },
        "story": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "clips_per_story": _INT,
                "max_threads": _INT,
                "clip_len": _INT,
                "gap_min": _INT,
                "gap_max": _INT,
                "separation": _INT,
                "min_stream_len": _INT,
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "selector": {"type": "string", "enum": ["linear", "transformer"]},
                "updater": {"type": "string", "enum": ["gru", "last_clip"]},
                "thread_dim": _INT,
                "embed_dim": _INT,
                "heads": _INT,
                "ff_dim": _INT,
                "tau": _NUM,
                "dropout_rate": _NUM,
                "learned_empty": _BOOL,
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "pretrain_steps": _INT,
                "batch_size": _INT,
                "pretrain_lr": {
                    "type": "array",
                    "items": {
                        "type": "array",
                        "prefixItems": [_INT, _NUM],
                        "minItems": 2,
                        "maxItems": 2,
                    },
                },
                "finetune_steps": _INT,
                "finetune_lr": _NUM,
                "patience": _INT,
                "eval_interval": _INT,
                "grad_clip": {"type": ["number", "null"]},
                "checkpoint_interval": _INT,
            },
        },
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha_continue": _NUM,
                "alpha_resume": _NUM,
                "alpha_new": _NUM,
                "gamma": _NUM,
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "natural_window": _INT,
                "natural_clip_len": _INT,
                "train_streams": _INT,
                "val_streams": _INT,
                "test_streams": _INT,
                "train_stories": _INT,
                "val_stories": _INT,
                "test_stories": _INT,
            },
        },
    },
}

# Fixed component indices for deriving per-purpose seeds from the master seed.
SEED_COMPONENTS = {
    "stream-train": 0,
    "stream-val": 1,
    "stream-test": 2,
    "model-init": 3,
    "pretrain-batches": 4,
    "pretrain-loop": 5,
    "finetune-loop": 6,
    "natural-train": 7,
    "natural-val": 8,
    "natural-test": 9,
    "gen": 10,
    "service": 11,
}


class ConfigError(ValueError):
    """Raised when a run config fails schema validation."""


@dataclass(frozen=True)
class EvalSettings:
    natural_window: int
    natural_clip_len: int
    train_streams: int
    val_streams: int
    test_streams: int
    train_stories: int
    val_stories: int
    test_stories: int


@dataclass(frozen=True)
class ModelSettings:
    selector: str
    updater: str
    thread_dim: int
    embed_dim: int
    heads: int
    ff_dim: int
    tau: float
    dropout_rate: float
    learned_empty: bool

    def dims(self, clip_dim: int) -> Dims:
        return Dims(
            clip_dim=clip_dim,
            thread_dim=self.thread_dim,
            embed_dim=self.embed_dim,
            heads=self.heads,
            ff_dim=self.ff_dim,
        )


@dataclass(frozen=True)
class TrainSettings:
    pretrain_steps: int
    batch_size: int
    pretrain_lr: tuple[tuple[int, float], ...]
    finetune_steps: int
    finetune_lr: float
    patience: int
    eval_interval: int
    grad_clip: float | None
    checkpoint_interval: int

    def pretrain_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            steps=self.pretrain_steps,
            batch_size=self.batch_size,
            lr_schedule=self.pretrain_lr,
            seed=seed,
            dropout=True,
            grad_clip=self.grad_clip,
            checkpoint_interval=self.checkpoint_interval,
        )

    def finetune_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            steps=self.finetune_steps,
            batch_size=self.batch_size,
            lr_schedule=((0, self.finetune_lr),),
            seed=seed,
            patience=self.patience,
            eval_interval=self.eval_interval,
            dropout=False,
            grad_clip=self.grad_clip,
            checkpoint_interval=self.checkpoint_interval,
        )


@dataclass(frozen=True)
class RunConfig:
    profile: str
    seed: int
    out_dir: str
    world: WorldConfig
    story: SynthStoryConfig
    model: ModelSettings
    train: TrainSettings
    loss: LossConfig
    eval: EvalSettings
    raw: dict

    def component_seed(self, component: str) -> int:
        return component_seed(self.seed, component)

    def world_config(self, component: str, index: int = 0) -> WorldConfig:
        from dataclasses import replace

        return replace(self.world, seed=component_seed(self.seed, component, index))


def component_seed(master_seed: int, component: str, index: int = 0) -> int:
    """Stable per-purpose integer seed derived from the master seed."""
    idx = SEED_COMPONENTS[component]
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(idx, index))
    return int(seq.generate_state(1)[0])


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _build(doc: dict) -> RunConfig:
    world = WorldConfig(**doc["world"], seed=0)
    story = SynthStoryConfig(**doc["story"])
    model = ModelSettings(**doc["model"])
    train_doc = dict(doc["train"])
    train_doc["pretrain_lr"] = tuple(
        (int(step), float(lr)) for step, lr in train_doc["pretrain_lr"]
    )
    train = TrainSettings(**train_doc)
    loss = LossConfig(**doc["loss"])
    ev = EvalSettings(**doc["eval"])
    return RunConfig(
        profile=doc["profile"],
        seed=int(doc["seed"]),
        out_dir=doc["out_dir"],
        world=world,
        story=story,
        model=model,
        train=train,
        loss=loss,
        eval=ev,
        raw=doc,
    )


def load_config(
    path: Path | str | None = None,
    profile: str | None = None,
    seed: int | None = None,
    out_dir: str | None = None,
) -> RunConfig:
    """Load and validate a run config from a file and/or CLI overrides."""
    doc: dict = {}
    if path is not None:
        with open(path) as fh:
            doc = json.load(fh)
    if profile is not None:
        doc["profile"] = profile
    doc.setdefault("profile", "desk")
    if doc["profile"] not in PROFILES:
        raise ConfigError(f"unknown profile {doc['profile']!r} (have {sorted(PROFILES)})")
    if seed is not None:
        doc["seed"] = seed
    if out_dir is not None:
        doc["out_dir"] = out_dir
    doc.setdefault("seed", 0)
    doc.setdefault("out_dir", "runs/latest")
    merged = _merge({"profile": doc["profile"], "seed": 0, "out_dir": "", **PROFILES[doc["profile"]]}, doc)
    try:
        jsonschema.validate(merged, SCHEMA)
    except jsonschema.ValidationError as err:
        path_str = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {path_str}: {err.message}") from err
    return _build(merged)


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]
