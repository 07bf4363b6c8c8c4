"""Teacher-forced training: focal loss, exact gradients, Adam, and loops.

During training the bank is populated from the ground-truth assignment, never
from model decisions, and the loss is imposed on each step's decision
distribution. Gradients flow through the forced bank states into earlier
update steps (the whole rollout is one differentiable graph). The decision at
t=1 has a single option and is excluded from the loss.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .autodiff import Tensor, concat
from .controller import (
    Model,
    select_graph,
    softmax_with_temperature,
    unweave_online,
    update_graph,
    wrap_params,
)
from .core import Scenario, Story, ThreadAssignment, scenario_of
from .metrics import rand_index

PROB_FLOOR = 1e-12


class NonFiniteLossError(RuntimeError):
    def __init__(self, story_id: str):
        super().__init__(f"non-finite loss on story {story_id!r}")
        self.story_id = story_id


class TrainingDiverged(RuntimeError):
    def __init__(self, story_id: str, checkpoint_path: Path | None):
        msg = f"training diverged on story {story_id!r}"
        if checkpoint_path is not None:
            msg += f"; last good checkpoint at {checkpoint_path}"
        super().__init__(msg)
        self.story_id = story_id
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class LossConfig:
    """Scenario weights and the focal exponent.

    Defaults follow the inverse-frequency weighting (continue 1, resume 100,
    new 10) with the canonical focal exponent 2.
    """

    alpha_continue: float = 1.0
    alpha_resume: float = 100.0
    alpha_new: float = 10.0
    gamma: float = 2.0

    def __post_init__(self) -> None:
        if min(self.alpha_continue, self.alpha_resume, self.alpha_new) <= 0:
            raise ValueError("scenario weights must be positive")
        if self.gamma < 0:
            raise ValueError("focal exponent must be >= 0")

    def alpha_for(self, scenario: Scenario) -> float:
        return {
            Scenario.CONTINUE: self.alpha_continue,
            Scenario.RESUME: self.alpha_resume,
            Scenario.NEW: self.alpha_new,
        }[scenario]


@dataclass(frozen=True)
class TrainConfig:
    """Loop hyperparameters shared by pretraining and finetuning."""

    steps: int
    batch_size: int = 16
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 2e-4), (25_000, 2e-5))
    seed: int = 0
    patience: int = 5
    eval_interval: int = 50
    dropout: bool = True
    grad_clip: float | None = None
    checkpoint_interval: int = 500

    def __post_init__(self) -> None:
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("step and batch counts must be positive")
        starts = [s for s, _ in self.lr_schedule]
        if not starts or starts[0] != 0:
            raise ValueError("lr schedule must start at step 0")
        if any(b >= a for a, b in zip(starts[1:], starts)):
            raise ValueError("lr schedule breakpoints must increase")
        if self.patience < 0 or self.eval_interval < 1:
            raise ValueError("patience must be >= 0 and eval_interval >= 1")

    def lr_at(self, step: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if step >= start:
                lr = value
        return lr


@dataclass
class TrainStats:
    """Per-batch diagnostics collected while computing the loss."""

    loss: float = 0.0
    correct: dict[Scenario, int] = field(
        default_factory=lambda: {s: 0 for s in Scenario}
    )
    total: dict[Scenario, int] = field(
        default_factory=lambda: {s: 0 for s in Scenario}
    )
    saturations: int = 0

    def accuracy(self, scenario: Scenario) -> float:
        n = self.total[scenario]
        return self.correct[scenario] / n if n else float("nan")


# -- forward passes -------------------------------------------------------------


def _forced_distributions(
    model: Model,
    p: dict[str, Tensor],
    story: Story,
    rng: np.random.Generator | None = None,
) -> list[Tensor]:
    """Decision distributions under a bank forced to the ground truth."""
    if story.ground_truth is None:
        raise ValueError(f"story {story.id!r} has no ground truth")
    clips = story.clips.astype(model.dtype, copy=False)
    labels = story.ground_truth.labels
    if model.learned_empty:
        empty = p["empty_thread"]
    else:
        empty = Tensor(np.zeros((1, model.dims.thread_dim), dtype=model.dtype))
    bank: list[Tensor] = []
    dists: list[Tensor] = []
    for t, y in enumerate(labels, start=1):
        clip_t = Tensor(clips[t - 1].reshape(1, -1))
        bank_t = concat(bank, axis=0) if bank else None
        logits = select_graph(model, p, clip_t, bank_t, rng)
        dists.append(softmax_with_temperature(logits, model.tau))
        prev = bank[y - 1] if y <= len(bank) else empty
        state = update_graph(model, p, clip_t, prev)
        if y <= len(bank):
            bank[y - 1] = state
        else:
            bank.append(state)
    return dists


def teacher_forced_rollout(model: Model, story: Story) -> list[np.ndarray]:
    """Numpy distributions per clip; distribution t has length N(y_{1:t-1})+1."""
    p = wrap_params(model)
    return [d.data for d in _forced_distributions(model, p, story)]


def focal_loss(
    dists: Sequence,
    assignment: ThreadAssignment,
    cfg: LossConfig,
    stats: TrainStats | None = None,
):
    """Scenario-weighted focal loss over the decisions at t >= 2.

    Accepts numpy distributions (returns a float) or graph tensors (returns
    a scalar tensor). Probabilities are clamped at 1e-12 before the log;
    clamping increments ``stats.saturations`` instead of raising.
    """
    labels = assignment.labels
    if len(dists) != len(labels):
        raise ValueError("need one distribution per clip")
    tensor_mode = isinstance(dists[0], Tensor)
    loss = None
    for t in range(2, len(labels) + 1):
        y = labels[t - 1]
        d = dists[t - 1]
        n_options = max(labels[: t - 1]) + 1
        size = d.shape[0] if tensor_mode else np.asarray(d).shape[0]
        if size != n_options:
            raise ValueError(
                f"distribution at t={t} has length {size}, expected {n_options}"
            )
        scenario = scenario_of(assignment, t)
        alpha = cfg.alpha_for(scenario)
        if stats is not None:
            stats.total[scenario] += 1
            chosen = int(np.argmax(d.data if tensor_mode else d))
            if chosen == y - 1:
                stats.correct[scenario] += 1
        if tensor_mode:
            prob = d[y - 1]
            if float(prob.data) < PROB_FLOOR and stats is not None:
                stats.saturations += 1
            log_p = prob.clamp_min(PROB_FLOOR).log()
            term = log_p if cfg.gamma == 0 else (1.0 - prob) ** cfg.gamma * log_p
            term = alpha * term
        else:
            prob = float(d[y - 1])
            if prob < PROB_FLOOR and stats is not None:
                stats.saturations += 1
            log_p = math.log(max(prob, PROB_FLOOR))
            focal = 1.0 if cfg.gamma == 0 else (1.0 - prob) ** cfg.gamma
            term = alpha * focal * log_p
        loss = term if loss is None else loss + term
    if loss is None:  # single-clip story: no scored decisions
        return Tensor(np.zeros((), dtype=model_dtype(dists))) if tensor_mode else 0.0
    return -loss


def model_dtype(dists: Sequence) -> np.dtype:
    first = dists[0]
    return first.data.dtype if isinstance(first, Tensor) else np.asarray(first).dtype


def loss_and_grads(
    model: Model,
    stories: Sequence[Story],
    cfg: LossConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray], TrainStats]:
    """Batch focal loss (mean over stories) and exact parameter gradients."""
    if not stories:
        raise ValueError("empty batch")
    p = wrap_params(model, requires_grad=True)
    dropout_rng = rng if (train_mode and model.dropout_rate > 0) else None
    stats = TrainStats()
    total = None
    for story in stories:
        dists = _forced_distributions(model, p, story, dropout_rng)
        story_loss = focal_loss(dists, story.ground_truth, cfg, stats)
        if not np.isfinite(float(story_loss.data)):
            raise NonFiniteLossError(story.id)
        total = story_loss if total is None else total + story_loss
    loss = total * (1.0 / len(stories))
    loss.backward()
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in p.items()
    }
    stats.loss = float(loss.data)
    return stats.loss, grads, stats


# -- gradient verification --------------------------------------------------------


@dataclass(frozen=True)
class GradReport:
    """Max relative error between analytic and central-difference gradients."""

    per_group: dict[str, float]
    coords_checked: dict[str, int]
    overall: float

    def format(self) -> str:
        width = max(len(n) for n in self.per_group) if self.per_group else 0
        lines = [
            f"{name:<{width}}  max rel err {err:.3e}  ({self.coords_checked[name]} coords)"
            for name, err in sorted(self.per_group.items())
        ]
        lines.append(f"overall max relative error: {self.overall:.3e}")
        return "\n".join(lines)


def finite_diff_check(
    model: Model,
    story: Story,
    cfg: LossConfig | None = None,
    eps: float = 1e-4,
    max_coords: int = 200,
    seed: int = 0,
) -> GradReport:
    """Central-difference check of every parameter group, in 64-bit mode.

    Samples up to ``max_coords`` coordinates per tensor; zero-size groups are
    skipped and reported as absent.
    """
    cfg = cfg or LossConfig()
    m64 = model.astype(np.float64)
    _, grads, _ = loss_and_grads(m64, [story], cfg)
    rng = np.random.default_rng(seed)

    def loss_value(params: dict[str, np.ndarray]) -> float:
        probe = Model(
            selector=m64.selector,
            updater=m64.updater,
            dims=m64.dims,
            tau=m64.tau,
            dropout_rate=m64.dropout_rate,
            learned_empty=m64.learned_empty,
            params=params,
            seed_info=m64.seed_info,
        )
        p = wrap_params(probe)
        dists = _forced_distributions(probe, p, story)
        return float(focal_loss(dists, story.ground_truth, cfg).data)

    per_group: dict[str, float] = {}
    coords_checked: dict[str, int] = {}
    base = {k: v.copy() for k, v in m64.params.items()}
    for name, tensor in base.items():
        if tensor.size == 0:
            continue
        count = min(max_coords, tensor.size)
        flat_idx = rng.choice(tensor.size, size=count, replace=False)
        worst = 0.0
        for idx in flat_idx:
            coord = np.unravel_index(idx, tensor.shape)
            original = tensor[coord]
            tensor[coord] = original + eps
            f_plus = loss_value(base)
            tensor[coord] = original - eps
            f_minus = loss_value(base)
            tensor[coord] = original
            numeric = (f_plus - f_minus) / (2 * eps)
            analytic = grads[name][coord]
            rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, rel)
        per_group[name] = worst
        coords_checked[name] = count
    overall = max(per_group.values()) if per_group else 0.0
    return GradReport(per_group=per_group, coords_checked=coords_checked, overall=overall)


# -- optimizer --------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @staticmethod
    def initial(params: dict[str, np.ndarray]) -> "AdamState":
        return AdamState(
            step=0,
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; pure function of its inputs."""
    t = state.step + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, value in params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1 - beta1) * g
        v = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_params[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


# -- training loops ----------------------------------------------------------------


class TrainingLog:
    """Append-only CSV of (step, loss, lr, scenario accuracies, wall time)."""

    FIELDS = (
        "step",
        "loss",
        "lr",
        "acc_continue",
        "acc_new",
        "acc_resume",
        "saturations",
        "wall_time_s",
    )

    def __init__(self, path: Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.FIELDS)

    def row(self, step: int, stats: TrainStats, lr: float, wall: float) -> None:
        if not self.path:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [
                    step,
                    f"{stats.loss:.6f}",
                    f"{lr:.2e}",
                    f"{stats.accuracy(Scenario.CONTINUE):.4f}",
                    f"{stats.accuracy(Scenario.NEW):.4f}",
                    f"{stats.accuracy(Scenario.RESUME):.4f}",
                    stats.saturations,
                    f"{wall:.3f}",
                ]
            )


def pretrain(
    model: Model,
    batches: Iterator[Sequence[Story]],
    cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    log_path: Path | None = None,
    checkpoint_dir: Path | None = None,
    save_checkpoint: Callable[[Model, Path], None] | None = None,
) -> Model:
    """Run the two-phase schedule over freshly generated story batches.

    A non-finite loss aborts with the last good checkpoint retained on disk
    (when a checkpoint directory is configured).
    """
    loss_cfg = loss_cfg or LossConfig()
    if cfg.steps == 0:
        return model
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    params = {k: v.copy() for k, v in model.params.items()}
    state = AdamState.initial(params)
    log = TrainingLog(log_path)
    last_checkpoint: Path | None = None
    current = model
    start = time.perf_counter()
    for step in range(cfg.steps):
        batch = next(batches)
        current = _with_params(model, params)
        lr = cfg.lr_at(step)
        try:
            _, grads, stats = loss_and_grads(
                current, batch, loss_cfg, train_mode=cfg.dropout, rng=rng
            )
        except NonFiniteLossError as err:
            raise TrainingDiverged(err.story_id, last_checkpoint) from err
        if cfg.grad_clip is not None:
            grads = clip_gradients(grads, cfg.grad_clip)
        params, state = adam_step(params, grads, state, lr)
        log.row(step, stats, lr, time.perf_counter() - start)
        if (
            checkpoint_dir is not None
            and save_checkpoint is not None
            and (step + 1) % cfg.checkpoint_interval == 0
        ):
            last_checkpoint = Path(checkpoint_dir) / f"step_{step + 1:07d}.npz"
            save_checkpoint(_with_params(model, params), last_checkpoint)
    final = _with_params(model, params)
    if checkpoint_dir is not None and save_checkpoint is not None:
        last_checkpoint = Path(checkpoint_dir) / "final.npz"
        save_checkpoint(final, last_checkpoint)
    return final


def finetune(
    model: Model,
    train_stories: Sequence[Story],
    val_stories: Sequence[Story],
    cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    log_path: Path | None = None,
) -> Model:
    """Finetune with dropout off and early stopping on validation mean RI."""
    if not train_stories or not val_stories:
        raise ValueError("finetune requires non-empty train and validation splits")
    loss_cfg = loss_cfg or LossConfig()
    rng = np.random.default_rng(cfg.seed)
    params = {k: v.copy() for k, v in model.params.items()}
    state = AdamState.initial(params)
    log = TrainingLog(log_path)
    best_params = {k: v.copy() for k, v in params.items()}
    best_ri = mean_online_ri(_with_params(model, params), val_stories)
    misses = 0
    start = time.perf_counter()
    for step in range(cfg.steps):
        idx = rng.choice(len(train_stories), size=min(cfg.batch_size, len(train_stories)), replace=False)
        batch = [train_stories[i] for i in idx]
        current = _with_params(model, params)
        _, grads, stats = loss_and_grads(current, batch, loss_cfg, train_mode=False)
        if cfg.grad_clip is not None:
            grads = clip_gradients(grads, cfg.grad_clip)
        params, state = adam_step(params, grads, state, cfg.lr_at(step))
        log.row(step, stats, cfg.lr_at(step), time.perf_counter() - start)
        if (step + 1) % cfg.eval_interval == 0:
            ri = mean_online_ri(_with_params(model, params), val_stories)
            if ri > best_ri:
                best_ri = ri
                best_params = {k: v.copy() for k, v in params.items()}
                misses = 0
            else:
                misses += 1
                if misses > cfg.patience:
                    break
    return _with_params(model, best_params)


def mean_online_ri(model: Model, stories: Iterable[Story]) -> float:
    """Mean Rand index of online rollouts; single-clip stories are skipped."""
    scores = []
    for story in stories:
        if len(story) < 2 or story.ground_truth is None:
            continue
        predicted, _ = unweave_online(model, story.clips)
        scores.append(rand_index(story.ground_truth.labels, predicted.labels))
    if not scores:
        raise ValueError("no scorable stories (need ground truth and >= 2 clips)")
    return float(np.mean(scores))


def _with_params(model: Model, params: dict[str, np.ndarray]) -> Model:
    from dataclasses import replace

    return replace(model, params=params)
