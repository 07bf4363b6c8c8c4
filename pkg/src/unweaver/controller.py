"""The neural controller over the thread bank, plus thread-update rules.

Two selector variants are provided. The *linear* selector embeds the clip and
every thread state into a shared space and scores each thread by cosine
similarity; a single learned scalar is the new-thread logit and acts as the
similarity threshold an existing thread must beat. The *transformer* selector
instead contextualizes the clip embedding, the thread embeddings, and a
learned new-thread token with one encoder layer (no positional encodings: the
bank is a set) and scores by cosine in the contextualized space.

Encoder layer equations (post-norm, ReLU feed-forward, eps 1e-5):

    a   = MultiHead(x) = concat_h( softmax(Q_h K_h^T / sqrt(d_h)) V_h ) W_o + b_o
    x'  = LayerNorm(x + Dropout(a))
    f   = ReLU(x' W_1 + b_1) W_2 + b_2
    out = LayerNorm(x' + Dropout(f))

with dropout also applied to the attention weights. Dropout is active only
when a training-mode RNG is supplied; inference is deterministic.

Update rules fold a clip into a thread state: a single gated recurrent cell

    r  = sigmoid(x Wxr + h Whr + br)          (reset gate)
    u  = sigmoid(x Wxu + h Whu + bu)          (update gate)
    c  = tanh(x Wxc + (r * h) Whc + bc)       (candidate)
    h' = u * c + (1 - u) * h

or a last-clip rule, a plain linear map of the clip that discards the state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import (
    DecisionDistribution,
    ThreadAssignment,
    ThreadBank,
    bank_apply,
)

NORM_EPS_SQ = 1e-24  # floor on squared norms; keeps cosines defined at 1e-12
LN_EPS = 1e-5

SELECTORS = ("linear", "transformer")
UPDATERS = ("gru", "last_clip")


@dataclass(frozen=True)
class Dims:
    """Network dimensions: clip C, thread state D, embedding E, and the
    transformer's head count and feed-forward width."""

    clip_dim: int
    thread_dim: int
    embed_dim: int
    heads: int = 4
    ff_dim: int = 128

    def __post_init__(self) -> None:
        if min(self.clip_dim, self.thread_dim, self.embed_dim, self.ff_dim) < 1:
            raise ValueError("all dimensions must be positive")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")


@dataclass(frozen=True)
class Model:
    """A full set of learnable parameters plus variant tags.

    ``params`` maps flat names to numpy arrays; everything in it is trained.
    The empty-thread state is the zero vector unless ``learned_empty`` is set.
    """

    selector: str
    updater: str
    dims: Dims
    tau: float = 0.05
    dropout_rate: float = 0.2
    learned_empty: bool = False
    params: dict[str, np.ndarray] = None  # type: ignore[assignment]
    seed_info: dict = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.selector not in SELECTORS:
            raise ValueError(f"unknown selector {self.selector!r}")
        if self.updater not in UPDATERS:
            raise ValueError(f"unknown updater {self.updater!r}")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Model":
        return replace(
            self, params={k: v.astype(dtype) for k, v in self.params.items()}
        )

    def copy(self) -> "Model":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def empty_state(self) -> np.ndarray:
        if self.learned_empty:
            return self.params["empty_thread"]
        return np.zeros((1, self.dims.thread_dim), dtype=self.dtype)


def init_model(
    selector: str,
    updater: str,
    dims: Dims,
    seed: int,
    tau: float = 0.05,
    dropout_rate: float = 0.2,
    learned_empty: bool = False,
    dtype=np.float32,
) -> Model:
    """Initialize parameters (Glorot-uniform matrices, zero biases)."""
    rng = np.random.default_rng(seed)

    def glorot(fan_in: int, fan_out: int) -> np.ndarray:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype)

    def zeros(*shape: int) -> np.ndarray:
        return np.zeros(shape, dtype=dtype)

    C, D, E, F = dims.clip_dim, dims.thread_dim, dims.embed_dim, dims.ff_dim
    p: dict[str, np.ndarray] = {
        "clip_embed.w": glorot(C, E),
        "clip_embed.b": zeros(E),
        "thread_embed.w": glorot(D, E),
        "thread_embed.b": zeros(E),
    }
    if selector == "linear":
        p["new_thread_logit"] = np.full((1,), 0.5, dtype=dtype)
    else:
        p["nt_token"] = rng.normal(0.0, E**-0.5, (1, E)).astype(dtype)
        p["attn.wq"] = glorot(E, E)
        p["attn.bq"] = zeros(E)
        # No key bias: a shared key offset shifts each attention row uniformly
        # and cancels in the softmax, so the parameter could never train.
        p["attn.wk"] = glorot(E, E)
        p["attn.wv"] = glorot(E, E)
        p["attn.bv"] = zeros(E)
        p["attn.wo"] = glorot(E, E)
        p["attn.bo"] = zeros(E)
        p["ln1.g"] = np.ones(E, dtype=dtype)
        p["ln1.b"] = zeros(E)
        p["ffn.w1"] = glorot(E, F)
        p["ffn.b1"] = zeros(F)
        p["ffn.w2"] = glorot(F, E)
        p["ffn.b2"] = zeros(E)
        p["ln2.g"] = np.ones(E, dtype=dtype)
        p["ln2.b"] = zeros(E)
    if updater == "gru":
        for gate in ("r", "u", "c"):
            p[f"gru.wx_{gate}"] = glorot(C, D)
            p[f"gru.wh_{gate}"] = glorot(D, D)
            p[f"gru.b_{gate}"] = zeros(D)
    else:
        p["last_clip.w"] = glorot(C, D)
        p["last_clip.b"] = zeros(D)
    if learned_empty:
        p["empty_thread"] = zeros(1, D)
    return Model(
        selector=selector,
        updater=updater,
        dims=dims,
        tau=tau,
        dropout_rate=dropout_rate,
        learned_empty=learned_empty,
        params=p,
        seed_info={"init_seed": int(seed)},
    )


def wrap_params(model: Model, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in model.params.items()}


# -- graph-level forward passes -------------------------------------------------


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.affine(x, w, b)


def _layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return ad.layer_norm(x, gain, bias, LN_EPS)


def _cosine_rows(rows: Tensor, probe: Tensor) -> Tensor:
    """Cosine of ``probe`` (1, E) against each row of ``rows`` (k, E) -> (k,).

    Fused op with a hand-written backward; squared norms are floored at
    NORM_EPS_SQ (gradient blocked through a floored norm)."""
    r, u = rows.data, probe.data
    dots = r @ u.T  # (k, 1)
    r_sq = (r * r).sum(axis=1, keepdims=True)
    u_sq = (u * u).sum(axis=1, keepdims=True)
    r_mask = r_sq > NORM_EPS_SQ
    u_mask = u_sq > NORM_EPS_SQ
    rn = np.sqrt(np.maximum(r_sq, NORM_EPS_SQ))
    un = np.sqrt(np.maximum(u_sq, NORM_EPS_SQ))
    inv = 1.0 / (rn * un)
    cos = dots * inv

    def bw(g):
        g2 = g.reshape(-1, 1)
        d_dots = g2 * inv
        d_rn = -(g2 * dots) * inv / rn
        d_un = (-(g2 * dots) * inv / un).sum(axis=0, keepdims=True)
        d_rows = d_dots * u + (r_mask * d_rn / rn) * r
        d_probe = (d_dots * r).sum(axis=0, keepdims=True) + (u_mask * d_un / un) * u
        return (d_rows, d_probe)

    return Tensor._make(cos.reshape(-1), (rows, probe), bw)


def _encoder_layer(
    p: dict[str, Tensor],
    x: Tensor,
    heads: int,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    seq, embed = x.shape
    head_dim = embed // heads

    def split_heads(t: Tensor) -> Tensor:
        return t.reshape(seq, heads, head_dim).transpose(1, 0, 2)

    q = split_heads(_linear(x, p["attn.wq"], p["attn.bq"]))
    k = split_heads(x @ p["attn.wk"])
    v = split_heads(_linear(x, p["attn.wv"], p["attn.bv"]))
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(head_dim))
    attn = ad.softmax(scores, axis=-1)
    if rng is not None and dropout_rate > 0:
        attn = ad.dropout(attn, dropout_rate, rng)
    ctx = (attn @ v).transpose(1, 0, 2).reshape(seq, embed)
    a = _linear(ctx, p["attn.wo"], p["attn.bo"])
    if rng is not None and dropout_rate > 0:
        a = ad.dropout(a, dropout_rate, rng)
    x = _layer_norm(x + a, p["ln1.g"], p["ln1.b"])
    f = _linear(_linear(x, p["ffn.w1"], p["ffn.b1"]).relu(), p["ffn.w2"], p["ffn.b2"])
    if rng is not None and dropout_rate > 0:
        f = ad.dropout(f, dropout_rate, rng)
    return _layer_norm(x + f, p["ln2.g"], p["ln2.b"])


def select_graph(
    model: Model,
    p: dict[str, Tensor],
    clip: Tensor,
    bank_states: Tensor | None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits over (thread 1..n, new thread) as a length n+1 tensor.

    ``bank_states`` is an (n, D) tensor or None for an empty bank. Supplying
    ``rng`` enables dropout at the model's configured rate.
    """
    if clip.shape != (1, model.dims.clip_dim):
        raise ValueError(f"clip shape {clip.shape} != (1, {model.dims.clip_dim})")
    if bank_states is not None and bank_states.shape[1] != model.dims.thread_dim:
        raise ValueError(
            f"bank state dim {bank_states.shape[1]} != {model.dims.thread_dim}"
        )
    clip_e = _linear(clip, p["clip_embed.w"], p["clip_embed.b"])
    if model.selector == "linear":
        if bank_states is None:
            return p["new_thread_logit"]
        thread_e = _linear(bank_states, p["thread_embed.w"], p["thread_embed.b"])
        sims = _cosine_rows(thread_e, clip_e)
        return ad.concat([sims, p["new_thread_logit"]], axis=0)
    tokens = [clip_e]
    if bank_states is not None:
        tokens.append(_linear(bank_states, p["thread_embed.w"], p["thread_embed.b"]))
    tokens.append(p["nt_token"])
    seq = ad.concat(tokens, axis=0)
    out = _encoder_layer(p, seq, model.dims.heads, model.dropout_rate, rng)
    return _cosine_rows(out[1:], out[0:1])


def update_graph(
    model: Model, p: dict[str, Tensor], clip: Tensor, state: Tensor
) -> Tensor:
    """One thread-state update step; shapes (1, C), (1, D) -> (1, D)."""
    if state.shape != (1, model.dims.thread_dim):
        raise ValueError(f"state shape {state.shape} != (1, {model.dims.thread_dim})")
    if clip.shape != (1, model.dims.clip_dim):
        raise ValueError(f"clip shape {clip.shape} != (1, {model.dims.clip_dim})")
    if model.updater == "last_clip":
        return _linear(clip, p["last_clip.w"], p["last_clip.b"])
    return _gru_step(
        clip,
        state,
        p["gru.wx_r"], p["gru.wh_r"], p["gru.b_r"],
        p["gru.wx_u"], p["gru.wh_u"], p["gru.b_u"],
        p["gru.wx_c"], p["gru.wh_c"], p["gru.b_c"],
    )


def _gru_step(
    clip: Tensor,
    state: Tensor,
    wx_r: Tensor, wh_r: Tensor, b_r: Tensor,
    wx_u: Tensor, wh_u: Tensor, b_u: Tensor,
    wx_c: Tensor, wh_c: Tensor, b_c: Tensor,
) -> Tensor:
    """Fused gated-recurrent step (see module docstring for the equations)."""
    x, h = clip.data, state.data
    r = _np_sigmoid(x @ wx_r.data + h @ wh_r.data + b_r.data)
    u = _np_sigmoid(x @ wx_u.data + h @ wh_u.data + b_u.data)
    rh = r * h
    c = np.tanh(x @ wx_c.data + rh @ wh_c.data + b_c.data)
    out = u * c + (1.0 - u) * h

    def bw(g):
        d_au = g * (c - h) * u * (1.0 - u)
        d_ac = g * u * (1.0 - c * c)
        d_rh = d_ac @ wh_c.data.T
        d_ar = d_rh * h * r * (1.0 - r)
        d_x = d_ar @ wx_r.data.T + d_au @ wx_u.data.T + d_ac @ wx_c.data.T
        d_h = (
            g * (1.0 - u)
            + d_rh * r
            + d_ar @ wh_r.data.T
            + d_au @ wh_u.data.T
        )
        return (
            d_x,
            d_h,
            x.T @ d_ar, h.T @ d_ar, d_ar.sum(axis=0),
            x.T @ d_au, h.T @ d_au, d_au.sum(axis=0),
            x.T @ d_ac, rh.T @ d_ac, d_ac.sum(axis=0),
        )

    return Tensor._make(
        out,
        (clip, state, wx_r, wh_r, b_r, wx_u, wh_u, b_u, wx_c, wh_c, b_c),
        bw,
    )


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


# -- numpy-facing operations ----------------------------------------------------


def _bank_tensor(model: Model, bank: ThreadBank) -> Tensor | None:
    if bank.count == 0:
        return None
    return Tensor(bank.states.astype(model.dtype, copy=False))


def select_linear(model: Model, clip: np.ndarray, bank: ThreadBank) -> np.ndarray:
    if model.selector != "linear":
        raise ValueError("model does not use the linear selector")
    return select_logits(model, clip, bank)


def select_transformer(model: Model, clip: np.ndarray, bank: ThreadBank) -> np.ndarray:
    if model.selector != "transformer":
        raise ValueError("model does not use the transformer selector")
    return select_logits(model, clip, bank)


def select_logits(model: Model, clip: np.ndarray, bank: ThreadBank) -> np.ndarray:
    """Deterministic (dropout-free) logits for one clip against a bank."""
    if bank.state_dim != model.dims.thread_dim:
        raise ValueError(
            f"bank state dim {bank.state_dim} != model thread dim {model.dims.thread_dim}"
        )
    p = wrap_params(model)
    clip_t = Tensor(np.asarray(clip, dtype=model.dtype).reshape(1, -1))
    return select_graph(model, p, clip_t, _bank_tensor(model, bank)).data


def softmax_with_temperature(logits, tau: float):
    """Temperature softmax; numerically stable via max subtraction."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if isinstance(logits, Tensor):
        return ad.softmax(logits / tau)
    arr = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("logits must be finite")
    shifted = (arr - arr.max()) / tau
    e = np.exp(shifted)
    return e / e.sum()


def decide(probs) -> int:
    """1-based argmax with ties broken to the lowest index."""
    arr = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return int(np.argmax(arr)) + 1


def update_thread(model: Model, clip: np.ndarray, state: np.ndarray) -> np.ndarray:
    """Numpy wrapper around one update step; accepts (D,) or (1, D) states."""
    p = wrap_params(model)
    clip_t = Tensor(np.asarray(clip, dtype=model.dtype).reshape(1, -1))
    state_t = Tensor(np.asarray(state, dtype=model.dtype).reshape(1, -1))
    return update_graph(model, p, clip_t, state_t).data.reshape(-1)


def unweave_online(
    model: Model, clips: np.ndarray
) -> tuple[ThreadAssignment, list[DecisionDistribution]]:
    """Greedy online rollout: select, decide, update, repeat.

    The first clip always starts thread 1 (the empty bank offers no other
    option). The returned assignment is canonical by construction.
    """
    clips = np.asarray(clips, dtype=model.dtype)
    if clips.ndim != 2 or clips.shape[0] == 0:
        raise ValueError("clips must be a non-empty (T, C) array")
    p = wrap_params(model)
    bank = ThreadBank.empty(model.dims.thread_dim, dtype=model.dtype)
    labels: list[int] = []
    dists: list[DecisionDistribution] = []
    for clip in clips:
        clip_t = Tensor(clip.reshape(1, -1))
        logits = select_graph(model, p, clip_t, _bank_tensor(model, bank))
        probs = softmax_with_temperature(logits.data, model.tau)
        y = decide(probs)
        dists.append(DecisionDistribution(probs=probs, chosen=y))
        labels.append(y)
        bank = bank_apply(
            bank,
            clip,
            y,
            updater=lambda c, s: update_thread(model, c, s),
            empty_state=model.empty_state().reshape(-1),
        )
    return ThreadAssignment(tuple(labels)), dists


def iter_param_names(model: Model) -> Iterator[str]:
    return iter(sorted(model.params))
