"""Unimodal streaming self-attention with a memory bank and cached left context.

One layer step, for the activations ``X = [C : R]`` of a segment::

    X_hat = LN_attn(X)
    K = [M W_k ; K_left ; X_hat W_k]      V likewise
    Z = Attn(X_hat W_q, K, V) + X
    X' = LN_out(FFN(LN_ffn(Z)) + Z)
    m = Attn(mean(C) W_q, K, V)

``K_left``/``V_left`` are read from a per-layer cache holding the projections
of earlier centre rows; the left frames themselves are never recomputed.
"""

from __future__ import annotations

from collections import deque
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, StreamingError
from .initializers import attention_weights, feed_forward_weights, layer_norm_weights
from .numeric import (
    AttentionWeights,
    FeedForwardWeights,
    LayerNormWeights,
    ParamTape,
    Tensor,
    attend,
    concat_rows,
    ffn,
    linear,
    mean_rows,
    take_rows,
    zeros,
)


@dataclass
class SegmentActivations:
    """Layer-0 activations of one modality for one segment (left rows already dropped)."""

    index: int
    start: float
    end: float
    center: Tensor
    right: Tensor
    center_times: np.ndarray

    def __post_init__(self):
        if self.center.cols != self.right.cols:
            raise ShapeError(f"centre width {self.center.cols} differs from right width {self.right.cols}")
        if self.center.rows != len(self.center_times):
            raise ShapeError(f"{self.center.rows} centre rows but {len(self.center_times)} centre times")

    @property
    def dim(self) -> int:
        return self.center.cols


class MemoryBank:
    """FIFO of summary vectors, oldest first. ``cap=None`` keeps everything."""

    def __init__(self, cap: int | None):
        if cap is not None and cap < 0:
            raise ValueError(f"memory cap must be >= 0, got {cap}")
        self.cap = cap
        self.entries: deque[Tensor] = deque(maxlen=cap)

    def append(self, m: Tensor) -> None:
        if self.cap != 0:
            self.entries.append(m)

    def __len__(self) -> int:
        return len(self.entries)

    def snapshot(self) -> tuple[Tensor, ...]:
        return tuple(self.entries)

    def nbytes(self) -> int:
        return sum(m.data.nbytes for m in self.entries)


class KVCache:
    """Keys and values of earlier centre rows within ``horizon`` seconds of the next boundary.

    With ``recompute=True`` the cache keeps the layer inputs of those rows
    instead and re-derives keys and values on every read. Both modes give the
    same numbers bit for bit; the second exists as an oracle.
    """

    def __init__(self, d: int, horizon: float, recompute: bool = False):
        self.d = d
        self.horizon = float(horizon)
        self.recompute = recompute
        self.times = np.zeros(0)
        self.keys = zeros(0, d)
        self.values = zeros(0, d)
        self.inputs = zeros(0, d)

    def __len__(self) -> int:
        return self.times.size

    def left(self, project: Callable[[Tensor], tuple[Tensor, Tensor]]) -> tuple[Tensor, Tensor]:
        if self.recompute:
            if not len(self):
                return zeros(0, self.d), zeros(0, self.d)
            return project(self.inputs)
        return self.keys, self.values

    def extend(self, times: np.ndarray, keys: Tensor, values: Tensor, inputs: Tensor) -> None:
        times = np.asarray(times, dtype=np.float64)
        if not times.size:
            return
        if len(self) and times[0] <= self.times[-1]:
            raise StreamingError(
                f"cache rows out of order: new frame at t={times[0]} after cached t={self.times[-1]}"
            )
        self.times = np.concatenate([self.times, times])
        if self.recompute:
            self.inputs = concat_rows([self.inputs, inputs])
        else:
            self.keys = concat_rows([self.keys, keys])
            self.values = concat_rows([self.values, values])

    def evict(self, boundary: float) -> None:
        """Drop rows older than ``boundary - horizon``."""
        keep = int(np.searchsorted(self.times, boundary - self.horizon, side="left"))
        if keep == 0:
            return
        rest = slice(keep, None)
        self.times = self.times[rest]
        if self.recompute:
            self.inputs = take_rows(self.inputs, rest)
        else:
            self.keys = take_rows(self.keys, rest)
            self.values = take_rows(self.values, rest)

    def nbytes(self) -> int:
        blocks = [self.inputs] if self.recompute else [self.keys, self.values]
        return self.times.nbytes + sum(b.data.nbytes for b in blocks)


@dataclass
class EmformerLayerWeights:
    attn: AttentionWeights
    ln_attn: LayerNormWeights
    ln_ffn: LayerNormWeights
    ln_out: LayerNormWeights
    ffn: FeedForwardWeights


@dataclass
class EmformerStack:
    layers: list[EmformerLayerWeights]
    heads: int
    eps: float = 1e-5

    @property
    def dim(self) -> int:
        return self.layers[0].attn.w_q.rows


class EmformerState:
    """Per-layer memory banks and left-context caches of one stack."""

    def __init__(self, num_layers: int, d: int, cap: int | None, horizon: float, recompute: bool = False):
        self.d = d
        self.cap = cap
        self.horizon = horizon
        self.recompute = recompute
        self.banks = [MemoryBank(cap) for _ in range(num_layers)]
        self.caches = [KVCache(d, horizon, recompute) for _ in range(num_layers)]
        self.segments_processed = 0

    def nbytes(self) -> int:
        return sum(b.nbytes() for b in self.banks) + sum(c.nbytes() for c in self.caches)


def new_emformer_state(stack: EmformerStack, cap: int | None, horizon: float, recompute: bool = False) -> EmformerState:
    return EmformerState(len(stack.layers), stack.dim, cap, horizon, recompute)


def reset(state: EmformerState) -> EmformerState:
    state.banks = [MemoryBank(state.cap) for _ in state.banks]
    state.caches = [KVCache(state.d, state.horizon, state.recompute) for _ in state.caches]
    state.segments_processed = 0
    return state


def summary_vector(center: Tensor) -> tuple[Tensor, bool]:
    """Mean of the centre rows and whether the centre was empty."""
    if center.rows == 0:
        return zeros(1, center.cols), True
    return mean_rows(center), False


def emformer_layer_step(
    x: Tensor,
    n_center: int,
    center_times: np.ndarray,
    bank: MemoryBank,
    cache: KVCache,
    weights: EmformerLayerWeights,
    heads: int,
    eps: float = 1e-5,
) -> tuple[Tensor, Tensor | None]:
    """One layer over ``x = [C : R]``; appends this segment's centre keys/values to ``cache``.

    Returns the next-layer activations and the memory entry (``None`` for an
    empty centre). The bank is read, not written.
    """
    if x.rows == 0:
        return x, None
    attn = weights.attn

    def project(rows: Tensor) -> tuple[Tensor, Tensor]:
        normed = weights.ln_attn(rows, eps)
        return linear(normed, attn.w_k), linear(normed, attn.w_v)

    x_hat = weights.ln_attn(x, eps)
    k_new = linear(x_hat, attn.w_k)
    v_new = linear(x_hat, attn.w_v)
    k_left, v_left = cache.left(project)
    key_parts, value_parts = [k_left, k_new], [v_left, v_new]
    if len(bank):
        memory = concat_rows(bank.snapshot())
        key_parts.insert(0, linear(memory, attn.w_k))
        value_parts.insert(0, linear(memory, attn.w_v))
    keys, values = concat_rows(key_parts), concat_rows(value_parts)

    z = attend(linear(x_hat, attn.w_q), keys, values, attn.w_o, heads) + x
    f = weights.ffn
    out = weights.ln_out(ffn(weights.ln_ffn(z, eps), f.w1, f.b1, f.w2, f.b2) + z, eps)

    center = take_rows(x, slice(0, n_center))
    summary, empty = summary_vector(center)
    m = None if empty else attend(linear(summary, attn.w_q), keys, values, attn.w_o, heads)

    rows = slice(0, n_center)
    cache.extend(center_times, take_rows(k_new, rows), take_rows(v_new, rows), center)
    return out, m


def emformer_forward_segment(state: EmformerState, acts: SegmentActivations, stack: EmformerStack) -> Tensor:
    """Run all layers on one segment and return the last layer's centre rows."""
    if acts.index != state.segments_processed:
        raise StreamingError(f"expected segment {state.segments_processed}, got {acts.index}")
    if acts.dim != stack.dim:
        raise ShapeError(f"segment width {acts.dim} does not match stack width {stack.dim}")
    n_center = acts.center.rows
    x = concat_rows([acts.center, acts.right])
    for n, layer in enumerate(stack.layers):
        x, m = emformer_layer_step(
            x, n_center, acts.center_times, state.banks[n], state.caches[n], layer, stack.heads, stack.eps
        )
        if m is not None:
            state.banks[n].append(m)
        state.caches[n].evict(acts.end)
    state.segments_processed += 1
    return take_rows(x, slice(0, n_center))


def init_emformer_layer(tape: ParamTape, prefix: str, d: int, d_ff: int, rng: np.random.Generator) -> EmformerLayerWeights:
    return EmformerLayerWeights(
        attn=attention_weights(tape, f"{prefix}.attn", d, rng),
        ln_attn=layer_norm_weights(tape, f"{prefix}.ln_attn", d),
        ln_ffn=layer_norm_weights(tape, f"{prefix}.ln_ffn", d),
        ln_out=layer_norm_weights(tape, f"{prefix}.ln_out", d),
        ffn=feed_forward_weights(tape, f"{prefix}.ffn", d, d_ff, rng),
    )
