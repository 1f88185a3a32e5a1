"""Streaming crossmodal transformer for one directed modality pair (source -> target).

Queries come from the target's crossmodal state ``[C : R]``; keys and values
come from the source memory bank, the cached left context of the source, and
the source's own centre and right frames. The source side is fed its
front-end features at every layer, so only the target state is updated
layer to layer.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .emformer import KVCache, SegmentActivations
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
    take_rows,
    zeros,
)


@dataclass
class SctLayerWeights:
    attn: AttentionWeights
    ln_query: LayerNormWeights
    ln_source: LayerNormWeights
    ln_ffn: LayerNormWeights
    ln_out: LayerNormWeights
    ffn: FeedForwardWeights


@dataclass
class SctStack:
    layers: list[SctLayerWeights]
    heads: int
    eps: float = 1e-5

    @property
    def dim(self) -> int:
        return self.layers[0].attn.w_q.rows


class CrossmodalState:
    """Per-layer caches of source-side keys and values for one ordered pair."""

    def __init__(self, num_layers: int, d: int, horizon: float, recompute: bool = False):
        self.d = d
        self.horizon = horizon
        self.recompute = recompute
        self.caches = [KVCache(d, horizon, recompute) for _ in range(num_layers)]
        self.segments_processed = 0

    def nbytes(self) -> int:
        return sum(c.nbytes() for c in self.caches)

    def reset(self) -> None:
        self.caches = [KVCache(self.d, self.horizon, self.recompute) for _ in self.caches]
        self.segments_processed = 0


def new_crossmodal_state(stack: SctStack, horizon: float, recompute: bool = False) -> CrossmodalState:
    return CrossmodalState(len(stack.layers), stack.dim, horizon, recompute)


@dataclass
class CrossmodalOutput:
    center: Tensor
    times: np.ndarray


def init_crossmodal_state(target: SegmentActivations) -> Tensor:
    """Layer-0 crossmodal state: the target's own centre and right rows."""
    return concat_rows([target.center, target.right])


def sct_layer_step(
    x: Tensor,
    source: SegmentActivations,
    memory: Sequence[Tensor],
    cache: KVCache,
    weights: SctLayerWeights,
    heads: int,
    eps: float = 1e-5,
) -> Tensor:
    """One crossmodal layer; appends the source centre keys/values to ``cache``."""
    if x.rows and x.cols != source.dim:
        raise ShapeError(f"target width {x.cols} does not match source width {source.dim}")
    attn = weights.attn

    def project(rows: Tensor) -> tuple[Tensor, Tensor]:
        normed = weights.ln_source(rows, eps)
        return linear(normed, attn.w_k), linear(normed, attn.w_v)

    src = concat_rows([source.center, source.right])
    k_new, v_new = project(src)
    k_left, v_left = cache.left(project)

    out = x
    if x.rows:
        key_parts, value_parts = [k_left, k_new], [v_left, v_new]
        if memory:
            bank = concat_rows(list(memory))
            key_parts.insert(0, linear(bank, attn.w_k))
            value_parts.insert(0, linear(bank, attn.w_v))
        keys, values = concat_rows(key_parts), concat_rows(value_parts)
        if keys.rows:
            q = linear(weights.ln_query(x, eps), attn.w_q)
            z = attend(q, keys, values, attn.w_o, heads) + x
        else:
            # silent source with nothing remembered: only the residual survives
            z = x
        f = weights.ffn
        out = weights.ln_out(ffn(weights.ln_ffn(z, eps), f.w1, f.b1, f.w2, f.b2) + z, eps)

    rows = slice(0, source.center.rows)
    cache.extend(source.center_times, take_rows(k_new, rows), take_rows(v_new, rows), source.center)
    return out


def sct_forward_segment(
    state: CrossmodalState,
    target: SegmentActivations,
    source: SegmentActivations,
    memory: Sequence[Tensor],
    stack: SctStack,
) -> CrossmodalOutput:
    """Run every layer for one segment; keep the target centre rows of the last layer.

    ``memory`` must be the source bank as it stood before the source stack
    consumed this segment.
    """
    i = state.segments_processed
    if target.index != i or source.index != i:
        raise StreamingError(f"expected segment {i}, got target {target.index} and source {source.index}")
    if len(memory) > i:
        raise StreamingError(f"memory snapshot holds {len(memory)} entries at segment {i}; it must predate segment {i}")
    x = init_crossmodal_state(target)
    for n, layer in enumerate(stack.layers):
        x = sct_layer_step(x, source, memory, state.caches[n], layer, stack.heads, stack.eps)
        state.caches[n].evict(source.end)
    state.segments_processed += 1
    n_center = target.center.rows
    center = take_rows(x, slice(0, n_center)) if x.rows else zeros(0, stack.dim)
    return CrossmodalOutput(center, target.center_times)


def init_sct_layer(tape: ParamTape, prefix: str, d: int, d_ff: int, rng: np.random.Generator) -> SctLayerWeights:
    return SctLayerWeights(
        attn=attention_weights(tape, f"{prefix}.attn", d, rng),
        ln_query=layer_norm_weights(tape, f"{prefix}.ln_query", d),
        ln_source=layer_norm_weights(tape, f"{prefix}.ln_source", d),
        ln_ffn=layer_norm_weights(tape, f"{prefix}.ln_ffn", d),
        ln_out=layer_norm_weights(tape, f"{prefix}.ln_out", d),
        ffn=feed_forward_weights(tape, f"{prefix}.ffn", d, d_ff, rng),
    )
