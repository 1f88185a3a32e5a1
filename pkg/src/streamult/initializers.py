"""Deterministic Xavier-uniform parameter creation."""

from __future__ import annotations

import math

import numpy as np

from .numeric import AttentionWeights, FeedForwardWeights, LayerNormWeights, ParamTape, Tensor


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def matrix(tape: ParamTape, name: str, rows: int, cols: int, rng: np.random.Generator) -> Tensor:
    return tape.add(name, xavier_uniform(rng, (rows, cols), rows, cols))


def attention_weights(tape: ParamTape, prefix: str, d: int, rng: np.random.Generator) -> AttentionWeights:
    return AttentionWeights(*(matrix(tape, f"{prefix}.{w}", d, d, rng) for w in ("w_q", "w_k", "w_v", "w_o")))


def layer_norm_weights(tape: ParamTape, prefix: str, d: int) -> LayerNormWeights:
    return LayerNormWeights(tape.add(f"{prefix}.gain", np.ones(d)), tape.add(f"{prefix}.bias", np.zeros(d)))


def feed_forward_weights(tape: ParamTape, prefix: str, d: int, d_ff: int, rng: np.random.Generator) -> FeedForwardWeights:
    return FeedForwardWeights(
        w1=matrix(tape, f"{prefix}.w1", d, d_ff, rng),
        b1=tape.add(f"{prefix}.b1", np.zeros(d_ff)),
        w2=matrix(tape, f"{prefix}.w2", d_ff, d, rng),
        b2=tape.add(f"{prefix}.b2", np.zeros(d)),
    )


def conv_kernel(tape: ParamTape, name: str, k: int, d_in: int, d_out: int, rng: np.random.Generator) -> Tensor:
    return tape.add(name, xavier_uniform(rng, (k, d_in, d_out), k * d_in, k * d_out))
