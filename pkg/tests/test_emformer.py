import copy

import numpy as np
import pytest

from oracles import arrays_of, attention, layer_norm, pre_ln_encoder_layer
from streamult.emformer import (
    EmformerStack,
    KVCache,
    MemoryBank,
    SegmentActivations,
    emformer_forward_segment,
    init_emformer_layer,
    new_emformer_state,
    reset,
)
from streamult.errors import ShapeError, StreamingError
from streamult.numeric import ParamTape, Tensor, no_grad, zeros


def make_stack(d=4, layers=2, heads=2, seed=0, jitter=True):
    rng = np.random.default_rng(seed)
    tape = ParamTape()
    stack = EmformerStack([init_emformer_layer(tape, f"l.{n}", d, 2 * d, rng) for n in range(layers)], heads)
    if jitter:
        for _, p in tape.items():  # move gains/biases off their trivial init
            p.data += 0.1 * rng.normal(size=p.shape)
    return tape, stack


def segments(x, times, seg, right=0.0):
    """Split one sequence into activations for consecutive segments of ``seg`` seconds."""
    times = np.asarray(times, dtype=np.float64)
    n = int(np.floor((times[-1] - times[0]) / seg)) + 1
    out = []
    for i in range(n):
        lo, hi = times[0] + i * seg, times[0] + (i + 1) * seg
        c = (times >= lo) & (times < hi)
        r = (times >= hi) & (times < hi + right)
        out.append(SegmentActivations(i, lo, hi, Tensor(x[c].reshape(-1, x.shape[1])),
                                      Tensor(x[r].reshape(-1, x.shape[1])), times[c]))
    return out


def run(stack, acts, cap, horizon, recompute=False):
    state = new_emformer_state(stack, cap, horizon, recompute)
    with no_grad():
        outs = [emformer_forward_segment(state, a, stack).data for a in acts]
    return outs, state


@pytest.fixture
def sequence():
    rng = np.random.default_rng(11)
    times = np.arange(12) * 0.5
    return rng.normal(size=(12, 4)), times


class TestDenseEquivalence:
    @pytest.mark.parametrize("heads", [1, 2])
    def test_single_segment_without_memory_is_pre_ln_encoder(self, sequence, heads):
        x, times = sequence
        tape, stack = make_stack(heads=heads)
        acts = segments(x, times, seg=100.0)
        assert len(acts) == 1
        (out,), _ = run(stack, acts, cap=0, horizon=1e9)
        ref = x
        for n in range(2):
            ref = pre_ln_encoder_layer(arrays_of(tape, f"l.{n}"), ref, heads)
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)

    def test_first_segment_keys_are_center_and_right(self, sequence):
        # with no memory and no cache, the layer sees exactly [C : R]
        x, times = sequence
        tape, stack = make_stack(layers=1)
        acts = segments(x, times, seg=2.0, right=1.0)
        (out, *_), _ = run(stack, acts, cap=4, horizon=2.0)
        joint = np.vstack([acts[0].center.data, acts[0].right.data])
        ref = pre_ln_encoder_layer(arrays_of(tape, "l.0"), joint, 2)[: acts[0].center.rows]
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


class TestCaching:
    @pytest.mark.parametrize("cap", [0, 1, 4, None])
    @pytest.mark.parametrize("horizon", [0.0, 1.5, 3.0])
    def test_cached_equals_recomputed_bitwise(self, sequence, cap, horizon):
        x, times = sequence
        _, stack = make_stack()
        acts = segments(x, times, seg=1.5, right=0.5)
        cached, _ = run(stack, acts, cap, horizon)
        recomputed, _ = run(stack, acts, cap, horizon, recompute=True)
        for a, b in zip(cached, recomputed):
            np.testing.assert_array_equal(a, b)

    def test_cache_keeps_only_rows_within_horizon(self, sequence):
        x, times = sequence
        _, stack = make_stack()
        acts = segments(x, times, seg=1.5)
        state = new_emformer_state(stack, 2, 1.0)
        with no_grad():
            for a in acts[:3]:
                emformer_forward_segment(state, a, stack)
        np.testing.assert_array_equal(state.caches[0].times, [3.5, 4.0])

    def test_out_of_order_cache_rows_rejected(self):
        cache = KVCache(2, 5.0)
        rows = Tensor(np.ones((1, 2)))
        cache.extend([1.0], rows, rows, rows)
        with pytest.raises(StreamingError):
            cache.extend([1.0], rows, rows, rows)


class TestMemoryBank:
    def test_fifo_eviction(self):
        bank = MemoryBank(2)
        for k in range(4):
            bank.append(Tensor([[float(k)]]))
        assert [m.item() for m in bank.snapshot()] == [2.0, 3.0]

    def test_zero_cap_stores_nothing(self):
        bank = MemoryBank(0)
        bank.append(Tensor([[1.0]]))
        assert len(bank) == 0

    def test_bank_holds_previous_summaries(self, sequence):
        x, times = sequence
        _, stack = make_stack()
        acts = segments(x, times, seg=1.5)
        _, three = run(stack, acts[:3], cap=4, horizon=1.5)
        _, four = run(stack, acts[:4], cap=4, horizon=1.5)
        for n in range(2):
            assert len(three.banks[n]) == 3 and len(four.banks[n]) == 4
            for old, new in zip(three.banks[n].snapshot(), four.banks[n].snapshot()):
                np.testing.assert_array_equal(old.data, new.data)

    def test_small_cap_keeps_latest_summary(self, sequence):
        x, times = sequence
        _, stack = make_stack()
        acts = segments(x, times, seg=1.5)
        _, state = run(stack, acts[:3], cap=1, horizon=1.5)
        appended = []
        bank = state.banks[0]
        original = bank.append
        bank.append = lambda m: (appended.append(m), original(m))
        with no_grad():
            emformer_forward_segment(state, acts[3], stack)
        assert bank.snapshot() == (appended[-1],)

    def test_summary_is_attention_of_center_mean(self, sequence):
        x, times = sequence
        tape, stack = make_stack(layers=1)
        acts = segments(x, times, seg=100.0)
        _, state = run(stack, acts, cap=1, horizon=1e9)
        w = arrays_of(tape, "l.0")
        x_hat = layer_norm(x, w["ln_attn.gain"], w["ln_attn.bias"])
        q = x.mean(axis=0, keepdims=True)
        ref = attention(q, x_hat, w["attn.w_q"], w["attn.w_k"], w["attn.w_v"], w["attn.w_o"], 2)
        # the summary query is the raw centre mean; keys and values come from normalized rows
        np.testing.assert_allclose(state.banks[0].snapshot()[0].data, ref, rtol=0, atol=1e-12)


class TestStreamingContract:
    def test_out_of_order_segment_rejected(self, sequence):
        x, times = sequence
        _, stack = make_stack()
        acts = segments(x, times, seg=1.5)
        state = new_emformer_state(stack, 2, 1.5)
        with pytest.raises(StreamingError):
            emformer_forward_segment(state, acts[1], stack)

    def test_width_mismatch_rejected(self):
        _, stack = make_stack(d=4)
        state = new_emformer_state(stack, 2, 1.5)
        acts = SegmentActivations(0, 0.0, 1.0, Tensor(np.ones((1, 6))), zeros(0, 6), np.array([0.0]))
        with pytest.raises(ShapeError):
            emformer_forward_segment(state, acts, stack)

    def test_empty_center_passes_through(self, sequence):
        _, stack = make_stack()
        state = new_emformer_state(stack, 2, 1.5)
        acts = SegmentActivations(0, 0.0, 1.0, zeros(0, 4), zeros(0, 4), np.zeros(0))
        with no_grad():
            out = emformer_forward_segment(state, acts, stack)
        assert out.shape == (0, 4) and state.segments_processed == 1

    def test_reset_matches_fresh_state(self, sequence):
        x, times = sequence
        _, stack = make_stack()
        acts = segments(x, times, seg=1.5)
        fresh_out, fresh = run(stack, acts[:1], cap=2, horizon=1.5)
        size0 = new_emformer_state(stack, 2, 1.5).nbytes()
        _, used = run(stack, acts[:3], cap=2, horizon=1.5)
        reset(used)
        assert used.nbytes() == size0
        reset(used)
        assert used.nbytes() == size0 and used.segments_processed == 0
        with no_grad():
            again = emformer_forward_segment(used, acts[0], stack).data
        np.testing.assert_array_equal(again, fresh_out[0])

    def test_causality(self, sequence):
        x, times = sequence
        _, stack = make_stack()
        right = 0.5
        acts = segments(x, times, seg=1.5, right=right)
        base, _ = run(stack, acts, cap=2, horizon=1.5)
        horizon_1 = acts[1].end + right
        changed = x.copy()
        changed[times >= horizon_1] += np.random.default_rng(0).normal(size=changed[times >= horizon_1].shape)
        perturbed, _ = run(stack, segments(changed, times, seg=1.5, right=right), cap=2, horizon=1.5)
        for i in range(2):
            np.testing.assert_array_equal(perturbed[i], base[i])
        assert not np.array_equal(perturbed[2], base[2])

    def test_state_size_constant_once_full(self):
        rng = np.random.default_rng(2)
        times = np.arange(60) * 0.5
        x = rng.normal(size=(60, 4))
        _, stack = make_stack()
        acts = segments(x, times, seg=1.0)
        state = new_emformer_state(stack, 3, 2.0)
        sizes = []
        with no_grad():
            for a in acts:
                emformer_forward_segment(state, a, stack)
                sizes.append(state.nbytes())
        assert len(set(sizes[3:])) == 1

    def test_state_is_not_shared_between_copies(self, sequence):
        x, times = sequence
        _, stack = make_stack()
        acts = segments(x, times, seg=1.5)
        _, state = run(stack, acts[:2], cap=2, horizon=1.5)
        twin = copy.deepcopy(state)
        with no_grad():
            a = emformer_forward_segment(state, acts[2], stack).data
            b = emformer_forward_segment(twin, acts[2], stack).data
        np.testing.assert_array_equal(a, b)
