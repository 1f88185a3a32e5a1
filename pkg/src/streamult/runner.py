"""Online execution plus the parity, causality and bounded-state verifications."""

from __future__ import annotations

import json
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from .errors import StreamingError
from .model import Model, StreamingState, forward_offline, forward_segment, new_state, split_times
from .numeric import no_grad
from .segmentation import SegmentBundle, SegmentPlan, TimedSequence, materialize_bundle

Feed = Callable[[int], "SegmentBundle | None"]


class StreamFeed:
    """Pull-based feed that cuts segment ``i`` out of in-memory streams on request."""

    def __init__(self, streams: Sequence[TimedSequence], plan: SegmentPlan):
        self.streams = list(streams)
        self.plan = plan

    def __call__(self, i: int) -> SegmentBundle | None:
        if i >= self.plan.num_segments:
            return None
        return materialize_bundle(self.plan, i, self.streams)


@dataclass
class PredictionRecord:
    time: float
    value: np.ndarray
    segment: int
    latency: int

    def to_json(self) -> str:
        return json.dumps({"t": self.time, "y": self.value.tolist(), "segment": self.segment})


@dataclass
class StreamingRun:
    records: list[PredictionRecord] = field(default_factory=list)
    state_bytes: list[int] = field(default_factory=list)

    def values(self, out_dim: int) -> np.ndarray:
        if not self.records:
            return np.zeros((0, out_dim))
        return np.stack([r.value for r in self.records])

    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records])


def jsonl_sink(handle: IO[str]) -> Callable[[PredictionRecord], None]:
    def emit(record: PredictionRecord) -> None:
        handle.write(record.to_json() + "\n")

    return emit


def run_streaming(
    model: Model,
    feed: Feed,
    sink: Callable[[PredictionRecord], None] | None = None,
    times: Sequence[np.ndarray | None] | None = None,
    state: StreamingState | None = None,
    on_segment: Callable[[int, StreamingState], None] | None = None,
) -> StreamingRun:
    """Consume bundles ``0, 1, ...`` until the feed returns ``None``.

    Predictions for segment ``i`` are emitted as soon as bundle ``i`` has been
    processed. ``on_segment`` is called after every segment (used for probes
    and fault injection).
    """
    cfg = model.config
    state = new_state(model) if state is None else state
    run = StreamingRun()
    i = state.cursor
    with no_grad():
        while True:
            bundle = feed(i)
            if bundle is None:
                break
            if bundle.index != i:
                raise StreamingError(f"feed returned bundle {bundle.index} when segment {i} was requested")
            missing = [name for name in cfg.names if name not in bundle.segments]
            if missing:
                raise StreamingError(f"segment {i}: malformed bundle, missing modalities {missing}")
            wanted = None if times is None else times[i]
            pred = forward_segment(model, state, bundle, wanted)
            end = bundle[cfg.names[0]].end
            for t, value in zip(pred.times, pred.values.data):
                latency = math.ceil((end + cfg.right_s - t) / cfg.segment_s)
                record = PredictionRecord(float(t), value.copy(), i, latency)
                run.records.append(record)
                if sink is not None:
                    sink(record)
            run.state_bytes.append(state.nbytes())
            if on_segment is not None:
                on_segment(i, state)
            i += 1
    return run


@dataclass
class ParityReport:
    max_error: float
    compared: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def parity_check(
    model: Model,
    streams: Sequence[TimedSequence],
    plan: SegmentPlan,
    tolerance: float = 0.0,
    times: np.ndarray | None = None,
    on_segment: Callable[[int, StreamingState], None] | None = None,
) -> ParityReport:
    """Offline run that recomputes left contexts vs segment-at-a-time run on cached keys/values."""
    if not any(len(s) for s in streams):
        return ParityReport(0.0, 0, tolerance)
    with no_grad():
        off_times, off_values = forward_offline(model, streams, plan, times, recompute=True)
    run = run_streaming(model, StreamFeed(streams, plan), times=split_times(plan, times), on_segment=on_segment)
    on = run.values(model.config.out_dim)
    if on.shape != off_values.shape or not np.array_equal(run.times(), off_times):
        return ParityReport(math.inf, 0, tolerance)
    err = float(np.abs(on - off_values.data).max()) if on.size else 0.0
    return ParityReport(err, int(on.size), tolerance)


@dataclass
class CausalityReport:
    perturbed_segment: int
    segments_checked: int
    max_difference: float

    @property
    def passed(self) -> bool:
        return self.max_difference == 0.0


def perturb_segment(
    streams: Sequence[TimedSequence], plan: SegmentPlan, j: int, rng: np.random.Generator
) -> list[TimedSequence]:
    """Replace every frame whose time lies in the centre of segment ``j`` with noise."""
    lo, hi = plan.bounds(j)
    out = []
    for s in streams:
        feats = s.features.copy()
        hit = (s.timestamps >= lo) & (s.timestamps < hi)
        feats[hit] = rng.normal(size=(int(hit.sum()), s.dim))
        out.append(TimedSequence(s.modality, s.timestamps, feats))
    return out


def _per_segment(model: Model, streams, plan) -> list[np.ndarray]:
    run = run_streaming(model, StreamFeed(streams, plan))
    by_segment: list[list[np.ndarray]] = [[] for _ in range(plan.num_segments)]
    for r in run.records:
        by_segment[r.segment].append(r.value)
    return [np.array(rows).reshape(len(rows), model.config.out_dim) for rows in by_segment]


def causality_check(
    model: Model, streams: Sequence[TimedSequence], plan: SegmentPlan, j: int, seed: int = 0
) -> CausalityReport:
    """Randomize segment ``j`` and require identical predictions for every segment it cannot reach."""
    if not 1 <= j < plan.num_segments:
        raise ValueError(f"perturbation index {j} outside [1, {plan.num_segments})")
    base = _per_segment(model, streams, plan)
    changed = _per_segment(model, perturb_segment(streams, plan, j, np.random.default_rng(seed)), plan)
    t_j = plan.boundary(j)
    shielded = [i for i in range(plan.num_segments) if plan.horizon(i) <= t_j]
    worst = 0.0
    for i in shielded:
        if base[i].shape != changed[i].shape:
            worst = math.inf
        elif base[i].size:
            worst = max(worst, float(np.abs(base[i] - changed[i]).max()))
    return CausalityReport(j, len(shielded), worst)


@dataclass
class ProfileRow:
    segment: int
    seconds: float
    state_bytes: int
    frames: int


def latency_profile(model: Model, feed: Feed) -> list[ProfileRow]:
    state = new_state(model)
    rows = []
    i = 0
    with no_grad():
        while (bundle := feed(i)) is not None:
            frames = sum(seg.block_sizes()[1] for seg in bundle.segments.values())
            start = time.perf_counter()
            forward_segment(model, state, bundle)
            rows.append(ProfileRow(i, time.perf_counter() - start, state.nbytes(), frames))
            i += 1
    return rows
