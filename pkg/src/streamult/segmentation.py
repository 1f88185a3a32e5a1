"""Shared temporal segmentation of unaligned multimodal streams.

Segment bounds live on the wall-clock axis and are common to all
modalities. Centre blocks are half-open ``[t_i, t_{i+1})`` so they
partition every stream; left and right contexts are duration windows on
either side of the centre and may repeat frames of neighbouring centres.
"""

from __future__ import annotations

import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True, eq=False)
class TimedSequence:
    """One modality: strictly ascending timestamps and one feature row per timestamp."""

    modality: str
    timestamps: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ShapeError(f"{self.modality}: features must be a matrix, got shape {feats.shape}")
        if feats.shape[0] != ts.size:
            raise ShapeError(f"{self.modality}: {ts.size} timestamps but {feats.shape[0]} feature rows")
        if ts.size > 1 and not np.all(np.diff(ts) > 0):
            bad = int(np.flatnonzero(np.diff(ts) <= 0)[0]) + 1
            raise ValueError(f"{self.modality}: timestamps not strictly increasing at index {bad}")
        if not (np.isfinite(ts).all() and np.isfinite(feats).all()):
            raise ValueError(f"{self.modality}: non-finite timestamps or features")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "features", feats)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.timestamps.size


@dataclass(frozen=True)
class SegmentPlan:
    segment_duration: float
    left_duration: float
    right_duration: float
    origin: float
    num_segments: int

    def boundary(self, i: int) -> float:
        return self.origin + i * self.segment_duration

    @property
    def boundaries(self) -> np.ndarray:
        return np.array([self.boundary(i) for i in range(self.num_segments + 1)])

    def bounds(self, i: int) -> tuple[float, float]:
        return self.boundary(i), self.boundary(i + 1)

    def horizon(self, i: int) -> float:
        """Latest input time that can influence segment ``i``."""
        return self.boundary(i + 1) + self.right_duration


def plan_segments(
    streams: Sequence[TimedSequence],
    segment_duration: float,
    left_duration: float,
    right_duration: float,
) -> SegmentPlan:
    if segment_duration <= 0:
        raise ConfigError(f"segment duration must be positive, got {segment_duration}")
    if left_duration < 0 or right_duration < 0:
        raise ConfigError("context durations must be non-negative")
    nonempty = [s for s in streams if len(s)]
    if not nonempty:
        raise ValueError("cannot plan segments: every stream is empty")
    start = min(float(s.timestamps[0]) for s in nonempty)
    stop = max(float(s.timestamps[-1]) for s in nonempty)
    # stop must land strictly inside the last half-open centre
    n = int(math.floor((stop - start) / segment_duration)) + 1
    while n > 1 and start + (n - 1) * segment_duration > stop:
        n -= 1
    while start + n * segment_duration <= stop:
        n += 1
    return SegmentPlan(float(segment_duration), float(left_duration), float(right_duration), start, n)


@dataclass(frozen=True, eq=False)
class ContextualSegment:
    """Frames of one modality for segment ``index``, split as ``[L : C : R]``."""

    modality: str
    index: int
    start: float
    end: float
    left: np.ndarray
    center: np.ndarray
    right: np.ndarray
    left_times: np.ndarray
    center_times: np.ndarray
    right_times: np.ndarray

    @property
    def frames(self) -> np.ndarray:
        return np.concatenate([self.left, self.center, self.right], axis=0)

    @property
    def frame_times(self) -> np.ndarray:
        return np.concatenate([self.left_times, self.center_times, self.right_times])

    @property
    def dim(self) -> int:
        return self.center.shape[1]

    def block_sizes(self) -> tuple[int, int, int]:
        return len(self.left_times), len(self.center_times), len(self.right_times)


def materialize_segment(plan: SegmentPlan, i: int, stream: TimedSequence) -> ContextualSegment:
    if not 0 <= i < plan.num_segments:
        raise IndexError(f"segment index {i} outside [0, {plan.num_segments})")
    t_lo, t_hi = plan.bounds(i)
    ts = stream.timestamps
    cuts = np.searchsorted(ts, [t_lo - plan.left_duration, t_lo, t_hi, t_hi + plan.right_duration], side="left")
    a, b, c, e = (int(x) for x in cuts)
    feats = stream.features
    return ContextualSegment(
        modality=stream.modality,
        index=i,
        start=t_lo,
        end=t_hi,
        left=feats[a:b],
        center=feats[b:c],
        right=feats[c:e],
        left_times=ts[a:b],
        center_times=ts[b:c],
        right_times=ts[c:e],
    )


@dataclass(frozen=True)
class SegmentBundle:
    """All modalities' contextual segments for one index."""

    index: int
    segments: Mapping[str, ContextualSegment] = field(default_factory=dict)

    def __getitem__(self, modality: str) -> ContextualSegment:
        return self.segments[modality]

    def center_times(self) -> np.ndarray:
        parts = [seg.center_times for seg in self.segments.values()]
        return np.unique(np.concatenate(parts)) if parts else np.zeros(0)


def materialize_bundle(plan: SegmentPlan, i: int, streams: Sequence[TimedSequence]) -> SegmentBundle:
    return SegmentBundle(i, {s.modality: materialize_segment(plan, i, s) for s in streams})


@dataclass(frozen=True)
class GroundTruthTimes:
    mode: str
    times: np.ndarray


ALL_ACQUISITIONS = "all-acquisitions"
PER_UNIT_LAST = "per-unit-last"


def ground_truth_times(
    streams: Sequence[TimedSequence],
    mode: str = ALL_ACQUISITIONS,
    unit_boundaries: Sequence[float] | None = None,
) -> GroundTruthTimes:
    """Times at which predictions are scored.

    ``unit_boundaries`` ``b_0 < b_1 < ... < b_s`` delimit units ``[b_j, b_{j+1})``.
    """
    union = np.unique(np.concatenate([s.timestamps for s in streams])) if streams else np.zeros(0)
    if mode == ALL_ACQUISITIONS:
        return GroundTruthTimes(mode, union)
    if mode != PER_UNIT_LAST:
        raise ConfigError(f"unknown ground-truth mode {mode!r}")
    if unit_boundaries is None:
        raise ConfigError("per-unit-last mode needs unit boundaries")
    edges = np.asarray(unit_boundaries, dtype=np.float64)
    if edges.size < 2 or not np.all(np.diff(edges) > 0):
        raise ConfigError("unit boundaries must be at least two strictly ascending values")
    times = []
    for j in range(edges.size - 1):
        inside = union[(union >= edges[j]) & (union < edges[j + 1])]
        if inside.size == 0:
            warnings.warn(f"unit {j} [{edges[j]}, {edges[j + 1]}) has no acquisitions; omitted", stacklevel=2)
            continue
        times.append(inside[-1])
    return GroundTruthTimes(mode, np.asarray(times, dtype=np.float64))
