"""Synthetic multimodal streams whose label needs two modalities at once.

Modality 0 carries a slowly switching sign in feature 0, modality 1 carries
an on/off activity flag in feature 0, and any further modalities are pure
noise. The label at time ``t`` is::

    sign(mean of modality-0 feature 0 over (t - window, t])
        * [modality 1 was active somewhere in (t - lag - event_window, t - lag]]

so neither modality alone determines it.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..segmentation import TimedSequence, ground_truth_times


@dataclass(frozen=True)
class SyntheticModality:
    name: str
    rate: float
    dim: int
    noise: float = 0.1


@dataclass(frozen=True)
class SyntheticSpec:
    modalities: tuple[SyntheticModality, ...]
    duration: float = 30.0
    lag: float = 0.0
    window: float = 1.0
    event_window: float = 1.0
    regime_s: float = 4.0
    event_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        mods = tuple(m if isinstance(m, SyntheticModality) else SyntheticModality(**m) for m in self.modalities)
        object.__setattr__(self, "modalities", mods)

    def validate(self) -> None:
        if len(self.modalities) < 2:
            raise ConfigError("the cross-modal rule needs at least two modalities")
        for m in self.modalities:
            if m.rate <= 0 or m.dim < 1 or m.noise < 0:
                raise ConfigError(f"modality {m.name!r}: need rate > 0, dim >= 1, noise >= 0")
        if self.lag < 0:
            raise ConfigError(f"lag must be >= 0, got {self.lag}")
        if self.duration <= 0 or self.window <= 0 or self.event_window <= 0 or self.regime_s <= 0:
            raise ConfigError("duration, window, event_window and regime_s must be positive")
        if not 0 <= self.event_rate <= 1:
            raise ConfigError(f"event_rate must lie in [0, 1], got {self.event_rate}")


@dataclass
class SyntheticData:
    streams: list[TimedSequence]
    label_times: np.ndarray
    labels: np.ndarray


def acquisition_times(rate: float, duration: float) -> np.ndarray:
    count = int(np.ceil(duration * rate - 1e-9))
    times = np.arange(count) / rate
    return times[times < duration]


def _regimes(rng: np.random.Generator, duration: float, mean_length: float) -> np.ndarray:
    edges = [0.0]
    while edges[-1] < duration:
        edges.append(edges[-1] + rng.exponential(mean_length))
    return np.asarray(edges)


def _piecewise(edges: np.ndarray, levels: np.ndarray, times: np.ndarray) -> np.ndarray:
    return levels[np.searchsorted(edges, times, side="right") - 1]


def label_rule(
    trend: TimedSequence,
    events: TimedSequence,
    times: np.ndarray,
    lag: float,
    window: float,
    event_window: float,
) -> np.ndarray:
    """Evaluate the rule from feature 0 of the trend and event streams."""
    out = np.zeros(len(times))
    a_t, a_x = trend.timestamps, trend.features[:, 0]
    b_t, b_x = events.timestamps, events.features[:, 0]
    for k, t in enumerate(times):
        a_lo, a_hi = np.searchsorted(a_t, [t - window, t], side="right")
        mean = a_x[a_lo:a_hi].mean() if a_hi > a_lo else 0.0
        b_lo, b_hi = np.searchsorted(b_t, [t - lag - event_window, t - lag], side="right")
        active = bool((b_x[b_lo:b_hi] > 0.5).any())
        out[k] = np.sign(mean) * float(active)
    return out


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    sign_edges = _regimes(rng, spec.duration, spec.regime_s)
    signs = rng.choice([-1.0, 1.0], size=sign_edges.size)
    event_edges = _regimes(rng, spec.duration, spec.regime_s)
    active = (rng.random(event_edges.size) < spec.event_rate).astype(float)

    clean, noisy = [], []
    for k, mod in enumerate(spec.modalities):
        times = acquisition_times(mod.rate, spec.duration)
        base = np.zeros((times.size, mod.dim))
        if k == 0:
            base[:, 0] = _piecewise(sign_edges, signs, times)
        elif k == 1:
            base[:, 0] = _piecewise(event_edges, active, times)
        noise = rng.normal(scale=1.0, size=base.shape) * mod.noise
        clean.append(TimedSequence(mod.name, times, base))
        noisy.append(TimedSequence(mod.name, times, base + noise))

    label_times = ground_truth_times(noisy).times
    labels = label_rule(clean[0], clean[1], label_times, spec.lag, spec.window, spec.event_window)
    return SyntheticData(noisy, label_times, labels)


def ablate(streams: Sequence[TimedSequence], names: Sequence[str]) -> list[TimedSequence]:
    """Zero the features of the named modalities, keeping their clocks."""
    return [
        TimedSequence(s.modality, s.timestamps, np.zeros_like(s.features)) if s.modality in names else s
        for s in streams
    ]
