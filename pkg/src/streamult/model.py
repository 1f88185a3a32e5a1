"""Full streaming multimodal network and its per-stream state.

Per segment ``i`` the pipeline is:

1. a 1-D convolution per modality over the contextual window ``[L : C : R]``,
   mapping every modality to the common width ``d`` (plus a sinusoidal
   encoding of absolute frame time);
2. a snapshot of every modality's memory bank;
3. one step of each modality's Emformer, which refreshes its bank;
4. one step of every ordered-pair crossmodal stack, reading the snapshots;
5. per target modality, the crossmodal centre outputs side by side (``Z``);
6. one step of the target's fusion Emformer over ``Z``;
7. at every prediction time, the latest fusion row of each modality at or
   before that time, concatenated and passed through a linear head.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .crossmodal import CrossmodalState, SctStack, init_sct_layer, new_crossmodal_state, sct_forward_segment
from .emformer import (
    EmformerStack,
    EmformerState,
    SegmentActivations,
    emformer_forward_segment,
    init_emformer_layer,
    new_emformer_state,
)
from .errors import CheckpointError, ConfigError, ShapeError, StreamingError
from .initializers import conv_kernel, matrix
from .numeric import ParamTape, Tensor, concat_cols, concat_rows, conv1d, linear, take_rows, zeros
from .segmentation import SegmentBundle, SegmentPlan, TimedSequence, materialize_bundle

CHECKPOINT_MAGIC = b"SMLT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModalityConfig:
    name: str
    dim: int
    kernel: int = 3


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[ModalityConfig, ...]
    d: int = 8
    emformer_layers: int = 1
    sct_layers: int = 1
    fusion_layers: int = 1
    heads: int = 1
    ffn_dim: int = 16
    segment_s: float = 1.0
    left_s: float = 1.0
    right_s: float = 0.0
    memory_cap: int | None = 4
    positional_encoding: bool = True
    out_dim: int = 1
    # which Emformer layer's bank the crossmodal stacks read
    memory_layer: int = -1
    # None follows memory_cap / left_s; math.inf horizon turns the fusion
    # stack into a dense causal encoder over the whole history
    fusion_cap: int | None = None
    fusion_horizon_s: float | None = None
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        mods = tuple(m if isinstance(m, ModalityConfig) else ModalityConfig(**m) for m in self.modalities)
        object.__setattr__(self, "modalities", mods)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.modalities)

    @property
    def fusion_dim(self) -> int:
        return (len(self.modalities) - 1) * self.d

    @property
    def pairs(self) -> list[tuple[str, str]]:
        """Ordered (source, target) pairs, grouped by target."""
        return [(src, tgt) for tgt in self.names for src in self.names if src != tgt]

    def fusion_settings(self) -> tuple[int | None, float]:
        cap = self.memory_cap if self.fusion_cap is None else self.fusion_cap
        horizon = self.left_s if self.fusion_horizon_s is None else self.fusion_horizon_s
        return cap, horizon

    def validate(self) -> None:
        if len(self.modalities) < 2:
            raise ConfigError(f"need at least two modalities, got {len(self.modalities)}")
        if len(set(self.names)) != len(self.names):
            raise ConfigError(f"modality names must be unique: {self.names}")
        for m in self.modalities:
            if m.dim < 1:
                raise ConfigError(f"modality {m.name!r}: feature dim must be >= 1, got {m.dim}")
            if m.kernel < 1 or m.kernel % 2 == 0:
                raise ConfigError(f"modality {m.name!r}: conv kernel size must be odd, got {m.kernel}")
        if self.d < 2:
            raise ConfigError(f"common dim d must be >= 2, got {self.d}")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"common dim d={self.d} is not divisible by heads={self.heads}")
        for name in ("emformer_layers", "sct_layers", "fusion_layers", "ffn_dim", "out_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.segment_s > 0:
            raise ConfigError(f"segment_s must be positive, got {self.segment_s}")
        if self.left_s < 0 or self.right_s < 0:
            raise ConfigError(f"context durations must be non-negative, got left_s={self.left_s}, right_s={self.right_s}")
        if self.memory_cap is not None and self.memory_cap < 0:
            raise ConfigError(f"memory_cap must be >= 0 or null, got {self.memory_cap}")
        if not -self.emformer_layers <= self.memory_layer < self.emformer_layers:
            raise ConfigError(f"memory_layer {self.memory_layer} outside the {self.emformer_layers}-layer stack")
        if self.ln_eps <= 0:
            raise ConfigError(f"ln_eps must be positive, got {self.ln_eps}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in raw.items() if k in known}
        if "modalities" not in kwargs:
            raise ConfigError("config has no 'modalities' list")
        kwargs["modalities"] = tuple(ModalityConfig(**m) for m in kwargs["modalities"])
        return cls(**kwargs)

    def canonical_text(self) -> str:
        body = self.to_dict()
        body.pop("seed")
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).digest()


@dataclass
class Model:
    config: ModelConfig
    params: ParamTape
    convs: dict[str, Tensor]
    emformers: dict[str, EmformerStack]
    scts: dict[tuple[str, str], SctStack]
    fusions: dict[str, EmformerStack]
    head_w: Tensor
    head_b: Tensor

    def num_parameters(self) -> int:
        return self.params.num_parameters()


def build_model(config: ModelConfig, seed: int | None = None) -> Model:
    """Xavier-uniform initialization, in a fixed registration order, from ``seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    tape = ParamTape()
    d, d_ff, eps = config.d, config.ffn_dim, config.ln_eps
    convs = {m.name: conv_kernel(tape, f"conv.{m.name}", m.kernel, m.dim, d, rng) for m in config.modalities}
    emformers = {
        name: EmformerStack(
            [init_emformer_layer(tape, f"emformer.{name}.{n}", d, d_ff, rng) for n in range(config.emformer_layers)],
            config.heads,
            eps,
        )
        for name in config.names
    }
    scts = {
        (src, tgt): SctStack(
            [init_sct_layer(tape, f"sct.{src}->{tgt}.{n}", d, d_ff, rng) for n in range(config.sct_layers)],
            config.heads,
            eps,
        )
        for src, tgt in config.pairs
    }
    width = config.fusion_dim
    fusions = {
        name: EmformerStack(
            [init_emformer_layer(tape, f"fusion.{name}.{n}", width, d_ff, rng) for n in range(config.fusion_layers)],
            config.heads,
            eps,
        )
        for name in config.names
    }
    head_w = matrix(tape, "head.w", len(config.names) * width, config.out_dim, rng)
    head_b = tape.add("head.b", np.zeros(config.out_dim))
    return Model(config, tape, convs, emformers, scts, fusions, head_w, head_b)


class StreamingState:
    """All mutable state of one stream: banks, caches, held fusion rows and the segment cursor."""

    def __init__(self, model: Model, recompute: bool = False):
        cfg = model.config
        self.recompute = recompute
        self.emformer: dict[str, EmformerState] = {
            name: new_emformer_state(stack, cfg.memory_cap, cfg.left_s, recompute)
            for name, stack in model.emformers.items()
        }
        self.crossmodal: dict[tuple[str, str], CrossmodalState] = {
            pair: new_crossmodal_state(stack, cfg.left_s, recompute) for pair, stack in model.scts.items()
        }
        fusion_cap, fusion_horizon = cfg.fusion_settings()
        self.fusion: dict[str, EmformerState] = {
            name: new_emformer_state(stack, fusion_cap, fusion_horizon, recompute)
            for name, stack in model.fusions.items()
        }
        self.held: dict[str, Tensor] = {name: zeros(1, cfg.fusion_dim) for name in cfg.names}
        self.cursor = 0

    def nbytes(self) -> int:
        total = sum(s.nbytes() for s in self.emformer.values())
        total += sum(s.nbytes() for s in self.crossmodal.values())
        total += sum(s.nbytes() for s in self.fusion.values())
        return total + sum(h.data.nbytes for h in self.held.values())


def new_state(model: Model, recompute: bool = False) -> StreamingState:
    return StreamingState(model, recompute)


def positional_encoding(times: np.ndarray, d: int) -> np.ndarray:
    """Sinusoids of absolute time in seconds; column ``2j`` is ``sin(t w_j)``, ``2j+1`` is ``cos``."""
    times = np.asarray(times, dtype=np.float64).reshape(-1, 1)
    j = np.arange((d + 1) // 2)
    freq = 1.0 / (10000.0 ** (2 * j / d))
    angles = times * freq
    pe = np.empty((times.shape[0], d))
    pe[:, 0::2] = np.sin(angles)[:, : (d + 1) // 2]
    pe[:, 1::2] = np.cos(angles)[:, : d // 2]
    return pe


def front_end(model: Model, seg) -> SegmentActivations:
    """Convolve the contextual window and keep its centre and right rows."""
    cfg = model.config
    mod = next((m for m in cfg.modalities if m.name == seg.modality), None)
    if mod is None:
        raise ConfigError(f"unknown modality {seg.modality!r}")
    if seg.dim != mod.dim:
        raise ShapeError(f"modality {seg.modality!r}: frames have dim {seg.dim}, config says {mod.dim}")
    n_left, n_center, n_right = seg.block_sizes()
    if n_left + n_center + n_right == 0:
        empty = zeros(0, cfg.d)
        return SegmentActivations(seg.index, seg.start, seg.end, empty, empty, seg.center_times)
    y = conv1d(Tensor(seg.frames), model.convs[seg.modality])
    center = take_rows(y, slice(n_left, n_left + n_center))
    right = take_rows(y, slice(n_left + n_center, None))
    if cfg.positional_encoding:
        if n_center:
            center = center + Tensor(positional_encoding(seg.center_times, cfg.d))
        if n_right:
            right = right + Tensor(positional_encoding(seg.right_times, cfg.d))
    return SegmentActivations(seg.index, seg.start, seg.end, center, right, seg.center_times)


@dataclass
class SegmentPrediction:
    index: int
    times: np.ndarray
    values: Tensor


def forward_segment(
    model: Model,
    state: StreamingState,
    bundle: SegmentBundle,
    times: np.ndarray | None = None,
) -> SegmentPrediction:
    """Advance ``state`` by one segment and predict at ``times`` (default: every centre acquisition)."""
    cfg = model.config
    i = bundle.index
    if i != state.cursor:
        raise StreamingError(f"bundle index {i} does not match the state cursor {state.cursor}")
    missing = [name for name in cfg.names if name not in bundle.segments]
    if missing:
        raise StreamingError(f"segment {i}: bundle lacks modalities {missing} (present them empty instead)")

    acts = {name: front_end(model, bundle[name]) for name in cfg.names}
    snapshots = {name: state.emformer[name].banks[cfg.memory_layer].snapshot() for name in cfg.names}
    for name in cfg.names:
        emformer_forward_segment(state.emformer[name], acts[name], model.emformers[name])

    crossmodal = {
        (src, tgt): sct_forward_segment(
            state.crossmodal[(src, tgt)], acts[tgt], acts[src], snapshots[src], model.scts[(src, tgt)]
        )
        for src, tgt in cfg.pairs
    }

    fused: dict[str, Tensor] = {}
    for tgt in cfg.names:
        z = concat_cols([crossmodal[(src, tgt)].center for src in cfg.names if src != tgt])
        target = acts[tgt]
        fusion_in = SegmentActivations(i, target.start, target.end, z, zeros(0, cfg.fusion_dim), target.center_times)
        fused[tgt] = emformer_forward_segment(state.fusion[tgt], fusion_in, model.fusions[tgt])

    start, end = bundle[cfg.names[0]].start, bundle[cfg.names[0]].end
    if times is None:
        times = bundle.center_times()
    else:
        times = np.asarray(times, dtype=np.float64)
        if times.size and (times[0] < start or times[-1] >= end):
            raise ValueError(f"segment {i}: prediction times must lie in [{start}, {end})")

    if times.size:
        columns = []
        for name in cfg.names:
            rows = concat_rows([state.held[name], fused[name]])
            index = np.searchsorted(acts[name].center_times, times, side="right")
            columns.append(take_rows(rows, index))
        values = linear(concat_cols(columns), model.head_w, model.head_b)
    else:
        values = zeros(0, cfg.out_dim)

    for name in cfg.names:
        n = fused[name].rows
        if n:
            state.held[name] = take_rows(fused[name], slice(n - 1, n))
    state.cursor += 1
    return SegmentPrediction(i, times, values)


def split_times(plan: SegmentPlan, times: np.ndarray | None) -> list[np.ndarray | None]:
    """Distribute prediction times over segments by centre membership."""
    if times is None:
        return [None] * plan.num_segments
    times = np.asarray(times, dtype=np.float64)
    seg = np.searchsorted(plan.boundaries, times, side="right") - 1
    if times.size and (seg.min() < 0 or seg.max() >= plan.num_segments):
        raise ValueError("prediction times fall outside the planned segments")
    return [times[seg == i] for i in range(plan.num_segments)]


def forward_bundles(
    model: Model,
    bundles: Iterable[SegmentBundle],
    per_segment_times: Sequence[np.ndarray | None] | None = None,
    state: StreamingState | None = None,
) -> tuple[np.ndarray, Tensor]:
    state = new_state(model) if state is None else state
    times, values = [], []
    for k, bundle in enumerate(bundles):
        wanted = None if per_segment_times is None else per_segment_times[k]
        pred = forward_segment(model, state, bundle, wanted)
        times.append(pred.times)
        values.append(pred.values)
    if not values:
        return np.zeros(0), zeros(0, model.config.out_dim)
    return np.concatenate(times), concat_rows(values)


def forward_offline(
    model: Model,
    streams: Sequence[TimedSequence],
    plan: SegmentPlan,
    times: np.ndarray | None = None,
    recompute: bool = False,
) -> tuple[np.ndarray, Tensor]:
    """Materialize every segment, then process them in index order.

    ``recompute=True`` re-derives left-context keys and values from stored
    layer inputs instead of reading cached projections.
    """
    bundles = [materialize_bundle(plan, i, streams) for i in range(plan.num_segments)]
    return forward_bundles(model, bundles, split_times(plan, times), new_state(model, recompute))


def save_checkpoint(model: Model, path: str | Path) -> None:
    values = model.params.flat().astype("<f8")
    header = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + model.config.digest()
    Path(path).write_bytes(header + values.tobytes())


def load_checkpoint(path: str | Path, config: ModelConfig) -> Model:
    blob = Path(path).read_bytes()
    if len(blob) < 40 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    stored, expected = blob[8:40], config.digest()
    if stored != expected:
        raise CheckpointError(
            f"{path}: config digest mismatch: checkpoint {stored.hex()} vs config {expected.hex()}"
        )
    model = build_model(config)
    body = blob[40:]
    if len(body) != 8 * model.num_parameters():
        raise CheckpointError(f"{path}: expected {model.num_parameters()} parameters, found {len(body) / 8:g}")
    model.params.load_flat(np.frombuffer(body, dtype="<f8"))
    return model
