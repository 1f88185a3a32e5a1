"""JSON Lines stream, label and prediction files plus the JSON config header.

Stream file, one frame per line::

    {"m": "audio", "t": 0.25, "x": [0.1, -0.4]}

Config header::

    {"modalities": [{"name": "audio", "dim": 2}, ...],
     "segment_s": 2.0, "left_s": 2.0, "right_s": 0.5, ...}
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np

from ..errors import SchemaError
from ..model import ModalityConfig, ModelConfig
from ..segmentation import TimedSequence


def read_header(path: str | Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg})", exc.lineno) from None
    if not isinstance(raw, dict) or not isinstance(raw.get("modalities"), list):
        raise SchemaError(f"{path}: config header needs a 'modalities' list")
    for k, entry in enumerate(raw["modalities"]):
        if not isinstance(entry, dict) or "name" not in entry:
            raise SchemaError(f"{path}: modality entry {k} has no name")
        if not isinstance(entry.get("dim"), int) or entry["dim"] < 1:
            raise SchemaError(f"{path}: modality {entry['name']!r} is missing a positive integer 'dim'")
    return raw


def model_config(header: Mapping) -> ModelConfig:
    raw = dict(header)
    raw["modalities"] = [
        {k: v for k, v in m.items() if k in ("name", "dim", "kernel")} for m in header["modalities"]
    ]
    return ModelConfig.from_dict(raw)


def write_header(path: str | Path, header: Mapping) -> None:
    Path(path).write_text(json.dumps(header, indent=2) + "\n")


def write_streams(path: str | Path, streams: Sequence[TimedSequence]) -> None:
    """Write frames interleaved by time (ties keep modality order)."""
    records = []
    for order, s in enumerate(streams):
        for t, x in zip(s.timestamps, s.features):
            records.append((float(t), order, s.modality, x))
    records.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w") as fh:
        for t, _, name, x in records:
            fh.write(json.dumps({"m": name, "t": t, "x": x.tolist()}) + "\n")


def _json_lines(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(record, dict):
                raise SchemaError("record is not an object", lineno)
            yield lineno, record


def _real(value, what: str, lineno: int) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise SchemaError(f"{what} must be a finite number, got {value!r}", lineno)
    return float(value)


def read_streams(path: str | Path, modalities: Sequence[ModalityConfig | Mapping]) -> list[TimedSequence]:
    """Parse a stream file; returns one sequence per declared modality, in declaration order."""
    dims = {}
    for m in modalities:
        name, dim = (m.name, m.dim) if isinstance(m, ModalityConfig) else (m.get("name"), m.get("dim"))
        if not isinstance(dim, int):
            raise SchemaError(f"modality {name!r} declares no feature dim")
        dims[name] = dim
    times: dict[str, list[float]] = {name: [] for name in dims}
    feats: dict[str, list[list[float]]] = {name: [] for name in dims}
    for lineno, record in _json_lines(path):
        missing = [k for k in ("m", "t", "x") if k not in record]
        if missing:
            raise SchemaError(f"record lacks fields {missing}", lineno)
        name = record["m"]
        if name not in dims:
            raise SchemaError(f"undeclared modality {name!r}", lineno)
        t = _real(record["t"], "t", lineno)
        x = record["x"]
        if not isinstance(x, list) or len(x) != dims[name]:
            got = len(x) if isinstance(x, list) else type(x).__name__
            raise SchemaError(f"modality {name!r} expects {dims[name]} features, got {got}", lineno)
        if times[name] and t <= times[name][-1]:
            raise SchemaError(f"modality {name!r}: timestamp {t} does not increase (previous {times[name][-1]})", lineno)
        times[name].append(t)
        feats[name].append([_real(v, "x entry", lineno) for v in x])
    return [
        TimedSequence(name, np.array(times[name]), np.array(feats[name]).reshape(len(times[name]), dims[name]))
        for name in dims
    ]


def write_labels(path: str | Path, times: np.ndarray, labels: np.ndarray) -> None:
    with open(path, "w") as fh:
        for t, y in zip(times, labels):
            fh.write(json.dumps({"t": float(t), "y": float(y)}) + "\n")


def read_labels(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    times, values = [], []
    for lineno, record in _json_lines(path):
        if "t" not in record or "y" not in record:
            raise SchemaError("label record needs 't' and 'y'", lineno)
        t = _real(record["t"], "t", lineno)
        if times and t <= times[-1]:
            raise SchemaError(f"label time {t} does not increase", lineno)
        times.append(t)
        y = record["y"]
        values.append(_real(y[0] if isinstance(y, list) and y else y, "y", lineno))
    return np.array(times), np.array(values)


def read_predictions(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    times, values = [], []
    for lineno, record in _json_lines(path):
        if "t" not in record or "y" not in record:
            raise SchemaError("prediction record needs 't' and 'y'", lineno)
        times.append(_real(record["t"], "t", lineno))
        y = record["y"]
        values.append([_real(v, "y entry", lineno) for v in (y if isinstance(y, list) else [y])])
    return np.array(times), np.array(values)
