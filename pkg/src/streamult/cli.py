"""Generate synthetic streams, run, verify, train and evaluate a streaming multimodal transformer.

Exit status: 0 on success or passed check, 1 on a failed check, 2 on usage
or input errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, SchemaError, StreamingError
from .harness import streams_io
from .harness.metrics import evaluate, format_comparison
from .harness.synthetic import SyntheticModality, SyntheticSpec, generate_synthetic
from .harness.training import stream_loss, train_toy
from .model import build_model, forward_offline, load_checkpoint, save_checkpoint
from .numeric import grad_check, no_grad
from .runner import StreamFeed, causality_check, jsonl_sink, latency_profile, parity_check, run_streaming
from .segmentation import plan_segments

log = logging.getLogger("streamult")

DEFAULT_HEADER = {
    "modalities": [
        {"name": "fast", "dim": 4, "rate": 10.0, "noise": 0.1},
        {"name": "mid", "dim": 3, "rate": 3.0, "noise": 0.1},
        {"name": "slow", "dim": 2, "rate": 1.0, "noise": 0.1},
    ],
    "d": 8,
    "heads": 2,
    "emformer_layers": 2,
    "sct_layers": 2,
    "fusion_layers": 2,
    "ffn_dim": 16,
    "memory_cap": 4,
    "segment_s": 3.0,
    "left_s": 3.0,
    "right_s": 1.0,
    "synthetic": {"duration": 30.0, "lag": 0.5, "window": 1.0, "event_window": 1.0},
}


class CheckFailed(Exception):
    pass


def _header(args) -> dict:
    return streams_io.read_header(args.config) if args.config else json.loads(json.dumps(DEFAULT_HEADER))


def _model(args, header):
    config = streams_io.model_config(header)
    if args.seed is not None:
        config = type(config).from_dict({**config.to_dict(), "seed": args.seed})
    if args.checkpoint and Path(args.checkpoint).exists() and args.command != "train":
        return load_checkpoint(args.checkpoint, config)
    return build_model(config)


def _streams(args, header):
    if not args.streams:
        raise ConfigError("--streams is required for this command")
    return streams_io.read_streams(args.streams, header["modalities"])


def _plan(model, streams):
    cfg = model.config
    return plan_segments(streams, cfg.segment_s, cfg.left_s, cfg.right_s)


def _emit(args, payload) -> None:
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_gen(args) -> None:
    header = _header(args)
    synth = dict(header.get("synthetic", {}))
    mods = tuple(
        SyntheticModality(m["name"], float(m.get("rate", 1.0)), int(m["dim"]), float(m.get("noise", 0.1)))
        for m in header["modalities"]
    )
    seed = args.seed if args.seed is not None else int(synth.pop("seed", header.get("seed", 0)))
    synth.pop("seed", None)
    data = generate_synthetic(SyntheticSpec(mods, seed=seed, **synth))
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    streams_io.write_streams(out / "streams.jsonl", data.streams)
    streams_io.write_labels(out / "labels.jsonl", data.label_times, data.labels)
    streams_io.write_header(out / "config.json", {**header, "synthetic": {**synth, "seed": seed}})
    print(json.dumps({"frames": sum(len(s) for s in data.streams), "labels": int(data.labels.size), "out": str(out)}))


def cmd_run_offline(args) -> None:
    header = _header(args)
    model = _model(args, header)
    streams = _streams(args, header)
    plan = _plan(model, streams)
    with no_grad():
        times, values = forward_offline(model, streams, plan)
    segment = np.searchsorted(plan.boundaries, times, side="right") - 1
    handle = open(args.out, "w") if args.out else sys.stdout
    try:
        for t, y, i in zip(times, values.data, segment):
            handle.write(json.dumps({"t": float(t), "y": y.tolist(), "segment": int(i)}) + "\n")
    finally:
        if args.out:
            handle.close()


def cmd_run_stream(args) -> None:
    header = _header(args)
    model = _model(args, header)
    streams = _streams(args, header)
    handle = open(args.out, "w") if args.out else sys.stdout
    try:
        run_streaming(model, StreamFeed(streams, _plan(model, streams)), sink=jsonl_sink(handle))
    finally:
        if args.out:
            handle.close()


def cmd_parity(args) -> None:
    header = _header(args)
    model = _model(args, header)
    streams = _streams(args, header)
    report = parity_check(model, streams, _plan(model, streams), tolerance=args.tolerance)
    _emit(args, {"max_error": report.max_error, "compared": report.compared,
                 "tolerance": report.tolerance, "passed": report.passed})
    if not report.passed:
        raise CheckFailed("parity")


def cmd_causality(args) -> None:
    header = _header(args)
    model = _model(args, header)
    streams = _streams(args, header)
    plan = _plan(model, streams)
    seed = 0 if args.seed is None else args.seed
    rows = []
    for j in range(1, plan.num_segments):
        r = causality_check(model, streams, plan, j, seed=seed + j)
        rows.append({"j": j, "segments_checked": r.segments_checked,
                     "max_difference": r.max_difference, "passed": r.passed})
    passed = all(r["passed"] for r in rows)
    _emit(args, {"segments": plan.num_segments, "results": rows, "passed": passed})
    if not passed:
        raise CheckFailed("causality")


def cmd_gradcheck(args) -> None:
    header = _header(args)
    model = _model(args, header)
    if args.streams:
        streams = _streams(args, header)
        plan = _plan(model, streams)
        label_times, labels = streams_io.read_labels(args.labels) if args.labels else (None, None)
    else:
        cfg = model.config
        mods = tuple(SyntheticModality(m.name, 2.0 / cfg.segment_s, m.dim, 0.5) for m in cfg.modalities)
        data = generate_synthetic(SyntheticSpec(mods, duration=2 * cfg.segment_s, seed=args.seed or 0))
        streams, label_times, labels = data.streams, data.label_times, data.labels
        plan = _plan(model, streams)

    def loss(_params):
        times, pred = forward_offline(model, streams, plan, label_times)
        target = labels if labels is not None else np.zeros(pred.shape)
        return stream_loss(pred, target, "l2")

    report = grad_check(loss, model.params, eps=args.eps, tol=args.tol)
    _emit(args, {"max_rel_error": report.max_rel_error, "worst_parameter": report.worst_parameter,
                 "worst_index": report.worst_index, "checked": report.checked,
                 "tol": report.tol, "passed": report.passed})
    if not report.passed:
        raise CheckFailed("gradcheck")


def cmd_train(args) -> None:
    header = _header(args)
    model = _model(args, header)
    streams = _streams(args, header)
    if not args.labels:
        raise ConfigError("--labels is required for train")
    label_times, labels = streams_io.read_labels(args.labels)
    result = train_toy(model, streams, _plan(model, streams), label_times, labels,
                       lr=args.lr, epochs=args.epochs, loss=args.loss)
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint)
    _emit(args, {"losses": result.losses, "final_mae": result.final_mae})


def cmd_eval(args) -> None:
    if not args.predictions or not args.labels:
        raise ConfigError("eval needs --predictions and --labels")
    p_times, preds = streams_io.read_predictions(args.predictions)
    l_times, labels = streams_io.read_labels(args.labels)
    lookup = {float(t): k for k, t in enumerate(p_times)}
    missing = [float(t) for t in l_times if float(t) not in lookup]
    if missing:
        raise SchemaError(f"{len(missing)} label times have no prediction (first: {missing[0]})")
    matched = np.array([preds[lookup[float(t)], 0] for t in l_times])
    report = evaluate(matched, labels)
    print(format_comparison(report))
    if args.out:
        Path(args.out).write_text(json.dumps(vars(report), indent=2) + "\n")


def cmd_profile(args) -> None:
    header = _header(args)
    model = _model(args, header)
    streams = _streams(args, header)
    rows = latency_profile(model, StreamFeed(streams, _plan(model, streams)))
    lines = ["segment\tseconds\tstate_bytes\tframes"]
    lines += [f"{r.segment}\t{r.seconds:.6f}\t{r.state_bytes}\t{r.frames}" for r in rows]
    text = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


COMMANDS = {
    "gen": cmd_gen,
    "run-offline": cmd_run_offline,
    "run-stream": cmd_run_stream,
    "parity": cmd_parity,
    "causality": cmd_causality,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "profile": cmd_profile,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config header")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--checkpoint", help="checkpoint to load (or, for train, to write)")
    common.add_argument("--out", help="output path")
    common.add_argument("--streams", help="JSON Lines stream file")
    common.add_argument("--labels", help="JSON Lines label file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="streamult", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "parity":
            p.add_argument("--tolerance", type=float, default=0.0)
        elif name == "gradcheck":
            p.add_argument("--eps", type=float, default=1e-6)
            p.add_argument("--tol", type=float, default=1e-4)
        elif name == "train":
            p.add_argument("--epochs", type=int, default=200)
            p.add_argument("--lr", type=float, default=0.03)
            p.add_argument("--loss", choices=("l2", "mae"), default="l2")
        elif name == "eval":
            p.add_argument("--predictions", help="JSON Lines predictions from run-offline or run-stream")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except CheckFailed as exc:
        log.error("%s check failed", exc)
        return 1
    except (OSError, ValueError, StreamingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
