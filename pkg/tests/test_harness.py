import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from streamult import cli
from streamult.errors import ConfigError, NonFiniteError, SchemaError
from streamult.harness import streams_io
from streamult.harness.metrics import MULT_REFERENCE, evaluate, format_comparison, round_half_away
from streamult.harness.synthetic import SyntheticModality, SyntheticSpec, ablate, generate_synthetic
from streamult.harness.training import stream_loss, train_toy
from streamult.model import ModalityConfig, ModelConfig, build_model
from streamult.numeric import Tensor
from streamult.segmentation import TimedSequence, plan_segments


class TestMetrics:
    def test_perfect_predictions(self):
        y = np.array([-2.0, 0.5, 1.0, 3.0])
        r = evaluate(y, y)
        assert (r.acc7, r.acc2, r.f1, r.mae) == (1.0, 1.0, 1.0, 0.0)
        assert r.corr == pytest.approx(1.0, abs=1e-12)

    def test_hand_computed_pair(self):
        r = evaluate([1.0, -1.0], [2.0, -0.5])
        assert r.acc2 == 1.0 and r.mae == 0.75

    def test_seven_class_rounding(self):
        np.testing.assert_array_equal(round_half_away(np.array([2.5, -2.5, 0.49, -0.5, 1.5])), [3, -3, 0, -1, 2])
        # 3.7 clamps to 3, -0.5 rounds away from zero to -1
        r = evaluate([3.7, -0.5, 0.2], [3.0, -1.0, 1.0])
        assert r.acc7 == pytest.approx(2 / 3)

    def test_zero_labels_excluded_from_binary_metrics(self):
        r = evaluate([1.0, -1.0, 0.7, -0.3], [1.0, -2.0, 0.0, 0.0])
        assert r.acc2 == 1.0 and r.f1 == 1.0 and r.zero_labels_excluded == 2

    def test_binary_f1(self):
        # nonzero labels: + + - -, predictions: + - + -  -> tp=1, fp=1, fn=1
        r = evaluate([1.0, -1.0, 1.0, -1.0], [1.0, 2.0, -1.0, -2.0])
        assert r.f1 == pytest.approx(0.5) and r.acc2 == 0.5

    def test_zero_variance_flags_corr(self):
        r = evaluate([1.0, 1.0, 1.0], [1.0, -1.0, 2.0])
        assert r.corr == 0.0 and not r.corr_defined

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            evaluate([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_reference_row_printed_verbatim(self):
        text = format_comparison(evaluate([1.0, -1.0], [2.0, -0.5]))
        row = next(line for line in text.splitlines() if line.startswith("MulT"))
        assert row.split()[-5:] == ["51.8", "82.5", "82.3", "0.580", "0.703"]
        assert [v for _, v in MULT_REFERENCE] == ["51.8", "82.5", "82.3", "0.580", "0.703"]
        assert "round half away from zero" in text

    @settings(max_examples=60)
    @given(
        arrays(np.float64, 12, elements=st.floats(-4, 4)),
        arrays(np.float64, 12, elements=st.integers(-3, 3).map(float)),
        st.randoms(use_true_random=False),
        st.floats(0.1, 10),
        st.floats(-5, 5),
    )
    def test_invariances(self, pred, labels, rnd, a, b):
        labels = labels.copy()
        labels[:2] = [1.0, -1.0]  # nonzero and non-constant
        pred = pred + np.linspace(0, 1e-3, 12)  # non-constant
        base = evaluate(pred, labels)
        order = list(range(12))
        rnd.shuffle(order)
        shuffled = evaluate(pred[order], labels[order])
        for k in ("acc7", "acc2", "f1", "mae", "corr"):
            assert getattr(shuffled, k) == pytest.approx(getattr(base, k), abs=1e-12)
        scaled = evaluate(a * pred, labels)
        assert scaled.acc2 == base.acc2 and scaled.f1 == base.f1
        assert evaluate(a * pred + b, labels).corr == pytest.approx(base.corr, abs=1e-12)


def synthetic(noise=0.1, event_rate=0.5, lag=0.5, seed=2, duration=20.0):
    mods = (SyntheticModality("a", 4.0, 2, noise), SyntheticModality("b", 2.0, 2, noise))
    return generate_synthetic(SyntheticSpec(mods, duration=duration, lag=lag, regime_s=3.0,
                                            event_rate=event_rate, seed=seed))


class TestSynthetic:
    def test_no_events_means_zero_labels(self):
        data = synthetic(noise=0.0, event_rate=0.0)
        np.testing.assert_array_equal(data.labels, 0.0)

    def test_deterministic_in_seed(self):
        a, b = synthetic(seed=5), synthetic(seed=5)
        for s, t in zip(a.streams, b.streams):
            assert s.features.tobytes() == t.features.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
        assert synthetic(seed=6).labels.tobytes() != a.labels.tobytes()

    def test_noise_free_labels_follow_rule(self):
        lag, window, event_window = 0.5, 1.0, 1.0
        data = synthetic(noise=0.0, lag=lag)
        a, b = data.streams
        assert np.any(data.labels != 0)
        for t, y in zip(data.label_times, data.labels):
            in_a = [x[0] for ts, x in zip(a.timestamps, a.features) if t - window < ts <= t]
            in_b = [x[0] for ts, x in zip(b.timestamps, b.features) if t - lag - event_window < ts <= t - lag]
            sign = np.sign(np.mean(in_a)) if in_a else 0.0
            assert y == sign * float(any(v > 0.5 for v in in_b))

    def test_positive_regime_at_event(self):
        a = TimedSequence("a", np.array([0.0, 0.5, 1.0]), np.array([[1.0], [1.0], [1.0]]))
        b = TimedSequence("b", np.array([0.5, 1.0]), np.array([[0.0], [1.0]]))
        from streamult.harness.synthetic import label_rule

        np.testing.assert_array_equal(label_rule(a, b, np.array([0.5, 1.0]), 0.0, 1.0, 0.25), [0.0, 1.0])

    def test_invalid_spec(self):
        with pytest.raises(ConfigError):
            generate_synthetic(SyntheticSpec((SyntheticModality("a", 1.0, 1),)))
        with pytest.raises(ConfigError):
            generate_synthetic(SyntheticSpec((SyntheticModality("a", 0.0, 1), SyntheticModality("b", 1.0, 1))))

    def test_ablate_keeps_clock(self):
        data = synthetic()
        a, b = ablate(data.streams, ["b"])
        assert a is data.streams[0]
        np.testing.assert_array_equal(b.timestamps, data.streams[1].timestamps)
        assert not b.features.any()


def tiny_model(lr_seed=0):
    cfg = ModelConfig((ModalityConfig("a", 2), ModalityConfig("b", 2)), d=4, heads=2, ffn_dim=8,
                      segment_s=2.0, left_s=2.0, memory_cap=2, seed=lr_seed)
    return build_model(cfg)


class TestTraining:
    def test_zero_learning_rate_is_flat(self):
        data = synthetic(duration=6.0)
        plan = plan_segments(data.streams, 2.0, 2.0, 0.0)
        result = train_toy(tiny_model(), data.streams, plan, data.label_times, data.labels, lr=0.0, epochs=3)
        assert len(set(result.losses)) == 1

    def test_loss_decreases(self):
        data = synthetic(duration=6.0)
        plan = plan_segments(data.streams, 2.0, 2.0, 0.0)
        result = train_toy(tiny_model(), data.streams, plan, data.label_times, data.labels, lr=0.03, epochs=8)
        assert result.losses[-1] < result.losses[0]

    def test_divergence_names_epoch(self):
        data = synthetic(duration=6.0)
        plan = plan_segments(data.streams, 2.0, 2.0, 0.0)
        with pytest.raises(NonFiniteError, match="epoch"), np.errstate(all="ignore"):
            train_toy(tiny_model(), data.streams, plan, data.label_times, data.labels * 1e200, lr=1e10, epochs=5)

    def test_loss_kinds(self):
        pred = Tensor([[1.0], [3.0]])
        assert stream_loss(pred, np.array([0.0, 0.0]), "l2").item() == 5.0
        assert stream_loss(pred, np.array([0.0, 0.0]), "mae").item() == 2.0
        with pytest.raises(ConfigError):
            stream_loss(pred, np.zeros(2), "huber")


class TestStreamsIO:
    mods = [{"name": "a", "dim": 2}, {"name": "b", "dim": 1}]

    def write(self, path, lines):
        path.write_text("\n".join(json.dumps(x) for x in lines) + "\n")
        return path

    def test_round_trip_bit_identical(self, tmp_path):
        data = synthetic()
        streams_io.write_streams(tmp_path / "s.jsonl", data.streams)
        back = streams_io.read_streams(tmp_path / "s.jsonl", [{"name": "a", "dim": 2}, {"name": "b", "dim": 2}])
        for s, t in zip(data.streams, back):
            assert s.timestamps.tobytes() == t.timestamps.tobytes()
            assert s.features.tobytes() == t.features.tobytes()
        streams_io.write_labels(tmp_path / "y.jsonl", data.label_times, data.labels)
        times, labels = streams_io.read_labels(tmp_path / "y.jsonl")
        assert times.tobytes() == data.label_times.tobytes() and labels.tobytes() == data.labels.tobytes()

    @pytest.mark.parametrize(
        "lines, fragment",
        [
            ([{"m": "a", "t": 1.0, "x": [0, 0]}, {"m": "a", "t": 0.5, "x": [0, 0]}], "line 2: .*does not increase"),
            ([{"m": "a", "t": 1.0, "x": [0]}], "line 1: .*expects 2 features"),
            ([{"m": "a", "x": [0, 0]}], "line 1: .*lacks fields"),
            ([{"m": "b", "t": 0.0, "x": [1]}, {"m": "z", "t": 0.1, "x": [1]}], "line 2: undeclared"),
            ([{"m": "b", "t": "soon", "x": [1]}], "line 1: t must be"),
        ],
    )
    def test_schema_errors_carry_line(self, tmp_path, lines, fragment):
        path = self.write(tmp_path / "s.jsonl", lines)
        with pytest.raises(SchemaError, match=fragment):
            streams_io.read_streams(path, self.mods)

    def test_invalid_json_line(self, tmp_path):
        (tmp_path / "s.jsonl").write_text('{"m": "a", "t": 0, "x": [0, 0]}\n{oops\n')
        with pytest.raises(SchemaError, match="line 2"):
            streams_io.read_streams(tmp_path / "s.jsonl", self.mods)

    def test_header_needs_dims(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"modalities": [{"name": "a"}]}))
        with pytest.raises(SchemaError, match="dim"):
            streams_io.read_header(tmp_path / "c.json")

    def test_interleaved_by_time(self, tmp_path):
        data = synthetic(duration=3.0)
        streams_io.write_streams(tmp_path / "s.jsonl", data.streams)
        times = [json.loads(line)["t"] for line in (tmp_path / "s.jsonl").read_text().splitlines()]
        assert times == sorted(times)


TINY_HEADER = {
    "modalities": [{"name": "a", "dim": 2, "rate": 4.0}, {"name": "b", "dim": 2, "rate": 2.0}],
    "d": 4, "heads": 2, "ffn_dim": 8, "memory_cap": 2,
    "segment_s": 2.0, "left_s": 2.0, "right_s": 0.5,
    "synthetic": {"duration": 6.0, "lag": 0.5, "regime_s": 3.0},
}


class TestCli:
    @pytest.fixture
    def workdir(self, tmp_path):
        (tmp_path / "config.json").write_text(json.dumps(TINY_HEADER))
        assert cli.main(["gen", "--config", str(tmp_path / "config.json"), "--out", str(tmp_path), "--seed", "2"]) == 0
        return tmp_path

    def args(self, workdir, *extra):
        return ["--config", str(workdir / "config.json"), "--streams", str(workdir / "streams.jsonl"), *extra]

    def test_offline_and_stream_outputs_agree(self, workdir):
        assert cli.main(["run-offline", *self.args(workdir, "--out", str(workdir / "off.jsonl"))]) == 0
        assert cli.main(["run-stream", *self.args(workdir, "--out", str(workdir / "on.jsonl"))]) == 0
        assert (workdir / "off.jsonl").read_text() == (workdir / "on.jsonl").read_text()

    def test_checks_pass(self, workdir, capsys):
        assert cli.main(["parity", *self.args(workdir)]) == 0
        assert json.loads(capsys.readouterr().out)["max_error"] == 0.0
        assert cli.main(["causality", *self.args(workdir)]) == 0
        assert cli.main(["gradcheck", "--config", str(workdir / "config.json")]) == 0

    def test_failed_check_exits_one(self, workdir):
        assert cli.main(["gradcheck", "--config", str(workdir / "config.json"), "--tol", "0"]) == 1

    def test_train_eval_profile(self, workdir, capsys):
        labels = str(workdir / "labels.jsonl")
        ckpt = str(workdir / "m.ckpt")
        assert cli.main(["train", *self.args(workdir, "--labels", labels, "--epochs", "2", "--checkpoint", ckpt)]) == 0
        assert cli.main(["run-offline", *self.args(workdir, "--checkpoint", ckpt, "--out", str(workdir / "p.jsonl"))]) == 0
        capsys.readouterr()
        assert cli.main(["eval", "--predictions", str(workdir / "p.jsonl"), "--labels", labels]) == 0
        assert "51.8" in capsys.readouterr().out
        assert cli.main(["profile", *self.args(workdir)]) == 0
        assert capsys.readouterr().out.startswith("segment\tseconds\tstate_bytes")

    def test_usage_and_io_errors_exit_two(self, workdir, tmp_path):
        assert cli.main(["parity", "--config", str(workdir / "config.json")]) == 2
        assert cli.main(["parity", *self.args(workdir, "--checkpoint", str(tmp_path / "config.json"))]) == 2
        assert cli.main(["run-offline", "--config", str(tmp_path / "missing.json"), "--streams", "x"]) == 2
        with pytest.raises(SystemExit) as info:
            cli.main(["bogus"])
        assert info.value.code == 2
