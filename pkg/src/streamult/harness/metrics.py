"""Sentiment-style regression metrics on the [-3, 3] scale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACC7_CONVENTION = "acc7: clamp to [-3, 3], round half away from zero"
ACC2_CONVENTION = "acc2/f1: binary, nonzero labels only, positive class = label > 0"

# Reported figures for the reference multimodal transformer, kept as text so
# they print exactly as published.
MULT_REFERENCE = (
    ("Acc7", "51.8"),
    ("Acc2", "82.5"),
    ("F1", "82.3"),
    ("MAE", "0.580"),
    ("Corr", "0.703"),
)


@dataclass
class MetricsReport:
    acc7: float
    acc2: float
    f1: float
    mae: float
    corr: float
    corr_defined: bool = True
    zero_labels_excluded: int = 0

    def as_row(self) -> tuple[tuple[str, str], ...]:
        return (
            ("Acc7", f"{100 * self.acc7:.2f}"),
            ("Acc2", f"{100 * self.acc2:.2f}"),
            ("F1", f"{100 * self.f1:.2f}"),
            ("MAE", f"{self.mae:.3f}"),
            ("Corr", f"{self.corr:.3f}"),
        )


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def evaluate(predictions, labels) -> MetricsReport:
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1)
    truth = np.asarray(labels, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError(f"{pred.size} predictions but {truth.size} labels")
    if pred.size < 2:
        raise ValueError("evaluation needs at least two samples")

    bucket = lambda v: round_half_away(np.clip(v, -3.0, 3.0))  # noqa: E731
    acc7 = float(np.mean(bucket(pred) == bucket(truth)))

    nonzero = truth != 0
    p, t = pred[nonzero], truth[nonzero]
    if t.size:
        acc2 = float(np.mean(np.sign(p) == np.sign(t)))
        pred_pos, true_pos = p > 0, t > 0
        tp = int(np.sum(pred_pos & true_pos))
        fp = int(np.sum(pred_pos & ~true_pos))
        fn = int(np.sum(~pred_pos & true_pos))
        f1 = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    else:
        acc2, f1 = 0.0, 0.0

    mae = float(np.mean(np.abs(pred - truth)))
    if np.std(pred) == 0 or np.std(truth) == 0:
        corr, defined = 0.0, False
    else:
        corr, defined = float(np.corrcoef(pred, truth)[0, 1]), True
    return MetricsReport(acc7, acc2, f1, mae, corr, defined, int(np.sum(~nonzero)))


def format_comparison(report: MetricsReport, label: str = "this run") -> str:
    names = [name for name, _ in MULT_REFERENCE]
    width = max(len(label), len("MulT (reported)"))
    lines = [
        f"# {ACC7_CONVENTION}; {ACC2_CONVENTION}",
        f"{'model':<{width}}  " + "  ".join(f"{n:>6}" for n in names),
        f"{'MulT (reported)':<{width}}  " + "  ".join(f"{v:>6}" for _, v in MULT_REFERENCE),
        f"{label:<{width}}  " + "  ".join(f"{v:>6}" for _, v in report.as_row()),
    ]
    if not report.corr_defined:
        lines.append("# corr undefined (zero variance), reported as 0")
    if report.zero_labels_excluded:
        lines.append(f"# {report.zero_labels_excluded} zero labels excluded from acc2/f1")
    return "\n".join(lines)
