"""Metrics, side-by-side comparison tables and the accuracy-vs-epsilon plot."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .numcore import cross_entropy_loss, entropy_bits


class TableParseError(ValueError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


@dataclass
class MetricsReport:
    accuracy: float
    cross_entropy: float
    micro_f1: float
    macro_f1: float
    mean_prediction_entropy: float
    per_class_accuracy: np.ndarray
    sample_count: int
    num_classes: int
    run_manifest: dict = field(default_factory=dict)

    UNITS = {
        "accuracy": "fraction",
        "cross_entropy": "nats/sample",
        "micro_f1": "fraction",
        "macro_f1": "fraction",
        "mean_prediction_entropy": "bits/sample",
        "sample_count": "count",
    }

    def metrics(self):
        return {k: getattr(self, k) for k in self.UNITS}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value", "unit"])
        for k, unit in self.UNITS.items():
            v = getattr(self, k)
            w.writerow([k, v if isinstance(v, (int, np.integer)) else f"{v:.6f}", unit])
        for c, acc in enumerate(self.per_class_accuracy):
            w.writerow([f"class_{c}_accuracy", "nan" if np.isnan(acc) else f"{acc:.6f}", "fraction"])
        return buf.getvalue()


def confusion_matrix(y_true, y_pred, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def f1_scores(cm):
    """``(micro, macro)`` F1 from a confusion matrix (rows true, columns predicted)."""
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    micro = 2 * tp.sum() / (2 * tp.sum() + fp.sum() + fn.sum()) if cm.sum() else 0.0
    denom = 2 * tp + fp + fn
    per_class = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    present = denom > 0
    return float(micro), float(per_class[present].mean()) if present.any() else 0.0


def report_from_probs(probs, y, num_classes=None, run_manifest=None):
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    n_cls = num_classes or probs.shape[1]
    pred = probs.argmax(axis=1)
    cm = confusion_matrix(y, pred, n_cls)
    micro, macro = f1_scores(cm)
    counts = cm.sum(axis=1)
    per_class = np.where(counts > 0, np.diag(cm) / np.maximum(counts, 1), np.nan)
    loss = cross_entropy_loss(probs, np.eye(n_cls)[y])
    accuracy = float((pred == y).mean())
    report = MetricsReport(
        accuracy=accuracy,
        cross_entropy=float(loss.mean()),
        micro_f1=micro,
        macro_f1=macro,
        mean_prediction_entropy=float(entropy_bits(probs).mean()),
        per_class_accuracy=per_class,
        sample_count=int(len(y)),
        num_classes=int(n_cls),
        run_manifest=dict(run_manifest or {}),
    )
    assert abs(report.micro_f1 - report.accuracy) < 1e-12, "micro-F1 must equal accuracy for single-label data"
    return report


def evaluate(model, dataset, temperature=None):
    """Metrics of ``model`` (state or fitted estimator) on ``dataset``."""
    from .models import ModelState, predict_proba

    state = model if isinstance(model, ModelState) else model.state_
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = predict_proba(state, dataset.X, temperature)
    manifest = {
        "model": state.fingerprint(),
        "dataset": dataset.content_hash(),
        "temperature": float(state.temperature if temperature is None else temperature),
    }
    return report_from_probs(probs, dataset.y, state.num_classes, manifest)


# --------------------------------------------------------------------------
# comparison tables


@dataclass
class ComparisonTable:
    labels: list
    metrics: list
    values: np.ndarray  # (metric, report)

    @property
    def deltas(self):
        if len(self.labels) < 2:
            return None
        return self.values[:, 1:] - self.values[:, :1]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["metric", *self.labels]
        if self.deltas is not None:
            header += [f"delta:{lab}" for lab in self.labels[1:]]
        w.writerow(header)
        for i, m in enumerate(self.metrics):
            row = [m, *(f"{v:.6f}" for v in self.values[i])]
            if self.deltas is not None:
                row += [f"{d:+.6f}" for d in self.deltas[i]]
            w.writerow(row)
        return buf.getvalue()

    def to_text(self):
        rows = list(csv.reader(io.StringIO(self.to_csv())))
        widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
        lines = []
        for k, r in enumerate(rows):
            lines.append("  ".join(c.ljust(widths[j]) if j == 0 else c.rjust(widths[j]) for j, c in enumerate(r)))
            if k == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def compare_runs(reports, labels=None):
    """Align reports metric by metric; deltas are relative to the first report."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to compare")
    if len({r.num_classes for r in reports}) > 1:
        raise ValueError("reports have mismatched class counts")
    labels = list(labels) if labels else [f"run{i}" for i in range(len(reports))]
    metrics = ["accuracy", "cross_entropy", "micro_f1", "macro_f1", "mean_prediction_entropy"]
    values = np.array([[getattr(r, m) for r in reports] for m in metrics], dtype=float)
    return ComparisonTable(labels, metrics, values)


# --------------------------------------------------------------------------
# epsilon curve


def parse_sweep_csv(text):
    """Parse ``epsilon,accuracy,mean_linf`` CSV text into float rows."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header[:2]] != ["epsilon", "accuracy"]:
        raise TableParseError("expected header 'epsilon,accuracy[,mean_linf]'", row=1)
    rows = []
    for n, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            vals = [float(v) for v in row]
        except ValueError as exc:
            raise TableParseError(f"non-numeric value ({exc})", row=n) from exc
        if len(vals) < 2:
            raise TableParseError("expected at least two columns", row=n)
        rows.append(tuple(vals))
    return rows


def plot_epsilon_curve(sweep, path):
    """Write an SVG line plot of accuracy against epsilon.

    ``sweep`` is a :class:`~signforge.attacks.SweepTable`, CSV text, or rows.
    The source table is embedded in the SVG metadata. Output bytes depend
    only on the input.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if hasattr(sweep, "to_csv"):
        text = sweep.to_csv()
    elif isinstance(sweep, str):
        text = sweep
    else:
        rows = [tuple(r) for r in sweep]
        text = "epsilon,accuracy\n" + "".join(f"{r[0]},{r[1]}\n" for r in rows)
    rows = parse_sweep_csv(text)
    if len(rows) < 2:
        raise TableParseError("need at least two rows to plot")
    eps = np.array([r[0] for r in rows])
    acc = np.array([r[1] for r in rows])
    lo, hi = acc.min(), acc.max()
    pad = max(0.05 * (hi - lo), 0.05)
    with matplotlib.rc_context({"svg.hashsalt": "signforge", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(eps, acc, marker="o", markersize=3, linewidth=1.2, label="accuracy", gid="accuracy-curve")
        ax.set_xlabel("epsilon")
        ax.set_ylabel("accuracy")
        ax.set_ylim(lo - pad, hi + pad)
        ax.grid(True, linewidth=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": "signforge", "Description": text})
        plt.close(fig)
    return path
