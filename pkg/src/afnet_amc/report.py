"""Test-set evaluation and CSV/SVG export.

All accuracies are derived from the per-SNR confusion matrices, so the
exported matrices reproduce every reported number exactly.

Exported files (``export_report``)::

    summary.csv           metric,value
    acc_by_snr.csv        snr,accuracy,count
    acc_by_class_snr.csv  class,snr,accuracy,count   (cells without frames omitted)
    confusion_<snr>.csv   true\\pred,<class names...>  one row per true class
    confidence.csv        group,key,mean_confidence,count   group is snr or class
    acc_by_snr.svg, acc_by_class_snr.svg
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, afnet_forward
from .signals import FrameSet, Modulation
from .training import confidence_weights


@dataclass
class EvalReport:
    class_names: list[str]
    k: int
    confusion: dict[int, np.ndarray]
    conf_by_snr: dict[int, float]
    conf_by_class: dict[int, float]
    conf_count_by_snr: dict[int, int] = field(default_factory=dict)
    conf_count_by_class: dict[int, int] = field(default_factory=dict)

    @property
    def snrs(self) -> list[int]:
        return sorted(self.confusion)

    @property
    def count_by_snr(self) -> dict[int, int]:
        return {s: int(self.confusion[s].sum()) for s in self.snrs}

    @property
    def acc_by_snr(self) -> dict[int, float]:
        return {s: float(np.trace(c) / c.sum()) for s, c in sorted(self.confusion.items())}

    @property
    def acc_by_class_snr(self) -> dict[tuple[int, int], float]:
        out = {}
        for c in range(len(self.class_names)):
            for s in self.snrs:
                row = self.confusion[s][c]
                if row.sum() > 0:
                    out[(c, s)] = float(row[c] / row.sum())
        return out

    @property
    def overall_accuracy(self) -> float:
        hits = sum(int(np.trace(c)) for c in self.confusion.values())
        total = sum(int(c.sum()) for c in self.confusion.values())
        return hits / total

    @property
    def average_accuracy(self) -> float:
        return float(np.mean(list(self.acc_by_snr.values())))

    @property
    def max_accuracy(self) -> float:
        return float(max(self.acc_by_snr.values()))

    def to_dict(self) -> dict:
        return {
            "class_names": self.class_names,
            "k": self.k,
            "confusion": {str(s): c.tolist() for s, c in sorted(self.confusion.items())},
            "conf_by_snr": {str(s): v for s, v in sorted(self.conf_by_snr.items())},
            "conf_by_class": {str(c): v for c, v in sorted(self.conf_by_class.items())},
            "conf_count_by_snr": {str(s): v for s, v in sorted(self.conf_count_by_snr.items())},
            "conf_count_by_class": {str(c): v for c, v in sorted(self.conf_count_by_class.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        ints = lambda m: {int(k): v for k, v in m.items()}  # noqa: E731
        return cls(
            list(d["class_names"]),
            int(d["k"]),
            {int(s): np.array(c, dtype=np.int64) for s, c in d["confusion"].items()},
            ints(d["conf_by_snr"]),
            ints(d["conf_by_class"]),
            ints(d.get("conf_count_by_snr", {})),
            ints(d.get("conf_count_by_class", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_class_names(num_classes: int) -> list[str]:
    return [Modulation(i).display if i < len(Modulation) else f"class{i}" for i in range(num_classes)]


def _group_means(values, keys):
    means, counts = {}, {}
    for key in sorted(set(keys.tolist())):
        sel = keys == key
        means[int(key)] = float(values[sel].mean())
        counts[int(key)] = int(sel.sum())
    return means, counts


def evaluate_predictions(probs, labels, snrs, num_classes: int, k: int = 3, class_names=None) -> EvalReport:
    """Build a report from posterior probabilities (rows of ``probs``)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    snrs = np.asarray(snrs, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty test set")
    pred = np.argmax(probs, axis=1)
    confusion = {}
    for s in sorted(set(snrs.tolist())):
        sel = snrs == s
        cm = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(cm, (labels[sel], pred[sel]), 1)
        confusion[int(s)] = cm
    w = confidence_weights(probs, k)
    by_snr, n_snr = _group_means(w, snrs)
    by_class, n_class = _group_means(w, labels)
    names = list(class_names) if class_names is not None else default_class_names(num_classes)
    return EvalReport(names, k, confusion, by_snr, by_class, n_snr, n_class)


def evaluate(params, cfg: ModelConfig, test: FrameSet, k: int = 3) -> EvalReport:
    probs = afnet_forward(test.iq, params, cfg)
    return evaluate_predictions(probs, test.labels, test.snrs, cfg.num_classes, k)


def confidence_stats(params, cfg: ModelConfig, frames: FrameSet, k: int = 3):
    """Mean confidence weight by SNR and by class."""
    w = confidence_weights(afnet_forward(frames.iq, params, cfg), k)
    return _group_means(w, frames.snrs)[0], _group_means(w, frames.labels)[0]


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def report_files(report: EvalReport) -> dict[str, str]:
    """File name -> text content for every exported artifact."""
    files = {}
    files["summary.csv"] = _csv(
        [
            ["metric", "value"],
            ["overall_accuracy", _fmt(report.overall_accuracy)],
            ["average_accuracy", _fmt(report.average_accuracy)],
            ["max_accuracy", _fmt(report.max_accuracy)],
        ]
    )
    counts = report.count_by_snr
    files["acc_by_snr.csv"] = _csv(
        [["snr", "accuracy", "count"]] + [[s, _fmt(a), counts[s]] for s, a in report.acc_by_snr.items()]
    )
    rows = [["class", "snr", "accuracy", "count"]]
    for (c, s), a in report.acc_by_class_snr.items():
        rows.append([report.class_names[c], s, _fmt(a), int(report.confusion[s][c].sum())])
    files["acc_by_class_snr.csv"] = _csv(rows)
    for s, cm in sorted(report.confusion.items()):
        rows = [["true\\pred"] + report.class_names]
        rows += [[report.class_names[i]] + [int(v) for v in cm[i]] for i in range(len(cm))]
        files[f"confusion_{s}.csv"] = _csv(rows)
    rows = [["group", "key", "mean_confidence", "count"]]
    rows += [["snr", s, _fmt(v), report.conf_count_by_snr.get(s, "")] for s, v in sorted(report.conf_by_snr.items())]
    rows += [
        ["class", report.class_names[c], _fmt(v), report.conf_count_by_class.get(c, "")]
        for c, v in sorted(report.conf_by_class.items())
    ]
    files["confidence.csv"] = _csv(rows)

    snrs = report.snrs
    acc = report.acc_by_snr
    files["acc_by_snr.svg"] = line_chart_svg(
        "Accuracy vs SNR", snrs, {"overall": [acc[s] for s in snrs]}
    )
    per_class = {}
    cs = report.acc_by_class_snr
    for c, name in enumerate(report.class_names):
        if any((c, s) in cs for s in snrs):
            per_class[name] = [cs.get((c, s)) for s in snrs]
    files["acc_by_class_snr.svg"] = line_chart_svg("Per-class accuracy vs SNR", snrs, per_class)
    return files


def export_report(report: EvalReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, text in report_files(report).items():
            path = out / name
            path.write_text(text)
            paths.append(path)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return paths


def read_acc_by_snr(path) -> dict[int, float]:
    with open(path, newline="") as fh:
        return {int(r["snr"]): float(r["accuracy"]) for r in csv.DictReader(fh)}


_PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#000000",
]


def line_chart_svg(title: str, xs, series: dict, width: int = 640, height: int = 400) -> str:
    """Minimal dependency-free line chart; y axis fixed to [0, 1]."""
    left, right, top, bottom = 50, 130, 30, 40
    pw, ph = width - left - right, height - top - bottom
    x0, x1 = min(xs), max(xs)
    span = (x1 - x0) or 1

    def px(x):
        return left + pw * (x - x0) / span

    def py(y):
        return top + ph * (1 - y)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{_escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        out.append(
            f'<text x="{left - 6}" y="{py(tick) + 4:.1f}" text-anchor="end" font-size="10">{tick:.2f}</text>'
        )
    for x in xs:
        out.append(f'<text x="{px(x):.1f}" y="{top + ph + 14}" text-anchor="middle" font-size="10">{x}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" text-anchor="middle" font-size="11">SNR (dB)</text>')
    for i, (name, ys) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys) if y is not None)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 12 + 14 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 28}" y2="{ly - 4}" stroke="{color}"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly}" font-size="10">{_escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
