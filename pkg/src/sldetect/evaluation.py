"""Classification metrics, intensity-stratified heatmaps and the two-class remap analysis."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import CLASSES, Intensity, Label

CLASS_NAMES = tuple(c.value for c in CLASSES)
HEATMAP_ROWS = (
    "laugh-high", "laugh-medium", "laugh-low",
    "smile-high", "smile-medium", "smile-low", "smile-subtle",
    "none",
)
# rows re-read as laughs in the two-class view
REMAP_POSITIVE_ROWS = ("laugh-high", "laugh-medium", "laugh-low", "smile-high", "smile-medium")
LAUGH_ROWS = ("laugh-high", "laugh-medium", "laugh-low")


class LengthMismatch(ValueError):
    pass


class EmptyMatrix(ValueError):
    pass


class MissingIntensity(ValueError):
    def __init__(self, sample_id):
        self.sample_id = sample_id
        super().__init__(f"sample {sample_id} is a smile/laugh without an intensity")


class MissingRawCounts(ValueError):
    pass


def class_index(value) -> int:
    """Map a Label, its string value or an integer index to 0/1/2."""
    if isinstance(value, Label):
        return CLASSES.index(value)
    if isinstance(value, str):
        return CLASSES.index(Label(value.lower()))
    idx = int(value)
    if not 0 <= idx < 3:
        raise ValueError(f"class index out of range: {value}")
    return idx


def row_key(label, intensity) -> str:
    lab = CLASSES[class_index(label)]
    if lab is Label.NONE:
        return "none"
    if intensity is None or intensity == "":
        raise MissingIntensity(None)
    return f"{lab.value}-{Intensity(intensity).value}"


# --------------------------------------------------------------------------- confusion & metrics


@dataclass(frozen=True)
class ConfusionMatrix3:
    counts: np.ndarray  # rows: truth (laugh, smile, none); columns: prediction

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (3, 3) or np.any(c < 0):
            raise ValueError("confusion matrix must be 3x3 with non-negative counts")
        object.__setattr__(self, "counts", c)

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix3) and np.array_equal(self.counts, other.counts)

    def __hash__(self):
        return hash(self.counts.tobytes())


def confusion(predictions: Sequence, labels: Sequence) -> ConfusionMatrix3:
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions for {len(labels)} labels")
    cm = np.zeros((3, 3), dtype=np.int64)
    for p, t in zip(predictions, labels):
        cm[class_index(t), class_index(p)] += 1
    return ConfusionMatrix3(cm)


@dataclass(frozen=True)
class MetricsReport:
    precision: tuple[float, float, float]
    recall: tuple[float, float, float]
    f1: tuple[float, float, float]
    support: tuple[int, int, int]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    micro_precision: float
    micro_recall: float
    micro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    uar: float
    accuracy: float

    def to_dict(self) -> dict:
        d = {}
        for i, name in enumerate(CLASS_NAMES):
            d[name] = {"precision": self.precision[i], "recall": self.recall[i], "f1": self.f1[i],
                       "support": int(self.support[i])}
        for avg in ("macro", "micro", "weighted"):
            d[avg] = {m: getattr(self, f"{avg}_{m}") for m in ("precision", "recall", "f1")}
        d["uar"] = self.uar
        d["accuracy"] = self.accuracy
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "precision", "recall", "f1", "support"])
        for i, name in enumerate(CLASS_NAMES):
            w.writerow([name, _fmt(self.precision[i]), _fmt(self.recall[i]), _fmt(self.f1[i]), int(self.support[i])])
        total = int(sum(self.support))
        for avg in ("macro", "micro", "weighted"):
            w.writerow([avg] + [_fmt(getattr(self, f"{avg}_{m}")) for m in ("precision", "recall", "f1")] + [total])
        w.writerow(["uar", "", _fmt(self.uar), "", total])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        kw = {
            "precision": tuple(d[n]["precision"] for n in CLASS_NAMES),
            "recall": tuple(d[n]["recall"] for n in CLASS_NAMES),
            "f1": tuple(d[n]["f1"] for n in CLASS_NAMES),
            "support": tuple(int(d[n]["support"]) for n in CLASS_NAMES),
            "uar": d["uar"],
            "accuracy": d["accuracy"],
        }
        for avg in ("macro", "micro", "weighted"):
            for m in ("precision", "recall", "f1"):
                kw[f"{avg}_{m}"] = d[avg][m]
        return cls(**kw)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def metrics(cm: ConfusionMatrix3 | np.ndarray) -> MetricsReport:
    """Per-class and averaged precision/recall/F1 plus UAR.

    Zero denominators give 0. Macro averages run over the classes present in the
    ground truth, so the macro recall is the UAR.
    """
    if not isinstance(cm, ConfusionMatrix3):
        cm = ConfusionMatrix3(cm)
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total == 0:
        raise EmptyMatrix("confusion matrix has no samples")
    tp = np.diag(c)
    col = c.sum(axis=0)
    row = c.sum(axis=1)
    precision = np.divide(tp, col, out=np.zeros(3), where=col > 0)
    recall = np.divide(tp, row, out=np.zeros(3), where=row > 0)
    f1 = np.array([_f1(p, r) for p, r in zip(precision, recall)])
    present = row > 0
    weights = row / total
    accuracy = float(tp.sum() / total)
    return MetricsReport(
        precision=tuple(float(x) for x in precision),
        recall=tuple(float(x) for x in recall),
        f1=tuple(float(x) for x in f1),
        support=tuple(int(x) for x in row),
        macro_precision=float(precision[present].mean()),
        macro_recall=float(recall[present].mean()),
        macro_f1=float(f1[present].mean()),
        micro_precision=accuracy,
        micro_recall=accuracy,
        micro_f1=accuracy,
        weighted_precision=float((precision * weights).sum()),
        weighted_recall=float((recall * weights).sum()),
        weighted_f1=float((f1 * weights).sum()),
        uar=float(recall[present].mean()),
        accuracy=accuracy,
    )


# --------------------------------------------------------------------------- intensity heatmaps


@dataclass(frozen=True)
class IntensityHeatmap:
    percentages: np.ndarray  # 8 x 3, row-normalized to 100 where supported
    counts: np.ndarray | None  # 8 x 3 raw counts; None when only percentages are known
    supported: np.ndarray  # 8 booleans

    @classmethod
    def from_counts(cls, counts) -> "IntensityHeatmap":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (len(HEATMAP_ROWS), 3) or np.any(counts < 0):
            raise ValueError("heatmap counts must be a non-negative 8x3 array")
        support = counts.sum(axis=1)
        pct = np.zeros(counts.shape, dtype=np.float64)
        ok = support > 0
        pct[ok] = 100.0 * counts[ok] / support[ok, None]
        return cls(pct, counts, ok)

    def row(self, key: str) -> np.ndarray:
        return self.percentages[HEATMAP_ROWS.index(key)]

    def collapse(self) -> ConfusionMatrix3:
        """Sum intensity rows back into the 3x3 confusion matrix."""
        if self.counts is None:
            raise MissingRawCounts("heatmap has no raw counts")
        cm = np.zeros((3, 3), dtype=np.int64)
        for i, key in enumerate(HEATMAP_ROWS):
            cm[class_index(key.split("-")[0])] += self.counts[i]
        return ConfusionMatrix3(cm)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "supported"] + [f"n_{c}" for c in CLASS_NAMES] + [f"pct_{c}" for c in CLASS_NAMES])
        for i, key in enumerate(HEATMAP_ROWS):
            counts = [int(x) for x in self.counts[i]] if self.counts is not None else ["", "", ""]
            w.writerow([key, int(bool(self.supported[i]))] + counts + [f"{x:.4f}" for x in self.percentages[i]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "IntensityHeatmap":
        rows = {r["row"]: r for r in csv.DictReader(io.StringIO(text))}
        if set(rows) != set(HEATMAP_ROWS):
            raise ValueError("heatmap CSV must list exactly the 8 intensity rows")
        if all(rows[k][f"n_{c}"] != "" for k in HEATMAP_ROWS for c in CLASS_NAMES):
            return cls.from_counts([[int(rows[k][f"n_{c}"]) for c in CLASS_NAMES] for k in HEATMAP_ROWS])
        pct = np.array([[float(rows[k][f"pct_{c}"]) for c in CLASS_NAMES] for k in HEATMAP_ROWS])
        sup = np.array([rows[k]["supported"] == "1" for k in HEATMAP_ROWS])
        return cls(pct, None, sup)

    def to_svg(self, title: str = "") -> str:
        cell_w, cell_h, left, top = 90, 34, 120, 50
        width, height = left + 3 * cell_w + 20, top + len(HEATMAP_ROWS) * cell_h + 20
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'font-family="sans-serif" font-size="12">',
            f'<text x="{left}" y="18" font-size="14">{_escape(title)}</text>',
        ]
        for j, name in enumerate(CLASS_NAMES):
            parts.append(f'<text x="{left + j * cell_w + cell_w / 2}" y="{top - 8}" text-anchor="middle">{name}</text>')
        for i, key in enumerate(HEATMAP_ROWS):
            y = top + i * cell_h
            parts.append(f'<text x="{left - 8}" y="{y + cell_h / 2 + 4}" text-anchor="end">{key}</text>')
            for j in range(3):
                v = float(self.percentages[i, j]) if self.supported[i] else 0.0
                fill = _blue(v / 100.0) if self.supported[i] else "#eeeeee"
                ink = "#ffffff" if v > 55 else "#000000"
                label = f"{v:.1f}%" if self.supported[i] else "n/a"
                x = left + j * cell_w
                parts.append(f'<rect x="{x}" y="{y}" width="{cell_w}" height="{cell_h}" fill="{fill}" stroke="#ffffff"/>')
                parts.append(f'<text x="{x + cell_w / 2}" y="{y + cell_h / 2 + 4}" text-anchor="middle" fill="{ink}">{label}</text>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


def _blue(t: float) -> str:
    t = min(max(t, 0.0), 1.0)
    lo, hi = (247, 251, 255), (8, 48, 107)
    r, g, b = (round(a + (c - a) * t) for a, c in zip(lo, hi))
    return f"#{r:02x}{g:02x}{b:02x}"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def intensity_heatmap(
    predictions: Sequence,
    labels: Sequence,
    intensities: Sequence,
    sample_ids: Sequence | None = None,
) -> IntensityHeatmap:
    if not len(predictions) == len(labels) == len(intensities):
        raise LengthMismatch("predictions, labels and intensities differ in length")
    ids = sample_ids if sample_ids is not None else range(len(labels))
    counts = np.zeros((len(HEATMAP_ROWS), 3), dtype=np.int64)
    for sid, p, t, inten in zip(ids, predictions, labels, intensities):
        try:
            key = row_key(t, inten)
        except MissingIntensity:
            raise MissingIntensity(sid) from None
        counts[HEATMAP_ROWS.index(key), class_index(p)] += 1
    return IntensityHeatmap.from_counts(counts)


# --------------------------------------------------------------------------- two-class remap


@dataclass(frozen=True)
class RemapResult:
    remapped: tuple[float, ...]  # per heatmap, percent
    mean: float
    std: float
    baseline: tuple[float, ...]  # laugh recall per heatmap, percent
    baseline_mean: float
    baseline_std: float

    def to_dict(self) -> dict:
        return {
            "remapped": list(self.remapped), "mean": self.mean, "std": self.std,
            "baseline": list(self.baseline), "baseline_mean": self.baseline_mean,
            "baseline_std": self.baseline_std,
        }


def remapped_laugh_accuracy(hm: IntensityHeatmap) -> tuple[float, float]:
    """(remapped, baseline) laugh accuracy of one heatmap, in percent.

    Two-class view: laugh rows plus medium/high smiles form the laugh class,
    subtle/low smiles and None the other class. A laugh-class sample counts as
    correct when predicted laugh; a medium/high smile also counts when predicted
    smile. The baseline is the plain laugh recall.
    """
    if hm.counts is None:
        raise MissingRawCounts("remap needs raw heatmap counts")
    c = {key: hm.counts[i] for i, key in enumerate(HEATMAP_ROWS)}
    laugh_col, smile_col = 0, 1
    pos_support = sum(int(c[k].sum()) for k in REMAP_POSITIVE_ROWS)
    laugh_support = sum(int(c[k].sum()) for k in LAUGH_ROWS)
    if pos_support == 0 or laugh_support == 0:
        raise ValueError("heatmap has no laugh samples to score")
    correct = sum(int(c[k][laugh_col]) for k in LAUGH_ROWS)
    correct += sum(int(c[k][laugh_col] + c[k][smile_col]) for k in ("smile-high", "smile-medium"))
    baseline = sum(int(c[k][laugh_col]) for k in LAUGH_ROWS)
    return 100.0 * correct / pos_support, 100.0 * baseline / laugh_support


def remap_two_class(heatmaps: Iterable[IntensityHeatmap]) -> RemapResult:
    """Remapped and baseline laugh accuracy across heatmaps (mean and population std)."""
    pairs = [remapped_laugh_accuracy(h) for h in heatmaps]
    if not pairs:
        raise ValueError("no heatmaps given")
    rem = np.array([p[0] for p in pairs])
    base = np.array([p[1] for p in pairs])
    return RemapResult(
        tuple(float(x) for x in rem), float(rem.mean()), float(rem.std()),
        tuple(float(x) for x in base), float(base.mean()), float(base.std()),
    )


# --------------------------------------------------------------------------- report table

TABLE_METRICS = ("Precision", "Recall", "F1-score", "UAR")


def config_name(modality: str, regime: str, dataset: str) -> str:
    """Configuration code: modality letter, S(cratch)/F(ine-tuned), 3-letter dataset tag."""
    m = {"audio": "A", "video": "V", "fusion": "F"}[modality]
    r = "S" if regime in ("scratch", "fusion-scratch") else "F"
    return f"{m}{r}{dataset[:3].upper()}"


def report_table(reports: Mapping[str, MetricsReport], average: str = "macro") -> str:
    """Table with one column per configuration and Precision/Recall/F1/UAR rows."""
    if average not in ("macro", "micro", "weighted"):
        raise ValueError(f"unknown average {average!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(reports)
    w.writerow([f"metric ({average})"] + names)
    for metric, attr in zip(TABLE_METRICS, ("precision", "recall", "f1", None)):
        row = [metric]
        for n in names:
            r = reports[n]
            row.append(_fmt(r.uar if attr is None else getattr(r, f"{average}_{attr}")))
        w.writerow(row)
    return buf.getvalue()
