"""Annotation parsing, window extraction, stratified splitting and balanced sampling.

Annotations are exchanged as a tab-separated export with one segment per line::

    source	label	start_ms	end_ms	intensity
    fileA	laugh	1000	3500	high

Times are integer milliseconds. ``None`` segments are not annotated; they are the
gaps between smile/laugh spans and are recovered with :func:`derive_none_segments`.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np


class Label(str, enum.Enum):
    LAUGH = "laugh"
    SMILE = "smile"
    NONE = "none"

    @property
    def idx(self) -> int:
        return CLASSES.index(self)


class Intensity(str, enum.Enum):
    SUBTLE = "subtle"
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"

    @property
    def rank(self) -> int:
        return INTENSITY_ORDER.index(self)


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    UNASSIGNED = "unassigned"


CLASSES = (Label.LAUGH, Label.SMILE, Label.NONE)
INTENSITY_ORDER = (Intensity.SUBTLE, Intensity.LOW, Intensity.MEDIUM, Intensity.HIGH)
ALLOWED_INTENSITIES = {
    Label.LAUGH: (Intensity.LOW, Intensity.MEDIUM, Intensity.HIGH),
    Label.SMILE: INTENSITY_ORDER,
    Label.NONE: (),
}

TSV_HEADER = ("source", "label", "start_ms", "end_ms", "intensity")
MANIFEST_HEADER = ("window_id", "source", "start_ms", "label", "intensity", "split")


class AnnotationError(ValueError):
    """Base class for problems found in annotation data."""


class MalformedLine(AnnotationError):
    def __init__(self, line_no: int, detail: str = ""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: malformed annotation {detail}".rstrip())


class InvertedSpan(AnnotationError):
    def __init__(self, line_no: int):
        self.line_no = line_no
        super().__init__(f"line {line_no}: end_ms must be greater than start_ms")


class UnknownLabel(AnnotationError):
    def __init__(self, token: str):
        self.token = token
        super().__init__(f"unknown label or intensity {token!r}")


class IllegalIntensity(AnnotationError):
    def __init__(self, label: Label, intensity: Intensity | None):
        self.label = label
        self.intensity = intensity
        shown = intensity.value if intensity else "<missing>"
        super().__init__(f"intensity {shown} is not allowed for {label.value}")


class OverlappingAnnotations(AnnotationError):
    def __init__(self, ids: tuple[str, str]):
        self.ids = ids
        super().__init__(f"overlapping annotations: {ids[0]} and {ids[1]}")


class EmptyClass(ValueError):
    def __init__(self, label: Label):
        self.label = label
        super().__init__(f"class {label.value} has no elements")


@dataclass(frozen=True, order=True)
class Segment:
    source_id: str
    start_ms: int
    end_ms: int
    expression: Label
    intensity: Intensity | None = None

    def __post_init__(self):
        if self.end_ms <= self.start_ms:
            raise InvertedSpan(0)
        allowed = ALLOWED_INTENSITIES[self.expression]
        if self.expression is Label.NONE:
            if self.intensity is not None:
                raise IllegalIntensity(self.expression, self.intensity)
        elif self.intensity not in allowed:
            raise IllegalIntensity(self.expression, self.intensity)

    @property
    def duration_ms(self) -> int:
        return self.end_ms - self.start_ms

    @property
    def ident(self) -> str:
        return f"{self.source_id}:{self.start_ms}-{self.end_ms}"


@dataclass(frozen=True)
class WindowSpec:
    duration_ms: int = 1220
    overlap_ms: int = 400

    def __post_init__(self):
        if self.duration_ms <= 0 or not 0 <= self.overlap_ms < self.duration_ms:
            raise ValueError(f"invalid window spec {self}")

    @property
    def hop_ms(self) -> int:
        return self.duration_ms - self.overlap_ms

    def count(self, length_ms: int) -> int:
        """Number of windows cut from a segment of ``length_ms``."""
        if length_ms <= 0:
            return 0
        if length_ms < self.duration_ms:
            return 1
        return (length_ms - self.duration_ms) // self.hop_ms + 1


@dataclass(frozen=True)
class Window:
    source_id: str
    start_ms: int
    label: Label
    intensity: Intensity | None = None
    split: Split = Split.UNASSIGNED
    # shorter than the nominal duration when cut from a sub-window segment
    length_ms: int = 1220
    duration_ms: int = 1220

    @property
    def window_id(self) -> str:
        return f"{self.source_id}@{self.start_ms}"

    @property
    def padded(self) -> bool:
        return self.length_ms < self.duration_ms

    @property
    def end_ms(self) -> int:
        return self.start_ms + self.length_ms


@dataclass(frozen=True)
class ClassCounts:
    laughs: int = 0
    smiles: int = 0
    none: int = 0

    def __post_init__(self):
        if min(self.laughs, self.smiles, self.none) < 0:
            raise ValueError("class counts must be non-negative")

    @property
    def total(self) -> int:
        return self.laughs + self.smiles + self.none

    def as_dict(self) -> dict[Label, int]:
        return {Label.LAUGH: self.laughs, Label.SMILE: self.smiles, Label.NONE: self.none}

    @classmethod
    def from_labels(cls, labels: Iterable[Label]) -> "ClassCounts":
        tally = {c: 0 for c in CLASSES}
        for lab in labels:
            tally[Label(lab)] += 1
        return cls(tally[Label.LAUGH], tally[Label.SMILE], tally[Label.NONE])


# --------------------------------------------------------------------------- parsing


def _parse_label(token: str) -> Label:
    try:
        return Label(token.strip().lower())
    except ValueError:
        raise UnknownLabel(token) from None


def _parse_intensity(token: str) -> Intensity | None:
    token = token.strip().lower()
    if not token:
        return None
    try:
        return Intensity(token)
    except ValueError:
        raise UnknownLabel(token) from None


def parse_annotations(text: str) -> list[Segment]:
    """Parse annotation TSV content into segments sorted by (source, start)."""
    segments = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        fields = raw.rstrip("\r\n").split("\t")
        if line_no == 1 and tuple(f.strip().lower() for f in fields) == TSV_HEADER:
            continue
        if len(fields) == 4:
            # trailing empty intensity column stripped by some editors
            fields.append("")
        if len(fields) != 5:
            raise MalformedLine(line_no, f"(expected 5 fields, got {len(fields)})")
        source, label_tok, start_tok, end_tok, int_tok = fields
        if not source.strip():
            raise MalformedLine(line_no, "(empty source)")
        try:
            start, end = int(start_tok), int(end_tok)
        except ValueError:
            raise MalformedLine(line_no, "(non-integer time)") from None
        if end <= start:
            raise InvertedSpan(line_no)
        label = _parse_label(label_tok)
        intensity = _parse_intensity(int_tok)
        if intensity not in ALLOWED_INTENSITIES[label] and not (label is Label.NONE and intensity is None):
            raise IllegalIntensity(label, intensity)
        segments.append(Segment(source.strip(), start, end, label, intensity))
    segments.sort(key=lambda s: (s.source_id, s.start_ms, s.end_ms))
    return segments


def serialize_annotations(segments: Sequence[Segment]) -> str:
    lines = ["\t".join(TSV_HEADER)]
    for s in segments:
        lines.append(
            "\t".join(
                [s.source_id, s.expression.value, str(s.start_ms), str(s.end_ms),
                 s.intensity.value if s.intensity else ""]
            )
        )
    return "\n".join(lines) + "\n"


def derive_none_segments(segments: Sequence[Segment], recording_duration_ms: int) -> list[Segment]:
    """Return the gaps between smile/laugh spans of one recording as None segments."""
    spans = sorted((s for s in segments if s.expression is not Label.NONE), key=lambda s: s.start_ms)
    sources = {s.source_id for s in spans}
    if len(sources) > 1:
        raise ValueError(f"segments from several sources: {sorted(sources)}")
    source = spans[0].source_id if spans else ""
    for a, b in zip(spans, spans[1:]):
        if b.start_ms < a.end_ms:
            raise OverlappingAnnotations((a.ident, b.ident))
    if spans and (spans[0].start_ms < 0 or spans[-1].end_ms > recording_duration_ms):
        raise ValueError("annotation outside recording bounds")

    gaps = []
    cursor = 0
    for s in spans:
        if s.start_ms > cursor:
            gaps.append(Segment(source, cursor, s.start_ms, Label.NONE))
        cursor = max(cursor, s.end_ms)
    if recording_duration_ms > cursor:
        gaps.append(Segment(source, cursor, recording_duration_ms, Label.NONE))
    return gaps


def complete_segments(segments: Sequence[Segment], durations_ms: dict[str, int]) -> list[Segment]:
    """Add derived None segments to every recording listed in ``durations_ms``."""
    by_source: dict[str, list[Segment]] = defaultdict(list)
    for s in segments:
        by_source[s.source_id].append(s)
    out = []
    for source in sorted(durations_ms):
        own = by_source.get(source, [])
        gaps = derive_none_segments(own, durations_ms[source])
        if not own:
            gaps = [replace(g, source_id=source) for g in gaps]
        out.extend(own)
        out.extend(gaps)
    out.sort(key=lambda s: (s.source_id, s.start_ms))
    return out


# --------------------------------------------------------------------------- windows


def extract_windows(segments: Sequence[Segment], spec: WindowSpec = WindowSpec()) -> list[Window]:
    windows = []
    for seg in segments:
        length = seg.duration_ms
        if length <= 0:
            continue
        if length < spec.duration_ms:
            windows.append(
                Window(seg.source_id, seg.start_ms, seg.expression, seg.intensity,
                       length_ms=length, duration_ms=spec.duration_ms)
            )
            continue
        for k in range(spec.count(length)):
            windows.append(
                Window(seg.source_id, seg.start_ms + k * spec.hop_ms, seg.expression, seg.intensity,
                       length_ms=spec.duration_ms, duration_ms=spec.duration_ms)
            )
    return windows


def split_dataset(
    windows: Sequence[Window],
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> list[Window]:
    """Stratified train/val/test assignment; returns windows in input order.

    Per class of size n: floor(r_train*n) train, floor(r_val*n) val, the rest test.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    assigned: list[Window | None] = [None] * len(windows)
    for label in CLASSES:
        members = [i for i, w in enumerate(windows) if w.label is label]
        if not members:
            raise EmptyClass(label)
        n = len(members)
        # guard against 0.7*100 = 69.999...
        n_train = math.floor(ratios[0] * n + 1e-9)
        n_val = math.floor(ratios[1] * n + 1e-9)
        order = rng.permutation(n)
        for rank, j in enumerate(order):
            split = Split.TRAIN if rank < n_train else Split.VAL if rank < n_train + n_val else Split.TEST
            i = members[j]
            assigned[i] = replace(windows[i], split=split)
    return assigned  # type: ignore[return-value]


def class_counts(windows: Iterable[Window]) -> ClassCounts:
    return ClassCounts.from_labels(w.label for w in windows)


def sampler_weights(counts: ClassCounts) -> dict[Label, float]:
    """Per-window draw probability for each class: 1/n_c, scaled so the classes are equiprobable."""
    per_class = counts.as_dict()
    for label, n in per_class.items():
        if n <= 0:
            raise EmptyClass(label)
    k = len(per_class)
    return {label: 1.0 / (k * n) for label, n in per_class.items()}


def window_weights(windows: Sequence[Window]) -> np.ndarray:
    table = sampler_weights(class_counts(windows))
    return np.array([table[w.label] for w in windows], dtype=np.float64)


def sample_batch(rng: np.random.Generator, weights: Sequence[float], batch_size: int = 16) -> np.ndarray:
    """Draw ``batch_size`` indices with replacement, proportionally to ``weights``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be a non-empty, non-negative vector with positive mass")
    # inverse-CDF draw keeps zero-mass entries unreachable
    cdf = np.cumsum(w / w.sum())
    u = rng.random(batch_size)
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, w.size - 1).astype(np.int64)


# --------------------------------------------------------------------------- manifests


def write_manifest(windows: Sequence[Window]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER + ("length_ms",))
    for w in windows:
        writer.writerow(
            [w.window_id, w.source_id, w.start_ms, w.label.value,
             w.intensity.value if w.intensity else "", w.split.value, w.length_ms]
        )
    return buf.getvalue()


def read_manifest(text: str, spec: WindowSpec = WindowSpec()) -> list[Window]:
    reader = csv.DictReader(io.StringIO(text))
    missing = set(MANIFEST_HEADER) - set(reader.fieldnames or ())
    if missing:
        raise MalformedLine(1, f"(manifest missing columns {sorted(missing)})")
    out = []
    for row in reader:
        length = int(row["length_ms"]) if row.get("length_ms") else spec.duration_ms
        out.append(
            Window(
                row["source"], int(row["start_ms"]), _parse_label(row["label"]),
                _parse_intensity(row["intensity"]), Split(row["split"]),
                length_ms=length, duration_ms=spec.duration_ms,
            )
        )
    return out


@dataclass
class Corpus:
    """Annotated segments plus recording durations for a set of sources."""

    segments: list[Segment]
    durations_ms: dict[str, int] = field(default_factory=dict)

    def all_segments(self) -> list[Segment]:
        return complete_segments(self.segments, self.durations_ms)

    def windows(self, spec: WindowSpec = WindowSpec()) -> list[Window]:
        return extract_windows(self.all_segments(), spec)
