"""Deterministic synthetic audiovisual corpora.

Each source is a recording made of back-to-back segments. Laughs are voiced
bursts at 4-6 Hz, smiles a sustained bright harmonic tone, None low-passed
noise. The video is a bright mouth ellipse whose opening grows with intensity
rank; laughs additionally open and close at the burst rate.

``informativeness`` decides which modality carries class evidence:

* ``both``: audio and video both separate all three classes
* ``audio_only`` / ``video_only``: the other modality is class-independent
* ``complementary``: audio separates laugh from smile only (None audio
  imitates one of them), video separates smile/laugh from None only
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import media
from .corpus import (
    ALLOWED_INTENSITIES,
    CLASSES,
    INTENSITY_ORDER,
    Intensity,
    Label,
    Segment,
    serialize_annotations,
)
from .evaluation import HEATMAP_ROWS, IntensityHeatmap

MODES = ("both", "audio_only", "video_only", "complementary")


class SpecError(ValueError):
    pass


@dataclass
class SynthSpec:
    seed: int = 0
    n_sources: int = 4
    n_laugh: int = 10
    n_smile: int = 10
    n_none: int = 10
    laugh_ms: tuple[int, int] = (1220, 2000)
    smile_ms: tuple[int, int] = (1220, 2000)
    none_ms: tuple[int, int] = (1220, 2000)
    # probabilities over the allowed intensities, in increasing rank
    laugh_intensity: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    smile_intensity: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    audio_cue: float = 1.0
    video_cue: float = 1.0
    noise_floor: float = 0.05
    informativeness: str = "both"
    audio_rate: int = 16000
    fps: float = 25.0
    frame_size: tuple[int, int] = (128, 128)
    roi_side: float = 112.0

    def __post_init__(self):
        for name in ("laugh_ms", "smile_ms", "none_ms", "laugh_intensity", "smile_intensity", "frame_size"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        if min(self.n_laugh, self.n_smile, self.n_none) < 0:
            raise SpecError("segment counts must be >= 0")
        if self.n_sources < 1:
            raise SpecError("need at least one source")
        for name in ("laugh_ms", "smile_ms", "none_ms"):
            lo, hi = getattr(self, name)
            if lo < 200 or hi < lo:
                raise SpecError(f"{name} must satisfy 200 <= min <= max, got {(lo, hi)}")
        if len(self.laugh_intensity) != 3 or len(self.smile_intensity) != 4:
            raise SpecError("laugh_intensity needs 3 probabilities, smile_intensity 4")
        for probs in (self.laugh_intensity, self.smile_intensity):
            if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-6:
                raise SpecError(f"intensity probabilities must be non-negative and sum to 1: {probs}")
        if min(self.audio_cue, self.video_cue, self.noise_floor) < 0:
            raise SpecError("cue strengths and noise floor must be >= 0")
        if self.informativeness not in MODES:
            raise SpecError(f"informativeness must be one of {MODES}")
        if self.audio_rate <= 0 or self.fps <= 0:
            raise SpecError("rates must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown spec fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class SynthCorpus:
    spec: SynthSpec
    segments: list[Segment]  # smile/laugh only; None is derived
    durations_ms: dict[str, int]
    audio: dict[str, media.AudioBuffer] = field(default_factory=dict)
    video: dict[str, media.FrameStack] = field(default_factory=dict)
    rois: dict[str, media.Roi] = field(default_factory=dict)


# --------------------------------------------------------------------------- layout


def _draw_segments(spec: SynthSpec, rng: np.random.Generator):
    items = []
    for label, n, rng_ms in (
        (Label.LAUGH, spec.n_laugh, spec.laugh_ms),
        (Label.SMILE, spec.n_smile, spec.smile_ms),
        (Label.NONE, spec.n_none, spec.none_ms),
    ):
        for _ in range(n):
            dur = int(rng.integers(rng_ms[0], rng_ms[1] + 1))
            intensity = None
            if label is Label.LAUGH:
                intensity = ALLOWED_INTENSITIES[label][rng.choice(3, p=spec.laugh_intensity)]
            elif label is Label.SMILE:
                intensity = INTENSITY_ORDER[rng.choice(4, p=spec.smile_intensity)]
            items.append((label, intensity, dur))
    order = rng.permutation(len(items))
    per_source: list[list] = [[] for _ in range(spec.n_sources)]
    for k, i in enumerate(order):
        per_source[k % spec.n_sources].append(items[i])
    return per_source


def _arrange(items: list, rng: np.random.Generator) -> list:
    """Order one source's items so None segments are separated by smile/laugh spans where possible."""
    sl = [it for it in items if it[0] is not Label.NONE]
    nones = [it for it in items if it[0] is Label.NONE]
    slots: list[list] = [[] for _ in range(len(sl) + 1)]
    free = list(rng.permutation(len(slots)))
    for k, it in enumerate(nones):
        # one None per gap while gaps remain; extra Nones merge with a neighbour
        slot = free[k] if k < len(free) else free[k % len(free)]
        slots[slot].append(it)
    out = []
    for i, slot in enumerate(slots):
        out.extend(slot)
        if i < len(sl):
            out.append(sl[i])
    return out


# --------------------------------------------------------------------------- signals


def _harmonic(t, f0, n_harm, tilt, rng):
    phases = rng.uniform(0, 2 * np.pi, n_harm)
    sig = np.zeros_like(t)
    for h in range(1, n_harm + 1):
        sig += h ** (-tilt) * np.sin(2 * np.pi * h * f0 * t + phases[h - 1])
    return sig / np.max(np.abs(sig) + 1e-9)


def _audio_profile(label: Label, mode: str, rng) -> Label | None:
    if mode in ("both", "audio_only"):
        return label
    if mode == "video_only":
        return CLASSES[rng.integers(3)]
    # complementary: None borrows laugh or smile audio
    return label if label is not Label.NONE else (Label.LAUGH, Label.SMILE)[rng.integers(2)]


def _audio_segment(profile: Label, rank: int, n: int, rate: float, rng) -> np.ndarray:
    t = np.arange(n) / rate
    if profile is Label.LAUGH:
        burst = rng.uniform(4.0, 6.0)
        env = (0.5 * (1 - np.cos(2 * np.pi * burst * t + rng.uniform(0, 2 * np.pi)))) ** 2
        carrier = _harmonic(t, rng.uniform(220, 300), 4, 1.0, rng)
        return (0.55 + 0.1 * rank) * env * carrier
    if profile is Label.SMILE:
        drift = 1 + 0.1 * np.sin(2 * np.pi * rng.uniform(0.5, 1.5) * t)
        carrier = _harmonic(t, rng.uniform(150, 210), 8, 0.5, rng)
        return (0.35 + 0.05 * rank) * drift * carrier
    white = rng.standard_normal(n + 32)
    kernel = np.ones(32) / 32
    low = np.convolve(white, kernel, mode="valid")[:n]
    return 0.4 * low / (np.std(low) + 1e-9) * 0.5


def _video_profile(label: Label, intensity: Intensity | None, mode: str, rng):
    """Returns (kind, rank) where kind is 'laugh', 'smile' or 'closed'."""
    if mode in ("both", "video_only"):
        if label is Label.NONE:
            return "closed", 0
        return label.value, intensity.rank
    if mode == "audio_only":
        kind = ("laugh", "smile", "closed")[rng.integers(3)]
        return kind, int(rng.integers(4)) if kind != "closed" else 0
    # complementary: same rule for laughs and smiles
    if label is Label.NONE:
        return "closed", 0
    return "smile", intensity.rank


def mouth_height(kind: str, rank: int, cue: float) -> float:
    """Half-height of the mouth ellipse in pixels; strictly increasing in rank for open mouths."""
    if kind == "closed":
        return 2.0
    return 2.0 + cue * (4.0 + 3.0 * rank)


def _video_segment(kind, rank, n_frames, fps, spec: SynthSpec, center, bg, rng) -> np.ndarray:
    h, w = spec.frame_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    t = np.arange(n_frames) / fps
    height = np.full(n_frames, mouth_height(kind, rank, spec.video_cue))
    width = 14.0 + (spec.video_cue * (2.0 + 1.5 * rank) if kind != "closed" else 0.0)
    if kind == "laugh":
        rate = rng.uniform(4.0, 6.0)
        depth = 0.35 * min(spec.video_cue, 1.0)
        height = height * (1 + depth * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    cx, cy = center[0] + rng.uniform(-1.5, 1.5), center[1] + rng.uniform(-1.5, 1.5)
    d = ((xx - cx) / width) ** 2
    frames = np.empty((n_frames, h, w))
    for i in range(n_frames):
        r2 = d + ((yy - cy) / max(height[i], 0.5)) ** 2
        inside = 1.0 / (1.0 + np.exp(np.minimum((r2 - 1.0) * 8.0, 60.0)))
        frames[i] = bg + (0.9 - bg) * inside
    if spec.noise_floor > 0:
        frames += spec.noise_floor * rng.standard_normal(frames.shape)
    return np.clip(frames, 0.0, 1.0)


# --------------------------------------------------------------------------- corpus


def generate(spec: SynthSpec) -> SynthCorpus:
    rng = np.random.default_rng(spec.seed)
    per_source = _draw_segments(spec, rng)
    segments: list[Segment] = []
    corpus = SynthCorpus(spec, segments, {})
    h, w = spec.frame_size
    for s_idx, items in enumerate(per_source):
        source = f"src{s_idx:03d}"
        src_rng = np.random.default_rng([spec.seed, s_idx])
        ordered = _arrange(items, src_rng)
        total_ms = sum(d for _, _, d in ordered)
        if total_ms == 0:
            total_ms = 1000
        n_samples = total_ms * spec.audio_rate // 1000
        n_frames = math.ceil(total_ms * spec.fps / 1000)
        audio = spec.noise_floor * src_rng.standard_normal(n_samples)
        frames = np.empty((n_frames, h, w))
        center = (w / 2 + src_rng.uniform(-4, 4), h / 2 + 6 + src_rng.uniform(-4, 4))
        bg = src_rng.uniform(0.25, 0.4)
        # fill the whole recording with closed-mouth frames first
        frames[:] = _video_segment("closed", 0, 1, spec.fps, spec, center, bg, src_rng)[0]
        cursor = 0
        for label, intensity, dur in ordered:
            start, end = cursor, cursor + dur
            cursor = end
            if label is not Label.NONE:
                segments.append(Segment(source, start, end, label, intensity))
            a0, a1 = start * spec.audio_rate // 1000, end * spec.audio_rate // 1000
            rank = intensity.rank if intensity else 0
            profile = _audio_profile(label, spec.informativeness, src_rng)
            audio[a0:a1] += spec.audio_cue * _audio_segment(profile, rank, a1 - a0, spec.audio_rate, src_rng)
            f0 = math.floor(start * spec.fps / 1000)
            f1 = min(n_frames, math.ceil(end * spec.fps / 1000))
            kind, vrank = _video_profile(label, intensity, spec.informativeness, src_rng)
            frames[f0:f1] = _video_segment(kind, vrank, f1 - f0, spec.fps, spec, center, bg, src_rng)
        peak = np.max(np.abs(audio)) if audio.size else 0.0
        if peak > 0.95:
            audio *= 0.95 / peak
        corpus.durations_ms[source] = total_ms
        corpus.audio[source] = media.AudioBuffer(audio, spec.audio_rate)
        corpus.video[source] = media.FrameStack(frames, spec.fps)
        corpus.rois[source] = media.Roi(center[0], center[1], spec.roi_side)
    segments.sort(key=lambda s: (s.source_id, s.start_ms))
    return corpus


def write_corpus(corpus: SynthCorpus, out_dir: str | Path) -> list[Path]:
    """Write annotations.tsv, audio/*.wav, video/*.gv01, rois.csv and spec.json; returns written paths."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "video").mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "annotations.tsv"
    p.write_text(serialize_annotations(corpus.segments))
    written.append(p)
    for source in sorted(corpus.durations_ms):
        p = out / "audio" / f"{source}.wav"
        media.write_wav(p, corpus.audio[source])
        written.append(p)
        p = out / "video" / f"{source}.gv01"
        media.write_gv01(p, corpus.video[source])
        written.append(p)
    p = out / "rois.csv"
    p.write_text(media.write_rois(corpus.rois))
    written.append(p)
    p = out / "spec.json"
    p.write_text(json.dumps(corpus.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    written.append(p)
    return written


def gen_corpus(spec: SynthSpec, out_dir: str | Path) -> SynthCorpus:
    corpus = generate(spec)
    write_corpus(corpus, out_dir)
    return corpus


# --------------------------------------------------------------------------- proxy task


def gen_proxy_task(modality: str, n_classes: int = 5, n_per_class: int = 40, seed: int = 0,
                   noise: float = 0.05):
    """Synthetic word-class clips standing in for speech/lipreading pretraining data.

    Class k is an amplitude/opening modulation at 1.5 + k Hz over a class-specific
    carrier. Returns (inputs, labels) with inputs shaped like model inputs and
    z-normalized per clip.
    """
    if n_classes < 4:
        raise SpecError("the proxy task needs at least 4 classes")
    rng = np.random.default_rng([seed, 7919])
    xs, ys = [], []
    t_a = np.arange(media.CLIP_SAMPLES) / media.AUDIO_RATE
    t_v = np.arange(media.CLIP_FRAMES) / media.VIDEO_FPS
    yy, xx = np.mgrid[0:96, 0:96].astype(np.float64)
    for k in range(n_classes):
        for _ in range(n_per_class):
            rate = 1.5 + k + rng.uniform(-0.25, 0.25)
            phase = rng.uniform(0, 2 * np.pi)
            if modality == "audio":
                env = 0.5 * (1 - np.cos(2 * np.pi * rate * t_a + phase))
                carrier = _harmonic(t_a, 140 + 30 * k + rng.uniform(-10, 10), 3 + (k % 3) * 2, 1.0 - 0.15 * k, rng)
                x = env * carrier + noise * rng.standard_normal(t_a.size)
                x = x[None, :]
            elif modality == "video":
                height = 3 + 6 * (0.5 * (1 - np.cos(2 * np.pi * rate * t_v + phase))) * (1 + 0.2 * (k % 2))
                width = 12 + 2 * (k % 3)
                cx, cy = 48 + rng.uniform(-2, 2), 50 + rng.uniform(-2, 2)
                r2 = ((xx - cx) / width) ** 2 + ((yy[None] - cy) / height[:, None, None]) ** 2
                x = 0.3 + 0.6 / (1 + np.exp(np.minimum((r2 - 1) * 8, 60.0))) + noise * rng.standard_normal((t_v.size, 96, 96))
                x = x[None]
            else:
                raise SpecError(f"unknown modality {modality!r}")
            x = (x - x.mean()) / max(x.std(), 1e-6)
            xs.append(x.astype(np.float32))
            ys.append(k)
    order = rng.permutation(len(xs))
    return np.stack([xs[i] for i in order]), np.array([ys[i] for i in order], dtype=np.int64)


# --------------------------------------------------------------------------- heatmap fixtures

# where the misclassified share of each heatmap row goes
_ERROR_COLUMN = {
    "laugh-high": 1, "laugh-medium": 1, "laugh-low": 1,
    "smile-high": 0, "smile-medium": 0, "smile-low": 2, "smile-subtle": 2,
    "none": 1,
}
_CORRECT_COLUMN = {key: (0 if key.startswith("laugh") else 1 if key.startswith("smile") else 2) for key in HEATMAP_ROWS}


def gen_heatmap_fixture(seed: int, accuracies, supports=None) -> IntensityHeatmap:
    """Integer heatmap counts whose row accuracies match ``accuracies`` up to rounding.

    ``accuracies`` is one value for all rows, a sequence of 8, or a mapping from
    row key to value (missing rows get zero support). ``supports`` defaults to
    seeded draws in [5, 40].
    """
    rng = np.random.default_rng(seed)
    if isinstance(accuracies, dict):
        acc = {k: accuracies.get(k) for k in HEATMAP_ROWS}
    elif np.isscalar(accuracies):
        acc = {k: float(accuracies) for k in HEATMAP_ROWS}
    else:
        acc = dict(zip(HEATMAP_ROWS, accuracies))
    if supports is None:
        sup = {k: int(rng.integers(5, 41)) for k in HEATMAP_ROWS}
    elif isinstance(supports, dict):
        sup = {k: int(supports.get(k, 0)) for k in HEATMAP_ROWS}
    elif np.isscalar(supports):
        sup = {k: int(supports) for k in HEATMAP_ROWS}
    else:
        sup = dict(zip(HEATMAP_ROWS, (int(s) for s in supports)))
    counts = np.zeros((len(HEATMAP_ROWS), 3), dtype=np.int64)
    for i, key in enumerate(HEATMAP_ROWS):
        a = acc.get(key)
        n = sup[key] if a is not None else 0
        if a is not None and not 0.0 <= a <= 1.0:
            raise ValueError(f"accuracy for {key} outside [0, 1]: {a}")
        if n == 0:
            continue
        correct = int(math.floor(a * n + 0.5))
        counts[i, _CORRECT_COLUMN[key]] = correct
        counts[i, _ERROR_COLUMN[key]] += n - correct
    return IntensityHeatmap.from_counts(counts)
