"""Corpus directories on disk and the clip tensors fed to the models.

A corpus directory holds ``annotations.tsv``, ``audio/<source>.wav``,
``video/<source>.gv01`` and ``rois.csv``. Preparing it produces a split manifest
(``splits.csv``) listing every window and its partition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import media
from .corpus import (
    Corpus,
    Split,
    Window,
    WindowSpec,
    parse_annotations,
    read_manifest,
    split_dataset,
    write_manifest,
)


class CorpusError(FileNotFoundError):
    pass


@dataclass
class CorpusDir:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)
        if not (self.root / "annotations.tsv").exists():
            raise CorpusError(f"{self.root}: no annotations.tsv")

    def sources(self) -> list[str]:
        return sorted(p.stem for p in (self.root / "audio").glob("*.wav"))

    def audio(self, source: str) -> media.AudioBuffer:
        return media.resample_audio(media.read_wav(self.root / "audio" / f"{source}.wav"), media.AUDIO_RATE)

    def video(self, source: str, roi: media.Roi | None = None) -> media.FrameStack:
        stack = media.read_gv01(self.root / "video" / f"{source}.gv01")
        roi = roi or self.rois().get(source)
        if roi is None:
            raise CorpusError(f"no ROI for source {source}")
        return media.crop_stack(stack, roi)

    def rois(self) -> dict[str, media.Roi]:
        return media.read_rois((self.root / "rois.csv").read_text())

    def durations_ms(self) -> dict[str, int]:
        out = {}
        for s in self.sources():
            buf = media.read_wav(self.root / "audio" / f"{s}.wav")
            out[s] = int(round(1000 * len(buf.samples) / buf.rate))
        return out

    def corpus(self) -> Corpus:
        segs = parse_annotations((self.root / "annotations.tsv").read_text(encoding="utf-8"))
        return Corpus(segs, self.durations_ms())


def prepare(corpus_dir: str | Path, seed: int = 0, spec: WindowSpec = WindowSpec(),
            ratios=(0.70, 0.15, 0.15)) -> list[Window]:
    windows = CorpusDir(corpus_dir).corpus().windows(spec)
    return split_dataset(windows, ratios, seed)


def save_splits(path: str | Path, windows: Sequence[Window]) -> None:
    Path(path).write_text(write_manifest(windows))


def load_splits(path: str | Path) -> list[Window]:
    return read_manifest(Path(path).read_text())


@dataclass
class ClipSet:
    """Normalized clips for a list of windows; either modality may be absent."""

    labels: np.ndarray
    intensities: list = field(default_factory=list)
    ids: list = field(default_factory=list)
    audio: torch.Tensor | None = None  # (N, 1, 19520)
    video: torch.Tensor | None = None  # (N, 1, 30, 96, 96)

    def __len__(self) -> int:
        return len(self.labels)

    def inputs(self, modality: str) -> torch.Tensor:
        x = getattr(self, modality, None)
        if x is None:
            raise media.MissingModality(f"clip set has no {modality} data")
        return x

    def subset(self, idx) -> "ClipSet":
        idx = np.asarray(idx)
        return ClipSet(
            self.labels[idx],
            [self.intensities[i] for i in idx] if self.intensities else [],
            [self.ids[i] for i in idx] if self.ids else [],
            None if self.audio is None else self.audio[torch.as_tensor(idx)],
            None if self.video is None else self.video[torch.as_tensor(idx)],
        )


def build_clips(corpus_dir: str | Path, windows: Sequence[Window], modalities=("audio", "video")) -> ClipSet:
    cdir = CorpusDir(corpus_dir)
    rois = cdir.rois()
    n = len(windows)
    audio = np.zeros((n, 1, media.CLIP_SAMPLES), dtype=np.float32) if "audio" in modalities else None
    video = np.zeros((n, 1, media.CLIP_FRAMES, media.ROI_SIZE, media.ROI_SIZE), dtype=np.float32) if "video" in modalities else None
    by_source: dict[str, list[int]] = {}
    for i, w in enumerate(windows):
        by_source.setdefault(w.source_id, []).append(i)
    for source in sorted(by_source):
        abuf = cdir.audio(source) if audio is not None else None
        vstack = cdir.video(source, rois.get(source)) if video is not None else None
        for i in by_source[source]:
            if audio is not None:
                audio[i, 0] = media.znorm(media.cut_audio(abuf, windows[i]))
            if video is not None:
                video[i, 0] = media.znorm(media.cut_video(vstack, windows[i]))
    return ClipSet(
        labels=np.array([w.label.idx for w in windows], dtype=np.int64),
        intensities=[w.intensity for w in windows],
        ids=[w.window_id for w in windows],
        audio=None if audio is None else torch.from_numpy(audio),
        video=None if video is None else torch.from_numpy(video),
    )


def windows_for(windows: Sequence[Window], split: str) -> list[Window]:
    if split == "all":
        return list(windows)
    s = Split(split)
    return [w for w in windows if w.split is s]
