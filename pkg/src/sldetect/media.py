"""Audio/video preparation: resampling, grayscale, ROI crop, window cutting, normalization.

Also holds the on-disk media formats: PCM16 mono WAV, the ``GV01`` raw grayscale
video container and the ROI sidecar CSV.
"""

from __future__ import annotations

import csv
import io
import math
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Intensity, Label, Window

AUDIO_RATE = 16000
VIDEO_FPS = 25.0
ROI_SIZE = 96
CLIP_MS = 1220
CLIP_SAMPLES = round(CLIP_MS * AUDIO_RATE / 1000)  # 19520
CLIP_FRAMES = math.floor(CLIP_MS * VIDEO_FPS / 1000)  # 30
GV01_MAGIC = b"GV01"


class MediaError(ValueError):
    pass


class EmptyBuffer(MediaError):
    pass


class DegenerateRoi(MediaError):
    pass


class MissingModality(MediaError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray
    rate: float

    def __post_init__(self):
        if self.rate <= 0:
            raise MediaError(f"sample rate must be positive, got {self.rate}")
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate


@dataclass
class FrameStack:
    frames: np.ndarray  # (T, H, W) in [0, 1]
    fps: float = VIDEO_FPS

    def __post_init__(self):
        if self.fps <= 0:
            raise MediaError(f"fps must be positive, got {self.fps}")
        if self.frames.ndim != 3:
            raise MediaError(f"frames must be T x H x W, got shape {self.frames.shape}")

    @property
    def duration(self) -> float:
        return self.frames.shape[0] / self.fps


@dataclass
class ClipPair:
    audio: np.ndarray  # (CLIP_SAMPLES,)
    video: np.ndarray  # (CLIP_FRAMES, 96, 96)
    label: Label
    intensity: Intensity | None = None


@dataclass(frozen=True)
class Roi:
    center_x: float
    center_y: float
    side: float


# --------------------------------------------------------------------------- audio


def resample_audio(buf: AudioBuffer, target_rate: float = AUDIO_RATE) -> AudioBuffer:
    """Linear-interpolation resampling; output length is round(duration * target_rate)."""
    n = len(buf.samples)
    if n == 0:
        raise EmptyBuffer("cannot resample an empty buffer")
    if target_rate <= 0:
        raise MediaError("target rate must be positive")
    if target_rate == buf.rate:
        return AudioBuffer(buf.samples.copy(), buf.rate)
    n_out = max(1, round(n * target_rate / buf.rate))
    # output sample k sits at input position k * rate / target_rate
    pos = np.arange(n_out, dtype=np.float64) * (buf.rate / target_rate)
    out = np.interp(pos, np.arange(n, dtype=np.float64), buf.samples)
    return AudioBuffer(out, target_rate)


# --------------------------------------------------------------------------- video


def to_grayscale(rgb_frame: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb_frame, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise MediaError(f"expected 3 channels in the last axis, got shape {rgb.shape}")
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def _bilinear_axis(start: float, side: float, out: int, extent: int):
    # sample centres of the output grid mapped into input pixel coordinates
    coords = start + (np.arange(out) + 0.5) * (side / out) - 0.5
    coords = np.clip(coords, 0.0, extent - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, extent - 1)
    frac = coords - lo
    return lo, hi, frac


def crop_roi(frame: np.ndarray, roi: Roi, size: int = ROI_SIZE) -> np.ndarray:
    """Square crop around the ROI resized to ``size`` x ``size`` by bilinear interpolation.

    Works on a single (H, W) frame or a (T, H, W) stack. Pixels outside the frame
    replicate the nearest edge.
    """
    if roi.side <= 0:
        raise DegenerateRoi(f"ROI side must be positive, got {roi.side}")
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape[-2:]
    y0, y1, fy = _bilinear_axis(roi.center_y - roi.side / 2, roi.side, size, h)
    x0, x1, fx = _bilinear_axis(roi.center_x - roi.side / 2, roi.side, size, w)
    rows0 = frame[..., y0, :]
    rows1 = frame[..., y1, :]
    fy = fy[:, None]
    top = rows0[..., x0] * (1 - fx) + rows0[..., x1] * fx
    bottom = rows1[..., x0] * (1 - fx) + rows1[..., x1] * fx
    return top * (1 - fy) + bottom * fy


def crop_stack(stack: FrameStack, roi: Roi, size: int = ROI_SIZE) -> FrameStack:
    return FrameStack(crop_roi(stack.frames, roi, size), stack.fps)


# --------------------------------------------------------------------------- clips


def _take_reflect(x: np.ndarray, offset: int, available: int, target: int) -> np.ndarray:
    """Slice ``available`` items from ``offset`` and reflection-pad to ``target``.

    Padding is split evenly, the odd element going to the tail.
    """
    piece = x[offset : offset + available]
    if len(piece) == 0:
        raise EmptyBuffer("window falls outside the media")
    missing = target - len(piece)
    if missing <= 0:
        return piece[:target]
    head = missing // 2
    tail = missing - head
    mode = "reflect" if len(piece) > 1 else "edge"
    pad = [(head, tail)] + [(0, 0)] * (piece.ndim - 1)
    return np.pad(piece, pad, mode=mode)


def cut_audio(audio: AudioBuffer, window: Window, samples: int = CLIP_SAMPLES) -> np.ndarray:
    if audio.rate != AUDIO_RATE:
        audio = resample_audio(audio, AUDIO_RATE)
    offset = window.start_ms * AUDIO_RATE // 1000
    n = window.length_ms * AUDIO_RATE // 1000 if window.padded else samples
    return _take_reflect(audio.samples, offset, min(n, len(audio.samples) - offset), samples)


def cut_video(video: FrameStack, window: Window, frames: int = CLIP_FRAMES) -> np.ndarray:
    offset = math.floor(window.start_ms * video.fps / 1000 + 1e-9)
    n = max(1, math.floor(window.length_ms * video.fps / 1000 + 1e-9)) if window.padded else frames
    return _take_reflect(video.frames, offset, min(n, video.frames.shape[0] - offset), frames)


def cut_clip(
    audio: AudioBuffer | None,
    video: FrameStack | None,
    window: Window,
    samples: int = CLIP_SAMPLES,
    frames: int = CLIP_FRAMES,
) -> ClipPair:
    """Audio and video slices of a window, reflection-padded to the fixed clip size."""
    if audio is None or video is None:
        raise MissingModality("both audio and video streams are required")
    return ClipPair(cut_audio(audio, window, samples), cut_video(video, window, frames),
                    window.label, window.intensity)


def znorm(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or np.all(x == x.flat[0]):
        # exact zeros; subtracting a float mean can leave rounding residue
        return np.zeros_like(x)
    std = max(float(x.std()), 1e-6)
    return (x - x.mean()) / std


def normalize_clip(clip: ClipPair) -> ClipPair:
    return ClipPair(znorm(clip.audio), znorm(clip.video), clip.label, clip.intensity)


# --------------------------------------------------------------------------- file formats


def write_wav(path: str | Path, buf: AudioBuffer) -> None:
    pcm = np.clip(np.round(buf.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(buf.rate))
        wf.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> AudioBuffer:
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise MediaError(f"{path}: only 16-bit PCM is supported")
        channels = wf.getnchannels()
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        pcm = pcm.reshape(-1, channels).mean(axis=1)
    return AudioBuffer(pcm, rate)


def encode_gv01(stack: FrameStack) -> bytes:
    t, h, w = stack.frames.shape
    num, den = _fps_fraction(stack.fps)
    header = GV01_MAGIC + struct.pack("<5I", t, h, w, num, den)
    body = np.clip(np.round(stack.frames * 255.0), 0, 255).astype(np.uint8)
    return header + body.tobytes(order="C")


def decode_gv01(data: bytes) -> FrameStack:
    if data[:4] != GV01_MAGIC:
        raise MediaError("not a GV01 stream")
    t, h, w, num, den = struct.unpack_from("<5I", data, 4)
    body = np.frombuffer(data, dtype=np.uint8, offset=24)
    if body.size != t * h * w:
        raise MediaError(f"GV01 payload has {body.size} bytes, expected {t * h * w}")
    if den == 0:
        raise MediaError("GV01 fps denominator is zero")
    return FrameStack(body.reshape(t, h, w).astype(np.float64) / 255.0, num / den)


def _fps_fraction(fps: float) -> tuple[int, int]:
    den = 1000
    return int(round(fps * den)), den


def write_gv01(path: str | Path, stack: FrameStack) -> None:
    Path(path).write_bytes(encode_gv01(stack))


def read_gv01(path: str | Path) -> FrameStack:
    return decode_gv01(Path(path).read_bytes())


def write_rois(rois: dict[str, Roi]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["source", "center_x", "center_y", "side"])
    for source in sorted(rois):
        r = rois[source]
        writer.writerow([source, repr(float(r.center_x)), repr(float(r.center_y)), repr(float(r.side))])
    return buf.getvalue()


def read_rois(text: str) -> dict[str, Roi]:
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        out[row["source"]] = Roi(float(row["center_x"]), float(row["center_y"]), float(row["side"]))
    return out
