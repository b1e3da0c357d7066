"""Audio, video and fusion classifiers.

Both modality networks end in the same temporal back-end: a sequence of T=30
feature vectors goes through a multi-scale TCN, is averaged over time (the
embedding) and classified by a linear head. Parameter names are stable and
prefixed ``frontend.``, ``backbone.``, ``mstcn.`` and ``head.`` so that freezing
and checkpoint transfer can be expressed by name.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn

from . import nnsub
from .nnsub import AdaptiveAvgPool1d, PReLU, conv_out_length, infer_shape

SCALES = ("paper", "tiny")
PAPER_WIDTHS = (64, 128, 256, 512)
PAPER_MSTCN_CHANNELS = 768


class ConfigError(ValueError):
    pass


@dataclass
class MstcnConfig:
    kernel_sizes: tuple[int, ...] = (3, 5, 7)
    blocks: int = 4
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    dropout: float = 0.2
    channels: int | None = None  # None: 768 at paper scale, 96 at tiny scale


@dataclass
class ModelConfig:
    scale: str = "tiny"
    n_classes: int = 3
    time_steps: int = 30
    mstcn: MstcnConfig = field(default_factory=MstcnConfig)

    def __post_init__(self):
        if isinstance(self.mstcn, dict):
            self.mstcn = MstcnConfig(**self.mstcn)
        self.mstcn.kernel_sizes = tuple(self.mstcn.kernel_sizes)
        self.mstcn.dilations = tuple(self.mstcn.dilations)
        self.validate()

    @property
    def divisor(self) -> int:
        return 1 if self.scale == "paper" else 8

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(w // self.divisor for w in PAPER_WIDTHS)

    @property
    def mstcn_channels(self) -> int:
        if self.mstcn.channels is not None:
            return self.mstcn.channels
        return PAPER_MSTCN_CHANNELS // self.divisor

    def validate(self):
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got {self.scale!r}")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        m = self.mstcn
        if m.blocks != len(m.dilations):
            raise ConfigError(f"{m.blocks} MS-TCN blocks but {len(m.dilations)} dilations")
        if any(k % 2 == 0 for k in m.kernel_sizes):
            raise ConfigError("MS-TCN kernel sizes must be odd to preserve length")
        if self.mstcn_channels % len(m.kernel_sizes):
            raise ConfigError(
                f"MS-TCN channels {self.mstcn_channels} not divisible by {len(m.kernel_sizes)} branches"
            )
        if not 0.0 <= m.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mstcn"]["kernel_sizes"] = list(self.mstcn.kernel_sizes)
        d["mstcn"]["dilations"] = list(self.mstcn.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["mstcn"] = MstcnConfig(**d.get("mstcn", {}))
        return cls(**d)


class ModalityOutput(NamedTuple):
    logits: torch.Tensor
    probabilities: torch.Tensor
    embedding: torch.Tensor


# --------------------------------------------------------------------------- ResNet-18 backbones


class BasicBlock(nn.Module):
    """Two 3-wide convolutions with batch norm; 1x1 projection shortcut on stride/width change."""

    def __init__(self, dims: int, cin: int, cout: int, stride: int):
        super().__init__()
        Conv = nn.Conv1d if dims == 1 else nn.Conv2d
        Norm = nn.BatchNorm1d if dims == 1 else nn.BatchNorm2d
        self.conv1 = Conv(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = Norm(cout)
        self.act1 = PReLU(cout)
        self.conv2 = Conv(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = Norm(cout)
        self.act2 = PReLU(cout)
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(Conv(cin, cout, 1, stride, bias=False), Norm(cout))
        else:
            self.downsample = None

    def forward(self, x):
        out = self.act1(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        shortcut = x if self.downsample is None else self.downsample(x)
        return self.act2(out + shortcut)

    def output_shape(self, shape, record=None, prefix=""):
        out = shape
        for name in ("conv1", "bn1", "act1", "conv2", "bn2"):
            out = infer_shape(getattr(self, name), out, record, f"{prefix}{name}.")
        short = shape if self.downsample is None else infer_shape(self.downsample, shape, record, f"{prefix}downsample.")
        if short != out:
            raise nnsub.ShapeMismatch(f"{prefix}: residual {short} vs main path {out}")
        return infer_shape(self.act2, out, record, f"{prefix}act2.")


class ResNetStages(nn.Module):
    """Four stages of two basic blocks, strides 1/2/2/2."""

    def __init__(self, dims: int, widths: tuple[int, ...]):
        super().__init__()
        cin = widths[0]
        for i, (w, s) in enumerate(zip(widths, (1, 2, 2, 2)), start=1):
            self.add_module(f"stage{i}", nn.Sequential(BasicBlock(dims, cin, w, s), BasicBlock(dims, w, w, 1)))
            cin = w

    def forward(self, x):
        for stage in self.children():
            x = stage(x)
        return x

    def output_shape(self, shape, record=None, prefix=""):
        for name, stage in self.named_children():
            shape = infer_shape(stage, shape, record, f"{prefix}{name}.")
        return shape


# --------------------------------------------------------------------------- MS-TCN


class TemporalBranch(nn.Sequential):
    def __init__(self, cin: int, cout: int, kernel: int, dilation: int, dropout: float):
        pad = dilation * (kernel - 1) // 2
        super().__init__()
        self.conv = nn.Conv1d(cin, cout, kernel, 1, pad, dilation)
        self.bn = nn.BatchNorm1d(cout)
        self.act = PReLU(cout)
        self.drop = nn.Dropout(dropout)


class MultiScaleBlock(nn.Module):
    def __init__(self, cin: int, cout: int, kernel_sizes, dilation: int, dropout: float):
        super().__init__()
        per_branch = cout // len(kernel_sizes)
        self.branches = nn.ModuleList(TemporalBranch(cin, per_branch, k, dilation, dropout) for k in kernel_sizes)
        self.projection = nn.Conv1d(cin, cout, 1) if cin != cout else None
        self.act = PReLU(cout)

    def forward(self, x):
        y = torch.cat([b(x) for b in self.branches], dim=1)
        res = x if self.projection is None else self.projection(x)
        return self.act(y + res)

    def output_shape(self, shape, record=None, prefix=""):
        outs = [infer_shape(b, shape, record, f"{prefix}branches.{i}.") for i, b in enumerate(self.branches)]
        if len({o[2:] for o in outs}) != 1:
            raise nnsub.ShapeMismatch(f"{prefix}: branch lengths differ {outs}")
        cat = (shape[0], sum(o[1] for o in outs), *outs[0][2:])
        res = shape if self.projection is None else infer_shape(self.projection, shape, record, f"{prefix}projection.")
        if res != cat:
            raise nnsub.ShapeMismatch(f"{prefix}: residual {res} vs branches {cat}")
        return infer_shape(self.act, cat, record, f"{prefix}act.")


class MSTCN(nn.Module):
    def __init__(self, in_channels: int, config: ModelConfig):
        super().__init__()
        m = config.mstcn
        channels = config.mstcn_channels
        cin = in_channels
        for i, d in enumerate(m.dilations):
            self.add_module(f"block{i}", MultiScaleBlock(cin, channels, m.kernel_sizes, d, m.dropout))
            cin = channels
        self.out_channels = channels

    def forward(self, x):
        for block in self.children():
            x = block(x)
        return x

    def output_shape(self, shape, record=None, prefix=""):
        for name, block in self.named_children():
            shape = infer_shape(block, shape, record, f"{prefix}{name}.")
        return shape


def build_mstcn(in_channels: int, config: ModelConfig, seed: int = 0) -> MSTCN:
    return nnsub.init_parameters(MSTCN(in_channels, config), seed)


def receptive_field(kernel: int, dilation: int) -> int:
    return 1 + (kernel - 1) * dilation


# --------------------------------------------------------------------------- modality networks


class ModalityNet(nn.Module):
    modality = ""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

    def features(self, x) -> torch.Tensor:
        """Backbone output as (batch, channels, time)."""
        raise NotImplementedError

    def forward(self, x) -> ModalityOutput:
        seq = self.mstcn(self.features(x))
        embedding = nnsub.temporal_avg_pool(seq)
        logits = self.head(embedding)
        return ModalityOutput(logits, nnsub.softmax(logits), embedding)

    def output_shape(self, shape, record=None, prefix=""):
        seq = self.features_shape(shape, record, prefix)
        seq = infer_shape(self.mstcn, seq, record, f"{prefix}mstcn.")
        return infer_shape(self.head, (seq[0], seq[1]), record, f"{prefix}head.")


class AudioNet(ModalityNet):
    """Raw 16 kHz waveform (B, 1, 19520) -> 3-class logits."""

    modality = "audio"

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        w = config.widths
        self.frontend = nn.Sequential()
        self.frontend.add_module("conv", nn.Conv1d(1, w[0], 80, 4, 38, bias=False))
        self.frontend.add_module("bn", nn.BatchNorm1d(w[0]))
        self.frontend.add_module("act", PReLU(w[0]))
        self.backbone = ResNetStages(1, w)
        self.pool = AdaptiveAvgPool1d(config.time_steps)
        self.mstcn = MSTCN(w[-1], config)
        self.head = nn.Linear(self.mstcn.out_channels, config.n_classes)

    def features(self, x):
        return self.pool(self.backbone(self.frontend(x)))

    def features_shape(self, shape, record=None, prefix=""):
        if len(shape) != 3 or shape[1] != 1:
            raise nnsub.ShapeMismatch(f"audio input must be (batch, 1, samples), got {shape}")
        s = infer_shape(self.frontend, shape, record, f"{prefix}frontend.")
        s = infer_shape(self.backbone, s, record, f"{prefix}backbone.")
        return infer_shape(self.pool, s, record, f"{prefix}pool.")


class VideoNet(ModalityNet):
    """Grayscale mouth crops (B, 1, 30, 96, 96) -> 3-class logits."""

    modality = "video"

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        w = config.widths
        self.frontend = nn.Sequential()
        self.frontend.add_module("conv", nn.Conv3d(1, w[0], (5, 7, 7), (1, 2, 2), (2, 3, 3), bias=False))
        self.frontend.add_module("bn", nn.BatchNorm3d(w[0]))
        self.frontend.add_module("act", PReLU(w[0]))
        # (1, 3, 3)/(1, 2, 2) spatial max-pool, applied frame by frame
        self.pool = nn.MaxPool2d(3, 2, 1)
        self.backbone = ResNetStages(2, w)
        self.mstcn = MSTCN(w[-1], config)
        self.head = nn.Linear(self.mstcn.out_channels, config.n_classes)

    def features(self, x):
        y = self.frontend(x)
        b, c, t, h, w = y.shape
        y = y.transpose(1, 2).reshape(b * t, c, h, w).contiguous(memory_format=torch.channels_last)
        y = self.backbone(self.pool(y))
        y = y.mean(dim=(2, 3))
        return y.reshape(b, t, -1).transpose(1, 2).contiguous()

    def features_shape(self, shape, record=None, prefix=""):
        if len(shape) != 5 or shape[1] != 1:
            raise nnsub.ShapeMismatch(f"video input must be (batch, 1, frames, height, width), got {shape}")
        b, _, t, _, _ = shape
        s = infer_shape(self.frontend, shape, record, f"{prefix}frontend.")
        s = infer_shape(self.pool, (b * t, s[1], s[3], s[4]), record, f"{prefix}pool.")
        s = infer_shape(self.backbone, s, record, f"{prefix}backbone.")
        return (b, s[1], t)


def build_audio_net(config: ModelConfig | None = None, seed: int = 0) -> AudioNet:
    config = config or ModelConfig()
    return nnsub.init_parameters(AudioNet(config), seed)


def build_video_net(config: ModelConfig | None = None, seed: int = 0) -> VideoNet:
    config = config or ModelConfig()
    return nnsub.init_parameters(VideoNet(config), seed)


def build_modality_net(modality: str, config: ModelConfig | None = None, seed: int = 0) -> ModalityNet:
    if modality == "audio":
        return build_audio_net(config, seed)
    if modality == "video":
        return build_video_net(config, seed)
    raise ConfigError(f"unknown modality {modality!r}")


# --------------------------------------------------------------------------- fusion


class FusionHead(nn.Module):
    """Two dense layers (1024, n_classes) over concatenated modality probabilities.

    The hidden activation is a PReLU with its slope fixed at 0.25, so the only
    trainable tensors are the two dense layers.
    """

    def __init__(self, n_inputs: int = 6, hidden: int = 1024, n_classes: int = 3):
        super().__init__()
        self.fc1 = nn.Linear(n_inputs, hidden)
        self.act = PReLU(1, learnable=False)
        self.fc2 = nn.Linear(hidden, n_classes)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))

    def output_shape(self, shape, record=None, prefix=""):
        s = infer_shape(self.fc1, shape, record, f"{prefix}fc1.")
        s = infer_shape(self.act, s, record, f"{prefix}act.")
        return infer_shape(self.fc2, s, record, f"{prefix}fc2.")


def build_fusion_head(seed: int = 0, n_classes: int = 3) -> FusionHead:
    return nnsub.init_parameters(FusionHead(2 * n_classes, 1024, n_classes), seed)


class FusionNet(nn.Module):
    """Frozen audio and video nets feeding a trainable fusion head."""

    def __init__(self, audio: AudioNet, video: VideoNet, head: FusionHead):
        super().__init__()
        self.audio = audio
        self.video = video
        self.head = head
        nnsub.freeze(self.audio, "all")
        nnsub.freeze(self.video, "all")

    def fused_inputs(self, audio_x, video_x) -> torch.Tensor:
        self.audio.eval()
        self.video.eval()
        with torch.no_grad():
            a = self.audio(audio_x).probabilities
            v = self.video(video_x).probabilities
        return torch.cat([a, v], dim=1)

    def forward(self, audio_x, video_x) -> ModalityOutput:
        x = self.fused_inputs(audio_x, video_x)
        logits = self.head(x)
        return ModalityOutput(logits, nnsub.softmax(logits), x)


def fuse_forward(head: FusionHead, audio_out: ModalityOutput, video_out: ModalityOutput) -> torch.Tensor:
    return head(torch.cat([audio_out.probabilities, video_out.probabilities], dim=1))


def freeze(model: nn.Module, selector: str) -> nn.Module:
    return nnsub.freeze(model, selector)


def parameter_groups(model: nn.Module) -> dict[str, int]:
    """Parameter counts per top-level name prefix."""
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        out[top] = out.get(top, 0) + p.numel()
    return out


# --------------------------------------------------------------------------- checkpoints


def model_card_path(ckpt: str | Path) -> Path:
    return Path(ckpt).with_suffix(".json")


def save_model(path: str | Path, model: nn.Module, prefix: str, card: dict | None = None) -> None:
    nnsub.save_checkpoint(path, nnsub.state_tensors(model, prefix + "."))
    if card is not None:
        model_card_path(path).write_text(json.dumps(card, indent=2, sort_keys=True) + "\n")


def load_model(model: nn.Module, path: str | Path, prefix: str, skip: tuple[str, ...] = ()) -> list[str]:
    tensors = nnsub.read_checkpoint(path)
    return nnsub.load_tensors(model, tensors, prefix + ".", skip=skip)


def read_card(path: str | Path) -> dict:
    card = model_card_path(path)
    if not card.exists():
        raise nnsub.CheckpointError(f"missing model card {card}")
    return json.loads(card.read_text())


def expected_lengths(config: ModelConfig, samples: int = 19520) -> dict[str, int]:
    """Audio sequence lengths after the frontend, after the stages and after pooling."""
    n = conv_out_length(samples, 80, 4, 38)
    after = n
    for s in (1, 2, 2, 2):
        after = conv_out_length(after, 3, s, 1)
    return {"frontend": n, "stages": after, "pooled": config.time_steps}
