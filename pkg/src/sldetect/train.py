"""Training loops: per-modality regimes, late-fusion head training and proxy pretraining.

Every epoch draws ceil(n_train / batch_size) class-balanced batches, takes plain
gradient-descent steps at the epoch's cosine-annealed rate, then scores the
validation set. The returned state is the one from the epoch with the best
validation UAR (earliest on ties).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from . import nnsub
from .corpus import ClassCounts, sample_batch, sampler_weights, CLASSES
from .data import ClipSet
from .evaluation import confusion, metrics
from .models import (
    AudioNet,
    FusionHead,
    FusionNet,
    ModalityOutput,
    ModelConfig,
    build_fusion_head,
    build_modality_net,
    load_model,
    model_card_path,
    read_card,
    save_model,
)

REGIMES = ("scratch", "full-ft", "last-layers-ft")
REGIME_FREEZE = {"scratch": "none", "full-ft": "none", "last-layers-ft": "all_but_mstcn_and_head"}


class DivergedLoss(FloatingPointError):
    def __init__(self, epoch: int, step: int, last_state: dict):
        self.epoch = epoch
        self.step = step
        self.last_state = last_state
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")


class CheckpointMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    modality: str = "audio"
    epochs: int = 80
    batch_size: int = 16
    lr0: float = 3e-6
    lr_min: float = 0.0
    seed: int = 0
    regime: str = "scratch"
    pretrained_checkpoint: str | None = None
    scale: str = "tiny"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.modality not in ("audio", "video", "fusion"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        if self.regime != "scratch" and not self.pretrained_checkpoint:
            raise ValueError(f"regime {self.regime} needs a pretrained checkpoint")
        if not self.lr0 > self.lr_min >= 0:
            raise ValueError("need lr0 > lr_min >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @classmethod
    def fusion(cls, **kw) -> "TrainConfig":
        kw.setdefault("epochs", 30)
        return cls(modality="fusion", **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_uar: float


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def best_epoch(self) -> int:
        if not self.records:
            return -1
        best = max(r.val_uar for r in self.records)
        return next(r.epoch for r in self.records if r.val_uar == best)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "RunLog":
        return cls([EpochRecord(**json.loads(line)) for line in text.splitlines() if line.strip()])


@dataclass
class TrainResult:
    best_state: dict[str, torch.Tensor]
    log: RunLog


def cosine_lr(epoch: float, total: int, lr0: float = 3e-6, lr_min: float = 0.0) -> float:
    if total < 1 or not 0 <= epoch <= total:
        raise ValueError(f"need 0 <= epoch <= total and total >= 1, got {epoch}/{total}")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / total))


def balanced_weights(labels: np.ndarray) -> np.ndarray:
    counts = ClassCounts.from_labels(CLASSES[int(i)] for i in labels)
    table = sampler_weights(counts)
    return np.array([table[CLASSES[int(i)]] for i in labels])


def _logits(out) -> torch.Tensor:
    return out.logits if isinstance(out, ModalityOutput) else out


def train_epoch(
    model: nn.Module,
    inputs: torch.Tensor,
    labels: np.ndarray,
    weights: np.ndarray,
    rng: np.random.Generator,
    lr: float,
    batch_size: int = 16,
    epoch: int = 0,
) -> float:
    """One epoch of weighted-batch gradient descent; returns the mean batch loss."""
    nnsub.set_train_mode(model, True)
    params = [p for p in model.parameters() if p.requires_grad]
    y_all = torch.as_tensor(labels, dtype=torch.long)
    steps = math.ceil(len(labels) / batch_size)
    total = 0.0
    for step in range(steps):
        idx = torch.as_tensor(sample_batch(rng, weights, batch_size))
        loss = nnsub.cross_entropy(_logits(model(inputs[idx])), y_all[idx])
        if not torch.isfinite(loss):
            raise DivergedLoss(epoch, step, {})
        nnsub.zero_grad(model)
        if params:
            nnsub.backward(loss)
            nnsub.sgd_step(params, lr)
        total += loss.item()
    return total / steps


@torch.no_grad()
def predict(model: nn.Module, inputs: torch.Tensor, batch_size: int = 32) -> ModalityOutput:
    """Eval-mode outputs for all inputs, batched."""
    model.eval()
    outs = []
    for i in range(0, inputs.shape[0], batch_size):
        out = model(inputs[i : i + batch_size])
        if not isinstance(out, ModalityOutput):
            out = ModalityOutput(out, nnsub.softmax(out), out)
        outs.append(out)
    return ModalityOutput(*(torch.cat(parts) for parts in zip(*outs)))


def score(model: nn.Module, inputs: torch.Tensor, labels: np.ndarray) -> tuple[float, float, np.ndarray]:
    """(mean cross-entropy, UAR, predicted class indices)."""
    out = predict(model, inputs)
    loss = float(nnsub.cross_entropy(out.logits, torch.as_tensor(labels)))
    pred = out.logits.argmax(dim=1).numpy()
    uar = metrics(confusion(pred, labels)).uar
    return loss, uar, pred


def apply_regime(model: nn.Module, config: TrainConfig) -> nn.Module:
    """Load pretrained weights (classifier head excluded) and set trainable flags."""
    if config.regime != "scratch":
        try:
            load_model(model, config.pretrained_checkpoint, config.modality, skip=("head.",))
        except (nnsub.CheckpointError, FileNotFoundError) as exc:
            raise CheckpointMismatch(str(exc)) from exc
    return nnsub.freeze(model, REGIME_FREEZE[config.regime])


def fit(
    model: nn.Module,
    config: TrainConfig,
    train_x: torch.Tensor,
    train_y: np.ndarray,
    val_x: torch.Tensor,
    val_y: np.ndarray,
    on_epoch: Callable[[EpochRecord, nn.Module], None] | None = None,
) -> TrainResult:
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    weights = balanced_weights(train_y)
    log = RunLog()
    best_state = nnsub.state_tensors(model)
    best_uar = -1.0
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr0, config.lr_min)
        try:
            train_loss = train_epoch(model, train_x, train_y, weights, rng, lr, config.batch_size, epoch)
        except DivergedLoss as exc:
            raise DivergedLoss(exc.epoch, exc.step, best_state) from None
        val_loss, val_uar, _ = score(model, val_x, val_y)
        rec = EpochRecord(epoch, lr, train_loss, val_loss, val_uar)
        log.records.append(rec)
        if val_uar > best_uar:
            best_uar = val_uar
            best_state = nnsub.state_tensors(model)
        if on_epoch is not None:
            on_epoch(rec, model)
    log.wall_time = time.perf_counter() - t0
    nnsub.load_tensors(model, best_state)
    return TrainResult(best_state, log)


def train_modality(
    config: TrainConfig,
    model: nn.Module,
    train_set: ClipSet,
    val_set: ClipSet,
    on_epoch=None,
) -> TrainResult:
    """Train one modality network under ``config.regime``; ``model`` ends at its best epoch."""
    if config.modality not in ("audio", "video"):
        raise ValueError("train_modality handles audio or video")
    apply_regime(model, config)
    return fit(model, config, train_set.inputs(config.modality), train_set.labels,
               val_set.inputs(config.modality), val_set.labels, on_epoch)


# --------------------------------------------------------------------------- fusion


def load_modality(path: str | Path, modality: str) -> nn.Module:
    """Rebuild a modality network from its checkpoint and model card."""
    try:
        card = read_card(path)
        cfg = ModelConfig.from_dict(card["model"])
        model = build_modality_net(modality, cfg, card.get("seed", 0))
        load_model(model, path, modality)
    except (nnsub.CheckpointError, KeyError, FileNotFoundError) as exc:
        raise CheckpointMismatch(f"{path}: {exc}") from exc
    if card.get("modality", modality) != modality:
        raise CheckpointMismatch(f"{path} holds a {card.get('modality')} model, expected {modality}")
    return model


def fusion_features(net: FusionNet, clips: ClipSet, batch_size: int = 32) -> torch.Tensor:
    a = predict(net.audio, clips.inputs("audio"), batch_size).probabilities
    v = predict(net.video, clips.inputs("video"), batch_size).probabilities
    return torch.cat([a, v], dim=1)


def train_fusion(
    config: TrainConfig,
    audio,
    video,
    train_set: ClipSet,
    val_set: ClipSet,
    on_epoch=None,
) -> tuple[FusionNet, TrainResult]:
    """Train the fusion head on frozen modality outputs.

    ``audio``/``video`` are modality networks or checkpoint paths.
    """
    if not isinstance(audio, nn.Module):
        audio = load_modality(audio, "audio")
    if not isinstance(video, nn.Module):
        video = load_modality(video, "video")
    head = build_fusion_head(config.seed)
    net = FusionNet(audio, video, head)
    # modality outputs are fixed, so they are computed once
    train_x = fusion_features(net, train_set)
    val_x = fusion_features(net, val_set)
    result = fit(head, config, train_x, train_set.labels, val_x, val_set.labels, on_epoch)
    return net, result


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    """Rebuild any saved network (audio, video or fusion) from checkpoint plus card."""
    try:
        card = read_card(path)
    except nnsub.CheckpointError as exc:
        raise CheckpointMismatch(str(exc)) from exc
    modality = card.get("modality")
    if modality in ("audio", "video"):
        return load_modality(path, modality), card
    if modality != "fusion":
        raise CheckpointMismatch(f"{path}: unknown modality {modality!r} in model card")
    try:
        audio = build_modality_net("audio", ModelConfig.from_dict(card["audio"]["model"]))
        video = build_modality_net("video", ModelConfig.from_dict(card["video"]["model"]))
        net = FusionNet(audio, video, FusionHead())
        load_model(net, path, "fusion")
    except (nnsub.CheckpointError, KeyError) as exc:
        raise CheckpointMismatch(f"{path}: {exc}") from exc
    return net, card


def predict_clips(model: nn.Module, clips: ClipSet) -> ModalityOutput:
    """Eval-mode outputs of a modality or fusion network on a clip set."""
    if isinstance(model, FusionNet):
        x = fusion_features(model, clips)
        out = predict(model.head, x)
        return ModalityOutput(out.logits, out.probabilities, x)
    return predict(model, clips.inputs("audio" if isinstance(model, AudioNet) else "video"))


# --------------------------------------------------------------------------- proxy pretraining


@dataclass
class ProxyResult:
    state: dict[str, torch.Tensor]
    losses: list[float]  # mean training loss per epoch


def proxy_pretrain(model: nn.Module, inputs: torch.Tensor, labels: np.ndarray, config: TrainConfig) -> ProxyResult:
    """Train every layer on a word-class stand-in task with more than 3 classes."""
    n_classes = int(labels.max()) + 1
    if n_classes < 4:
        raise ValueError("proxy task must have at least 4 classes")
    if model.head.out_features != n_classes:
        raise ValueError(f"model head has {model.head.out_features} outputs for {n_classes} proxy classes")
    nnsub.freeze(model, "none")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    weights = np.ones(len(labels))
    losses = []
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr0, config.lr_min)
        losses.append(train_epoch(model, inputs, labels, weights, rng, lr, config.batch_size, epoch))
    return ProxyResult(nnsub.state_tensors(model), losses)


# --------------------------------------------------------------------------- run directories


def write_run(run_dir: str | Path, config: TrainConfig, log: RunLog, model: nn.Module,
              prefix: str, card: dict) -> dict[str, Path]:
    """Write config.json, log.jsonl, best.slck and its model card into ``run_dir``."""
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    paths = {"config": run / "config.json", "log": run / "log.jsonl", "checkpoint": run / "best.slck"}
    paths["config"].write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    paths["log"].write_text(log.to_jsonl())
    save_model(paths["checkpoint"], model, prefix, dict(card, best_epoch=log.best_epoch))
    paths["card"] = model_card_path(paths["checkpoint"])
    return paths
