"""Layer set, shape inference, gradient checking and checkpoint I/O.

PyTorch provides the tensors and reverse-mode autodiff. This module pins down the
pieces the models rely on: validated functional layers, a static shape inference
that never touches data, seeded He-uniform initialization, name-based freezing,
a central finite-difference gradient checker that does not use autograd, and the
``SLCK`` binary checkpoint format.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SLCK_MAGIC = b"SLCK"
SLCK_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class InvalidLabel(ValueError):
    pass


class NoForwardState(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------- shapes


def conv_out_length(n: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (n + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _tuple(v, n):
    return tuple(v) if isinstance(v, (tuple, list)) else (v,) * n


_SPATIAL_NAMES = {1: ("length",), 2: ("height", "width"), 3: ("time", "height", "width")}


def _check_conv(input: torch.Tensor, weight: torch.Tensor, stride, padding, dilation, nd: int):
    if input.dim() != nd + 2:
        raise ShapeMismatch(f"conv{nd}d expects input (batch, channels, {', '.join(_SPATIAL_NAMES[nd])}), got {tuple(input.shape)}")
    if input.shape[1] != weight.shape[1]:
        raise ShapeMismatch(
            f"conv{nd}d input channels {input.shape[1]} != weight in_channels {weight.shape[1]}"
        )
    for name, n, k, s, p, d in zip(
        _SPATIAL_NAMES[nd], input.shape[2:], weight.shape[2:],
        _tuple(stride, nd), _tuple(padding, nd), _tuple(dilation, nd),
    ):
        if conv_out_length(n, k, s, p, d) < 1:
            raise ShapeMismatch(f"conv{nd}d output {name} would be empty (in={n}, kernel={k})")


def conv1d(input, weight, bias=None, stride=1, padding=0, dilation=1):
    _check_conv(input, weight, stride, padding, dilation, 1)
    return F.conv1d(input, weight, bias, stride, padding, dilation)


def conv2d(input, weight, bias=None, stride=1, padding=0, dilation=1):
    _check_conv(input, weight, stride, padding, dilation, 2)
    return F.conv2d(input, weight, bias, stride, padding, dilation)


def conv3d(input, weight, bias=None, stride=1, padding=0, dilation=1):
    _check_conv(input, weight, stride, padding, dilation, 3)
    return F.conv3d(input, weight, bias, stride, padding, dilation)


def batch_norm(input, gamma, beta, running_mean, running_var, training: bool,
               momentum: float = 0.1, eps: float = 1e-5):
    if input.dim() < 2 or gamma.shape[0] != input.shape[1] or beta.shape[0] != input.shape[1]:
        raise ShapeMismatch(f"batch_norm: {input.shape[1]} channels vs gamma {tuple(gamma.shape)}")
    return F.batch_norm(input, running_mean, running_var, gamma, beta, training, momentum, eps)


def prelu(input, slope):
    if slope.numel() not in (1, input.shape[1] if input.dim() > 1 else 1):
        raise ShapeMismatch(f"prelu slope extent {slope.numel()} does not match channels")
    return F.prelu(input, slope.reshape(-1))


def linear(input, weight, bias=None):
    if input.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"linear: input features {input.shape[-1]} != weight in_features {weight.shape[1]}")
    return F.linear(input, weight, bias)


def softmax(logits, dim: int = -1):
    shifted = logits - logits.max(dim=dim, keepdim=True).values.detach()
    e = shifted.exp()
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(logits, dim: int = -1):
    m = logits.max(dim=dim, keepdim=True).values.detach()
    return logits - m - (logits - m).exp().sum(dim=dim, keepdim=True).log()


def cross_entropy(logits, labels, n_classes: int | None = None):
    """Mean negative log-likelihood in log-sum-exp form."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
        labels = labels.reshape(1)
    k = logits.shape[-1] if n_classes is None else n_classes
    if labels.shape[0] != logits.shape[0]:
        raise ShapeMismatch(f"{labels.shape[0]} labels for {logits.shape[0]} rows")
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise InvalidLabel(f"labels must be in [0, {k - 1}]")
    logp = log_softmax(logits, dim=-1)
    return -logp.gather(1, labels[:, None]).mean()


def temporal_avg_pool(input):
    """Average over the last (time) axis."""
    return input.mean(dim=-1)


# --------------------------------------------------------------------------- modules


class PReLU(nn.Module):
    """PReLU with an optionally fixed slope (stored as a buffer, not a parameter)."""

    def __init__(self, channels: int = 1, init: float = 0.25, learnable: bool = True):
        super().__init__()
        value = torch.full((channels,), init)
        if learnable:
            self.weight = nn.Parameter(value)
        else:
            self.register_buffer("weight", value)

    def forward(self, x):
        return prelu(x, self.weight)


class AdaptiveAvgPool1d(nn.Module):
    def __init__(self, size: int):
        super().__init__()
        self.size = size

    def forward(self, x):
        return F.adaptive_avg_pool1d(x, self.size)

    def output_shape(self, shape, record=None, prefix=""):
        return (*shape[:-1], self.size)


def infer_shape(module: nn.Module, shape: Sequence[int], record: dict | None = None, prefix: str = "") -> tuple:
    """Output shape of ``module`` for an input of ``shape``, computed from layer arithmetic alone.

    When ``record`` is given, every visited submodule's output shape is stored
    under its qualified name, in the same layout as :func:`trace_shapes`.
    """
    shape = tuple(int(s) for s in shape)
    if hasattr(module, "output_shape"):
        out = tuple(module.output_shape(shape, record, prefix))
    elif isinstance(module, nn.Sequential):
        out = shape
        for name, child in module.named_children():
            out = infer_shape(child, out, record, f"{prefix}{name}.")
    elif isinstance(module, (nn.Conv1d, nn.Conv2d, nn.Conv3d)):
        nd = len(module.kernel_size)
        if len(shape) != nd + 2 or shape[1] != module.in_channels:
            raise ShapeMismatch(f"{prefix or type(module).__name__}: cannot apply to {shape}")
        spatial = [
            conv_out_length(n, k, s, p, d)
            for n, k, s, p, d in zip(shape[2:], module.kernel_size, module.stride, module.padding, module.dilation)
        ]
        if min(spatial) < 1:
            raise ShapeMismatch(f"{prefix}: empty output for input {shape}")
        out = (shape[0], module.out_channels, *spatial)
    elif isinstance(module, (nn.MaxPool1d, nn.MaxPool2d, nn.MaxPool3d)):
        nd = len(shape) - 2
        ks, st, pd = (_tuple(module.kernel_size, nd), _tuple(module.stride, nd), _tuple(module.padding, nd))
        out = (*shape[:2], *(conv_out_length(n, k, s, p) for n, k, s, p in zip(shape[2:], ks, st, pd)))
    elif isinstance(module, nn.Linear):
        if shape[-1] != module.in_features:
            raise ShapeMismatch(f"{prefix}: expects {module.in_features} features, got {shape}")
        out = (*shape[:-1], module.out_features)
    elif isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d)):
        if shape[1] != module.num_features:
            raise ShapeMismatch(f"{prefix}: expects {module.num_features} channels, got {shape}")
        out = shape
    elif isinstance(module, (PReLU, nn.PReLU, nn.Dropout, nn.Identity, nn.ReLU)):
        out = shape
    else:
        raise TypeError(f"no shape rule for {type(module).__name__}")
    if record is not None and prefix:
        record[prefix.rstrip(".")] = out
    return out


def trace_shapes(module: nn.Module, x: torch.Tensor) -> dict[str, tuple]:
    """Run ``module`` on ``x`` and record the output shape of every named submodule."""
    shapes: dict[str, tuple] = {}
    handles = []
    for name, sub in module.named_modules():
        if not name:
            continue

        def hook(_m, _inp, out, name=name):
            if isinstance(out, torch.Tensor):
                shapes[name] = tuple(out.shape)

        handles.append(sub.register_forward_hook(hook))
    try:
        with torch.no_grad():
            module(x)
    finally:
        for h in handles:
            h.remove()
    return shapes


# --------------------------------------------------------------------------- init, freezing


def _named_generator(seed: int, name: str) -> torch.Generator:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    g = torch.Generator()
    g.manual_seed(int.from_bytes(digest[:8], "little") & ((1 << 63) - 1))
    return g


@torch.no_grad()
def init_parameters(module: nn.Module, seed: int) -> nn.Module:
    """He-uniform weights, zero biases, unit/zero batch-norm affine, PReLU slope 0.25.

    Every tensor draws from its own generator keyed by (seed, parameter name).
    """
    for mod_name, mod in module.named_modules():
        if isinstance(mod, (nn.Conv1d, nn.Conv2d, nn.Conv3d, nn.Linear)):
            fan_in = mod.weight[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            g = _named_generator(seed, f"{mod_name}.weight")
            mod.weight.uniform_(-bound, bound, generator=g)
            if mod.bias is not None:
                mod.bias.zero_()
        elif isinstance(mod, (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d)):
            mod.weight.fill_(1.0)
            mod.bias.zero_()
            mod.reset_running_stats()
        elif isinstance(mod, PReLU):
            mod.weight.fill_(0.25)
    return module


FREEZE_SELECTORS = ("all", "none", "all_but_mstcn_and_head")
TRAINABLE_PREFIXES = ("mstcn.", "head.")


def freeze(module: nn.Module, selector: str) -> nn.Module:
    """Set ``requires_grad`` by parameter name.

    ``all`` freezes everything, ``none`` unfreezes everything and
    ``all_but_mstcn_and_head`` leaves only names under ``mstcn.``/``head.`` trainable.
    """
    if selector not in FREEZE_SELECTORS:
        raise ValueError(f"unknown freeze selector {selector!r}; choose from {FREEZE_SELECTORS}")
    for name, p in module.named_parameters():
        if selector == "all":
            p.requires_grad_(False)
        elif selector == "none":
            p.requires_grad_(True)
        else:
            p.requires_grad_(name.startswith(TRAINABLE_PREFIXES))
    return module


def set_train_mode(module: nn.Module, training: bool = True) -> nn.Module:
    """Like ``module.train()``, but submodules whose parameters are all frozen stay in eval mode,
    so frozen batch-norm statistics do not drift."""
    module.train(training)
    if training:
        for sub in module.modules():
            params = list(sub.parameters(recurse=True))
            if params and not any(p.requires_grad for p in params):
                sub.eval()
    return module


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def gradients(module: nn.Module) -> dict[str, torch.Tensor]:
    """Gradient per parameter name; parameters without a gradient report zeros."""
    out = {}
    for name, p in module.named_parameters():
        out[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    return out


def backward(loss: torch.Tensor) -> None:
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise NoForwardState("loss carries no forward graph; run forward on trainable inputs first")
    loss.backward()


def sgd_step(params: Iterable[torch.nn.Parameter], lr: float) -> None:
    """Plain gradient descent: p <- p - lr * grad. Frozen or gradient-less parameters are skipped."""
    with torch.no_grad():
        for p in params:
            if p.requires_grad and p.grad is not None:
                p.add_(p.grad, alpha=-lr)


def zero_grad(module: nn.Module) -> None:
    for p in module.parameters():
        p.grad = None


# --------------------------------------------------------------------------- finite differences


def numerical_gradient(fn: Callable[[], float], tensor: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central differences of scalar ``fn()`` with respect to every entry of ``tensor`` (modified in place)."""
    grad = torch.zeros_like(tensor, dtype=torch.float64)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        plus = float(fn())
        flat[i] = orig - eps
        minus = float(fn())
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = analytic.detach().to(torch.float64).reshape(-1)
    n = numeric.detach().to(torch.float64).reshape(-1)
    if a.numel() == 0:
        return 0.0
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.tensor(floor, dtype=torch.float64))
    return float(((a - n).abs() / denom).max())


def check_gradients(
    fn: Callable[..., torch.Tensor],
    tensors: Mapping[str, torch.Tensor],
    eps: float = 1e-5,
    floor: float = 1e-6,
) -> dict[str, float]:
    """Compare autograd gradients of scalar ``fn()`` against central differences.

    ``tensors`` maps names to float64 leaf tensors read by ``fn``. Returns the max
    relative error per tensor.
    """
    for t in tensors.values():
        if t.dtype != torch.float64:
            raise TypeError("gradient checks require float64 tensors")
        t.requires_grad_(True)
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = {k: t.grad.detach().clone() for k, t in tensors.items()}
    errors = {}
    with torch.no_grad():
        for name, t in tensors.items():
            numeric = numerical_gradient(lambda: fn().item(), t, eps)
            errors[name] = relative_error(analytic[name], numeric, floor)
    return errors


# --------------------------------------------------------------------------- checkpoints


def encode_slck(tensors: Mapping[str, torch.Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(SLCK_MAGIC)
    buf.write(struct.pack("<II", SLCK_VERSION, len(tensors)))
    for name in tensors:
        t = tensors[name].detach().cpu()
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return buf.getvalue()


def decode_slck(data: bytes) -> dict[str, torch.Tensor]:
    if data[:4] != SLCK_MAGIC:
        raise CheckpointError("not an SLCK checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != SLCK_VERSION:
        raise CheckpointError(f"unsupported SLCK version {version}")
    pos = 12
    out: dict[str, torch.Tensor] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = math.prod(shape)
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            out[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated SLCK checkpoint: {exc}") from None
    return out


def state_tensors(module: nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    """Parameters and floating-point buffers (e.g. batch-norm statistics) by name."""
    out = {}
    for name, t in module.state_dict().items():
        if t.is_floating_point():
            out[prefix + name] = t.detach().clone()
    return out


def load_tensors(
    module: nn.Module,
    tensors: Mapping[str, torch.Tensor],
    prefix: str = "",
    skip: Sequence[str] = (),
    strict: bool = True,
) -> list[str]:
    """Copy tensors into ``module`` by name; returns the module names that were not loaded.

    Names starting with any of ``skip`` (relative to the module) are left untouched.
    Shape mismatches are always an error; missing names are an error when ``strict``.
    """
    own = module.state_dict()
    missing = []
    with torch.no_grad():
        for name, target in own.items():
            if not target.is_floating_point():
                continue
            if name.startswith(tuple(skip)):
                missing.append(name)
                continue
            key = prefix + name
            if key not in tensors:
                if strict:
                    raise CheckpointError(f"checkpoint has no tensor {key!r}")
                missing.append(name)
                continue
            src = tensors[key]
            if tuple(src.shape) != tuple(target.shape):
                raise CheckpointError(f"{key}: checkpoint shape {tuple(src.shape)} != model shape {tuple(target.shape)}")
            target.copy_(src.to(target.dtype))
    return missing


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor]) -> None:
    Path(path).write_bytes(encode_slck(tensors))


def read_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    return decode_slck(Path(path).read_bytes())
