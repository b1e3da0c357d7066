"""Embedding extraction and an exact (O(N^2)) t-SNE projection."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import Intensity, Label


class DegenerateDistances(ValueError):
    pass


class NonFiniteUpdate(FloatingPointError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"non-finite t-SNE update at iteration {iteration}")


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # N x D
    labels: list = field(default_factory=list)
    intensities: list = field(default_factory=list)
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        n = self.vectors.shape[0]
        if self.vectors.ndim != 2 or n < 2:
            raise ValueError("need at least two embedding vectors")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embeddings contain non-finite values")
        if not self.ids:
            self.ids = [str(i) for i in range(n)]
        if not self.labels:
            self.labels = [""] * n
        if not self.intensities:
            self.intensities = [None] * n

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.vectors.shape[1]
        w.writerow(["id", "label", "intensity"] + [f"d{i}" for i in range(d)])
        for i in range(self.vectors.shape[0]):
            w.writerow([self.ids[i], _value(self.labels[i]), _value(self.intensities[i])]
                       + [repr(float(x)) for x in self.vectors[i]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EmbeddingSet":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        dims = [i for i, h in enumerate(header) if h.startswith("d") and h[1:].isdigit()]
        vec = np.array([[float(r[i]) for i in dims] for r in body])
        return cls(vec, [r[1] for r in body], [r[2] or None for r in body], [r[0] for r in body])


def _value(x) -> str:
    if x is None:
        return ""
    return x.value if isinstance(x, (Label, Intensity)) else str(x)


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    momentum_initial: float = 0.5
    momentum_final: float = 0.8
    momentum_switch: int = 250
    min_gain: float = 0.01
    init_std: float = 1e-4
    seed: int = 0

    def validate(self, n: int):
        if not 1 < self.perplexity < n:
            raise ValueError(f"perplexity must lie in (1, {n}), got {self.perplexity}")
        if self.iterations < self.exaggeration_iters:
            raise ValueError("iterations must cover the early-exaggeration phase")


@dataclass
class Projection:
    points: np.ndarray  # N x 2
    kl: float
    kl_initial: float
    kl_history: list[tuple[int, float]] = field(default_factory=list)


# --------------------------------------------------------------------------- affinities


def squared_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_entropy(dist_row: np.ndarray, beta: float):
    """Conditional distribution for precision beta and its Shannon entropy in bits."""
    shifted = dist_row - dist_row.min()
    p = np.exp(-shifted * beta)
    s = p.sum()
    p /= s
    # H = log(sum exp(-beta d)) + beta * <d>, in nats, with the shift folded in
    h_nats = np.log(s) + beta * np.dot(shifted, p)
    return p, h_nats / np.log(2.0)


def conditional_affinities(
    x: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 50
) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic P(j|i) with per-row entropy matched to log2(perplexity).

    Returns (P_conditional, entropies in bits).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1 < perplexity < n:
        raise ValueError(f"perplexity must lie in (1, {n}), got {perplexity}")
    d = squared_distances(x)
    if not np.any(d > 0):
        raise DegenerateDistances("all pairwise distances are zero")
    target = np.log2(perplexity)
    p_cond = np.zeros((n, n))
    entropies = np.zeros(n)
    for i in range(n):
        row = np.delete(d[i], i)
        scale = row[row > 0].mean() if np.any(row > 0) else 1.0
        # bisection on log(beta): entropy decreases monotonically in beta
        lo, hi = np.log(1e-20 / scale), np.log(1e20 / scale)
        log_beta = np.log(1.0 / scale)
        p, h = _row_entropy(row, np.exp(log_beta))
        for _ in range(max_iter):
            if abs(h - target) <= tol:
                break
            if h > target:
                lo = log_beta
            else:
                hi = log_beta
            log_beta = 0.5 * (lo + hi)
            p, h = _row_entropy(row, np.exp(log_beta))
        p_cond[i, np.arange(n) != i] = p
        entropies[i] = h
    return p_cond, entropies


def pairwise_affinities(x: np.ndarray, perplexity: float = 30.0, tol: float = 1e-5, max_iter: int = 50) -> np.ndarray:
    """Symmetric joint affinities P = (P_cond + P_cond^T) / 2N, summing to 1."""
    p_cond, _ = conditional_affinities(x, perplexity, tol, max_iter)
    n = p_cond.shape[0]
    return (p_cond + p_cond.T) / (2.0 * n)


def student_t_affinities(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Low-dimensional joint affinities Q and the kernel (1 + |y_i - y_j|^2)^-1."""
    num = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(num, 0.0)
    return num / num.sum(), num


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-12))))


def tsne_gradient(p: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """dC/dy_i = 4 sum_j (p_ij - q_ij)(y_i - y_j)(1 + |y_i - y_j|^2)^-1; also returns Q."""
    q, num = student_t_affinities(y)
    w = (p - q) * num
    grad = 4.0 * (np.diag(w.sum(axis=1)) - w) @ y
    return grad, q


def tsne(
    data: EmbeddingSet | np.ndarray,
    config: TsneConfig | None = None,
    callback: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
) -> Projection:
    """Project to 2-D by momentum gradient descent with per-coordinate adaptive gains."""
    config = config or TsneConfig()
    x = data.vectors if isinstance(data, EmbeddingSet) else np.asarray(data, dtype=np.float64)
    n = x.shape[0]
    config.validate(n)
    p = pairwise_affinities(x, config.perplexity)
    # snap to single precision: round-off in the distances (e.g. from rotating the
    # input) would otherwise seed a different trajectory
    p = p.astype(np.float32).astype(np.float64)
    p = np.maximum(p, 1e-12)
    p /= p.sum()
    rng = np.random.default_rng(config.seed)
    y = config.init_std * rng.standard_normal((n, 2))
    y -= y.mean(axis=0)
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    kl_initial = kl_divergence(p, student_t_affinities(y)[0])
    history = [(0, kl_initial)]
    for it in range(config.iterations):
        exaggerate = it < config.exaggeration_iters
        grad, q = tsne_gradient(p * config.early_exaggeration if exaggerate else p, y)
        if callback is not None:
            callback(it, y, q)
        momentum = config.momentum_initial if it < config.momentum_switch else config.momentum_final
        same_sign = np.sign(grad) == np.sign(update)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, config.min_gain)
        update = momentum * update - config.learning_rate * gains * grad
        y = y + update
        if not np.all(np.isfinite(y)):
            raise NonFiniteUpdate(it)
        y -= y.mean(axis=0)
        if (it + 1) % 50 == 0:
            history.append((it + 1, kl_divergence(p, student_t_affinities(y)[0])))
    kl_final = kl_divergence(p, student_t_affinities(y)[0])
    return Projection(y, kl_final, kl_initial, history)


# --------------------------------------------------------------------------- export

_COLOURS = {
    ("laugh", "low"): "#fdd835",
    ("laugh", "medium"): "#fb8c00",
    ("laugh", "high"): "#e65100",
    ("smile", "subtle"): "#bbdefb",
    ("smile", "low"): "#64b5f6",
    ("smile", "medium"): "#1e88e5",
    ("smile", "high"): "#0d47a1",
    ("none", ""): "#9e9e9e",
}


def colour_for(label, intensity) -> str:
    """Warm shades for laughs, blues for smiles (darker = stronger), grey for None."""
    return _COLOURS.get((_value(label), _value(intensity)), "#616161")


def projection_csv(projection: Projection | None, labels: Sequence, intensities: Sequence) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "label", "intensity"])
    if projection is not None:
        for (x, y), lab, inten in zip(projection.points, labels, intensities):
            w.writerow([repr(float(x)), repr(float(y)), _value(lab), _value(inten)])
    return buf.getvalue()


def projection_svg(projection: Projection | None, labels: Sequence, intensities: Sequence,
                   size: int = 480, title: str = "") -> str:
    pad = 20
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="#ffffff"/>',
    ]
    if title:
        parts.append(f'<text x="{pad}" y="{pad - 4}">{title}</text>')
    if projection is not None and len(projection.points):
        pts = np.asarray(projection.points)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        scaled = pad + (pts - lo) / span * (size - 2 * pad)
        for (x, y), lab, inten in zip(scaled, labels, intensities):
            parts.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="3" fill="{colour_for(lab, inten)}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_projection(projection: Projection | None, labels: Sequence, intensities: Sequence,
                      title: str = "") -> tuple[str, str]:
    """(CSV text, SVG text) for a projection; ``None`` gives a header-only CSV and an empty canvas."""
    return projection_csv(projection, labels, intensities), projection_svg(projection, labels, intensities, title=title)
