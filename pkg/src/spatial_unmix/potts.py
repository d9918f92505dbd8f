"""Potts-Markov random field on a rectangular lattice.

Labels are stored 0-based (class ``k`` of the model is label ``k - 1``).
The joint prior used throughout is

    f(z) proportional to exp(beta * #{unordered neighbor pairs with equal labels})

so the full conditional of one pixel is proportional to
``exp(beta * n_k)`` where ``n_k`` counts its neighbors in class ``k``.
Boundaries are free: off-lattice neighbors are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidArgumentError
from .streams import Tag, stream


class NeighborhoodOrder(Enum):
    FIRST = 1  # 4 axis neighbors
    SECOND = 2  # 8 neighbors including diagonals

    @classmethod
    def parse(cls, value) -> "NeighborhoodOrder":
        if isinstance(value, cls):
            return value
        if value in (1, "1", "first"):
            return cls.FIRST
        if value in (2, "2", "second"):
            return cls.SECOND
        raise InvalidArgumentError(f"unknown neighborhood order {value!r}")


_OFFSETS = {
    NeighborhoodOrder.FIRST: [(-1, 0), (0, -1), (0, 1), (1, 0)],
    NeighborhoodOrder.SECOND: [
        (-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1),
    ],
}


@dataclass
class LabelField:
    width: int
    height: int
    labels: np.ndarray
    n_classes: int
    beta: float = 0.0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.size != self.width * self.height:
            raise InvalidArgumentError(
                f"{self.labels.size} labels for a {self.width}x{self.height} lattice"
            )
        if self.n_classes < 1:
            raise InvalidArgumentError("need at least one class")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InvalidArgumentError(f"labels must lie in [0, {self.n_classes})")
        if self.beta < 0:
            raise InvalidArgumentError("granularity coefficient must be nonnegative")

    @property
    def grid(self) -> np.ndarray:
        return self.labels.reshape(self.height, self.width)


def neighbors(p: int, width: int, height: int, order=NeighborhoodOrder.FIRST) -> list[int]:
    """Indices of the lattice neighbors of pixel ``p`` (row-major indexing)."""
    order = NeighborhoodOrder.parse(order)
    if not 0 <= p < width * height:
        raise InvalidArgumentError(f"pixel {p} outside a {width}x{height} lattice")
    row, col = divmod(p, width)
    out = []
    for dr, dc in _OFFSETS[order]:
        r, c = row + dr, col + dc
        if 0 <= r < height and 0 <= c < width:
            out.append(r * width + c)
    return out


def neighbor_counts(grid: np.ndarray, n_classes: int, order=NeighborhoodOrder.FIRST) -> np.ndarray:
    """Per-class neighbor counts for every pixel, shape ``(K, height, width)``."""
    order = NeighborhoodOrder.parse(order)
    H, W = grid.shape
    onehot = np.zeros((n_classes, H + 2, W + 2))
    onehot[:, 1:-1, 1:-1] = grid[None, :, :] == np.arange(n_classes)[:, None, None]
    counts = np.zeros((n_classes, H, W))
    for dr, dc in _OFFSETS[order]:
        counts += onehot[:, 1 + dr:1 + dr + H, 1 + dc:1 + dc + W]
    return counts


def scan_colors(width: int, height: int, order=NeighborhoodOrder.FIRST) -> list[np.ndarray]:
    """Flat pixel index sets that contain no two neighbors.

    Two checkerboard colors suffice for the 4-neighborhood; the
    8-neighborhood needs four (row and column parity).
    """
    order = NeighborhoodOrder.parse(order)
    rows, cols = np.divmod(np.arange(width * height), width)
    if order is NeighborhoodOrder.FIRST:
        color = (rows + cols) % 2
        n = 2
    else:
        color = 2 * (rows % 2) + cols % 2
        n = 4
    return [np.flatnonzero(color == k) for k in range(n)]


def draw_categorical(log_weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per column of ``(K, n)`` unnormalized log weights."""
    w = np.exp(log_weights - log_weights.max(axis=0, keepdims=True))
    cum = np.cumsum(w, axis=0)
    return np.sum(cum < u * cum[-1], axis=0)


def label_prior_conditional(field: LabelField, p: int, order=NeighborhoodOrder.FIRST) -> np.ndarray:
    """Prior full conditional of pixel ``p`` given its neighbors."""
    counts = np.zeros(field.n_classes)
    for q in neighbors(p, field.width, field.height, order):
        counts[field.labels[q]] += 1
    logw = field.beta * counts
    w = np.exp(logw - logw.max())
    return w / w.sum()


def gibbs_fields(
    n_classes: int,
    beta: float,
    width: int,
    height: int,
    order=NeighborhoodOrder.FIRST,
    seed: int = 0,
):
    """Endless checkerboard Gibbs chain from a uniform start.

    Yields the label vector after each full sweep (the same array object,
    updated in place; copy it to keep a snapshot).
    """
    if beta < 0:
        raise InvalidArgumentError("granularity coefficient must be nonnegative")
    order = NeighborhoodOrder.parse(order)
    P = width * height
    labels = stream(seed, 0, Tag.FIELD_INIT).integers(0, n_classes, size=P)
    colors = scan_colors(width, height, order)
    sweep = 0
    while True:
        sweep += 1
        u = stream(seed, sweep, Tag.FIELD_SWEEP).random(P)
        for idx in colors:
            counts = neighbor_counts(labels.reshape(height, width), n_classes, order)
            counts = counts.reshape(n_classes, P)[:, idx]
            labels[idx] = draw_categorical(beta * counts, u[idx])
        yield labels


def sample_field(
    n_classes: int,
    beta: float,
    width: int,
    height: int,
    order=NeighborhoodOrder.FIRST,
    sweeps: int = 200,
    seed: int = 0,
) -> LabelField:
    """Draw a label field by checkerboard Gibbs sweeps from a uniform start."""
    if sweeps < 1:
        raise InvalidArgumentError("at least one sweep required")
    chain = gibbs_fields(n_classes, beta, width, height, order, seed)
    for _ in range(sweeps):
        labels = next(chain)
    return LabelField(width, height, labels.copy(), n_classes, beta)


def homogeneity(field: LabelField, order=NeighborhoodOrder.FIRST) -> float:
    """Fraction of unordered neighbor pairs that share a label."""
    order = NeighborhoodOrder.parse(order)
    g = field.grid
    H, W = g.shape
    equal = 0
    total = 0
    # each unordered pair counted once through the "forward" half of the offsets
    for dr, dc in _OFFSETS[order]:
        if (dr, dc) <= (0, 0):
            continue
        r0, r1 = max(0, -dr), H - max(0, dr)
        c0, c1 = max(0, -dc), W - max(0, dc)
        a = g[r0:r1, c0:c1]
        b = g[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        equal += int(np.sum(a == b))
        total += a.size
    if total == 0:
        return 1.0
    return equal / total


def dominant_fraction(field: LabelField) -> float:
    return np.bincount(field.labels, minlength=field.n_classes).max() / field.labels.size
