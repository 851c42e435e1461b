"""Class placement on the poster grid.

Classes that share poster pixels should be semantically close, so we build
a cosine distance matrix from class-name embeddings and greedily fill a
rectangular grid in zigzag order, each cell taking the unplaced class
nearest to its already-placed neighbors.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .validation import check_embedding_matrix

__all__ = [
    "EmbeddingSet",
    "ClassOrder",
    "cosine_distance_matrix",
    "zigzag_traversal",
    "greedy_place",
    "ordering_score",
    "exhaustive_best_order",
    "ClassPlacer",
]

# Permutation enumeration beyond this class count is intractable as an oracle.
EXHAUSTIVE_LIMIT = 8


@dataclass(frozen=True)
class EmbeddingSet:
    """One embedding vector per class name."""

    names: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.names):
            raise ValueError("need one embedding row per class name")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0):
            bad = [self.names[i] for i in np.nonzero(norms == 0)[0]]
            raise ValueError(f"zero-norm embedding for: {', '.join(bad)}")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "vectors", vectors)

    @property
    def n(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class ClassOrder:
    """A rows x cols grid assigning every class index to exactly one cell."""

    grid: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.int64)
        if grid.ndim != 2:
            raise ValueError("class order grid must be 2-D")
        n = grid.size
        if sorted(grid.ravel().tolist()) != list(range(n)):
            raise ValueError("grid must be a permutation of 0..n-1")
        object.__setattr__(self, "grid", grid)

    @property
    def rows(self) -> int:
        return self.grid.shape[0]

    @property
    def cols(self) -> int:
        return self.grid.shape[1]

    @property
    def n(self) -> int:
        return self.grid.size


def cosine_distance_matrix(emb: EmbeddingSet) -> np.ndarray:
    """Pairwise 1 - cosine similarity, symmetric with a zero diagonal."""
    unit = emb.vectors / np.linalg.norm(emb.vectors, axis=1, keepdims=True)
    dist = 1.0 - unit @ unit.T
    dist = np.clip((dist + dist.T) / 2.0, 0.0, 2.0)
    np.fill_diagonal(dist, 0.0)
    return dist


def zigzag_traversal(rows: int, cols: int) -> list[tuple[int, int]]:
    """Boustrophedon cell order: even rows left to right, odd rows reversed.

    Consecutive cells are always 4-neighbors, so every greedy placement
    step sees at least one already-placed neighbor.
    """
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be positive")
    out = []
    for i in range(rows):
        cs = range(cols) if i % 2 == 0 else range(cols - 1, -1, -1)
        out.extend((i, j) for j in cs)
    return out


def _placed_neighbors(grid: np.ndarray, i: int, j: int) -> list[int]:
    rows, cols = grid.shape
    found = []
    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ni, nj = i + di, j + dj
        if 0 <= ni < rows and 0 <= nj < cols and grid[ni, nj] >= 0:
            found.append(int(grid[ni, nj]))
    return found


def greedy_place(
    distances: np.ndarray,
    rows: int,
    cols: int,
    first_class: int = 0,
) -> ClassOrder:
    """Fill the grid in zigzag order, minimizing distance to placed neighbors.

    Cell (0, 0) receives ``first_class``; every later cell takes the
    unplaced class with the smallest summed distance to all of the cell's
    already-placed 4-neighbors.  Ties break on the lowest class index.
    """
    distances = np.asarray(distances, dtype=np.float64)
    n = distances.shape[0]
    if distances.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if rows * cols != n:
        raise ValueError(f"grid {rows}x{cols} does not hold {n} classes")
    if not 0 <= first_class < n:
        raise ValueError(f"first_class {first_class} out of range")

    grid = np.full((rows, cols), -1, dtype=np.int64)
    grid[0, 0] = first_class
    remaining = set(range(n)) - {first_class}
    for i, j in zigzag_traversal(rows, cols)[1:]:
        neighbors = _placed_neighbors(grid, i, j)
        best = min(remaining, key=lambda c: (sum(distances[m, c] for m in neighbors), c))
        grid[i, j] = best
        remaining.remove(best)
    return ClassOrder(grid=grid)


def _adjacent_pairs(rows: int, cols: int) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    pairs = []
    for i in range(rows):
        for j in range(cols):
            if j + 1 < cols:
                pairs.append(((i, j), (i, j + 1)))
            if i + 1 < rows:
                pairs.append(((i, j), (i + 1, j)))
    return pairs


def ordering_score(order: ClassOrder, distances: np.ndarray) -> float:
    """Inverse sum of distances over all grid-adjacent class pairs.

    Higher means smoother neighborhoods.  Each unordered adjacent pair
    counts once; a zero sum scores positive infinity.
    """
    distances = np.asarray(distances, dtype=np.float64)
    total = 0.0
    for (i1, j1), (i2, j2) in _adjacent_pairs(order.rows, order.cols):
        total += distances[order.grid[i1, j1], order.grid[i2, j2]]
    return math.inf if total == 0.0 else 1.0 / total


def exhaustive_best_order(distances: np.ndarray, rows: int, cols: int) -> ClassOrder:
    """Best ordering by full permutation enumeration (test oracle, n <= 8).

    Ties break toward the lexicographically smallest grid.
    """
    distances = np.asarray(distances, dtype=np.float64)
    n = rows * cols
    if n > EXHAUSTIVE_LIMIT:
        raise ValueError(f"exhaustive search limited to {EXHAUSTIVE_LIMIT} classes, got {n}")
    if distances.shape != (n, n):
        raise ValueError("distance matrix does not match grid size")
    best_perm = None
    best_total = math.inf
    pairs = _adjacent_pairs(rows, cols)
    for perm in itertools.permutations(range(n)):
        total = sum(
            distances[perm[i1 * cols + j1], perm[i2 * cols + j2]]
            for (i1, j1), (i2, j2) in pairs
        )
        if total < best_total:
            best_total = total
            best_perm = perm
    return ClassOrder(grid=np.asarray(best_perm, dtype=np.int64).reshape(rows, cols))


class ClassPlacer(BaseEstimator):
    """Greedy zigzag placement of classes on a grid, fit from embeddings.

    Parameters
    ----------
    rows, cols : int
        Grid dimensions; rows * cols must equal the number of classes.
    first_class : int, default=0
        Class index seeded into the top-left cell.

    Attributes
    ----------
    distance_matrix_ : ndarray of shape (n, n)
        Pairwise cosine distances between class embeddings.
    order_ : ClassOrder
        The fitted placement.
    score_ : float
        ordering_score of the fitted placement.
    """

    def __init__(self, rows=1, cols=1, first_class=0):
        self.rows = rows
        self.cols = cols
        self.first_class = first_class

    def fit(self, X, y=None):
        X = check_embedding_matrix(X)
        self.distance_matrix_ = cosine_distance_matrix(
            EmbeddingSet(names=tuple(str(i) for i in range(X.shape[0])), vectors=X)
        )
        self.order_ = greedy_place(
            self.distance_matrix_, self.rows, self.cols, self.first_class
        )
        self.score_ = ordering_score(self.order_, self.distance_matrix_)
        return self

    def fit_from_embedding_set(self, emb: EmbeddingSet):
        """Like fit, but keeps the provided class-name association."""
        self.fit(emb.vectors)
        self.class_names_ = emb.names
        return self
