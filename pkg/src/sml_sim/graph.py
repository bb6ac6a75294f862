from __future__ import annotations

from dataclasses import dataclass
import json
import logging
from typing import NamedTuple, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

COLUMN_SUM_TOLERANCE = 1e-12
DEFAULT_PERRON_TOLERANCE = 1e-12
MAX_POWER_ITERATIONS = 10**6

_logger = logging.getLogger("sml_sim.graph")


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float) -> None:
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


@dataclass(frozen=True, eq=False)
class CombinationMatrix:
    """Left-stochastic matrix; ``weights[l, k]`` scales what agent ``l`` sends to agent ``k``."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        weights = np.array(self.weights, dtype=float)
        if weights.ndim != 2 or weights.shape[0] != weights.shape[1]:
            raise ValueError(f"combination matrix must be square, got shape={weights.shape}")
        if weights.shape[0] < 1:
            raise ValueError("combination matrix is empty")
        if not np.all(np.isfinite(weights)):
            raise ValueError("combination matrix has non-finite entries")
        if np.any(weights < 0):
            raise ValueError("combination matrix has negative entries")
        column_sums = weights.sum(axis=0)
        worst = float(np.max(np.abs(column_sums - 1.0)))
        if worst > COLUMN_SUM_TOLERANCE:
            raise ValueError(f"columns must sum to 1 (max deviation={worst:.3e})")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    def neighborhood(self, agent: int) -> Tuple[int, ...]:
        return tuple(int(l) for l in np.flatnonzero(self.weights[:, agent] > 0))

    def combine(self, values: np.ndarray) -> np.ndarray:
        # out[k] = sum_l a[l, k] * values[l], in fixed summation order
        return self.weights.T @ values


@dataclass(frozen=True, eq=False)
class PerronVector:
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.ndim != 1 or values.size < 1:
            raise ValueError("Perron vector must be a nonempty 1-D array")
        if np.any(values <= 0):
            raise ValueError("Perron vector entries must be strictly positive")
        if abs(values.sum() - 1.0) > COLUMN_SUM_TOLERANCE:
            raise ValueError(f"Perron vector must sum to 1 (sum={values.sum()!r})")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return self.values.size

    def average(self, per_agent: Sequence[float]) -> float:
        per_agent = np.asarray(per_agent, dtype=float)
        if per_agent.shape != self.values.shape:
            raise ValueError(f"expected {self.size} per-agent values, got {per_agent.shape}")
        return float(self.values @ per_agent)


class Connectivity(NamedTuple):
    strongly_connected: bool
    primitive: bool


def _as_adjacency(adjacency: Sequence[Sequence[bool]] | np.ndarray) -> np.ndarray:
    adjacency = np.asarray(adjacency, dtype=bool)
    if adjacency.size == 0:
        raise ValueError("adjacency describes an empty graph")
    if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
        raise ValueError(f"adjacency rows/columns mismatch, shape={adjacency.shape}")
    return adjacency


def build_averaging_matrix(adjacency: Sequence[Sequence[bool]] | np.ndarray) -> CombinationMatrix:
    adjacency = _as_adjacency(adjacency)
    if not np.all(np.diag(adjacency)):
        missing = [int(k) for k in np.flatnonzero(~np.diag(adjacency))]
        raise ValueError(f"adjacency must list self-loops explicitly, missing for agents={missing}")
    if not np.array_equal(adjacency, adjacency.T):
        _logger.debug("Averaging rule applied to a directed adjacency")
    degrees = adjacency.sum(axis=0)
    weights = adjacency / degrees[np.newaxis, :]
    return CombinationMatrix(weights)


def directed_ring_adjacency(size: int) -> np.ndarray:
    if size < 1:
        raise ValueError("ring needs at least one agent")
    adjacency = np.eye(size, dtype=bool)
    for k in range(size):
        adjacency[(k - 1) % size, k] = True
    return adjacency


def grid_adjacency(rows: int, cols: int) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError(f"grid dimensions must be positive, got {rows}x{cols}")
    graph = nx.grid_2d_graph(rows, cols)
    order = [(r, c) for r in range(rows) for c in range(cols)]
    adjacency = nx.to_numpy_array(graph, nodelist=order) > 0
    np.fill_diagonal(adjacency, True)
    return adjacency


def random_adjacency(size: int, edge_probability: float, seed: int) -> np.ndarray:
    """Symmetric adjacency with self-loops, connected through a ring backbone."""
    if size < 1:
        raise ValueError("random graph needs at least one agent")
    if not 0.0 <= edge_probability <= 1.0:
        raise ValueError(f"edge_probability must lie in [0, 1], got {edge_probability}")
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((size, size)) < edge_probability, k=1)
    adjacency = upper | upper.T
    for k in range(size):
        adjacency[k, (k + 1) % size] = True
        adjacency[(k + 1) % size, k] = True
    np.fill_diagonal(adjacency, True)
    return adjacency


def is_strongly_connected(matrix: CombinationMatrix) -> Connectivity:
    graph = nx.from_numpy_array(matrix.weights > 0, create_using=nx.DiGraph)
    strongly = nx.is_strongly_connected(graph)
    has_self_loop = bool(np.any(np.diag(matrix.weights) > 0))
    return Connectivity(strongly_connected=strongly, primitive=strongly and has_self_loop)


def perron_eigenvector(
    matrix: CombinationMatrix,
    tol: float = DEFAULT_PERRON_TOLERANCE,
    start: Optional[Sequence[float]] = None,
    max_iterations: int = MAX_POWER_ITERATIONS,
) -> PerronVector:
    if not is_strongly_connected(matrix).primitive:
        raise ValueError("Perron eigenvector requires a primitive matrix (strongly connected with a self-loop)")
    size = matrix.size
    if start is None:
        current = np.full(size, 1.0 / size)
    else:
        current = np.asarray(start, dtype=float)
        if current.shape != (size,) or np.any(current <= 0):
            raise ValueError("power iteration start must be a positive vector of matching size")
        current = current / current.sum()

    residual = np.inf
    for iteration in range(1, max_iterations + 1):
        following = matrix.weights @ current
        following /= following.sum()
        residual = float(np.max(np.abs(following - current)))
        current = following
        if residual < tol:
            _logger.debug("Power iteration converged iterations=%s residual=%s", iteration, residual)
            return PerronVector(current / current.sum())
    raise ConvergenceError(f"power iteration did not converge in {max_iterations} iterations", residual)


def load_matrix(path: str) -> CombinationMatrix:
    with open(path, "r", encoding="utf-8") as handle:
        payload = json.load(handle)
    return matrix_from_dict(payload)


def matrix_from_dict(payload: dict) -> CombinationMatrix:
    try:
        size = int(payload["K"])
        rows = payload["rows"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"matrix file needs 'K' and 'rows': {exc}") from exc
    if len(rows) != size or any(len(row) != size for row in rows):
        raise ValueError(f"matrix file declares K={size} but rows have a different shape")
    return CombinationMatrix(np.array(rows, dtype=float))


def save_matrix(matrix: CombinationMatrix, path: str) -> None:
    payload = {"K": matrix.size, "rows": matrix.weights.tolist()}
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2)
