"""Ground-truth causal structures and observational data.

Generates Erdos-Renyi DAGs, assigns uniform edge weights with a dead zone
around zero, and samples linear-Gaussian observations x = x W + z row-wise
(equivalently X = (I - W^T)^-1 Z column-wise). Also provides DAG utilities
and the factorized linear-Gaussian log-likelihood used as a structure score.
"""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CycleError",
    "DegenerateDataError",
    "Dag",
    "WeightedSem",
    "Dataset",
    "StateDescription",
    "sample_er_graph",
    "assign_weights",
    "sample_observations",
    "analytic_covariance",
    "topological_order",
    "is_acyclic",
    "log_likelihood",
    "LikelihoodScorer",
    "dag_to_edge_list",
    "dag_from_edge_list",
    "save_dataset_csv",
    "load_dataset_csv",
]

RIDGE_JITTER = 1e-6
MIN_NOISE_VAR = 1e-12


class CycleError(ValueError):
    """A directed cycle was found where a DAG was required."""


class DegenerateDataError(ValueError):
    """Residual variance collapsed to zero (e.g. identical repeated rows)."""


@dataclass(frozen=True)
class Dag:
    """Binary adjacency matrix; adj[i, j] = 1 means a directed edge i -> j."""

    adj: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adj)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError("adjacency must be square")
        if not np.isin(adj, (0, 1)).all():
            raise ValueError("adjacency entries must be 0 or 1")
        if np.any(np.diag(adj) != 0):
            raise ValueError("adjacency diagonal must be zero")
        object.__setattr__(self, "adj", adj.astype(np.int8))
        if not is_acyclic(adj):
            raise CycleError("adjacency contains a directed cycle")

    @property
    def n(self) -> int:
        return self.adj.shape[0]

    @property
    def n_edges(self) -> int:
        return int(self.adj.sum())

    def edges(self) -> list[tuple[int, int]]:
        out = np.argwhere(self.adj == 1)
        return [(int(i), int(j)) for i, j in out]

    def parents(self, j: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.adj[:, j]))


@dataclass(frozen=True)
class WeightedSem:
    """A DAG with edge weights and homoscedastic Gaussian noise."""

    dag: Dag
    weights: np.ndarray
    noise_std: float = 1.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != self.dag.adj.shape:
            raise ValueError("weight matrix shape must match adjacency")
        support = w != 0.0
        if not np.array_equal(support, self.dag.adj.astype(bool)):
            raise ValueError("weight support must equal the edge set")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be positive")
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.dag.n


@dataclass(frozen=True)
class Dataset:
    """Observation matrix, one row per event."""

    x: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("dataset must be a 2-d matrix with at least one row")
        if not np.isfinite(x).all():
            raise ValueError("dataset entries must be finite")
        object.__setattr__(self, "x", x)

    @property
    def rows(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class StateDescription:
    """Topologically ordered nodes, their adjacency and quantized levels."""

    node_sequence: tuple[int, ...]
    adjacency: Dag
    node_values: tuple[int, ...]

    def __post_init__(self):
        order = {node: pos for pos, node in enumerate(self.node_sequence)}
        if sorted(self.node_sequence) != list(range(self.adjacency.n)):
            raise ValueError("node_sequence must be a permutation of the nodes")
        for i, j in self.adjacency.edges():
            if order[i] >= order[j]:
                raise CycleError(f"node_sequence violates edge {i} -> {j}")
        if len(self.node_values) != self.adjacency.n:
            raise ValueError("one quantization level required per node")


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def sample_er_graph(n: int, edge_prob: float, rng: np.random.Generator) -> Dag:
    """Sample an Erdos-Renyi DAG.

    A random node permutation fixes an order; each pair earlier->later gets
    an edge independently with probability ``edge_prob``, so orientation is
    not biased toward ascending ids.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= edge_prob <= 1.0:
        raise ValueError("edge_prob must lie in [0, 1]")
    perm = rng.permutation(n)
    adj = np.zeros((n, n), dtype=np.int8)
    for a in range(n):
        for b in range(a + 1, n):
            if rng.random() < edge_prob:
                adj[perm[a], perm[b]] = 1
    return Dag(adj)


def assign_weights(
    dag: Dag,
    low: float = 0.5,
    high: float = 2.0,
    rng: np.random.Generator | None = None,
    noise_std: float = 1.0,
) -> WeightedSem:
    """Give every edge a weight with magnitude uniform in [low, high], random sign.

    The dead zone below ``low`` keeps edges identifiable; non-edges stay 0.
    """
    if not 0 <= low < high:
        raise ValueError("need 0 <= low < high")
    rng = rng if rng is not None else np.random.default_rng()
    w = np.zeros(dag.adj.shape, dtype=float)
    for i, j in dag.edges():
        mag = rng.uniform(low, high)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        w[i, j] = sign * mag
    return WeightedSem(dag, w, noise_std)


def sample_observations(sem: WeightedSem, count: int, rng: np.random.Generator) -> Dataset:
    """Draw observations by ancestral sampling: x_j = sum_i w_ij x_i + z_j."""
    if count < 1:
        raise ValueError("count must be >= 1")
    n = sem.n
    z = rng.normal(0.0, sem.noise_std, size=(count, n))
    x = np.zeros_like(z)
    for j in topological_order(sem.dag):
        parents = sem.dag.parents(j)
        x[:, j] = z[:, j]
        if parents:
            x[:, j] += x[:, parents] @ sem.weights[list(parents), j]
    return Dataset(x)


def analytic_covariance(sem: WeightedSem) -> np.ndarray:
    """Closed-form covariance (I - W^T)^-1 (I - W)^-1 sigma^2."""
    n = sem.n
    m = np.linalg.inv(np.eye(n) - sem.weights.T)
    return m @ m.T * sem.noise_std**2


# ---------------------------------------------------------------------------
# DAG utilities
# ---------------------------------------------------------------------------

def is_acyclic(adj: np.ndarray) -> bool:
    """True iff the adjacency matrix (any square 0/1 matrix) has no directed cycle."""
    a = np.asarray(adj).astype(bool)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("adjacency must be square")
    n = a.shape[0]
    indeg = a.sum(axis=0).astype(int)
    ready = [i for i in range(n) if indeg[i] == 0]
    seen = 0
    while ready:
        v = ready.pop()
        seen += 1
        for w in np.flatnonzero(a[v]):
            indeg[w] -= 1
            if indeg[w] == 0:
                ready.append(int(w))
    return seen == n


def topological_order(dag: Dag) -> list[int]:
    """Kahn's algorithm with ascending-id tie-break; names a cycle on failure."""
    n = dag.n
    adj = dag.adj.astype(bool)
    indeg = adj.sum(axis=0).astype(int)
    heap = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(heap)
    order: list[int] = []
    while heap:
        v = heapq.heappop(heap)
        order.append(v)
        for w in np.flatnonzero(adj[v]):
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(heap, int(w))
    if len(order) != n:
        cycle = _find_cycle(adj)
        raise CycleError(f"graph contains cycle {' -> '.join(map(str, cycle))}")
    return order


def _find_cycle(adj: np.ndarray) -> list[int]:
    n = adj.shape[0]
    color = [0] * n
    stack: list[int] = []

    def visit(v: int) -> list[int] | None:
        color[v] = 1
        stack.append(v)
        for w in np.flatnonzero(adj[v]):
            w = int(w)
            if color[w] == 1:
                return stack[stack.index(w):] + [w]
            if color[w] == 0:
                found = visit(w)
                if found:
                    return found
        stack.pop()
        color[v] = 2
        return None

    for v in range(n):
        if color[v] == 0:
            found = visit(v)
            if found:
                return found
    return []


# ---------------------------------------------------------------------------
# Likelihood
# ---------------------------------------------------------------------------

class LikelihoodScorer:
    """Factorized linear-Gaussian log-likelihood from sufficient statistics.

    Precomputes the Gram matrix X^T X once; each (node, parent set) score is
    then a small solve, memoized across calls. Regressions run without an
    intercept since the generating model is zero-mean.
    """

    def __init__(self, data: Dataset):
        self.rows = data.rows
        self.n = data.n
        self.gram = data.x.T @ data.x
        self._cache: dict[tuple[int, tuple[int, ...]], float] = {}

    def node_log_likelihood(self, j: int, parents: tuple[int, ...]) -> float:
        key = (j, parents)
        if key in self._cache:
            return self._cache[key]
        if parents:
            p = list(parents)
            gpp = self.gram[np.ix_(p, p)]
            gpj = self.gram[p, j]
            try:
                beta = np.linalg.solve(gpp, gpj)
            except np.linalg.LinAlgError:
                beta = np.linalg.solve(gpp + RIDGE_JITTER * np.eye(len(p)), gpj)
            rss = float(self.gram[j, j] - gpj @ beta)
        else:
            rss = float(self.gram[j, j])
        var = max(rss, 0.0) / self.rows
        if var < MIN_NOISE_VAR:
            raise DegenerateDataError(
                f"node {j} with parents {parents} has near-zero residual variance"
            )
        ll = -0.5 * self.rows * (math.log(2.0 * math.pi * var) + 1.0)
        self._cache[key] = ll
        return ll

    def total(self, dag: Dag) -> float:
        return sum(self.node_log_likelihood(j, dag.parents(j)) for j in range(self.n))


def log_likelihood(dag: Dag, data: Dataset) -> float:
    """Summed log-likelihood of the per-node linear-Gaussian factorization."""
    if data.rows < data.n + 1:
        raise ValueError("need at least n + 1 observations")
    if dag.n != data.n:
        raise ValueError("dag and data disagree on the number of nodes")
    return LikelihoodScorer(data).total(dag)


# ---------------------------------------------------------------------------
# Interchange formats
# ---------------------------------------------------------------------------

def dag_to_edge_list(dag: Dag) -> str:
    """One 'i -> j' line per edge, row-major order."""
    return "\n".join(f"{i} -> {j}" for i, j in dag.edges())


def dag_from_edge_list(text: str, n: int) -> Dag:
    adj = np.zeros((n, n), dtype=np.int8)
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        src, _, dst = line.partition("->")
        adj[int(src.strip()), int(dst.strip())] = 1
    return Dag(adj)


def save_dataset_csv(data: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(data.n)])
        for row in data.x:
            writer.writerow([repr(float(v)) for v in row])


def load_dataset_csv(path) -> Dataset:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    x = np.asarray(rows, dtype=float)
    if x.shape[1] != len(header):
        raise ValueError("column count does not match header")
    return Dataset(x)
