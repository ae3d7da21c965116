"""Static undirected communication graphs."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Topology:
    n_nodes: int
    edges: frozenset  # {(i, j)} with i < j
    model: str = "edge-list"
    p: Optional[float] = None
    seed: Optional[int] = None
    _adj: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ConfigError("n_nodes must be >= 1")
        adj = [[] for _ in range(self.n_nodes)]
        for i, j in self.edges:
            if not (0 <= i < j < self.n_nodes):
                raise ConfigError(f"edge ({i}, {j}) must satisfy 0 <= i < j < {self.n_nodes}")
            adj[i].append(j)
            adj[j].append(i)
        object.__setattr__(self, "_adj", tuple(tuple(sorted(a)) for a in adj))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def density(self) -> float:
        pairs = self.n_nodes * (self.n_nodes - 1) // 2
        return self.num_edges / pairs if pairs else 0.0

    def sorted_neighbors(self, i: int) -> tuple:
        if not 0 <= i < self.n_nodes:
            raise IndexError(f"node {i} out of range [0, {self.n_nodes})")
        return self._adj[i]

    def degree(self, i: int) -> int:
        return len(self.sorted_neighbors(i))


def from_edges(n: int, pairs: Iterable) -> Topology:
    edges = set()
    for i, j in pairs:
        i, j = int(i), int(j)
        if i == j:
            raise ConfigError(f"self-loop on node {i}")
        edges.add((min(i, j), max(i, j)))
    return Topology(n, frozenset(edges))


def gen_erdos_renyi(n: int, p: float, seed: int) -> Topology:
    """G(n, p): every unordered pair is linked independently with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"edge probability p={p} outside [0, 1]")
    if n < 1:
        raise ConfigError("n must be >= 1")
    rows, cols = np.triu_indices(n, k=1)
    draws = np.random.default_rng(seed).random(len(rows))
    keep = draws < p
    edges = frozenset(zip(rows[keep].tolist(), cols[keep].tolist()))
    return Topology(n, edges, "erdos-renyi", float(p), seed)


def neighborhood(t: Topology, i: int) -> frozenset:
    return frozenset(t.sorted_neighbors(i))


def is_connected(t: Topology) -> bool:
    seen = {0}
    queue = deque([0])
    while queue:
        for j in t.sorted_neighbors(queue.popleft()):
            if j not in seen:
                seen.add(j)
                queue.append(j)
    return len(seen) == t.n_nodes


def read_edge_list(path, n_nodes: int) -> Topology:
    """Parse ``i j`` pairs (0-based, one per line, ``#`` comments allowed)."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"{path}:{lineno}: expected 'i j', got {line!r}")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
        if i >= j:
            raise ConfigError(f"{path}:{lineno}: edges must be written with i < j")
        pairs.append((i, j))
    return from_edges(n_nodes, pairs)


def write_edge_list(t: Topology, path) -> None:
    Path(path).write_text("".join(f"{i} {j}\n" for i, j in sorted(t.edges)))


def warn_if_disconnected(t: Topology) -> bool:
    connected = is_connected(t)
    if not connected:
        log.warning("topology with %d nodes is disconnected; isolated components train independently",
                    t.n_nodes)
    return connected
