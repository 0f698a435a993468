"""Lifelong state memory as a directed kNN graph.

Search is greedy descent from random restarts over the out-edges; insertion
finds the new point's neighbours with that search and then walks a bounded
neighbourhood, redirecting longest edges that the new point beats.
"""

import logging
import math
import struct
import threading
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numba
import numpy as np
from scipy.signal import lfilter
from scipy.spatial import cKDTree

from encoder import StatePoint, as_state_array
from errors import EmptyGraph, EmptyInput, GraphFormatError, InvalidArgument

logger = logging.getLogger(__name__)

MAGIC = b"KNNG"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIQIq")
_NODE_HEADER = struct.Struct("<QI")
_EDGE_DTYPE = np.dtype([("id", "<u8"), ("distance", "<f8")])
MAX_K = 4096


@dataclass(frozen=True)
class SearchConfig:
    R1: int = 20
    R2: int = 20
    depth: int = 2

    def __post_init__(self):
        for name in ("R1", "R2", "depth"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise InvalidArgument(f"{name} must be a positive integer, got {value}", field=name)


@dataclass(frozen=True)
class GraphNode:
    id: int
    point: np.ndarray
    out_edges: Tuple[Tuple[int, float], ...]


@dataclass
class SearchStats:
    """Per-query instrumentation filled in by the search functions.

    ``touched`` counts the distinct nodes reached through out-edges during
    descent; ``traces`` holds each restart's distance after every greedy step
    (NaN once the descent stopped).
    """

    touched: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    traces: Optional[np.ndarray] = None


class KnnGraph:
    """Append-only directed kNN graph.

    Single writer, many readers: ``graph_insert`` writes the new node's row and
    any redirected edges before the node count is published, so a concurrent
    search never reaches a half-written node.
    """

    def __init__(self, k: int, seed: int):
        if int(k) != k or not 1 <= k <= MAX_K:
            raise InvalidArgument(f"k must be an integer in [1, {MAX_K}], got {k}", field="k")
        self.k = int(k)
        self.rng_seed = int(seed)
        self._rng = np.random.default_rng(seed)
        self._rng_lock = threading.Lock()
        self._write_lock = threading.Lock()
        self._count = 0
        self._dim = 0
        self._points = np.empty((0, 0))
        self._edges = np.empty((0, self.k), dtype=np.int64)
        self._dists = np.empty((0, self.k))
        self._degree = np.empty(0, dtype=np.int64)

    def __len__(self):
        return self._count

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def points(self) -> np.ndarray:
        return self._points[: self._count]

    def node(self, node_id: int) -> GraphNode:
        if not 0 <= node_id < self._count:
            raise InvalidArgument(f"no node {node_id} in a graph of {self._count}", field="id")
        deg = int(self._degree[node_id])
        edges = tuple(
            (int(j), float(d))
            for j, d in zip(self._edges[node_id, :deg], self._dists[node_id, :deg])
        )
        return GraphNode(node_id, self._points[node_id].copy(), edges)

    def nodes(self) -> Iterator[GraphNode]:
        for i in range(self._count):
            yield self.node(i)

    def edge_set(self) -> set:
        return {(node.id, j, d) for node in self.nodes() for j, d in node.out_edges}

    def __eq__(self, other):
        if not isinstance(other, KnnGraph):
            return NotImplemented
        n = self._count
        return (
            self.k == other.k
            and n == len(other)
            and self._dim == other._dim
            and np.array_equal(self.points, other.points)
            and np.array_equal(self._degree[:n], other._degree[:n])
            and all(
                np.array_equal(self._edges[i, : self._degree[i]], other._edges[i, : other._degree[i]])
                and np.array_equal(self._dists[i, : self._degree[i]], other._dists[i, : other._degree[i]])
                for i in range(n)
            )
        )

    __hash__ = None

    def _reserve(self, needed: int):
        capacity = self._points.shape[0]
        if needed <= capacity:
            return
        new_capacity = max(needed, 2 * capacity, 64)
        points = np.zeros((new_capacity, self._dim))
        points[:capacity] = self._points
        edges = np.full((new_capacity, self.k), -1, dtype=np.int64)
        edges[:capacity] = self._edges
        dists = np.full((new_capacity, self.k), np.inf)
        dists[:capacity] = self._dists
        degree = np.zeros(new_capacity, dtype=np.int64)
        degree[:capacity] = self._degree
        self._points, self._edges, self._dists, self._degree = points, edges, dists, degree

    def _draw_seeds(self, n_queries: int, restarts: int) -> np.ndarray:
        with self._rng_lock:
            return self._rng.integers(0, self._count, size=(n_queries, restarts))

    def _sort_row(self, i: int):
        deg = self._degree[i]
        order = np.lexsort((self._edges[i, :deg], self._dists[i, :deg]))
        self._edges[i, :deg] = self._edges[i, :deg][order]
        self._dists[i, :deg] = self._dists[i, :deg][order]


def graph_new(k: int, seed: int) -> KnnGraph:
    return KnnGraph(k, seed)


@numba.njit(cache=True)
def _distance(points, i, query):
    total = 0.0
    for j in range(query.shape[0]):
        diff = points[i, j] - query[j]
        total += diff * diff
    return math.sqrt(total)


@numba.njit(cache=True)
def _gnns_kernel(points, edges, degree, queries, seeds, r1, k_out, record):
    n_queries = queries.shape[0]
    restarts = seeds.shape[1]
    k = edges.shape[1]
    capacity = restarts * (r1 * k + 1)

    out_ids = np.full((n_queries, k_out), -1, dtype=np.int64)
    out_dists = np.full((n_queries, k_out), np.inf)
    touched = np.zeros(n_queries, dtype=np.int64)
    traces = np.full((n_queries if record else 1, restarts, r1 + 1), np.nan)

    cand_ids = np.empty(capacity, dtype=np.int64)
    cand_dists = np.empty(capacity)
    via_edge = np.empty(capacity, dtype=np.bool_)

    for b in range(n_queries):
        query = queries[b]
        slot = b if record else 0
        m = 0
        for r in range(restarts):
            x = seeds[b, r]
            dx = _distance(points, x, query)
            cand_ids[m] = x
            cand_dists[m] = dx
            via_edge[m] = False
            m += 1
            traces[slot, r, 0] = dx
            for step in range(r1):
                best = -1
                best_d = dx
                for e in range(degree[x]):
                    y = edges[x, e]
                    dy = _distance(points, y, query)
                    cand_ids[m] = y
                    cand_dists[m] = dy
                    via_edge[m] = True
                    m += 1
                    if dy < best_d or (best >= 0 and dy == best_d and y < best):
                        best = y
                        best_d = dy
                if best < 0:
                    break
                x = best
                dx = best_d
                traces[slot, r, step + 1] = dx

        order = np.argsort(cand_ids[:m], kind="mergesort")
        uniq_ids = np.empty(m, dtype=np.int64)
        uniq_dists = np.empty(m)
        u = 0
        count_touched = 0
        i = 0
        while i < m:
            node = cand_ids[order[i]]
            reached = False
            j = i
            while j < m and cand_ids[order[j]] == node:
                if via_edge[order[j]]:
                    reached = True
                j += 1
            uniq_ids[u] = node
            uniq_dists[u] = cand_dists[order[i]]
            u += 1
            if reached:
                count_touched += 1
            i = j
        touched[b] = count_touched

        for slot_k in range(min(k_out, u)):
            best_i = -1
            for c in range(u):
                if uniq_ids[c] < 0:
                    continue
                if best_i < 0 or uniq_dists[c] < uniq_dists[best_i] or (
                    uniq_dists[c] == uniq_dists[best_i] and uniq_ids[c] < uniq_ids[best_i]
                ):
                    best_i = c
            out_ids[b, slot_k] = uniq_ids[best_i]
            out_dists[b, slot_k] = uniq_dists[best_i]
            uniq_ids[best_i] = -1

    return out_ids, out_dists, touched, traces


def _exact_neighbours(points: np.ndarray, query: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    dists = np.sqrt(np.sum((points - query) ** 2, axis=1))
    order = np.lexsort((np.arange(points.shape[0]), dists))[:k]
    return order.astype(np.int64), dists[order]


def gnns_search_batch(
    g: KnnGraph, queries, cfg: SearchConfig, stats: Optional[SearchStats] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Approximate k nearest stored nodes for every query row.

    Returns ``(ids, distances)``, each of shape (n_queries, min(k, len(g))),
    ascending by distance with ties broken by id.
    """
    if len(g) == 0:
        raise EmptyGraph("cannot search an empty graph")
    queries = as_state_array(queries)
    if queries.shape[1] != g.dim:
        raise InvalidArgument(f"query dimension {queries.shape[1]} != graph dimension {g.dim}", field="query")

    n = len(g)
    k_out = min(g.k, n)
    if n <= g.k:
        # complete-graph phase: every node is a neighbour of every query
        ids = np.empty((queries.shape[0], k_out), dtype=np.int64)
        dists = np.empty((queries.shape[0], k_out))
        for b, query in enumerate(queries):
            ids[b], dists[b] = _exact_neighbours(g.points, query, k_out)
        if stats is not None:
            stats.touched = np.full(queries.shape[0], n, dtype=np.int64)
            stats.traces = None
        return ids, dists

    seeds = g._draw_seeds(queries.shape[0], cfg.R2)
    record = stats is not None
    ids, dists, touched, traces = _gnns_kernel(
        g._points, g._edges, g._degree, np.ascontiguousarray(queries), seeds, cfg.R1, k_out, record
    )
    if record:
        stats.touched = touched
        stats.traces = traces
    return ids, dists


def gnns_search(
    g: KnnGraph, query: StatePoint, cfg: SearchConfig, stats: Optional[SearchStats] = None
) -> List[Tuple[int, float]]:
    ids, dists = gnns_search_batch(g, np.asarray(query, dtype=np.float64).reshape(1, -1), cfg, stats)
    return [(int(i), float(d)) for i, d in zip(ids[0], dists[0])]


def graph_insert(g: KnnGraph, point: StatePoint, cfg: SearchConfig) -> int:
    point = np.asarray(point, dtype=np.float64).ravel()
    with g._write_lock:
        n = len(g)
        if n == 0:
            g._dim = point.shape[0]
            g._points = np.empty((0, g._dim))
        elif point.shape[0] != g.dim:
            raise InvalidArgument(f"point dimension {point.shape[0]} != graph dimension {g.dim}", field="point")

        g._reserve(n + 1)
        g._points[n] = point

        if n <= g.k:
            ids, dists = _exact_neighbours(g.points[:n], point, n) if n else (np.empty(0, np.int64), np.empty(0))
            g._edges[n, :n] = ids
            g._dists[n, :n] = dists
            g._degree[n] = n
            for j, d in zip(ids, dists):
                deg = g._degree[j]
                g._edges[j, deg] = n
                g._dists[j, deg] = d
                g._degree[j] = deg + 1
                g._sort_row(j)
        else:
            ids, dists = gnns_search_batch(g, point.reshape(1, -1), cfg)
            g._edges[n] = ids[0]
            g._dists[n] = dists[0]
            g._degree[n] = g.k
            _redirect_edges(g, n, point, ids[0], cfg.depth)

        g._count = n + 1
    return n


def _redirect_edges(g: KnnGraph, new_id: int, point: np.ndarray, start: np.ndarray, depth: int):
    """Breadth-first walk from the new node's neighbours, ``depth`` levels deep."""
    visited = set()
    frontier = [int(x) for x in start]
    for _ in range(depth):
        next_frontier = []
        for x in frontier:
            if x in visited or x == new_id:
                continue
            visited.add(x)
            next_frontier.extend(int(y) for y in g._edges[x, : g._degree[x]])
            d = float(np.sqrt(np.sum((g._points[x] - point) ** 2)))
            if d < g._dists[x, g.k - 1]:
                g._edges[x, g.k - 1] = new_id
                g._dists[x, g.k - 1] = d
                g._sort_row(x)
        frontier = next_frontier


def brute_force_knn(points, query: StatePoint, k: int) -> List[Tuple[int, float]]:
    arr = as_state_array(points)
    if arr.shape[0] == 0:
        raise EmptyInput("no points to search")
    query = np.asarray(query, dtype=np.float64).ravel()
    if query.shape[0] != arr.shape[1]:
        raise InvalidArgument(f"query dimension {query.shape[0]} != point dimension {arr.shape[1]}", field="query")
    ids, dists = _exact_neighbours(arr, query, k)
    return [(int(i), float(d)) for i, d in zip(ids, dists)]


def recall_at_k(g: KnnGraph, queries, cfg: SearchConfig) -> float:
    queries = as_state_array(queries)
    if queries.shape[0] == 0:
        raise EmptyInput("no queries given")
    if len(g) == 0:
        raise EmptyGraph("cannot measure recall on an empty graph")
    m = min(g.k, len(g))
    approx, _ = gnns_search_batch(g, queries, cfg)
    hits = 0
    for row, query in zip(approx, queries):
        exact, _ = _exact_neighbours(g.points, query, m)
        hits += len(set(row.tolist()) & set(exact.tolist()))
    return hits / (m * queries.shape[0])


def edge_accuracy(g: KnnGraph) -> float:
    """Mean fraction of each node's out-edges that are true k nearest neighbours."""
    n = len(g)
    if n <= g.k:
        return 1.0
    _, exact = cKDTree(g.points).query(g.points, k=g.k + 1)
    total = 0.0
    for i in range(n):
        truth = [j for j in exact[i] if j != i][: g.k]
        total += len(set(truth) & set(g._edges[i, : g.k].tolist())) / g.k
    return total / n


def graph_save(g: KnnGraph) -> bytes:
    n = len(g)
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, g.k, n, g.dim, g.rng_seed)]
    for i in range(n):
        deg = int(g._degree[i])
        parts.append(_NODE_HEADER.pack(i, deg))
        parts.append(g._points[i].astype("<f8").tobytes())
        edges = np.empty(deg, dtype=_EDGE_DTYPE)
        edges["id"] = g._edges[i, :deg]
        edges["distance"] = g._dists[i, :deg]
        parts.append(edges.tobytes())
    return b"".join(parts)


def _take(data: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(data):
        raise GraphFormatError(f"truncated {what}: need {size} bytes, {len(data) - offset} left", offset)
    return data[offset : offset + size]


def graph_load(data: bytes) -> KnnGraph:
    data = bytes(data)
    magic, version, k, n, dim, seed = _HEADER.unpack(_take(data, 0, _HEADER.size, "header"))
    if magic != MAGIC:
        raise GraphFormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise GraphFormatError(f"unsupported version {version}", 4)
    if not 1 <= k <= MAX_K:
        raise GraphFormatError(f"k must be in [1, {MAX_K}], got {k}", 6)
    # every node needs its header and point even with no edges
    if n * (_NODE_HEADER.size + 8 * dim) > len(data) - _HEADER.size:
        raise GraphFormatError(f"header claims {n} nodes of dimension {dim}, more than the {len(data)} bytes hold", 10)

    g = KnnGraph(k, seed)
    g._dim = dim
    g._points = np.empty((0, dim))
    g._reserve(n)
    offset = _HEADER.size
    for i in range(n):
        node_id, deg = _NODE_HEADER.unpack(_take(data, offset, _NODE_HEADER.size, f"node {i} header"))
        if node_id != i:
            raise GraphFormatError(f"expected node id {i}, found {node_id}", offset)
        if deg > k:
            raise GraphFormatError(f"node {i} has {deg} edges, k is {k}", offset + 8)
        offset += _NODE_HEADER.size
        g._points[i] = np.frombuffer(_take(data, offset, 8 * dim, f"node {i} point"), dtype="<f8")
        offset += 8 * dim
        raw = _take(data, offset, _EDGE_DTYPE.itemsize * deg, f"node {i} edges")
        edges = np.frombuffer(raw, dtype=_EDGE_DTYPE)
        if deg and int(edges["id"].max()) >= n:
            raise GraphFormatError(f"node {i} links to a node outside the graph", offset)
        g._edges[i, :deg] = edges["id"].astype(np.int64)
        g._dists[i, :deg] = edges["distance"]
        g._degree[i] = deg
        offset += _EDGE_DTYPE.itemsize * deg
    if offset != len(data):
        raise GraphFormatError(f"{len(data) - offset} trailing bytes", offset)
    g._count = n
    return g


def smooth_random_walk(n: int, dim: int, rng: np.random.Generator, step: float = 1.0, momentum: float = 0.9) -> np.ndarray:
    """Trajectory whose velocity is an AR(1) process, i.e. a smooth random walk."""
    noise = rng.standard_normal((n, dim)) * step * math.sqrt(1.0 - momentum ** 2)
    velocity = lfilter([1.0], [1.0, -momentum], noise, axis=0)
    return np.cumsum(velocity, axis=0)
