"""Sparse undirected graphs and the discrete gradient/divergence operators.

Edges are stored once per undirected pair, in canonical orientation ``i < j``.
Edge fields are alternating: the value on ``(j, i)`` is minus the value on
``(i, j)``, so only the canonical orientation is ever stored.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    """Raised for malformed graphs or mismatched field dimensions."""


@dataclass(frozen=True, eq=False)
class EdgeSet:
    """A directed edge list ``src -> dst`` over ``n`` nodes.

    This is the structure attention is normalised over. Rows are ``src``;
    for every node the outgoing edges are contiguous and sorted by ``dst``.
    """

    n: int
    src: np.ndarray
    dst: np.ndarray

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.int64)
        dst = np.asarray(self.dst, dtype=np.int64)
        if src.shape != dst.shape or src.ndim != 1:
            raise GraphError("src and dst must be 1-d arrays of equal length")
        if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= self.n):
            raise GraphError("edge index out of range")
        order = np.lexsort((dst, src))
        key = src[order] * max(self.n, 1) + dst[order]
        keep = np.ones(key.size, dtype=bool)
        keep[1:] = key[1:] != key[:-1]
        object.__setattr__(self, "src", src[order][keep])
        object.__setattr__(self, "dst", dst[order][keep])

    def __len__(self):
        return int(self.src.size)

    def out_degree(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.n)

    def has_self_loops(self) -> bool:
        return bool(np.any(self.src == self.dst))

    @cached_property
    def torch_index(self):
        import torch

        return torch.from_numpy(self.src), torch.from_numpy(self.dst)

    def to_scipy(self, values=None) -> sp.csr_matrix:
        if values is None:
            values = np.ones(len(self))
        return sp.csr_matrix((np.asarray(values, dtype=float), (self.src, self.dst)),
                             shape=(self.n, self.n))


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable undirected graph in compressed row form.

    Build with :meth:`from_edges`; the constructor expects already
    canonical data.
    """

    n: int
    edges: np.ndarray  # (m, 2), i <= j, lexicographically sorted, unique
    weights: np.ndarray  # (m,)
    row_offsets: np.ndarray = field(repr=False)
    col_indices: np.ndarray = field(repr=False)
    row_weights: np.ndarray = field(repr=False)

    @classmethod
    def from_edges(cls, n, edges, weights=None, allow_self_loops=False) -> "Graph":
        """Build a graph from an arbitrary list of pairs.

        Duplicate pairs (in either orientation) collapse to one edge; the
        first weight seen wins. Self-loops raise unless ``allow_self_loops``.
        """
        n = int(n)
        if n < 0:
            raise GraphError("node count must be nonnegative")
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        w = np.ones(len(e)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != e.shape[0]:
            raise GraphError("one weight per edge required")
        if e.size and (e.min() < 0 or e.max() >= n):
            raise GraphError("edge index out of range")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise GraphError("edge weights must be finite and nonnegative")
        loops = e[:, 0] == e[:, 1]
        if loops.any() and not allow_self_loops:
            raise GraphError(f"self-loop at node {int(e[loops][0, 0])}")
        lo = np.minimum(e[:, 0], e[:, 1])
        hi = np.maximum(e[:, 0], e[:, 1])
        key = lo * max(n, 1) + hi
        _, first = np.unique(key, return_index=True)
        lo, hi, w = lo[first], hi[first], w[first]
        canon = np.stack([lo, hi], axis=1) if len(lo) else np.zeros((0, 2), dtype=np.int64)

        # both orientations, self-loops once
        off = lo != hi
        src = np.concatenate([lo, hi[off]])
        dst = np.concatenate([hi, lo[off]])
        ww = np.concatenate([w, w[off]])
        order = np.lexsort((dst, src))
        src, dst, ww = src[order], dst[order], ww[order]
        row_offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n), out=row_offsets[1:])
        return cls(n, canon, w, row_offsets, dst, ww)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    def degree(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def neighbors(self, i: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[i]:self.row_offsets[i + 1]]

    def has_self_loops(self) -> bool:
        return bool(np.any(self.edges[:, 0] == self.edges[:, 1]))

    def directed(self) -> EdgeSet:
        """Both orientations of every edge as an :class:`EdgeSet`."""
        return self._directed

    @cached_property
    def _directed(self) -> EdgeSet:
        src = np.repeat(np.arange(self.n), self.degree())
        return EdgeSet(self.n, src, self.col_indices)

    def adjacency(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.row_weights, self.col_indices, self.row_offsets),
                             shape=(self.n, self.n))

    def laplacian(self) -> sp.csr_matrix:
        """Combinatorial Laplacian ``D - W`` (self-loops cancel out)."""
        W = self.adjacency()
        return (sp.diags(np.asarray(W.sum(axis=1)).ravel()) - W).tocsr()


@dataclass(frozen=True, eq=False)
class EdgeField:
    """Alternating field on the edges of ``graph``.

    ``values[k]`` is the value on the canonical orientation
    ``graph.edges[k] = (i, j)`` with ``i < j``; :meth:`get` flips the sign
    for the reverse orientation.
    """

    graph: Graph
    values: np.ndarray  # (m, d)

    def get(self, i: int, j: int) -> np.ndarray:
        lo, hi = min(i, j), max(i, j)
        e = self.graph.edges
        k = np.searchsorted(e[:, 0] * self.graph.n + e[:, 1], lo * self.graph.n + hi)
        if k >= len(e) or e[k, 0] != lo or e[k, 1] != hi:
            raise KeyError((i, j))
        v = self.values[k]
        return v if i <= j else -v


def _as_node_field(g: Graph, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    vector = x.ndim == 1
    if vector:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] != g.n:
        raise GraphError(f"node field has shape {x.shape}, expected ({g.n}, d)")
    return x, vector


def gradient(g: Graph, x) -> EdgeField:
    """``(grad x)_ij = x_j - x_i`` on every canonical edge ``i < j``."""
    x, vector = _as_node_field(g, x)
    i, j = g.edges[:, 0], g.edges[:, 1]
    vals = x[j] - x[i]
    return EdgeField(g, vals[:, 0] if vector else vals)


def divergence(g: Graph, f: EdgeField | np.ndarray) -> np.ndarray:
    """``(div f)_i = sum_j w_ij f_ij`` using the alternating convention."""
    vals = f.values if isinstance(f, EdgeField) else np.asarray(f, dtype=float)
    if isinstance(f, EdgeField) and f.graph is not g and f.graph.num_edges != g.num_edges:
        raise GraphError("edge field belongs to a different graph")
    vector = vals.ndim == 1
    v = vals[:, None] if vector else vals
    if v.shape[0] != g.num_edges:
        raise GraphError(f"edge field has {v.shape[0]} rows, graph has {g.num_edges} edges")
    i, j = g.edges[:, 0], g.edges[:, 1]
    wv = g.weights[:, None] * v
    out = np.zeros((g.n, v.shape[1]))
    np.add.at(out, i, wv)
    np.add.at(out, j, -wv)
    return out[:, 0] if vector else out


def edge_inner(g: Graph, f, h) -> float:
    """Weighted inner product over undirected edges."""
    fv = f.values if isinstance(f, EdgeField) else np.asarray(f)
    hv = h.values if isinstance(h, EdgeField) else np.asarray(h)
    w = g.weights.reshape((-1,) + (1,) * (fv.ndim - 1))
    return float(np.sum(w * fv * hv))


def adjointness_check(g: Graph, trials: int = 100, d: int = 1, seed: int = 0) -> float:
    """Largest adjointness residual over random ``x`` and ``F``.

    With ``grad x = x_j - x_i`` and ``div F = sum_j w_ij F_ij`` the
    divergence is the *negative* adjoint of the gradient, so the identity
    checked is ``<grad x, F> = -<x, div F>``. The residual is relative to the
    magnitude of the terms, so it is comparable across graph sizes.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal((g.n, d))
        F = rng.standard_normal((g.num_edges, d))
        lhs = edge_inner(g, gradient(g, x), F)
        rhs = -float(np.sum(x * divergence(g, F)))
        scale = max(1.0, abs(lhs), abs(rhs))
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst


def path_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def complete_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def star_graph(n: int) -> Graph:
    """Hub 0 joined to leaves ``1..n-1``."""
    return Graph.from_edges(n, [(0, j) for j in range(1, n)])


def grid_graph(width: int, height: int) -> Graph:
    """4-connected grid; node ``r * width + c``."""
    idx = np.arange(width * height).reshape(height, width)
    horiz = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    vert = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    return Graph.from_edges(width * height, np.concatenate([horiz, vert]))


def random_graph(n: int, p: float, rng=None, connected: bool = True) -> Graph:
    """Erdos-Renyi graph; with ``connected`` a random spanning path is added."""
    rng = np.random.default_rng(rng)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    edges = [np.stack([iu[keep], ju[keep]], axis=1)]
    if connected and n > 1:
        perm = rng.permutation(n)
        edges.append(np.stack([perm[:-1], perm[1:]], axis=1))
    return Graph.from_edges(n, np.concatenate(edges))
