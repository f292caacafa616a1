"""Changing the spatial discretisation: PPR densification and attention thresholding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch

from .attention import AttentionOperator, segment_softmax
from .graph import EdgeSet, Graph


class RewireError(RuntimeError):
    pass


@dataclass
class RewireConfig:
    """``method='ppr'`` densifies with personalised PageRank and keeps the top ``K``
    entries per node; both methods then drop edges with attention ``<= rho``."""

    method: str = "ppr"
    alpha: float = 0.15
    K: int = 64
    rho: float = 0.0
    allow_self_loops: bool = True
    tol: float = 1e-8
    max_iter: int = 10_000

    def __post_init__(self):
        if self.method not in ("ppr", "attention-threshold"):
            raise ValueError(f"unknown rewiring method {self.method!r}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.method == "ppr" and self.K < 1:
            raise ValueError("K must be at least 1")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")


def _ppr_blocks(g: Graph, alpha, tol, max_iter, block):
    n = g.n
    W = g.adjacency()
    deg = np.asarray(W.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)
    # isolated nodes: the walk stays put
    P = (sp.diags(inv) @ W + sp.diags((deg == 0).astype(float))).tocsr()
    PT = P.T.tocsr()
    for start in range(0, n, block):
        rows = np.arange(start, min(n, start + block))
        E = np.zeros((rows.size, n))
        E[np.arange(rows.size), rows] = alpha
        R = E
        for _ in range(max_iter):
            R_new = E + (1 - alpha) * (PT @ R.T).T
            delta = np.abs(R_new - R).max()
            R = R_new
            if delta <= tol:
                break
        else:
            raise RewireError(f"PPR power iteration did not converge in {max_iter} sweeps")
        yield rows, R


def ppr_matrix(g: Graph, alpha: float, tol=1e-8, max_iter=10_000, block=1024) -> np.ndarray:
    """Dense personalised PageRank matrix ``alpha (I - (1 - alpha) D^-1 W)^-1``.

    Row ``i`` is the PPR vector seeded at node ``i``, computed by the
    fixed-point iteration ``S <- alpha I + (1 - alpha) S P`` one block of
    seeds at a time.
    """
    S = np.zeros((g.n, g.n))
    for rows, R in _ppr_blocks(g, alpha, tol, max_iter, block):
        S[rows] = R
    return S


def ppr_topk(g: Graph, alpha: float, K: int, tol=1e-8, max_iter=10_000, block=1024):
    """Largest ``K`` nonzero PPR scores of every node: ``(rows, cols, scores)``.

    Only one block of PPR vectors is held in memory at a time. Ties are
    broken towards the lower column index.
    """
    k = min(K, g.n)
    out_r, out_c, out_v = [], [], []
    for rows, R in _ppr_blocks(g, alpha, tol, max_iter, block):
        order = np.argsort(-R, axis=1, kind="stable")[:, :k]
        r = np.repeat(rows, order.shape[1])
        c = order.ravel()
        v = R[np.repeat(np.arange(rows.size), order.shape[1]), c]
        keep = v > 0
        out_r.append(r[keep])
        out_c.append(c[keep])
        out_v.append(v[keep])
    if not out_r:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0)
    return np.concatenate(out_r), np.concatenate(out_c), np.concatenate(out_v)


def ppr_densify(g: Graph, alpha: float = 0.15, K: int = 64, tol=1e-8, max_iter=10_000,
                allow_self_loops: bool = True) -> Graph:
    """Replace the edges by the top-``K`` PPR entries per node, symmetrised by union.

    The weight of an undirected edge is the larger of its two directed scores.
    """
    rows, cols, vals = ppr_topk(g, alpha, K, tol, max_iter)
    if not allow_self_loops:
        off = rows != cols
        rows, cols, vals = rows[off], cols[off], vals[off]
    lo, hi = np.minimum(rows, cols), np.maximum(rows, cols)
    key = lo * max(g.n, 1) + hi
    order = np.lexsort((-vals, key))
    key, lo, hi, vals = key[order], lo[order], hi[order], vals[order]
    first = np.ones(key.size, dtype=bool)
    first[1:] = key[1:] != key[:-1]
    return Graph.from_edges(g.n, np.stack([lo[first], hi[first]], axis=1), vals[first],
                            allow_self_loops=allow_self_loops)


def threshold_rewire(A: AttentionOperator, rho: float) -> EdgeSet:
    """Directed edges with ``a_ij > rho``; nodes left with nothing keep a self-loop."""
    vals = A.values.detach()
    keep = vals > rho
    src = A.src[keep].numpy()
    dst = A.dst[keep].numpy()
    had = A.out_degree().numpy() > 0
    covered = np.zeros(A.n, dtype=bool)
    covered[src] = True
    orphans = np.nonzero(had & ~covered)[0]
    return EdgeSet(A.n, np.concatenate([src, orphans]), np.concatenate([dst, orphans]))


def renormalize(A: AttentionOperator, edges: EdgeSet) -> AttentionOperator:
    """Restrict ``A`` to ``edges`` and rescale every row to sum to one.

    Self-loops that ``A`` did not contain (orphan fallbacks) get weight 1.
    """
    n = A.n
    key_a = (A.src * n + A.dst).numpy()
    key_e = edges.src * n + edges.dst
    pos = np.searchsorted(key_a, key_e)
    pos = np.clip(pos, 0, max(len(key_a) - 1, 0))
    found = key_a[pos] == key_e if len(key_a) else np.zeros(len(key_e), dtype=bool)
    src = torch.from_numpy(edges.src)
    dst = torch.from_numpy(edges.dst)
    vals = torch.where(torch.from_numpy(found), A.values[torch.from_numpy(pos)],
                       torch.ones(len(key_e), dtype=A.values.dtype))
    # log-space renormalisation keeps the gradient path of the kept weights
    w = segment_softmax(torch.log(vals), src, n)
    return AttentionOperator(n, src, dst, w)
