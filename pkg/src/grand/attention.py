"""Attention diffusivities: row-stochastic sparse operators A(X) and A(X) - I.

Everything here works on float64 torch tensors so gradients flow through the
attention weights; numpy inputs are converted on entry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import torch

from .graph import EdgeSet, Graph

DTYPE = torch.float64


class AttentionError(ValueError):
    pass


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def as_edge_set(edges) -> EdgeSet:
    if isinstance(edges, Graph):
        return edges.directed()
    if isinstance(edges, EdgeSet):
        return edges
    raise TypeError(f"expected Graph or EdgeSet, got {type(edges).__name__}")


@dataclass(eq=False)
class AttentionOperator:
    """Sparse ``n x n`` operator with one value per directed edge.

    Entries are coalesced: each ``(src, dst)`` pair appears once, ordered by
    row then column. ``values`` may carry autograd history.
    """

    n: int
    src: torch.Tensor
    dst: torch.Tensor
    values: torch.Tensor

    @property
    def nnz(self) -> int:
        return int(self.src.numel())

    def matvec(self, X: torch.Tensor) -> torch.Tensor:
        X = as_tensor(X)
        vec = X.dim() == 1
        Xm = X[:, None] if vec else X
        out = torch.zeros((self.n, Xm.shape[1]), dtype=Xm.dtype)
        out = out.index_add(0, self.src, self.values[:, None] * Xm[self.dst])
        return out[:, 0] if vec else out

    __matmul__ = matvec

    def row_sums(self) -> torch.Tensor:
        return torch.zeros(self.n, dtype=self.values.dtype).index_add(0, self.src, self.values)

    def out_degree(self) -> torch.Tensor:
        return torch.bincount(self.src, minlength=self.n)

    def diagonal(self) -> torch.Tensor:
        loop = self.src == self.dst
        return torch.zeros(self.n, dtype=self.values.dtype).index_add(
            0, self.src[loop], self.values[loop])

    def to_dense(self) -> torch.Tensor:
        M = torch.zeros((self.n, self.n), dtype=self.values.dtype)
        return M.index_put((self.src, self.dst), self.values, accumulate=True)

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values.detach().numpy(),
                              (self.src.numpy(), self.dst.numpy())), shape=(self.n, self.n))

    def edge_set(self) -> EdgeSet:
        return EdgeSet(self.n, self.src.numpy(), self.dst.numpy())

    def detach(self) -> "AttentionOperator":
        return AttentionOperator(self.n, self.src, self.dst, self.values.detach())

    def same_pattern(self, other: "AttentionOperator") -> bool:
        return (self.n == other.n and self.nnz == other.nnz
                and bool(torch.equal(self.src, other.src))
                and bool(torch.equal(self.dst, other.dst)))


def coalesce(n, src, dst, values) -> AttentionOperator:
    """Sum duplicate entries and sort by ``(row, col)``."""
    src = torch.as_tensor(src, dtype=torch.long)
    dst = torch.as_tensor(dst, dtype=torch.long)
    key = src * max(n, 1) + dst
    uniq, inv = torch.unique(key, sorted=True, return_inverse=True)
    vals = torch.zeros(uniq.numel(), dtype=values.dtype).index_add(0, inv, values)
    return AttentionOperator(n, uniq // max(n, 1), uniq % max(n, 1), vals)


def segment_softmax(logits: torch.Tensor, rows: torch.Tensor, n: int) -> torch.Tensor:
    """Softmax of ``logits`` within each group of equal ``rows``.

    Works on trailing head dimensions: ``logits`` is ``(nnz,)`` or
    ``(nnz, h)``.
    """
    shape = (n,) + tuple(logits.shape[1:])
    idx = rows.view((-1,) + (1,) * (logits.dim() - 1)).expand_as(logits)
    row_max = torch.full(shape, -math.inf, dtype=logits.dtype).scatter_reduce(
        0, idx, logits.detach(), reduce="amax", include_self=True)
    ex = torch.exp(logits - row_max.gather(0, idx))
    denom = torch.zeros(shape, dtype=logits.dtype).index_add(0, rows, ex)
    return ex / denom.gather(0, idx)


@dataclass(eq=False)
class AttentionParams:
    """Parameters of a multi-head attention diffusivity.

    Scaled dot product uses ``w_key`` and ``w_query`` of shape
    ``(heads, d_k, d)``. The Bahdanau form uses ``w`` of shape
    ``(heads, d', d)`` and ``a`` of shape ``(heads, 2 d')``.
    """

    variant: str = "scaled-dot"
    w_key: torch.Tensor | None = None
    w_query: torch.Tensor | None = None
    w: torch.Tensor | None = None
    a: torch.Tensor | None = None
    scale: str = "dk"
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.variant == "scaled-dot":
            if self.w_key is None or self.w_query is None:
                raise AttentionError("scaled-dot attention needs w_key and w_query")
            if self.w_key.dim() == 2:
                self.w_key = self.w_key[None]
            if self.w_query.dim() == 2:
                self.w_query = self.w_query[None]
            if self.w_key.shape != self.w_query.shape or self.w_key.shape[1] < 1:
                raise AttentionError("w_key and w_query must share a (heads, d_k, d) shape")
            if self.scale not in ("dk", "sqrt-dk"):
                raise AttentionError(f"unknown scale {self.scale!r}")
        elif self.variant == "bahdanau":
            if self.w is None or self.a is None:
                raise AttentionError("bahdanau attention needs w and a")
            if self.w.dim() == 2:
                self.w = self.w[None]
            if self.a.dim() == 1:
                self.a = self.a[None]
            if self.a.shape[-1] != 2 * self.w.shape[1]:
                raise AttentionError("a must have length 2 d'")
        else:
            raise AttentionError(f"unknown attention variant {self.variant!r}")

    @property
    def heads(self) -> int:
        return (self.w_key if self.variant == "scaled-dot" else self.w).shape[0]

    @property
    def d_k(self) -> int:
        return (self.w_key if self.variant == "scaled-dot" else self.w).shape[1]

    @classmethod
    def constant(cls, d: int, d_k: int, heads: int = 1, value: float | None = None,
                 scale: str = "dk") -> "AttentionParams":
        """Constant initialisation ``W_K = W_Q = c`` with ``c = 1/sqrt(d d_k)``."""
        c = 1.0 / math.sqrt(d * d_k) if value is None else value
        w = torch.full((heads, d_k, d), c, dtype=DTYPE)
        return cls("scaled-dot", w_key=w.clone(), w_query=w.clone(), scale=scale)

    @classmethod
    def random(cls, d: int, d_k: int, heads: int = 1, variant: str = "scaled-dot",
               std: float = 1.0, seed: int = 0) -> "AttentionParams":
        g = torch.Generator().manual_seed(seed)
        if variant == "scaled-dot":
            return cls(variant, w_key=std * torch.randn(heads, d_k, d, generator=g, dtype=DTYPE),
                       w_query=std * torch.randn(heads, d_k, d, generator=g, dtype=DTYPE))
        return cls(variant, w=std * torch.randn(heads, d_k, d, generator=g, dtype=DTYPE),
                   a=std * torch.randn(heads, 2 * d_k, generator=g, dtype=DTYPE))


def _edge_tensors(edges):
    es = as_edge_set(edges)
    src, dst = es.torch_index
    return es.n, src, dst


def _from_heads(n, src, dst, weights) -> AttentionOperator:
    # weights: (nnz, h)
    return AttentionOperator(n, src, dst, weights.mean(dim=1))


def scaled_dot_logits(params: AttentionParams, X, src, dst) -> torch.Tensor:
    X = as_tensor(X)
    K = torch.einsum("hkd,nd->nhk", params.w_key, X)
    Q = torch.einsum("hkd,nd->nhk", params.w_query, X)
    div = params.d_k if params.scale == "dk" else math.sqrt(params.d_k)
    return (K[src] * Q[dst]).sum(-1) / div


def scaled_dot_attention(params: AttentionParams, X, edges) -> AttentionOperator:
    """Multi-head scaled dot product attention normalised over each row's edges.

    Nodes with no outgoing edges get an empty (all-zero) row.
    """
    if params.variant != "scaled-dot":
        raise AttentionError("params are not scaled-dot")
    n, src, dst = _edge_tensors(edges)
    logits = scaled_dot_logits(params, X, src, dst)
    return _from_heads(n, src, dst, segment_softmax(logits, src, n))


def bahdanau_attention(params: AttentionParams, X, edges) -> AttentionOperator:
    """GAT-style attention: softmax of ``leakyrelu(a . [W x_i || W x_j])``."""
    if params.variant != "bahdanau":
        raise AttentionError("params are not bahdanau")
    n, src, dst = _edge_tensors(edges)
    X = as_tensor(X)
    WX = torch.einsum("hkd,nd->nhk", params.w, X)
    dp = params.w.shape[1]
    left = (WX * params.a[None, :, :dp]).sum(-1)
    right = (WX * params.a[None, :, dp:]).sum(-1)
    logits = torch.nn.functional.leaky_relu(left[src] + right[dst], params.negative_slope)
    return _from_heads(n, src, dst, segment_softmax(logits, src, n))


def uniform_attention(edges) -> AttentionOperator:
    """``a_ij = 1/deg(i)``: the random-walk normalised adjacency."""
    n, src, dst = _edge_tensors(edges)
    deg = torch.bincount(src, minlength=n).to(DTYPE)
    return AttentionOperator(n, src, dst, 1.0 / deg[src])


def attention(params: AttentionParams | None, X, edges) -> AttentionOperator:
    if params is None:
        return uniform_attention(edges)
    if params.variant == "scaled-dot":
        return scaled_dot_attention(params, X, edges)
    return bahdanau_attention(params, X, edges)


def multi_head_average(ops: Sequence[AttentionOperator]) -> AttentionOperator:
    if not ops:
        raise AttentionError("no heads to average")
    first = ops[0]
    for op in ops[1:]:
        if not first.same_pattern(op):
            raise AttentionError("attention heads have different sparsity patterns")
    vals = torch.stack([op.values for op in ops]).mean(dim=0)
    return AttentionOperator(first.n, first.src, first.dst, vals)


def shift_operator(A: AttentionOperator) -> AttentionOperator:
    """``A - I`` restricted to rows with at least one edge.

    Isolated rows stay zero so their features are constant in time.
    """
    active = torch.nonzero(A.out_degree() > 0).ravel()
    src = torch.cat([A.src, active])
    dst = torch.cat([A.dst, active])
    vals = torch.cat([A.values, -torch.ones(active.numel(), dtype=A.values.dtype)])
    return coalesce(A.n, src, dst, vals)


def random_stochastic(edges, seed=0, concentration: float = 1.0) -> AttentionOperator:
    """Random row-stochastic operator on ``edges`` (softmax of Gaussian logits)."""
    n, src, dst = _edge_tensors(edges)
    g = torch.Generator().manual_seed(seed)
    logits = concentration * torch.randn(src.numel(), generator=g, dtype=DTYPE)
    return AttentionOperator(n, src, dst, segment_softmax(logits, src, n))
