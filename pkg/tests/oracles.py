"""Dense, deliberately naive reference implementations used only by the tests.

Nothing here imports the package's numerical code paths: each oracle is a
direct transcription of the defining formula into numpy / scipy.
"""
import math

import numpy as np
import scipy.linalg


def dense_adjacency_mask(n, pairs):
    M = np.zeros((n, n), dtype=bool)
    for i, j in pairs:
        M[i, j] = True
        M[j, i] = True
    return M


def incidence(n, canon_edges):
    """Signed incidence: row per edge (i<j), -1 at i, +1 at j."""
    B = np.zeros((len(canon_edges), n))
    for k, (i, j) in enumerate(canon_edges):
        B[k, i] = -1.0
        B[k, j] = 1.0
    return B


def row_softmax(L, mask):
    """Softmax of each row of ``L`` restricted to ``mask``; empty rows are zero."""
    A = np.zeros_like(L)
    for i in range(L.shape[0]):
        cols = np.nonzero(mask[i])[0]
        if cols.size == 0:
            continue
        z = np.array([L[i, j] for j in cols])
        e = np.array([math.exp(v - z.max()) for v in z])
        A[i, cols] = e / e.sum()
    return A


def scaled_dot(WK, WQ, X, mask, div=None):
    """Head-averaged dense attention; ``WK``/``WQ`` are ``(h, d_k, d)``."""
    out = np.zeros(mask.shape)
    for h in range(WK.shape[0]):
        K = X @ WK[h].T
        Q = X @ WQ[h].T
        L = K @ Q.T / (WK.shape[1] if div is None else div)
        out += row_softmax(L, mask)
    return out / WK.shape[0]


def bahdanau(W, a, X, mask, slope=0.2):
    out = np.zeros(mask.shape)
    n = X.shape[0]
    for h in range(W.shape[0]):
        WX = X @ W[h].T
        L = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                s = float(a[h] @ np.concatenate([WX[i], WX[j]]))
                L[i, j] = s if s > 0 else slope * s
        out += row_softmax(L, mask)
    return out / W.shape[0]


def expm_solution(Abar_dense, X0, T):
    return scipy.linalg.expm(T * Abar_dense) @ X0


def eig_solution(Abar_dense, X0, T):
    """``exp(T Abar) X0`` through an eigendecomposition (diagonalisable case)."""
    lam, V = np.linalg.eig(Abar_dense)
    return np.real(V @ np.diag(np.exp(T * lam)) @ np.linalg.solve(V, X0))


def implicit_euler(Abar_dense, X0, tau, steps):
    B = np.eye(Abar_dense.shape[0]) - tau * Abar_dense
    X = X0
    for _ in range(steps):
        X = np.linalg.solve(B, X)
    return X


def ppr_dense(W, alpha):
    deg = W.sum(axis=1)
    P = np.zeros_like(W)
    for i in range(W.shape[0]):
        if deg[i] > 0:
            P[i] = W[i] / deg[i]
        else:
            P[i, i] = 1.0
    return alpha * np.linalg.inv(np.eye(W.shape[0]) - (1 - alpha) * P)


def cross_entropy(logits, labels, mask):
    total, count = 0.0, 0
    for i in np.nonzero(mask)[0]:
        z = logits[i] - logits[i].max()
        total += -(z[labels[i]] - math.log(np.exp(z).sum()))
        count += 1
    return total / count


def label_propagation(W, labels, train, iters=200):
    """Harmonic label propagation with clamped training labels; returns predictions."""
    n = W.shape[0]
    C = int(labels.max()) + 1
    deg = W.sum(axis=1)
    F = np.zeros((n, C))
    F[train, labels[train]] = 1.0
    clamp = F[train].copy()
    for _ in range(iters):
        F = (W @ F) / np.maximum(deg, 1)[:, None]
        F[train] = clamp
    return F.argmax(axis=1)
