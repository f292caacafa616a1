"""Numerical checks of the stability theory for the diffusion schemes.

Explicit Euler is stable when ``Q = I + tau Abar`` is a right-stochastic
matrix; implicit Euler when ``B = I - tau Abar`` is strictly diagonally
dominant, so that ``B^{-1}`` is Markov. The envelope monitor checks the
min/max principle along a solver trace.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .attention import AttentionOperator, shift_operator
from .integrators import SolverTrace

DENSE_LIMIT = 64


@dataclass
class SpectralEstimate:
    value: float
    converged: bool
    iterations: int

    def __float__(self):
        return self.value


@dataclass
class StabilityReport:
    spectral_radius_estimate: float
    row_sum_max_dev: float
    nonneg_violations: int
    diag_dominance_margin: float
    envelope_violations: list = field(default_factory=list)
    dense_checked: bool = False
    inverse_min_entry: float = 0.0
    inverse_row_sum_max_dev: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _as_scipy(M) -> sp.csr_matrix:
    if isinstance(M, AttentionOperator):
        return M.to_scipy()
    if sp.issparse(M):
        return M.tocsr()
    if isinstance(M, spla.LinearOperator):
        return M
    return sp.csr_matrix(np.asarray(M, dtype=float))


def spectral_radius(M, iters=1000, tol=1e-8, seed=0) -> SpectralEstimate:
    """Power-iteration estimate of the spectral radius.

    Uses the two-step ratio ``sqrt(|M^2 v| / |v|)`` so a dominant complex
    conjugate pair (equal moduli) still converges. Norms are max-norms, so
    the estimate never exceeds ``||M||_inf`` (1 for a stochastic matrix)
    even before convergence.
    """
    M = _as_scipy(M)
    n = M.shape[0]
    if n == 0:
        return SpectralEstimate(0.0, True, 0)
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.abs(v).max()
    est = math.nan
    for it in range(1, iters + 1):
        w = M @ (M @ v)
        nw = np.abs(w).max()
        if nw == 0.0:
            return SpectralEstimate(0.0, True, it)
        new = math.sqrt(nw)
        if abs(new - est) <= tol * max(1.0, new):
            return SpectralEstimate(new, True, it)
        est = new
        v = w / nw
    return SpectralEstimate(est, False, iters)


def _shifted(A: AttentionOperator) -> sp.csr_matrix:
    return shift_operator(A.detach()).to_scipy()


def step_operator(A: AttentionOperator, tau) -> sp.csr_matrix:
    """``Q = I + tau (A - I)``."""
    return (sp.identity(A.n, format="csr") + tau * _shifted(A)).tocsr()


def implicit_operator(A: AttentionOperator, tau) -> sp.csr_matrix:
    """``B = I - tau (A - I)``."""
    return (sp.identity(A.n, format="csr") - tau * _shifted(A)).tocsr()


def diag_dominance_margin(M: sp.csr_matrix) -> float:
    """``min_i |m_ii| - sum_{j != i} |m_ij|``."""
    M = M.tocsr()
    diag = np.abs(M.diagonal())
    off = np.asarray(abs(M).sum(axis=1)).ravel() - diag
    return float((diag - off).min()) if M.shape[0] else math.inf


def verify_explicit_stability(A: AttentionOperator, tau) -> StabilityReport:
    """Check that ``Q`` is right-stochastic: unit rows, no negative entries.

    The margin field reports diagonal dominance of ``Q`` itself.
    """
    Q = step_operator(A, tau)
    rows = np.asarray(Q.sum(axis=1)).ravel()
    Q.eliminate_zeros()
    return StabilityReport(
        spectral_radius_estimate=spectral_radius(Q).value,
        row_sum_max_dev=float(np.abs(rows - 1).max()) if A.n else 0.0,
        nonneg_violations=int((Q.data < 0).sum()),
        diag_dominance_margin=diag_dominance_margin(Q),
    )


def explicit_threshold(A: AttentionOperator) -> float:
    """Largest ``tau`` with ``Q`` entrywise nonnegative: ``1 / (1 - min_i a_ii)``."""
    active = A.out_degree().numpy() > 0
    if not active.any():
        return math.inf
    a_min = float(A.diagonal().detach().numpy()[active].min())
    return math.inf if a_min >= 1.0 else 1.0 / (1.0 - a_min)


def verify_implicit_stability(A: AttentionOperator, tau, dense_limit=DENSE_LIMIT) -> StabilityReport:
    """Diagonal dominance of ``B``; on small graphs also a dense Markov check of ``B^{-1}``."""
    B = implicit_operator(A, tau)
    rows = np.asarray(B.sum(axis=1)).ravel()
    report = StabilityReport(
        spectral_radius_estimate=math.nan,
        row_sum_max_dev=float(np.abs(rows - 1).max()) if A.n else 0.0,
        nonneg_violations=0,
        diag_dominance_margin=diag_dominance_margin(B),
    )
    if A.n <= dense_limit:
        Binv = np.linalg.inv(B.toarray())
        report.dense_checked = True
        report.inverse_min_entry = float(Binv.min())
        report.inverse_row_sum_max_dev = float(np.abs(Binv.sum(axis=1) - 1).max())
        report.nonneg_violations = int((Binv < -1e-12).sum())
        report.spectral_radius_estimate = float(np.abs(np.linalg.eigvals(Binv)).max())
    else:
        lu = spla.splu(B.tocsc())
        Binv = spla.LinearOperator(B.shape, matvec=lu.solve, dtype=float)
        report.spectral_radius_estimate = spectral_radius(Binv).value
    return report


def dense_eigen_real_max(A: AttentionOperator) -> float:
    """Largest real part of the eigenvalues of ``A - I`` (dense)."""
    return float(np.linalg.eigvals(_shifted(A).toarray()).real.max())


def envelope_monitor(trace: SolverTrace, X0=None, slack=None) -> list:
    """Steps where a channel's max rose or its min fell beyond ``slack``
    relative to the previous step.

    Returns ``(step, channel, amount)`` triples; step 0 is the first
    accepted step, compared against the initial state.
    """
    slack = trace.slack if slack is None else slack
    if X0 is not None:
        x = np.asarray(X0.detach().numpy() if hasattr(X0, "detach") else X0, dtype=float)
        x = x[:, None] if x.ndim == 1 else x
        prev_min, prev_max = x.min(axis=0), x.max(axis=0)
    else:
        prev_min, prev_max = trace.x0_min, trace.x0_max
    out = []
    for k in range(trace.steps):
        up = trace.maxs[k] - prev_max
        down = prev_min - trace.mins[k]
        for c in np.nonzero(up > slack)[0]:
            out.append((k, int(c), float(up[c])))
        for c in np.nonzero(down > slack)[0]:
            out.append((k, int(c), float(down[c])))
        prev_min, prev_max = trace.mins[k], trace.maxs[k]
    return out
