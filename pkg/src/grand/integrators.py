"""Time integrators for the graph diffusion ODE ``dX/dt = Abar(X) X``.

Fixed-step schemes (explicit/implicit Euler, RK4, AB4, AM4 predictor-corrector),
the embedded Dormand-Prince 5(4) pair and the dense matrix exponential for the
frozen-attention case. Arithmetic is plain tensor algebra, so the explicit
schemes are differentiable end to end.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import torch

from .attention import AttentionOperator, as_tensor

SCHEMES = ("explicit-euler", "implicit-euler", "rk4", "ab4", "am4-pc", "dopri5", "expm")
FIXED_STEP = ("explicit-euler", "implicit-euler", "rk4", "ab4", "am4-pc")

# Adams-Bashforth 4 and Adams-Moulton 4 (3-step implicit) weights, newest first.
AB4 = (55.0, -59.0, 37.0, -9.0)
AM4 = (9.0, 19.0, -5.0, 1.0)

# Dormand-Prince 5(4)
DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
DP_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
DP_BSTAR = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)


class SolverError(RuntimeError):
    """Numerical failure inside a solver."""


class SolverDivergenceError(SolverError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


class NonConvergenceError(SolverError):
    def __init__(self, msg, delta):
        super().__init__(f"{msg} (last change {delta:.3e})")
        self.delta = delta


class StiffnessError(SolverError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class SchemeConfig:
    """Integrator settings.

    ``ts`` is a tolerance scale; when set it overrides ``atol``/``rtol`` with
    ``(ts * 1e-12, ts * 1e-6)``. ``jacobi_max_iters=None`` picks a budget from
    the Jacobi contraction factor (at least ``10 n``).
    """

    scheme: str = "rk4"
    tau: float = 1.0
    T: float = 1.0
    atol: float = 1e-9
    rtol: float = 1e-7
    ts: float | None = None
    pc_threshold: float = 1e-9
    pc_max_iters: int = 100
    linear_solve: str = "jacobi"
    jacobi_tol: float = 1e-10
    jacobi_max_iters: int | None = None
    nonlinear: bool = False
    dense_threshold: int = 512
    expm_fallback: bool = True
    max_steps: int = 1_000_000

    def __post_init__(self):
        if self.ts is not None:
            if self.ts <= 0:
                raise ConfigError("ts must be positive")
            self.atol, self.rtol = self.ts * 1e-12, self.ts * 1e-6
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if not self.T >= 0:
            raise ConfigError("T must be nonnegative")
        if not (self.atol > 0 and self.rtol > 0):
            raise ConfigError("atol and rtol must be positive")
        if self.linear_solve != "jacobi":
            raise ConfigError("only the jacobi linear solver is available")

    def with_(self, **kw) -> "SchemeConfig":
        kw.setdefault("ts", None)
        return replace(self, **kw)


@dataclass
class SolverTrace:
    """Per accepted step: time, step used, error estimate, channel bounds, evaluations."""

    scheme: str
    x0_min: np.ndarray
    x0_max: np.ndarray
    slack: float = 1e-9
    t: list = field(default_factory=list)
    tau: list = field(default_factory=list)
    err: list = field(default_factory=list)
    mins: list = field(default_factory=list)
    maxs: list = field(default_factory=list)
    nfe: list = field(default_factory=list)
    rejected: int = 0
    inner_iters: list = field(default_factory=list)

    @classmethod
    def start(cls, scheme, X0, slack=1e-9):
        x = _np(X0)
        return cls(scheme, x.min(axis=0), x.max(axis=0), slack)

    def record(self, t, tau, X, nfe, err=float("nan"), inner=0):
        x = _np(X)
        self.t.append(float(t))
        self.tau.append(float(tau))
        self.err.append(float(err))
        self.mins.append(x.min(axis=0))
        self.maxs.append(x.max(axis=0))
        self.nfe.append(int(nfe))
        self.inner_iters.append(int(inner))

    @property
    def steps(self) -> int:
        return len(self.t)

    @property
    def total_nfe(self) -> int:
        return self.nfe[-1] if self.nfe else 0

    def rows(self):
        for k in range(self.steps):
            yield (self.t[k], self.tau[k], self.err[k],
                   float(self.mins[k].min()), float(self.maxs[k].max()), self.nfe[k])

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t,tau,err,min,max,nfe\n")
            for row in self.rows():
                fh.write(",".join(repr(float(v)) if i < 5 else str(v)
                                  for i, v in enumerate(row)) + "\n")


def _np(X) -> np.ndarray:
    x = X.detach().numpy() if isinstance(X, torch.Tensor) else np.asarray(X, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _absmax(x) -> float:
    if isinstance(x, torch.Tensor):
        return float(x.detach().abs().max()) if x.numel() else 0.0
    return float(np.max(np.abs(x))) if np.size(x) else 0.0


class Dynamics:
    """Right-hand side ``f(X) = Abar(X) X`` with an evaluation counter.

    Frozen dynamics hold one operator (linear diffusion); otherwise ``builder``
    rebuilds ``Abar`` from the current state on every evaluation.
    """

    def __init__(self, operator: AttentionOperator | None = None,
                 builder: Callable[[torch.Tensor], AttentionOperator] | None = None):
        if (operator is None) == (builder is None):
            raise ConfigError("give exactly one of operator or builder")
        self._operator = operator
        self._builder = builder
        self.nfe = 0

    @property
    def frozen(self) -> bool:
        return self._operator is not None

    def operator(self, X=None) -> AttentionOperator:
        return self._operator if self.frozen else self._builder(X)

    def __call__(self, X):
        self.nfe += 1
        return self.operator(X).matvec(X)


class _Callable:
    """Adapter giving a bare ``f(X)`` callable an evaluation counter."""

    frozen = False

    def __init__(self, f):
        self.f = f
        self.nfe = 0

    def operator(self, X=None):
        raise ConfigError("this scheme needs the diffusion operator, not just f")

    def __call__(self, X):
        self.nfe += 1
        return self.f(X)


def as_dynamics(dyn):
    if isinstance(dyn, (Dynamics, _Callable)):
        return dyn
    if isinstance(dyn, AttentionOperator):
        return Dynamics(operator=dyn)
    if callable(dyn):
        return _Callable(dyn)
    raise TypeError(f"cannot build dynamics from {type(dyn).__name__}")


def _rhs(op_or_f):
    if isinstance(op_or_f, AttentionOperator):
        return op_or_f.matvec
    return op_or_f


# ---------------------------------------------------------------- single steps

def explicit_euler_step(op_or_f, X, tau):
    """``X + tau * Abar X``."""
    return X + tau * _rhs(op_or_f)(X)


def jacobi_budget(Abar: AttentionOperator, tau, tol, scale=1.0) -> int:
    d = Abar.diagonal().detach().abs()
    q = float((tau * d / (1.0 + tau * d)).max()) if d.numel() else 0.0
    need = 0 if q <= 0 else math.ceil(math.log(tol / max(scale, tol)) / math.log(q))
    return max(10 * Abar.n, 2 * need + 10)


def implicit_euler_step(Abar: AttentionOperator, X, tau, tol=1e-10, max_iters=None):
    """Solve ``(I - tau Abar) X' = X`` by Jacobi iteration.

    Converges because ``I - tau Abar`` is strictly diagonally dominant for a
    row-stochastic ``A``. Returns ``(X', iterations)``.
    """
    X = as_tensor(X)
    d = Abar.diagonal()
    shape = (-1,) + (1,) * (X.dim() - 1)
    diag = (1.0 - tau * d).view(shape)
    dcol = d.view(shape)
    if max_iters is None:
        max_iters = jacobi_budget(Abar, tau, tol, _absmax(X))
    Y = X
    res = float("inf")
    for it in range(1, max_iters + 1):
        AY = Abar.matvec(Y)
        res = _absmax(X - Y + tau * AY)
        if res <= tol:
            return Y, it - 1
        Y = (X + tau * (AY - dcol * Y)) / diag
    AY = Abar.matvec(Y)
    res = _absmax(X - Y + tau * AY)
    if res <= tol:
        return Y, max_iters
    raise SolverDivergenceError(f"Jacobi did not reach {tol:g} in {max_iters} iterations", res)


def rk4_step(f, X, t, tau, k1=None):
    """Classical fourth-order Runge-Kutta step (``f`` is autonomous; ``t`` unused)."""
    k1 = f(X) if k1 is None else k1
    k2 = f(X + (tau / 2) * k1)
    k3 = f(X + (tau / 2) * k2)
    k4 = f(X + tau * k3)
    return X + (tau / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


def ab4_step(history, X, tau):
    """Adams-Bashforth 4; ``history`` holds ``f_k, f_{k-1}, f_{k-2}, f_{k-3}``."""
    if len(history) < 4:
        raise ValueError(f"AB4 needs 4 derivative evaluations, got {len(history)}")
    b = AB4
    return X + (tau / 24) * (b[0] * history[0] + b[1] * history[1]
                             + b[2] * history[2] + b[3] * history[3])


def am4_pc_step(f, history, X, tau, threshold=1e-9, max_iters=100):
    """AB4 predictor followed by fixed-point Adams-Moulton corrections.

    Iterates ``Y <- X + tau (9 f(Y) + 19 f_k - 5 f_{k-1} + f_{k-2}) / 24``
    until the sup-norm change is at most ``threshold``. Returns
    ``(X', corrector_passes)``.
    """
    Y = ab4_step(history, X, tau)
    known = X + (tau / 24) * (AM4[1] * history[0] + AM4[2] * history[1] + AM4[3] * history[2])
    delta = float("inf")
    for it in range(1, max_iters + 1):
        Y_new = known + (tau * AM4[0] / 24) * f(Y)
        delta = _absmax(Y_new - Y)
        Y = Y_new
        if not math.isfinite(delta):
            break
        if delta <= threshold:
            return Y, it
    raise NonConvergenceError(f"corrector did not settle in {max_iters} passes", delta)


# ---------------------------------------------------------------- whole runs

def fixed_step_schedule(T, tau):
    """Step sizes covering ``[0, T]``: ``ceil(T/tau)`` steps, the last clipped."""
    if T <= 0:
        return []
    n = max(1, math.ceil(T / tau - 1e-9))
    taus = [tau] * (n - 1)
    taus.append(T - tau * (n - 1))
    return taus


def dopri5_integrate(f, X0, T, cfg: SchemeConfig | None = None, trace=None):
    """Adaptive Dormand-Prince 5(4) on ``[0, T]``; returns ``(X(T), trace)``.

    A step is accepted when every component of the embedded error estimate
    is within ``atol + rtol * max(|x_n|, |x_{n+1}|)``. The step lands exactly
    on ``T``.
    """
    cfg = cfg or SchemeConfig(scheme="dopri5", T=T)
    dyn = as_dynamics(f)
    X = as_tensor(X0)
    if trace is None:
        slack = 10 * (cfg.atol + cfg.rtol * _absmax(X))
        trace = SolverTrace.start("dopri5", X, slack)
    if T <= 0:
        return X, trace
    t = 0.0
    tau = min(cfg.tau, T)
    k1 = dyn(X)
    steps = 0
    while t < T:
        if tau < 1e-12 * T:
            raise StiffnessError(f"step size underflow at t={t:.6g} (tau={tau:.3e})")
        last = t + tau >= T * (1 - 1e-14)
        h = T - t if last else tau
        ks = [k1]
        for i in range(1, 7):
            xi = X
            for a, k in zip(DP_A[i], ks):
                if a != 0.0:
                    xi = xi + (h * a) * k
            ks.append(dyn(xi))
        X1 = xi  # stage 7 is evaluated at the 5th-order solution
        e = h * sum((b - bs) * k for b, bs, k in zip(DP_B, DP_BSTAR, ks) if b != bs)
        etol = cfg.atol + cfg.rtol * torch.maximum(X.detach().abs(), X1.detach().abs())
        ratio = float((e.detach().abs() / etol).max()) if e.numel() else 0.0
        if not math.isfinite(ratio):
            ratio = math.inf
        if ratio <= 1.0:
            t = T if last else t + h
            X = X1
            k1 = ks[6]
            trace.record(t, h, X, dyn.nfe, err=_absmax(e))
            steps += 1
            if steps > cfg.max_steps:
                raise StiffnessError(f"more than {cfg.max_steps} accepted steps")
        else:
            trace.rejected += 1
        factor = 5.0 if ratio == 0.0 else min(5.0, max(0.2, 0.9 * ratio ** -0.2))
        tau = h * factor
    return X, trace


def expm_solve(Abar: AttentionOperator, X0, T, cfg: SchemeConfig | None = None):
    """``exp(T Abar) X0`` by dense scaling-and-squaring.

    Above ``cfg.dense_threshold`` nodes this falls back to Dormand-Prince on
    the frozen operator, or raises if the fallback is disabled.
    """
    cfg = cfg or SchemeConfig(scheme="expm", T=T)
    X0 = as_tensor(X0)
    if T == 0:
        return X0
    if Abar.n > cfg.dense_threshold:
        if not cfg.expm_fallback:
            raise ConfigError(f"n={Abar.n} exceeds dense threshold {cfg.dense_threshold}")
        X, _ = dopri5_integrate(Dynamics(operator=Abar), X0, T, cfg)
        return X
    E = torch.linalg.matrix_exp(T * Abar.to_dense())
    return E @ X0


def integrate(dynamics, X0, cfg: SchemeConfig):
    """Run the configured scheme from ``X0`` to ``cfg.T``; returns ``(X(T), trace)``.

    ``dynamics`` is a :class:`Dynamics`, a frozen ``Abar`` operator or a bare
    callable ``f(X)`` (the latter only for schemes that need just ``f``).
    """
    dyn = as_dynamics(dynamics)
    X = as_tensor(X0)
    T = cfg.T
    scheme = cfg.scheme

    if scheme == "dopri5":
        return dopri5_integrate(dyn, X, T, cfg)

    trace = SolverTrace.start(scheme, X)
    if scheme == "expm":
        if not dyn.frozen:
            raise ConfigError("expm needs frozen (linear) dynamics")
        XT = expm_solve(dyn.operator(), X, T, cfg)
        if T > 0:
            trace.record(T, T, XT, dyn.nfe)
        return XT, trace

    t = 0.0
    taus = fixed_step_schedule(T, cfg.tau)
    history: list = []
    for k, h in enumerate(taus):
        inner = 0
        clipped = h < cfg.tau * (1 - 1e-12)
        if scheme == "explicit-euler":
            X = explicit_euler_step(dyn, X, h)
        elif scheme == "implicit-euler":
            X, inner = implicit_euler_step(dyn.operator(X), X, h, cfg.jacobi_tol,
                                           cfg.jacobi_max_iters)
        elif scheme == "rk4" or clipped or k < 3:
            # RK4 also bootstraps the multistep schemes and takes their clipped last step
            if scheme in ("ab4", "am4-pc"):
                fk = dyn(X)
                history.insert(0, fk)
                X = rk4_step(dyn, X, t, h, k1=fk)
            else:
                X = rk4_step(dyn, X, t, h)
        else:
            history.insert(0, dyn(X))
            del history[4:]
            if scheme == "ab4":
                X = ab4_step(history, X, h)
            else:
                X, inner = am4_pc_step(dyn, history, X, h, cfg.pc_threshold, cfg.pc_max_iters)
        t = T if k == len(taus) - 1 else t + h
        trace.record(t, h, X, dyn.nfe, inner=inner)
    return X, trace
