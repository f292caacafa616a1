"""Experiment drivers shared by the CLI and the scripts: depth, solver and rewiring sweeps."""
from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass

import torch

from .attention import AttentionOperator
from .data import Dataset, largest_connected_component, synth_sbm
from .integrators import SchemeConfig, SolverError, integrate
from .model import GrandModel, ModelConfig, TrainConfig, train
from .rewiring import RewireConfig


def cora_like(seed: int = 0, n: int = 2708, blocks: int = 7, mean_degree: float = 3.9,
              ratio: float = 10.0, feat_noise: float = 1.0) -> Dataset:
    """Sparse SBM with roughly citation-graph size and degree, largest component only."""
    # expected degree = (n / blocks) p_in + n (blocks - 1) / blocks p_out, with p_in = ratio p_out
    p_out = mean_degree / (n / blocks * ratio + n * (blocks - 1) / blocks)
    ds = synth_sbm(blocks=blocks, n=n, p_in=ratio * p_out, p_out=p_out, feat_noise=feat_noise,
                   seed=seed, require_connected=False)
    return largest_connected_component(ds)


# -- frozen-system solver comparison ------------------------------------------

def frozen_system(ds: Dataset, d: int = 16, seed: int = 0):
    """Initial state and frozen ``A - I`` of an untrained linear model on ``ds``."""
    model = GrandModel(ModelConfig(ds.features.shape[1], ds.num_classes, d=d, seed=seed))
    with torch.no_grad():
        X0 = model.encode(ds.features)
        Abar = model.diffusion_operator(X0, ds.graph.directed())
    return X0, AttentionOperator(Abar.n, Abar.src, Abar.dst, Abar.values.detach())


@dataclass
class SolverRow:
    scheme: str
    tau: float
    seconds: float
    error: float
    diverged: bool
    steps: int
    nfe: int


def reference_solution(Abar, X0, T, atol=1e-12, rtol=1e-10):
    X, _ = integrate(Abar, X0, SchemeConfig(scheme="dopri5", T=T, tau=min(T, 0.1),
                                            atol=atol, rtol=rtol))
    return X


def solver_compare(Abar, X0, schemes, taus, T: float = 8.0, blowup: float = 10.0,
                   reference=None, clock=time.perf_counter) -> list[SolverRow]:
    """Time and error of every ``(scheme, tau)`` against a tight Dormand-Prince run.

    A run counts as diverged when it raises, produces non-finite values, or
    ends with ``max|X| > blowup * max|X(0)|``; the exact flow never leaves
    the initial range.
    """
    ref = reference_solution(Abar, X0, T) if reference is None else reference
    scale = float(ref.abs().max())
    bound = blowup * float(X0.abs().max())
    rows = []
    for scheme in schemes:
        for tau in taus:
            cfg = SchemeConfig(scheme=scheme, tau=tau, T=T)
            start = clock()
            try:
                X, trace = integrate(Abar, X0, cfg)
                ok = bool(torch.isfinite(X).all())
                top = float(X.abs().max()) if ok else math.inf
                err = float((X - ref).abs().max()) / scale if ok else math.inf
                steps, nfe = trace.steps, trace.total_nfe
            except SolverError:
                top, err, steps, nfe = math.inf, math.inf, 0, 0
            rows.append(SolverRow(scheme, float(tau), clock() - start, err,
                                  not top <= bound, steps, nfe))
    return rows


# -- depth sweep --------------------------------------------------------------

@dataclass
class DepthRow:
    T: float
    val_acc: float
    test_acc: float
    baseline_val: float
    baseline_test: float


def depth_experiment(ds: Dataset, T_values, model_cfg: ModelConfig,
                     train_cfg: TrainConfig | None = None, baseline: bool = True) -> list[DepthRow]:
    """Train the attention model and the fixed uniform-diffusion baseline at each ``T``."""
    rows = []
    for T in T_values:
        accs = []
        for att in (model_cfg.attention, "uniform") if baseline else (model_cfg.attention,):
            cfg = copy.deepcopy(model_cfg)
            cfg.attention = att
            cfg.scheme = cfg.scheme.with_(T=float(T))
            res = train(GrandModel(cfg), ds, train_cfg)
            accs += [res.val_acc, res.test_acc]
        if not baseline:
            accs += [math.nan, math.nan]
        rows.append(DepthRow(float(T), *accs))
    return rows


# -- rewiring sweep -----------------------------------------------------------

@dataclass
class RewireRow:
    K: int
    edges: int
    seconds_per_epoch: float
    val_acc: float
    test_acc: float


def rewire_sweep(ds: Dataset, K_values, model_cfg: ModelConfig,
                 train_cfg: TrainConfig | None = None) -> list[RewireRow]:
    """Train ``grand-nl-rw`` with the top-``K`` PPR edge set for every ``K``.

    ``edges`` counts directed edges of the rewired graph seen at the end of
    training; time per epoch covers rewiring, forward, backward and the
    optimiser step.
    """
    rows = []
    for K in K_values:
        cfg = copy.deepcopy(model_cfg)
        cfg.variant = "grand-nl-rw"
        base = cfg.rewire or RewireConfig()
        cfg.rewire = RewireConfig(method="ppr", alpha=base.alpha, K=int(K), rho=base.rho,
                                  allow_self_loops=base.allow_self_loops)
        model = GrandModel(cfg)
        res = train(model, ds, train_cfg)
        edges = len(res.model.rewire(ds.graph, ds.features))
        rows.append(RewireRow(int(K), edges, res.seconds_per_epoch, res.val_acc, res.test_acc))
    return rows


# -- image boundary ------------------------------------------------------------

def label_flips(model: GrandModel, ds: Dataset) -> int:
    """Nodes whose predicted label differs from the truth, over the whole image."""
    with torch.no_grad():
        pred = model(ds.graph, ds.features).argmax(dim=1).numpy()
    return int((pred != ds.labels).sum())


def boundary_experiment(ds: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig | None = None):
    """Label flips of learned-attention diffusion versus fixed uniform diffusion."""
    out = {}
    for att in (model_cfg.attention, "uniform"):
        cfg = copy.deepcopy(model_cfg)
        cfg.attention = att
        res = train(GrandModel(cfg), ds, train_cfg)
        out[att] = label_flips(res.model, ds)
    return out


# -- SVG ------------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def svg_line_chart(series: dict, title="", xlabel="", ylabel="", logx=False, logy=False,
                   width=480, height=320) -> str:
    """Minimal SVG line chart; ``series`` maps a label to ``(xs, ys)``."""
    pad_l, pad_r, pad_t, pad_b = 60, 120, 30, 45
    tx = (lambda v: math.log10(v)) if logx else float
    ty = (lambda v: math.log10(v)) if logy else float
    pts = {k: [(tx(x), ty(y)) for x, y in zip(*v)
               if math.isfinite(y) and (not logx or x > 0) and (not logy or y > 0)]
           for k, v in series.items()}
    allp = [p for v in pts.values() for p in v] or [(0.0, 0.0)]
    x0, x1 = min(p[0] for p in allp), max(p[0] for p in allp)
    y0, y1 = min(p[1] for p in allp), max(p[1] for p in allp)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(v):
        return pad_l + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return pad_t + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
           f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="black"/>',
           f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="black"/>']
    for frac in (0.0, 0.5, 1.0):
        xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
        xl = f"{10 ** xv:.3g}" if logx else f"{xv:.3g}"
        yl = f"{10 ** yv:.3g}" if logy else f"{yv:.3g}"
        out.append(f'<text x="{sx(xv):.1f}" y="{pad_t + ph + 14}" text-anchor="middle">{xl}</text>')
        out.append(f'<text x="{pad_l - 4}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yl}</text>')
    out.append(f'<text x="{pad_l + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{pad_t + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {pad_t + ph / 2:.1f})">{ylabel}</text>')
    for i, (label, p) in enumerate(pts.items()):
        color = _COLORS[i % len(_COLORS)]
        if p:
            path = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in p)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        ly = pad_t + 14 * i + 6
        out.append(f'<line x1="{pad_l + pw + 10}" y1="{ly}" x2="{pad_l + pw + 25}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{pad_l + pw + 30}" y="{ly + 4}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

