"""Encoder, attention diffusion block and decoder, with a full-batch training loop.

Gradients are taken by backpropagating through the discrete solver steps, so
training is limited to the explicit fixed-step schemes.
"""
from __future__ import annotations

import copy
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .attention import DTYPE, AttentionParams, attention, shift_operator
from .data import Dataset
from .graph import EdgeSet, Graph
from .integrators import ConfigError, Dynamics, SchemeConfig, SolverError, integrate
from .rewiring import RewireConfig, ppr_densify, threshold_rewire

VARIANTS = ("grand-l", "grand-nl", "grand-nl-rw")
ATTENTIONS = ("scaled-dot", "bahdanau", "uniform")
TRAINABLE_SCHEMES = ("explicit-euler", "rk4", "ab4")


class UnsupportedConfigError(ConfigError):
    pass


class TrainingDivergenceError(SolverError):
    pass


@dataclass
class ModelConfig:
    """Dimensions and diffusion settings.

    ``attention='uniform'`` replaces the learned diffusivity by the fixed
    random-walk operator ``1/deg(i)``; it has no attention parameters.
    """

    d_in: int
    num_classes: int
    d: int = 64
    d_k: int | None = None
    heads: int = 1
    variant: str = "grand-l"
    attention: str = "scaled-dot"
    scale: str = "dk"
    scheme: SchemeConfig = field(default_factory=lambda: SchemeConfig(scheme="rk4", tau=1.0, T=4.0))
    rewire: RewireConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.attention not in ATTENTIONS:
            raise ConfigError(f"unknown attention {self.attention!r}; choose from {ATTENTIONS}")
        if min(self.d_in, self.num_classes, self.d, self.heads) < 1:
            raise ConfigError("dimensions must be positive")
        if self.d_k is None:
            self.d_k = self.d
        if self.variant == "grand-nl-rw" and self.rewire is None:
            self.rewire = RewireConfig()

    def to_dict(self) -> dict:
        out = asdict(self)
        out["scheme"] = asdict(self.scheme)
        out["rewire"] = None if self.rewire is None else asdict(self.rewire)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["scheme"] = SchemeConfig(**{**d["scheme"], "ts": None})
        d["rewire"] = None if d.get("rewire") is None else RewireConfig(**d["rewire"])
        return cls(**d)


def _uniform_(t: torch.Tensor, bound: float, gen: torch.Generator):
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)


class GrandModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        self.encoder = nn.Linear(cfg.d_in, cfg.d, dtype=DTYPE)
        self.decoder = nn.Linear(cfg.d, cfg.num_classes, dtype=DTYPE)
        for lin in (self.encoder, self.decoder):
            bound = 1.0 / math.sqrt(lin.in_features)
            _uniform_(lin.weight, bound, gen)
            _uniform_(lin.bias, bound, gen)
        if cfg.attention == "scaled-dot":
            init = AttentionParams.constant(cfg.d, cfg.d_k, cfg.heads, scale=cfg.scale)
            self.w_key = nn.Parameter(init.w_key)
            self.w_query = nn.Parameter(init.w_query)
        elif cfg.attention == "bahdanau":
            c = 1.0 / math.sqrt(cfg.d * cfg.d_k)
            self.w = nn.Parameter(torch.full((cfg.heads, cfg.d_k, cfg.d), c, dtype=DTYPE))
            self.a = nn.Parameter(torch.full((cfg.heads, 2 * cfg.d_k), c, dtype=DTYPE))
        self.attention_evals = 0
        self._ppr_cache: tuple | None = None

    # -- pieces -----------------------------------------------------------

    def encode(self, X_in) -> torch.Tensor:
        X_in = torch.as_tensor(X_in, dtype=DTYPE)
        if X_in.dim() != 2 or X_in.shape[1] != self.cfg.d_in:
            raise ConfigError(f"expected n x {self.cfg.d_in} input, got {tuple(X_in.shape)}")
        return self.encoder(X_in)

    def decode(self, X) -> torch.Tensor:
        return self.decoder(X)

    def attention_params(self) -> AttentionParams | None:
        if self.cfg.attention == "scaled-dot":
            return AttentionParams("scaled-dot", w_key=self.w_key, w_query=self.w_query,
                                   scale=self.cfg.scale)
        if self.cfg.attention == "bahdanau":
            return AttentionParams("bahdanau", w=self.w, a=self.a)
        return None

    def diffusion_operator(self, X, edges):
        self.attention_evals += 1
        return shift_operator(attention(self.attention_params(), X, edges))

    def dynamics(self, X0, edges) -> Dynamics:
        if self.cfg.variant == "grand-l":
            return Dynamics(operator=self.diffusion_operator(X0, edges))
        return Dynamics(builder=lambda X: self.diffusion_operator(X, edges))

    def rewire(self, g: Graph, X_in) -> EdgeSet:
        """New edge set for ``grand-nl-rw``, computed from features at ``t = 0``."""
        rc = self.cfg.rewire or RewireConfig()
        base = g
        if rc.method == "ppr":
            if self._ppr_cache is None or self._ppr_cache[0] is not g:
                dense = ppr_densify(g, rc.alpha, rc.K, rc.tol, rc.max_iter, rc.allow_self_loops)
                self._ppr_cache = (g, dense)
            base = self._ppr_cache[1]
        with torch.no_grad():
            A = attention(self.attention_params(), self.encode(X_in), base)
        return threshold_rewire(A, rc.rho)

    def forward(self, g: Graph, X_in, edges: EdgeSet | None = None, scheme: SchemeConfig | None = None):
        """Logits ``decode(X(T))``; ``edges`` overrides the graph's edge set."""
        scheme = scheme or self.cfg.scheme
        X0 = self.encode(X_in)
        if edges is None:
            edges = self.rewire(g, X_in) if self.cfg.variant == "grand-nl-rw" else g.directed()
        if scheme.T == 0:
            return self.decode(X0)
        XT, _ = integrate(self.dynamics(X0, edges), X0, scheme)
        return self.decode(XT)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def loss(logits: torch.Tensor, labels, mask) -> torch.Tensor:
    """Mean cross entropy over the masked nodes."""
    mask = torch.as_tensor(np.asarray(mask, dtype=bool))
    if not bool(mask.any()):
        raise ValueError("loss mask selects no nodes")
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    return nn.functional.cross_entropy(logits[mask], labels[mask])


def accuracy(logits: torch.Tensor, labels, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return math.nan
    pred = logits.detach().argmax(dim=1).numpy()
    return float((pred[mask] == np.asarray(labels)[mask]).mean())


def check_trainable(model: GrandModel):
    if model.cfg.scheme.scheme not in TRAINABLE_SCHEMES:
        raise UnsupportedConfigError(
            f"gradients need an explicit fixed-step scheme {TRAINABLE_SCHEMES}, "
            f"got {model.cfg.scheme.scheme!r}")


def gradients(model: GrandModel, ds: Dataset, split: str = "train", edges=None) -> dict:
    """Reverse-mode gradients of the training loss through every solver step."""
    check_trainable(model)
    model.zero_grad()
    out = loss(model(ds.graph, ds.features, edges=edges), ds.labels, ds.mask(split))
    out.backward()
    return {name: p.grad.detach().clone() for name, p in model.named_parameters()}


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 0.01
    optimizer: str = "adam"
    weight_decay: float = 0.0
    patience: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")


@dataclass
class History:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)

    def append(self, epoch, train_loss, val_acc, test_acc):
        self.epoch.append(epoch)
        self.train_loss.append(train_loss)
        self.val_acc.append(val_acc)
        self.test_acc.append(test_acc)

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,val_acc,test_acc\n")
            for row in zip(self.epoch, self.train_loss, self.val_acc, self.test_acc):
                fh.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r}\n")


@dataclass
class TrainResult:
    model: GrandModel
    history: History
    best_epoch: int
    val_acc: float
    test_acc: float
    seconds_per_epoch: float = 0.0


def evaluate(model: GrandModel, ds: Dataset, edges=None, scheme=None) -> dict:
    with torch.no_grad():
        logits = model(ds.graph, ds.features, edges=edges, scheme=scheme)
    return {k: accuracy(logits, ds.labels, ds.mask(k)) for k in ("train", "val", "test")}


def train(model: GrandModel, ds: Dataset, cfg: TrainConfig | None = None, clock=None) -> TrainResult:
    """Full-batch training; returns the checkpoint with the best validation accuracy.

    ``seconds_per_epoch`` is the median over epochs of the update step time
    (rewiring, forward, backward, optimiser), excluding evaluation.

    ``grand-nl-rw`` recomputes its edge set once at the start of each epoch.
    """
    cfg = cfg or TrainConfig()
    clock = clock or time.perf_counter
    check_trainable(model)
    torch.manual_seed(cfg.seed)
    params = list(model.parameters())
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.SGD(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    train_mask = ds.mask("train")
    hist = History()
    best = (-1.0, -1, math.nan, copy.deepcopy(model.state_dict()))
    since_best = 0
    epoch_seconds = []
    rewiring = model.cfg.variant == "grand-nl-rw"
    edges = model.rewire(ds.graph, ds.features) if rewiring else None
    for epoch in range(cfg.epochs):
        start = clock()
        if rewiring and epoch > 0:
            edges = model.rewire(ds.graph, ds.features)
        model.train()
        opt.zero_grad()
        logits = model(ds.graph, ds.features, edges=edges)
        value = loss(logits, ds.labels, train_mask)
        if not torch.isfinite(value):
            raise TrainingDivergenceError(f"loss became {float(value.detach())} at epoch {epoch}")
        value.backward()
        opt.step()
        epoch_seconds.append(clock() - start)
        if rewiring:
            # the edge set of the next epoch, so evaluation sees what eval() will see
            edges = model.rewire(ds.graph, ds.features)
        accs = evaluate(model, ds, edges=edges)
        hist.append(epoch, float(value.detach()), accs["val"], accs["test"])
        if accs["val"] > best[0]:
            best = (accs["val"], epoch, accs["test"], copy.deepcopy(model.state_dict()))
            since_best = 0
        else:
            since_best += 1
            if cfg.patience is not None and since_best >= cfg.patience:
                break
    if cfg.epochs == 0:
        accs = evaluate(model, ds)
        best = (accs["val"], -1, accs["test"], best[3])
    model.load_state_dict(best[3])
    return TrainResult(model, hist, best[1], best[0], best[2],
                       statistics.median(epoch_seconds) if epoch_seconds else 0.0)


def depth_sweep(ds: Dataset, T_values, model_cfg: ModelConfig, train_cfg: TrainConfig | None = None):
    """Train one model per integration time; returns ``[(T, val_acc, test_acc)]``."""
    rows = []
    for T in T_values:
        cfg = copy.deepcopy(model_cfg)
        cfg.scheme = cfg.scheme.with_(T=float(T))
        res = train(GrandModel(cfg), ds, train_cfg)
        rows.append((float(T), res.val_acc, res.test_acc))
    return rows


# -- checkpoints ------------------------------------------------------------

def checkpoint_dict(model: GrandModel) -> dict:
    tensors = {name: {"shape": list(t.shape), "data": t.detach().reshape(-1).tolist()}
               for name, t in model.state_dict().items()}
    c = model.cfg
    meta = {"variant": c.variant,
            "dims": {"d_in": c.d_in, "d": c.d, "d_k": c.d_k, "heads": c.heads,
                     "num_classes": c.num_classes},
            "scheme": asdict(c.scheme),
            "config": c.to_dict()}
    return {"meta": meta, "tensors": tensors}


def save_checkpoint(model: GrandModel, path):
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(model), fh)


def load_checkpoint(path) -> GrandModel:
    with open(path) as fh:
        doc = json.load(fh)
    model = GrandModel(ModelConfig.from_dict(doc["meta"]["config"]))
    state = {name: torch.tensor(t["data"], dtype=DTYPE).reshape(t["shape"])
             for name, t in doc["tensors"].items()}
    model.load_state_dict(state)
    return model
