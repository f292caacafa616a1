"""Command line: ``grand {diffuse,train,eval,depth-sweep,solver-compare,rewire-sweep}``.

Every command writes its outputs and a ``manifest.json`` under ``--out``.
Exit codes: 0 ok, 2 configuration error, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import torch

from . import experiments as ex
from .attention import AttentionError
from .data import (Dataset, DatasetError, largest_connected_component, load_dataset,
                   normalize_features, save_features, synth_grid_image, synth_sbm)
from .integrators import SCHEMES, ConfigError, SchemeConfig, SolverError, integrate
from .model import (ATTENTIONS, VARIANTS, GrandModel, ModelConfig, TrainConfig, evaluate,
                    load_checkpoint, save_checkpoint, train)
from .rewiring import RewireConfig, RewireError
from .stability import envelope_monitor

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# output columns that hold wall-clock measurements; excluded from the content hash
VOLATILE = {"seconds", "seconds_per_epoch"}


class CLIError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


# -- inputs -------------------------------------------------------------------

def _parse_kv(text: str) -> tuple[str, dict]:
    kind, _, rest = text.partition(":")
    params = {}
    for item in filter(None, rest.split(",")):
        key, eq, val = item.partition("=")
        if not eq:
            raise ConfigError(f"bad synthetic parameter {item!r}; use key=value")
        try:
            params[key] = json.loads(val)
        except json.JSONDecodeError:
            params[key] = val
    return kind, params


def make_synthetic(text: str, seed: int) -> Dataset:
    """``sbm:n=200,p_in=0.1``, ``grid:width=8,height=8,shape=disk`` or ``cora-like``."""
    kind, params = _parse_kv(text)
    params.setdefault("seed", seed)
    try:
        if kind == "sbm":
            return synth_sbm(**params)
        if kind == "grid":
            return synth_grid_image(**params)
        if kind == "cora-like":
            return ex.cora_like(**params)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown synthetic dataset {kind!r}; use sbm, grid or cora-like")


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def input_hash(args) -> str:
    if args.data:
        h = hashlib.sha1()
        for p in sorted(Path(args.data).iterdir()):
            if p.is_file():
                h.update(f"{p.name} {git_blob_hash(p.read_bytes())}\n".encode())
        return h.hexdigest()
    return git_blob_hash(f"synthetic {args.synthetic} seed={args.seed}".encode())


def get_dataset(args) -> Dataset:
    if bool(args.data) == bool(args.synthetic):
        raise ConfigError("give exactly one of --data or --synthetic")
    ds = load_dataset(args.data) if args.data else make_synthetic(args.synthetic, args.seed)
    if args.lcc:
        ds = largest_connected_component(ds)
    if args.normalize:
        ds = ds.with_features(normalize_features(ds.features))
    return ds


def model_config(args, ds: Dataset) -> ModelConfig:
    rewire = None
    if args.variant == "grand-nl-rw":
        rewire = RewireConfig(method=args.rewire, alpha=args.alpha, K=args.k, rho=args.rho)
    scheme = SchemeConfig(scheme=args.scheme, tau=args.tau, T=args.t, atol=args.atol,
                          rtol=args.rtol)
    return ModelConfig(d_in=ds.features.shape[1], num_classes=ds.num_classes, d=args.d,
                       d_k=args.d_k, heads=args.heads, variant=args.variant,
                       attention=args.attention, scale=args.scale, scheme=scheme,
                       rewire=rewire, seed=args.seed)


def train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, lr=args.lr, optimizer=args.optimizer,
                       weight_decay=args.weight_decay, patience=args.patience, seed=args.seed)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


# -- outputs ------------------------------------------------------------------

def write_csv(path: Path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _stable_digest(path: Path) -> str | None:
    """Hash of the deterministic part of an output; ``None`` if it is all timing."""
    if path.suffix == ".svg" and "time" in path.stem:
        return None
    if path.suffix != ".csv":
        return git_blob_hash(path.read_bytes())
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return git_blob_hash(b"")
    keep = [i for i, name in enumerate(rows[0]) if name not in VOLATILE]
    text = "\n".join(",".join(r[i] for i in keep) for r in rows)
    return git_blob_hash(text.encode())


def write_manifest(out: Path, args, outputs, started: float, extra=None) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    entries = []
    for name in outputs:
        p = out / name
        entries.append({"path": name, "sha1": git_blob_hash(p.read_bytes()),
                        "stable_sha1": _stable_digest(p)})
    # the output location does not affect results, so it stays out of the hash
    stable = {"command": args.command, "seed": args.seed,
              "config": {k: v for k, v in config.items() if k != "out"},
              "input_hash": input_hash(args),
              "outputs": [(e["path"], e["stable_sha1"]) for e in entries]}
    manifest = {
        "command": args.command,
        "config": config,
        "seed": args.seed,
        "input_hash": stable["input_hash"],
        "wall_clock_seconds": time.perf_counter() - started,
        "outputs": entries,
        "content_hash": hashlib.sha1(json.dumps(stable, sort_keys=True).encode()).hexdigest(),
    }
    if extra:
        manifest["results"] = extra
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# -- commands -----------------------------------------------------------------

def cmd_diffuse(args, out: Path):
    ds = get_dataset(args)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = GrandModel(model_config(args, ds))
    scheme = model.cfg.scheme.with_(scheme=args.scheme, tau=args.tau, T=args.t,
                                    atol=args.atol, rtol=args.rtol)
    with torch.no_grad():
        X0 = model.encode(ds.features)
        if model.cfg.variant == "grand-nl-rw":
            edges = model.rewire(ds.graph, ds.features)
        else:
            edges = ds.graph.directed()
        XT, trace = integrate(model.dynamics(X0, edges), X0, scheme)
    save_features(out / "features.csv", XT.numpy())
    trace.write_csv(out / "trace.csv")
    violations = envelope_monitor(trace, X0)
    return ["features.csv", "trace.csv"], {"steps": trace.steps, "nfe": trace.total_nfe,
                                           "envelope_violations": len(violations)}


def cmd_train(args, out: Path):
    ds = get_dataset(args)
    model = GrandModel(model_config(args, ds))
    res = train(model, ds, train_config(args))
    res.history.write_csv(out / "history.csv")
    save_checkpoint(res.model, out / "checkpoint.json")
    metrics = {"best_epoch": res.best_epoch, "val_acc": res.val_acc, "test_acc": res.test_acc}
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ["history.csv", "checkpoint.json", "metrics.json"], metrics


def cmd_eval(args, out: Path):
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    ds = get_dataset(args)
    model = load_checkpoint(args.checkpoint)
    scheme = None
    if args.scheme_override:
        scheme = model.cfg.scheme.with_(scheme=args.scheme, tau=args.tau, T=args.t,
                                        atol=args.atol, rtol=args.rtol)
    accs = evaluate(model, ds, scheme=scheme)
    metrics = {f"{k}_acc": v for k, v in accs.items()}
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ["metrics.json"], metrics


def cmd_depth_sweep(args, out: Path):
    ds = get_dataset(args)
    rows = ex.depth_experiment(ds, _floats(args.t_values), model_config(args, ds),
                               train_config(args), baseline=not args.no_baseline)
    fields = ["T", "val_acc", "test_acc", "baseline_val", "baseline_test"]
    write_csv(out / "depth.csv", [[getattr(r, f) for f in fields] for r in rows], fields)
    Ts = [r.T for r in rows]
    series = {"learned attention": (Ts, [r.test_acc for r in rows])}
    if not args.no_baseline:
        series["uniform diffusion"] = (Ts, [r.baseline_test for r in rows])
    (out / "depth.svg").write_text(ex.svg_line_chart(
        series, "Test accuracy vs integration time", "T", "test accuracy", logx=True))
    return ["depth.csv", "depth.svg"], None


def cmd_solver_compare(args, out: Path):
    ds = get_dataset(args)
    X0, Abar = ex.frozen_system(ds, d=args.d, seed=args.seed)
    schemes = [s for s in args.schemes.split(",") if s]
    for s in schemes:
        if s not in SCHEMES:
            raise ConfigError(f"unknown scheme {s!r}")
    rows = ex.solver_compare(Abar, X0, schemes, _floats(args.taus), T=args.t)
    fields = ["scheme", "tau", "seconds", "error", "diverged", "steps", "nfe"]
    write_csv(out / "solver.csv", [[getattr(r, f) for f in fields] for r in rows], fields)
    series = {}
    for s in schemes:
        mine = [r for r in rows if r.scheme == s]
        series[s] = ([r.tau for r in mine], [r.error if not r.diverged else float("nan")
                                             for r in mine])
    (out / "solver_error.svg").write_text(ex.svg_line_chart(
        series, "Error vs step size (frozen attention)", "tau", "relative error",
        logx=True, logy=True))
    return ["solver.csv", "solver_error.svg"], None


def cmd_rewire_sweep(args, out: Path):
    ds = get_dataset(args)
    args.variant = "grand-nl-rw"
    rows = ex.rewire_sweep(ds, [int(k) for k in _floats(args.k_values)],
                           model_config(args, ds), train_config(args))
    fields = ["K", "edges", "seconds_per_epoch", "val_acc", "test_acc"]
    write_csv(out / "rewire.csv", [[getattr(r, f) for f in fields] for r in rows], fields)
    Ks = [r.K for r in rows]
    (out / "rewire_accuracy.svg").write_text(ex.svg_line_chart(
        {"test accuracy": (Ks, [r.test_acc for r in rows])},
        "Accuracy vs K", "K", "test accuracy", logx=True))
    (out / "rewire_time.svg").write_text(ex.svg_line_chart(
        {"seconds per epoch": (Ks, [r.seconds_per_epoch for r in rows])},
        "Time per epoch vs K", "K", "seconds", logx=True))
    return ["rewire.csv", "rewire_accuracy.svg", "rewire_time.svg"], None


COMMANDS = {
    "diffuse": cmd_diffuse,
    "train": cmd_train,
    "eval": cmd_eval,
    "depth-sweep": cmd_depth_sweep,
    "solver-compare": cmd_solver_compare,
    "rewire-sweep": cmd_rewire_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("data")
    g.add_argument("--data", help="dataset directory (edges.tsv, features.csv, labels.txt, splits.json)")
    g.add_argument("--synthetic", help="generated dataset, e.g. 'sbm:n=200,p_out=0.01' or 'grid'")
    g.add_argument("--no-normalize", dest="normalize", action="store_false",
                   help="keep raw features instead of L1 row-normalising them")
    g.add_argument("--lcc", action="store_true", help="restrict to the largest connected component")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    m = common.add_argument_group("model")
    m.add_argument("--variant", choices=VARIANTS, default="grand-l")
    m.add_argument("--attention", choices=ATTENTIONS, default="scaled-dot")
    m.add_argument("--scale", choices=("dk", "sqrt-dk"), default="dk")
    m.add_argument("--d", type=int, default=16, help="hidden dimension")
    m.add_argument("--d-k", type=int, default=None)
    m.add_argument("--heads", type=int, default=1)
    m.add_argument("--scheme", choices=SCHEMES, default="rk4")
    m.add_argument("--tau", type=float, default=1.0)
    m.add_argument("--t", type=float, default=4.0, help="integration time T")
    m.add_argument("--atol", type=float, default=1e-9)
    m.add_argument("--rtol", type=float, default=1e-7)
    m.add_argument("--rewire", choices=("ppr", "attention-threshold"), default="ppr")
    m.add_argument("--alpha", type=float, default=0.15)
    m.add_argument("--k", type=int, default=64)
    m.add_argument("--rho", type=float, default=0.0)
    m.add_argument("--checkpoint", help="model checkpoint (JSON)")
    t = common.add_argument_group("training")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    t.add_argument("--weight-decay", type=float, default=0.0)
    t.add_argument("--patience", type=int, default=None)

    parser = argparse.ArgumentParser(prog="grand", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("diffuse", parents=[common], help="integrate the encoded features to T")
    sub.add_parser("train", parents=[common], help="train a model, keep the best-validation checkpoint")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--scheme-override", action="store_true",
                    help="evaluate with --scheme/--tau/--t instead of the trained solver")
    ds = sub.add_parser("depth-sweep", parents=[common], help="accuracy against integration time")
    ds.add_argument("--t-values", default="2,4,8,16,32")
    ds.add_argument("--no-baseline", action="store_true")
    sc = sub.add_parser("solver-compare", parents=[common], help="solvers on a frozen system")
    sc.add_argument("--schemes", default="explicit-euler,rk4,ab4,am4-pc,implicit-euler")
    sc.add_argument("--taus", default="0.005,0.01,0.05,0.1,0.2,0.5,1.0")
    rs = sub.add_parser("rewire-sweep", parents=[common], help="PPR top-K rewiring sweep")
    rs.add_argument("--k-values", default="1,2,4,8,16,32,64")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("GRAND_THREADS")
    try:
        if threads:
            torch.set_num_threads(max(1, int(threads)))
        started = time.perf_counter()
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CLIError(f"cannot create output directory: {exc}", EXIT_IO) from exc
        outputs, extra = COMMANDS[args.command](args, out)
        write_manifest(out, args, outputs, started, extra)
    except CLIError as exc:
        print(f"grand: {exc}", file=sys.stderr)
        return exc.code
    except (DatasetError, OSError) as exc:
        print(f"grand: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SolverError, RewireError) as exc:
        print(f"grand: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, AttentionError, ValueError) as exc:
        print(f"grand: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main():
    sys.exit(run())
