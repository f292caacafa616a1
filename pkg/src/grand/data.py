"""Datasets: a plain-text directory layout, component extraction, synthetic generators.

Layout of a dataset directory::

    edges.tsv    "i<TAB>j" per line (optional third column: weight), 0-indexed
    features.csv one comma-separated row of decimals per node
    labels.txt   one integer class per line
    splits.json  {"train": [...], "val": [...], "test": [...]}
"""
from __future__ import annotations

import json
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .graph import EdgeSet, Graph, GraphError

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass(eq=False)
class Dataset:
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    splits: dict = field(default_factory=dict)
    num_classes: int = 0
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = {k: np.asarray(self.splits.get(k, []), dtype=np.int64) for k in SPLITS}
        if not self.num_classes:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        self.validate()

    @property
    def n(self) -> int:
        return self.graph.n

    def validate(self):
        n = self.graph.n
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DatasetError(f"features have {self.features.shape[0]} rows, graph has {n} nodes")
        if self.labels.shape != (n,):
            raise DatasetError(f"{self.labels.size} labels for {n} nodes")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError("features must be finite")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError("labels outside [0, num_classes)")
        seen = np.zeros(n, dtype=bool)
        for k in SPLITS:
            idx = self.splits[k]
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DatasetError(f"split {k!r} has an index outside [0, {n})")
            if np.unique(idx).size != idx.size or seen[idx].any():
                raise DatasetError(f"split {k!r} overlaps another split or repeats a node")
            seen[idx] = True

    def mask(self, split: str) -> np.ndarray:
        m = np.zeros(self.n, dtype=bool)
        m[self.splits[split]] = True
        return m

    def with_features(self, features) -> "Dataset":
        return Dataset(self.graph, features, self.labels, self.splits, self.num_classes, self.name)


def normalize_features(X) -> np.ndarray:
    """Divide each row by its absolute sum; all-zero rows are left alone."""
    X = np.asarray(X, dtype=float)
    s = np.abs(X).sum(axis=1, keepdims=True)
    return np.divide(X, s, out=X.copy(), where=s > 0)


# ---------------------------------------------------------------- files

def _fmt(v: float) -> str:
    return repr(float(v))


def save_edges(path, edges, weights=None):
    """Write a Graph (canonical pairs) or an EdgeSet (directed pairs) as TSV."""
    if isinstance(edges, Graph):
        pairs, w = edges.edges, edges.weights
    elif isinstance(edges, EdgeSet):
        pairs, w = np.stack([edges.src, edges.dst], axis=1), weights
    else:
        pairs, w = np.asarray(edges).reshape(-1, 2), weights
    unit = w is None or np.all(np.asarray(w) == 1.0)
    with open(path, "w") as fh:
        for k, (i, j) in enumerate(pairs):
            fh.write(f"{i}\t{j}\n" if unit else f"{i}\t{j}\t{_fmt(w[k])}\n")


def save_features(path, X):
    X = np.asarray(X, dtype=float)
    with open(path, "w") as fh:
        for row in X:
            fh.write(",".join(map(_fmt, row.tolist())) + "\n")


def read_features(path) -> np.ndarray:
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(v) for v in line.split(",")]
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: malformed feature row") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DatasetError(f"{path}:{lineno}: expected {width} values, got {len(row)}")
            rows.append(row)
    return np.array(rows, dtype=float).reshape(len(rows), width or 0)


def save_dataset(ds: Dataset, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_edges(d / "edges.tsv", ds.graph)
    save_features(d / "features.csv", ds.features)
    with open(d / "labels.txt", "w") as fh:
        fh.writelines(f"{int(v)}\n" for v in ds.labels)
    with open(d / "splits.json", "w") as fh:
        json.dump({k: ds.splits[k].tolist() for k in SPLITS}, fh)


def load_dataset(directory, allow_self_loops=False) -> Dataset:
    """Parse a dataset directory; raises :class:`DatasetError` with line numbers."""
    d = Path(directory)
    for name in ("edges.tsv", "features.csv", "labels.txt", "splits.json"):
        if not (d / name).is_file():
            raise FileNotFoundError(f"{d / name} is missing")
    labels = []
    with open(d / "labels.txt") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                labels.append(int(line))
            except ValueError:
                raise DatasetError(f"{d / 'labels.txt'}:{lineno}: not an integer") from None
    features = read_features(d / "features.csv")
    n = len(labels)
    if features.shape[0] != n:
        raise DatasetError(f"features.csv has {features.shape[0]} rows but labels.txt has {n}")
    pairs, weights = [], []
    with open(d / "edges.tsv") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if len(parts) not in (2, 3):
                    raise ValueError
                i, j = int(parts[0]), int(parts[1])
                w = float(parts[2]) if len(parts) == 3 else 1.0
            except ValueError:
                raise DatasetError(f"{d / 'edges.tsv'}:{lineno}: expected 'i<TAB>j'") from None
            if not (0 <= i < n and 0 <= j < n):
                raise DatasetError(f"{d / 'edges.tsv'}:{lineno}: node index outside [0, {n})")
            pairs.append((i, j))
            weights.append(w)
    try:
        graph = Graph.from_edges(n, pairs, weights, allow_self_loops=allow_self_loops)
    except GraphError as exc:
        raise DatasetError(str(exc)) from None
    with open(d / "splits.json") as fh:
        try:
            splits = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{d / 'splits.json'}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(splits, dict) or set(splits) - set(SPLITS):
        raise DatasetError(f"{d / 'splits.json'}: expected keys {SPLITS}")
    labels = np.array(labels, dtype=np.int64)
    return Dataset(graph, features, labels, splits, name=d.name)


# ---------------------------------------------------------------- components

def largest_connected_component(ds: Dataset) -> Dataset:
    """Induced subgraph on the largest component.

    Ties go to the component containing the lowest original node index.
    Nodes keep their relative order and split roles.
    """
    g = ds.graph
    if g.n == 0:
        return ds
    ncomp, comp = connected_components(g.adjacency(), directed=False)
    sizes = np.bincount(comp, minlength=ncomp)
    first = np.full(ncomp, g.n)
    np.minimum.at(first, comp, np.arange(g.n))
    best = min(np.nonzero(sizes == sizes.max())[0], key=lambda c: first[c])
    keep = np.nonzero(comp == best)[0]
    if keep.size == g.n:
        return ds
    new_id = np.full(g.n, -1)
    new_id[keep] = np.arange(keep.size)
    e = g.edges
    inside = (new_id[e[:, 0]] >= 0) & (new_id[e[:, 1]] >= 0)
    sub = Graph.from_edges(keep.size, new_id[e[inside]], g.weights[inside],
                           allow_self_loops=g.has_self_loops())
    splits = {k: new_id[v][new_id[v] >= 0] for k, v in ds.splits.items()}
    return Dataset(sub, ds.features[keep], ds.labels[keep], splits, ds.num_classes, ds.name)


def modularity(g: Graph, communities) -> float:
    """Newman modularity of a node partition."""
    c = np.asarray(communities)
    W = g.adjacency()
    k = np.asarray(W.sum(axis=1)).ravel()
    two_m = k.sum()
    if two_m == 0:
        return 0.0
    coo = W.tocoo()
    inside = float(coo.data[c[coo.row] == c[coo.col]].sum())
    ks = np.bincount(c, weights=k)
    return inside / two_m - float((ks ** 2).sum()) / two_m ** 2


# ---------------------------------------------------------------- splits

def random_split(labels, per_class=20, n_val=500, rng=None) -> dict:
    """``per_class`` training nodes per class, then ``n_val`` validation, rest test.

    On small graphs the validation set is capped at half of what remains
    after training.
    """
    rng = np.random.default_rng(rng)
    labels = np.asarray(labels)
    train = []
    for c in np.unique(labels):
        idx = rng.permutation(np.nonzero(labels == c)[0])
        train.extend(idx[:per_class].tolist())
    train = np.sort(np.array(train, dtype=np.int64))
    rest = rng.permutation(np.setdiff1d(np.arange(labels.size), train))
    nv = min(n_val, rest.size // 2)
    return {"train": train, "val": np.sort(rest[:nv]), "test": np.sort(rest[nv:])}


def fraction_split(n, train_frac=0.5, rng=None) -> dict:
    """Random ``train_frac`` training mask; the remainder is halved into val/test."""
    rng = np.random.default_rng(rng)
    perm = rng.permutation(n)
    nt = int(round(train_frac * n))
    nv = (n - nt) // 2
    return {"train": np.sort(perm[:nt]), "val": np.sort(perm[nt:nt + nv]),
            "test": np.sort(perm[nt + nv:])}


# ---------------------------------------------------------------- generators

def synth_sbm(blocks=2, n=200, p_in=0.1, p_out=0.01, feat_noise=1.0, seed=0,
              per_class=20, n_val=500, extra_dims=0, attempts=10,
              require_connected=True) -> Dataset:
    """Stochastic block model with noisy block-indicator features.

    Node ``i`` belongs to block ``i * blocks // n``. Features are the one-hot
    block indicator (plus ``extra_dims`` pure-noise columns) with Gaussian
    noise of scale ``feat_noise``. The graph is resampled until it has one
    component, or one per block when ``p_out == 0``; ``require_connected=False``
    accepts the first sample.
    """
    if not p_in > p_out:
        raise DatasetError("need p_in > p_out")
    labels = (np.arange(n) * blocks) // n
    want = blocks if p_out == 0 else 1
    rng = np.random.default_rng(seed)
    for _ in range(attempts):
        iu, ju = np.triu_indices(n, k=1)
        p = np.where(labels[iu] == labels[ju], p_in, p_out)
        keep = rng.random(iu.size) < p
        g = Graph.from_edges(n, np.stack([iu[keep], ju[keep]], axis=1))
        ncomp, _ = connected_components(g.adjacency(), directed=False)
        if ncomp == want or not require_connected:
            break
    else:
        raise DatasetError(f"no SBM sample with {want} component(s) after {attempts} attempts")
    X = np.eye(blocks)[labels]
    if extra_dims:
        X = np.hstack([X, np.zeros((n, extra_dims))])
    X = X + feat_noise * rng.standard_normal(X.shape)
    splits = random_split(labels, per_class, n_val, rng)
    return Dataset(g, X, labels, splits, blocks, f"sbm{blocks}-{n}")


def shape_mask(width, height, shape="disk") -> np.ndarray:
    """Boolean ``height x width`` figure mask."""
    if isinstance(shape, np.ndarray):
        m = np.asarray(shape, dtype=bool)
        if m.shape != (height, width):
            raise DatasetError(f"mask has shape {m.shape}, expected {(height, width)}")
        return m
    r, c = np.mgrid[0:height, 0:width]
    cy, cx = (height - 1) / 2, (width - 1) / 2
    if shape == "disk":
        rad = min(width, height) / 3
        return (r - cy) ** 2 + (c - cx) ** 2 <= rad ** 2
    if shape == "square":
        return (abs(r - cy) <= height / 4) & (abs(c - cx) <= width / 4)
    if shape in ("all-background", "empty"):
        return np.zeros((height, width), dtype=bool)
    raise DatasetError(f"unknown shape {shape!r}")


def synth_grid_image(width=8, height=8, shape="disk", seed=0, noise=0.3,
                     train_frac=0.5) -> Dataset:
    """4-connected pixel grid with binary figure/background labels.

    The single feature is the pixel intensity (1 inside the figure, 0
    outside) plus Gaussian noise; a random half of the pixels is the
    training mask.
    """
    from .graph import grid_graph

    if width < 2 or height < 2:
        raise DatasetError("grid must be at least 2 x 2")
    mask = shape_mask(width, height, shape)
    rng = np.random.default_rng(seed)
    labels = mask.ravel().astype(np.int64)
    X = labels[:, None].astype(float) + noise * rng.standard_normal((labels.size, 1))
    splits = fraction_split(labels.size, train_frac, rng)
    return Dataset(grid_graph(width, height), X, labels, splits, 2, f"grid{width}x{height}")


# ---------------------------------------------------------------- planetoid

def read_planetoid(raw_dir, name="cora") -> Dataset:
    """Read the public Planetoid ``ind.<name>.*`` files into a :class:`Dataset`.

    Uses the standard split: the first ``len(y)`` nodes train, the next 500
    validate, the listed test indices test. Self-loops in the raw graph are
    dropped.
    """
    raw = Path(raw_dir)
    objs = {}
    for key in ("x", "y", "tx", "ty", "allx", "ally", "graph"):
        with open(raw / f"ind.{name}.{key}", "rb") as fh:
            objs[key] = pickle.load(fh, encoding="latin1")
    test_idx = np.array([int(v) for v in (raw / f"ind.{name}.test.index").read_text().split()])
    test_sorted = np.sort(test_idx)
    allx, tx = sp.csr_matrix(objs["allx"]), sp.csr_matrix(objs["tx"])
    ally, ty = np.asarray(objs["ally"]), np.asarray(objs["ty"])
    if name == "citeseer":
        # isolated test nodes missing from tx/ty
        full = np.arange(test_sorted.min(), test_sorted.max() + 1)
        tx_ext = sp.lil_matrix((full.size, tx.shape[1]))
        tx_ext[test_sorted - test_sorted.min(), :] = tx
        ty_ext = np.zeros((full.size, ty.shape[1]))
        ty_ext[test_sorted - test_sorted.min(), :] = ty
        tx, ty, test_sorted = sp.csr_matrix(tx_ext), ty_ext, full
    X = sp.vstack([allx, tx]).tolil()
    X[test_idx, :] = X[test_sorted, :]
    Y = np.vstack([ally, ty])
    Y[test_idx, :] = Y[test_sorted, :]
    n = X.shape[0]
    pairs = [(int(i), int(j)) for i, nbrs in objs["graph"].items() for j in nbrs
             if int(i) != int(j) and int(i) < n and int(j) < n]
    graph = Graph.from_edges(n, pairs)
    labels = Y.argmax(axis=1)
    n_train = np.asarray(objs["y"]).shape[0]
    test = np.sort(test_idx[test_idx < n])
    val = np.setdiff1d(np.arange(n_train, min(n_train + 500, n)), test)
    splits = {"train": np.arange(n_train), "val": val, "test": test}
    return Dataset(graph, X.toarray(), labels, splits, Y.shape[1], name)
