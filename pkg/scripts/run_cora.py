"""Train GRAND-l on Cora over T in {2, 4, 8} and lr in {0.005, 0.01}; report the best-val run.

    python scripts/run_cora.py RAW_DIR
"""
import argparse
import sys
import time

from grand.data import normalize_features, read_planetoid
from grand.integrators import SchemeConfig
from grand.model import GrandModel, ModelConfig, TrainConfig, train


def main():
    p = argparse.ArgumentParser(description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("raw_dir")
    p.add_argument("--epochs", type=int, default=200)
    a = p.parse_args()
    ds = read_planetoid(a.raw_dir, "cora")
    ds = ds.with_features(normalize_features(ds.features))
    best = None
    for T in (2.0, 4.0, 8.0):
        for lr in (0.005, 0.01):
            start = time.perf_counter()
            cfg = ModelConfig(ds.features.shape[1], ds.num_classes, d=64,
                              scheme=SchemeConfig(scheme="rk4", tau=1.0, T=T))
            res = train(GrandModel(cfg), ds, TrainConfig(epochs=a.epochs, lr=lr,
                                                         weight_decay=5e-4, patience=50))
            print(f"T={T} lr={lr}: val {res.val_acc:.3f} test {res.test_acc:.3f} "
                  f"({time.perf_counter() - start:.0f}s)", flush=True)
            if best is None or res.val_acc > best[0]:
                best = (res.val_acc, res.test_acc, T, lr)
    print(f"selected T={best[2]} lr={best[3]}: test accuracy {best[1]:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
