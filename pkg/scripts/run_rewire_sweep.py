"""Time per epoch and accuracy of PPR top-K rewiring for a range of K.

Writes rewire.csv plus accuracy and timing charts under --out (default runs/rewire).
"""
import argparse
import sys

from grand.cli import run


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/rewire")
    p.add_argument("--synthetic", default="sbm:n=1000,p_in=0.02,p_out=0.002")
    p.add_argument("--k-values", default="1,2,4,8,16,32,64")
    p.add_argument("--epochs", default="100")
    a = p.parse_args()
    return run(["rewire-sweep", "--synthetic", a.synthetic, "--k-values", a.k_values,
                "--epochs", a.epochs, "--scheme", "rk4", "--tau", "1.0", "--t", "4",
                "--out", a.out])


if __name__ == "__main__":
    sys.exit(main())
