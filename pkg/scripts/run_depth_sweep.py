"""Accuracy against integration time for learned attention and uniform diffusion.

Writes depth.csv and depth.svg under --out (default runs/depth).
"""
import argparse
import sys

from grand.cli import run


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/depth")
    p.add_argument("--synthetic", default="sbm:n=200,p_in=0.1,p_out=0.01")
    p.add_argument("--t-values", default="2,4,8,16,32")
    p.add_argument("--epochs", default="200")
    a = p.parse_args()
    return run(["depth-sweep", "--synthetic", a.synthetic, "--t-values", a.t_values,
                "--epochs", a.epochs, "--scheme", "rk4", "--tau", "1.0", "--out", a.out])


if __name__ == "__main__":
    sys.exit(main())
