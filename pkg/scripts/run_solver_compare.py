"""Step size against error and divergence for every solver on a frozen Cora-sized system.

Writes solver.csv and solver_error.svg under --out (default runs/solver).
"""
import argparse
import sys

from grand.cli import run


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/solver")
    p.add_argument("--synthetic", default="cora-like")
    p.add_argument("--schemes", default="explicit-euler,rk4,ab4,am4-pc,implicit-euler")
    p.add_argument("--taus", default="0.005,0.01,0.05,0.1,0.2,0.5,1.0")
    p.add_argument("--t", default="8")
    a = p.parse_args()
    return run(["solver-compare", "--synthetic", a.synthetic, "--schemes", a.schemes,
                "--taus", a.taus, "--t", a.t, "--out", a.out])


if __name__ == "__main__":
    sys.exit(main())
