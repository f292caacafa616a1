"""Convert the public Planetoid ``ind.<name>.*`` files to the plain dataset layout.

    python scripts/convert_planetoid.py RAW_DIR OUT_DIR [--name cora]

OUT_DIR then holds edges.tsv, features.csv, labels.txt and splits.json and
can be passed to ``grand --data``.
"""
import argparse
import sys

from grand.data import read_planetoid, save_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("raw_dir")
    p.add_argument("out_dir")
    p.add_argument("--name", default="cora")
    a = p.parse_args()
    ds = read_planetoid(a.raw_dir, a.name)
    save_dataset(ds, a.out_dir)
    print(f"{a.name}: {ds.n} nodes, {ds.graph.num_edges} edges, {ds.num_classes} classes, "
          f"splits {[len(ds.splits[k]) for k in ('train', 'val', 'test')]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
