"""Materialize MovieLens 100K as ``data/ml-100k/u.data``.

GroupLens is not always reachable from build machines, but the RecBole wheel on
PyPI ships the same 100,000 ratings as an atomic ``.inter`` file (tab separated,
one header row).  This script pulls that wheel with pip and rewrites the file in
the original ``u.data`` layout: ``user \\t item \\t rating \\t timestamp``.

Usage: python scripts/fetch_ml100k.py [--out data/ml-100k/u.data]
"""

import argparse
import glob
import os
import subprocess
import sys
import tempfile
import zipfile

MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    parser.add_argument("--out", default=os.path.join(root, "data", "ml-100k", "u.data"))
    parser.add_argument("--wheel", help="use an already downloaded recbole wheel")
    args = parser.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel
        if wheel is None:
            subprocess.run(
                [sys.executable, "-m", "pip", "download", "recbole==1.2.1",
                 "--no-deps", "-q", "-d", tmp],
                check=True,
            )
            wheel = glob.glob(os.path.join(tmp, "recbole-*.whl"))[0]
        with zipfile.ZipFile(wheel) as zf:
            lines = zf.read(MEMBER).decode("utf-8").splitlines()

    rows = []
    for line in lines[1:]:
        user, item, rating, ts = line.split("\t")
        rows.append(f"{user}\t{item}\t{int(float(rating))}\t{int(float(ts))}\n")
    os.makedirs(os.path.dirname(args.out), exist_ok=True)
    with open(args.out, "w") as fh:
        fh.writelines(rows)
    print(f"wrote {len(rows)} ratings to {args.out}")


if __name__ == "__main__":
    main()
