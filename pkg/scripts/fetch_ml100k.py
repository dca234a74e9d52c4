"""Fetch MovieLens-100K into data/ml-100k from the RecBole wheel on the package index.

    python scripts/fetch_ml100k.py [--dest data/ml-100k]

The wheel ships the atomic files ``ml-100k.inter`` (user, item, rating, timestamp with a
header line) and ``ml-100k.item``. A ``categories.tsv`` is derived from the item file,
one category per movie: its first listed genre.
"""
import argparse
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

WHEEL = "recbole==1.2.1"
MEMBER = "recbole/dataset_example/ml-100k/"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dest", default=str(Path(__file__).resolve().parents[1] / "data" / "ml-100k"))
    a = ap.parse_args()
    dest = Path(a.dest)
    dest.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", WHEEL, "--no-deps",
                        "--only-binary=:all:", "-d", tmp, "-q"], check=True)
        wheel = next(Path(tmp).glob("recbole-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            for name in ("ml-100k.inter", "ml-100k.item"):
                (dest / name).write_bytes(zf.read(MEMBER + name))
    lines = (dest / "ml-100k.item").read_text(encoding="latin-1").splitlines()[1:]
    with open(dest / "categories.tsv", "w", encoding="utf-8") as fh:
        for line in lines:
            cols = line.split("\t")
            genres = cols[3].split() if len(cols) > 3 else []
            if genres:
                fh.write(f"{cols[0]}\t{genres[0]}\n")
    print(f"wrote {dest}/ml-100k.inter, ml-100k.item, categories.tsv")


if __name__ == "__main__":
    main()
