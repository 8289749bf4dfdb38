"""Convert the 5,000-image MNIST sample bundled with mlxtend into IDX files.

The output (data/mnist5k/*.gz) is committed, so this only needs rerunning
to regenerate it. Row order is preserved.
"""
import argparse
import gzip
from pathlib import Path

import numpy as np

from tagi.data import encode_idx


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--source", help="path to mnist_5k.csv.gz (default: the copy inside mlxtend)")
    ap.add_argument("--out", default=Path(__file__).resolve().parents[1] / "data" / "mnist5k", type=Path)
    args = ap.parse_args()
    src = args.source
    if src is None:
        import mlxtend

        src = Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz"
    arr = np.loadtxt(src, delimiter=",", dtype=np.int64)
    images = arr[:, :784].reshape(-1, 28, 28)
    labels = arr[:, 784]
    if images.min() < 0 or images.max() > 255 or labels.min() < 0 or labels.max() > 9:
        raise SystemExit("unexpected value range in source file")
    args.out.mkdir(parents=True, exist_ok=True)
    for name, a in (("images-idx3-ubyte.gz", images), ("labels-idx1-ubyte.gz", labels)):
        # mtime=0 keeps the gzip bytes reproducible
        with open(args.out / name, "wb") as fh, gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
            gz.write(encode_idx(a))
    print(f"wrote {len(labels)} images to {args.out}")


if __name__ == "__main__":
    main()
