"""Datasets: MNIST-style IDX files, the 1D cubic toy problem, CSV regression."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        return cls(mean, np.where(std > 0, std, 1.0))

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def inverse(self, x):
        return np.asarray(x, dtype=float) * self.std + self.mean

    def scale_var(self, var):
        """Variance in original units to standardized units."""
        return np.asarray(var, dtype=float) / self.std**2

    def unscale_var(self, var):
        return np.asarray(var, dtype=float) * self.std**2

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    kind: str = "regression"  # or "classification"
    n_classes: int | None = None
    x_stats: Standardizer | None = None
    y_stats: Standardizer | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs[:, None]
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets have different row counts")
        if self.kind not in ("regression", "classification"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def labels(self) -> np.ndarray:
        if self.kind != "classification":
            raise ValueError("labels only exist for classification data")
        return np.argmax(self.targets, axis=1)

    def take(self, idx) -> "Dataset":
        return replace(self, inputs=self.inputs[idx], targets=self.targets[idx])

    def standardized(self) -> "Dataset":
        """Zero-mean unit-variance inputs and targets; statistics are kept."""
        if self.kind != "regression":
            raise ValueError("only regression data is standardized")
        xs = Standardizer.fit(self.inputs)
        ys = Standardizer.fit(self.targets)
        return replace(
            self,
            inputs=xs.transform(self.inputs),
            targets=ys.transform(self.targets),
            x_stats=xs,
            y_stats=ys,
        )


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# IDX


def _read(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise DataFormatError("truncated IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataFormatError(f"bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise DataFormatError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    n = int(np.prod(dims, dtype=np.int64))
    body = raw[4 + 4 * ndim :]
    if len(body) != n:
        raise DataFormatError(f"IDX payload holds {len(body)} bytes, expected {n}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    return struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    images = parse_idx(_read(images_path), IMAGE_MAGIC)
    labels = parse_idx(_read(labels_path), LABEL_MAGIC)
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() >= n_classes:
        raise DataFormatError(f"label {labels.max()} out of range for {n_classes} classes")
    x = images.reshape(len(images), -1).astype(float) / 255.0
    return Dataset(x, one_hot(labels, n_classes), "classification", n_classes)


# ---------------------------------------------------------------------------
# synthetic and CSV


def cubic(x):
    return x**3 - 3.0 * x


def toy_cubic(n: int, sigma_v: float = 0.1, range_: tuple[float, float] = (-2.0, 2.0), seed: int = 0) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.uniform(range_[0], range_[1], size=n)
    y = cubic(x) + sigma_v * rng.standard_normal(n)
    return Dataset(x[:, None], y[:, None], "regression")


def load_csv(path) -> Dataset:
    """Numeric CSV with a header row; the last column is the target."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataFormatError(f"{path}: no data rows")
    header, body = rows[0], rows[1:]
    try:
        arr = np.array([[float(v) for v in r] for r in body if r])
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    if arr.ndim != 2 or arr.shape[1] != len(header) or arr.shape[1] < 2:
        raise DataFormatError(f"{path}: ragged rows or fewer than two columns")
    return Dataset(arr[:, :-1], arr[:, -1:], "regression", meta={"columns": header})


def subset(
    data: Dataset,
    *,
    classes: Sequence[int] | None = None,
    count: int | None = None,
    seed: int = 0,
) -> Dataset:
    """Deterministic subset, stratified over classes for classification data.

    ``classes`` keeps only those labels; ``count`` then draws that many rows,
    split as evenly as possible across the remaining classes.
    """
    rng = np.random.default_rng(seed)
    if data.kind != "classification":
        if classes is not None:
            raise ValueError("classes filter needs classification data")
        n = len(data) if count is None else count
        if n > len(data):
            raise ValueError(f"requested {n} rows from {len(data)}")
        return data.take(np.sort(rng.permutation(len(data))[:n]))
    labels = data.labels
    keep = sorted(set(labels.tolist())) if classes is None else list(classes)
    for c in keep:
        if not np.any(labels == c):
            raise ValueError(f"class {c} absent from dataset")
    pools = {c: np.flatnonzero(labels == c) for c in keep}
    if count is None:
        idx = np.concatenate([pools[c] for c in keep])
        return data.take(np.sort(idx))
    base, extra = divmod(count, len(keep))
    chosen = []
    for k, c in enumerate(keep):
        need = base + (1 if k < extra else 0)
        if need > len(pools[c]):
            raise ValueError(f"class {c} has {len(pools[c])} rows, need {need}")
        chosen.append(rng.permutation(pools[c])[:need])
    return data.take(np.sort(np.concatenate(chosen)))


def train_test_split(data: Dataset, n_train: int, n_test: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Disjoint stratified train and test subsets."""
    # subset an index column so the chosen rows can be excluded afterwards
    index = replace(data, inputs=np.arange(len(data), dtype=float)[:, None])
    train_idx = subset(index, count=n_train, seed=seed).inputs[:, 0].astype(int)
    rest = np.setdiff1d(np.arange(len(data)), train_idx)
    test_idx = subset(index.take(rest), count=n_test, seed=seed + 1).inputs[:, 0].astype(int)
    return data.take(train_idx), data.take(test_idx)
