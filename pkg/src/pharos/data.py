"""Synthetic multi-label datasets and the ``.phf`` dataset file.

Rows are laid out query split first, then the database split; the training
set is a recorded subset of database rows.
"""
from __future__ import annotations

import csv
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, InvalidInputError
from .semantics import as_labels, labels_from_bytes, labels_to_bytes

PHF_MAGIC = b"PHF1"
_LEN = struct.Struct("<I")

DEFAULT_RECIPE = dict(n_classes=8, dim=64, n_train=2000, n_db=8000, n_query=500, label_density=0.2,
                      noise_sigma=0.05, seed=42)


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray          # (N, D) float32 in [0, 1]
    labels: np.ndarray            # (N, C) uint8
    n_query: int
    train_idx: np.ndarray         # absolute row ids, all inside the database split
    seed: int | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float32)
        if x.ndim != 2:
            raise DimensionError("features must be a 2-D array")
        if x.size and (not np.all(np.isfinite(x)) or x.min() < 0 or x.max() > 1):
            raise InvalidInputError("features must be finite and lie in [0, 1]")
        lab = as_labels(np.atleast_2d(self.labels))
        if lab.shape[0] != x.shape[0]:
            raise DimensionError(f"{x.shape[0]} feature rows but {lab.shape[0]} label rows")
        if not 0 <= self.n_query <= x.shape[0]:
            raise InvalidInputError("query split exceeds the dataset")
        tr = np.array(self.train_idx, dtype=np.int64).reshape(-1)
        if tr.size and (tr.min() < self.n_query or tr.max() >= x.shape[0] or np.unique(tr).size != tr.size):
            raise InvalidInputError("training rows must be distinct database rows")
        for name, val in (("features", x), ("labels", lab), ("train_idx", tr)):
            val.flags.writeable = False
            object.__setattr__(self, name, val)
        object.__setattr__(self, "n_query", int(self.n_query))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """``(features, labels)`` of ``"query"``, ``"database"`` or ``"train"``."""
        if name == "query":
            sl = slice(0, self.n_query)
            return self.features[sl], self.labels[sl]
        if name == "database":
            sl = slice(self.n_query, None)
            return self.features[sl], self.labels[sl]
        if name == "train":
            return self.features[self.train_idx], self.labels[self.train_idx]
        raise InvalidInputError(f"unknown split {name!r}")


def gen_synthetic(n_classes=8, dim=64, n_train=2000, n_db=8000, n_query=500, label_density=0.2,
                  noise_sigma=0.05, seed=42) -> Dataset:
    """Prototype-mixture multi-label data.

    Each class owns a random unit vector. An item switches every class on
    with probability ``label_density`` (redrawing empty label sets); its
    feature is ``clip(0.5 + 0.5 * unit(mean of active prototypes) + noise)``.
    """
    if n_classes < 2 or dim < n_classes:
        raise ConfigError("need n_classes >= 2 and dim >= n_classes")
    if min(n_train, n_db, n_query) < 1 or n_train > n_db:
        raise ConfigError("split sizes must be >= 1 and n_train <= n_db")
    if not 0 < label_density <= 1:
        raise ConfigError("label_density must be in (0, 1]")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((n_classes, dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)

    n = n_query + n_db
    labels = rng.random((n, n_classes)) < label_density
    empty = ~labels.any(axis=1)
    while empty.any():
        labels[empty] = rng.random((int(empty.sum()), n_classes)) < label_density
        empty = ~labels.any(axis=1)
    mix = labels.astype(np.float64) @ protos / labels.sum(axis=1, keepdims=True)
    mix /= np.linalg.norm(mix, axis=1, keepdims=True)
    noise = rng.standard_normal((n, dim)) * noise_sigma
    feats = np.clip(0.5 + 0.5 * mix + noise, 0.0, 1.0).astype(np.float32)
    train = n_query + np.sort(rng.choice(n_db, size=n_train, replace=False))
    params = dict(n_classes=n_classes, dim=dim, n_train=n_train, n_db=n_db, n_query=n_query,
                  label_density=label_density, noise_sigma=noise_sigma)
    return Dataset(feats, labels.astype(np.uint8), n_query, train, seed, params)


def prototypes(n_classes: int, dim: int, seed: int) -> np.ndarray:
    """The class prototypes :func:`gen_synthetic` draws for ``seed``."""
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((n_classes, dim))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


# --- files -------------------------------------------------------------------


def dataset_to_bytes(ds: Dataset) -> bytes:
    body = ds.features.astype("<f4").tobytes() + labels_to_bytes(ds.labels)
    header = {
        "n": ds.features.shape[0], "d": ds.dim, "c": ds.n_classes, "seed": ds.seed, "params": ds.params,
        "splits": {"query": [0, ds.n_query], "database": [ds.n_query, ds.features.shape[0]]},
        "train_indices": [int(i) for i in ds.train_idx],
        "crc32": zlib.crc32(body),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return PHF_MAGIC + _LEN.pack(len(hb)) + hb + body


def dataset_from_bytes(buf: bytes, path=None) -> Dataset:
    if len(buf) < 8:
        raise FormatError("truncated dataset header", len(buf), path)
    if buf[:4] != PHF_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {PHF_MAGIC!r}", 0, path)
    (hn,) = _LEN.unpack_from(buf, 4)
    if len(buf) < 8 + hn:
        raise FormatError("truncated dataset JSON header", len(buf), path)
    try:
        h = json.loads(buf[8:8 + hn].decode("utf-8"))
        n, d, c = int(h["n"]), int(h["d"]), int(h["c"])
        n_query = int(h["splits"]["query"][1])
        train = h["train_indices"]
        crc = int(h["crc32"])
    except (ValueError, KeyError, TypeError, IndexError) as exc:
        raise FormatError(f"unreadable dataset header: {exc}", 8, path) from None
    pos = 8 + hn
    if len(buf) < pos + 4 * n * d:
        raise FormatError(f"truncated features: need {pos + 4 * n * d} bytes, have {len(buf)}", len(buf), path)
    feats = np.frombuffer(buf, dtype="<f4", count=n * d, offset=pos).reshape(n, d)
    labels, end = labels_from_bytes(buf, pos + 4 * n * d, path)
    if labels.shape != (n, c):
        raise FormatError(f"label block is {labels.shape}, header says {(n, c)}", pos + 4 * n * d, path)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes", end, path)
    if zlib.crc32(buf[pos:end]) != crc:
        raise FormatError("checksum mismatch", pos, path)
    try:
        return Dataset(feats, labels, n_query, train, h.get("seed"), h.get("params", {}))
    except (InvalidInputError, DimensionError) as exc:
        raise FormatError(f"inconsistent dataset: {exc}", pos, path) from None


def save_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes(), path)


def export_csv(path, ds: Dataset) -> None:
    """One row per item: split tag, features ``x0..``, labels ``y0..``."""
    train = set(int(i) for i in ds.train_idx)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split"] + [f"x{j}" for j in range(ds.dim)] + [f"y{j}" for j in range(ds.n_classes)])
        for i in range(ds.features.shape[0]):
            tag = "query" if i < ds.n_query else ("train" if i in train else "database")
            w.writerow([tag] + [repr(float(v)) for v in ds.features[i]] + [int(v) for v in ds.labels[i]])


def import_csv(path) -> Dataset:
    """Read the :func:`export_csv` layout. ``train`` rows are database rows used for training."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError("empty CSV file", 0, path)
    head = rows[0]
    xs = [i for i, name in enumerate(head) if name.startswith("x")]
    ys = [i for i, name in enumerate(head) if name.startswith("y")]
    if not head or head[0] != "split" or not xs or not ys:
        raise FormatError("CSV header must be 'split,x0..,y0..'", 0, path)
    query, db = [], []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(head):
            raise FormatError(f"line {line} has {len(row)} fields, expected {len(head)}", None, path)
        try:
            item = ([float(row[i]) for i in xs], [int(row[i]) for i in ys], row[0] == "train")
        except ValueError as exc:
            raise FormatError(f"line {line}: {exc}", None, path) from None
        if row[0] == "query":
            query.append(item)
        elif row[0] in ("database", "train"):
            db.append(item)
        else:
            raise FormatError(f"line {line}: unknown split {row[0]!r}", None, path)
    items = query + db
    feats = np.array([it[0] for it in items], dtype=np.float32)
    labels = np.array([it[1] for it in items], dtype=np.uint8)
    train = [len(query) + i for i, it in enumerate(db) if it[2]]
    return Dataset(feats, labels, len(query), train)
