"""Label semantics, pair weights and pharos-code generation.

The pharos code of a query is the code closest (in weighted Hamming terms) to
its positive samples and farthest from its negatives. For a pool with positive
codes ``b_i`` (weights ``w_i``) and negative codes ``b_j`` (weights ``w_j``)
the objective is the double sum

    psi(b) = sum_i sum_j [w_i * D_H(b, b_i) - w_j * D_H(b, b_j)]

and its minimizer has the closed form

    b* = sign(sum_i sum_j (w_i * b_i - w_j * b_j))
       = sign(N_n * sum_i w_i b_i - N_p * sum_j w_j b_j).

When one side of the pool is empty the surviving single sum is used as is
(no multiplication by the zero count), which makes a positives-only pharos
code the plain majority vote. Zero coordinate sums resolve to +1.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, GuardError, InvalidInputError
from .hashcore import CodeTable, HashCode

PHL_MAGIC = b"PHL1"
_PHL_HEADER = struct.Struct("<4sIQ")

BRUTEFORCE_MAX_BITS = 16

SCHEMES = ("dice", "binary")


def as_labels(y, c: int | None = None) -> np.ndarray:
    """Validate a label vector or ``(N, C)`` label matrix and return it as uint8."""
    arr = np.asarray(y)
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise InvalidInputError("label entries must be 0 or 1")
    arr = arr.astype(np.uint8)
    if c is not None and arr.shape[-1] != c:
        raise DimensionError(f"label length {arr.shape[-1]} != {c}")
    if arr.ndim == 1 and arr.size and not arr.any():
        raise InvalidInputError("label vector has no active label")
    if arr.ndim == 2 and arr.size and not arr.any(axis=1).all():
        raise InvalidInputError(f"label row {int(np.flatnonzero(~arr.any(axis=1))[0])} has no active label")
    return arr


def dice_similarity(y, y2) -> float:
    """``2 |y & y2| / (|y| + |y2|)``."""
    y = as_labels(y)
    y2 = as_labels(y2, y.shape[-1])
    inter = int(np.sum(y & y2))
    return 2.0 * inter / (int(y.sum()) + int(y2.sum()))


def pair_weights(s: float, role: str) -> float:
    """Distance weight of a pool item with similarity ``s``: ``s`` for a positive, ``1 - s`` for a negative."""
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise InvalidInputError(f"similarity must be in [0, 1], got {s}")
    if role == "positive":
        return s
    if role == "negative":
        return 1.0 - s
    raise InvalidInputError(f"role must be 'positive' or 'negative', got {role!r}")


def partition_pool(query_label, pool_labels) -> tuple[np.ndarray, np.ndarray]:
    """Split pool indices into items sharing at least one label with the query and the rest."""
    q = as_labels(query_label)
    labels = as_labels(np.atleast_2d(pool_labels), q.shape[-1])
    shared = labels.astype(np.int32) @ q.astype(np.int32) > 0
    return np.flatnonzero(shared), np.flatnonzero(~shared)


@dataclass(frozen=True, eq=False)
class WeightedPool:
    """Positive and negative codes of one query with their distance weights."""

    codes: CodeTable
    pos: np.ndarray
    neg: np.ndarray
    w_pos: np.ndarray
    w_neg: np.ndarray
    scheme: str = "dice"

    def __post_init__(self):
        pos = np.asarray(self.pos, dtype=np.int64).reshape(-1)
        neg = np.asarray(self.neg, dtype=np.int64).reshape(-1)
        w_pos = np.asarray(self.w_pos, dtype=np.float64).reshape(-1)
        w_neg = np.asarray(self.w_neg, dtype=np.float64).reshape(-1)
        if pos.shape != w_pos.shape or neg.shape != w_neg.shape:
            raise DimensionError("one weight per pool index is required")
        if np.intersect1d(pos, neg).size:
            raise InvalidInputError("positive and negative index sets overlap")
        if np.any(w_pos < 0) or np.any(w_neg < 0) or not (np.all(np.isfinite(w_pos)) and np.all(np.isfinite(w_neg))):
            raise InvalidInputError("weights must be finite and non-negative")
        n = len(self.codes)
        for idx in (pos, neg):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise InvalidInputError("pool index out of range")
        for name, val in (("pos", pos), ("neg", neg), ("w_pos", w_pos), ("w_neg", w_neg)):
            val.flags.writeable = False
            object.__setattr__(self, name, val)

    @property
    def k(self) -> int:
        return self.codes.k

    @property
    def n_pos(self) -> int:
        return self.pos.shape[0]

    @property
    def n_neg(self) -> int:
        return self.neg.shape[0]

    def pos_signs(self) -> np.ndarray:
        return self.codes[self.pos].signs().astype(np.float64)

    def neg_signs(self) -> np.ndarray:
        return self.codes[self.neg].signs().astype(np.float64)

    @classmethod
    def from_codes(cls, positives, negatives=(), w_pos=None, w_neg=None, scheme="given"):
        """Build a pool directly from code lists (weights default to 1)."""
        positives, negatives = list(positives), list(negatives)
        table = CodeTable.from_codes(positives + negatives)
        npos, nneg = len(positives), len(negatives)
        w_pos = np.ones(npos) if w_pos is None else w_pos
        w_neg = np.ones(nneg) if w_neg is None else w_neg
        return cls(table, np.arange(npos), np.arange(npos, npos + nneg), w_pos, w_neg, scheme)


def weighted_pool(query_label, codes: CodeTable, labels, scheme: str = "dice", cap: int | None = None,
                  seed: int = 0) -> WeightedPool:
    """Partition a labelled code table around ``query_label`` and weight it.

    ``scheme="dice"`` uses Dice similarity of the label sets; ``"binary"``
    uses s=1 for positives and s=0 for negatives. ``cap`` keeps a seeded random
    subset of at most ``cap`` pool items (chosen before partitioning).
    """
    if scheme not in SCHEMES:
        raise InvalidInputError(f"unknown weight scheme {scheme!r}")
    q = as_labels(query_label)
    labels = as_labels(np.atleast_2d(labels), q.shape[-1])
    if labels.shape[0] != len(codes):
        raise DimensionError(f"{labels.shape[0]} label rows for {len(codes)} codes")
    keep = _cap_indices(len(codes), cap, seed)
    pos, neg = partition_pool(q, labels[keep])
    pos, neg = keep[pos], keep[neg]
    if scheme == "dice":
        s = _dice_rows(q[None, :], labels)[0]
    else:
        s = (labels.astype(np.int32) @ q.astype(np.int32) > 0).astype(np.float64)
    return WeightedPool(codes, pos, neg, s[pos], 1.0 - s[neg], scheme)


def _cap_indices(n: int, cap: int | None, seed: int) -> np.ndarray:
    if cap is None or cap >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=cap, replace=False))


def _dice_rows(q_labels: np.ndarray, labels: np.ndarray) -> np.ndarray:
    inter = q_labels.astype(np.float64) @ labels.T.astype(np.float64)
    sizes = q_labels.sum(axis=1, dtype=np.float64)[:, None] + labels.sum(axis=1, dtype=np.float64)[None, :]
    return 2.0 * inter / sizes


@dataclass(frozen=True)
class PharosCode:
    code: HashCode
    n_pos: int
    n_neg: int
    scheme: str
    ties: int


def _side_factors(n_pos: int, n_neg: int) -> tuple[float, float]:
    # double-sum repetition factors; an empty side does not zero the other one
    return float(n_neg if n_neg else 1), float(n_pos if n_pos else 1)


def coordinate_sums(pool: WeightedPool) -> np.ndarray:
    """``sum_i sum_j (w_i b_i - w_j b_j)`` per bit, with the empty-side convention."""
    if pool.n_pos + pool.n_neg == 0:
        raise InvalidInputError("empty pharos pool")
    fp, fn = _side_factors(pool.n_pos, pool.n_neg)
    total = np.zeros(pool.k)
    if pool.n_pos:
        total += fp * (pool.w_pos @ pool.pos_signs())
    if pool.n_neg:
        total -= fn * (pool.w_neg @ pool.neg_signs())
    return total


def pgm_pharos(pool: WeightedPool) -> PharosCode:
    """Closed-form pharos code of ``pool``."""
    sums = coordinate_sums(pool)
    code = HashCode.from_signs(np.where(sums >= 0, 1, -1))
    return PharosCode(code, pool.n_pos, pool.n_neg, pool.scheme, int(np.count_nonzero(sums == 0)))


def psi_objective(b: HashCode, pool: WeightedPool) -> float:
    """Weighted double-sum objective minimized by the pharos code."""
    if b.k != pool.k:
        raise DimensionError(f"code length {b.k} != pool code length {pool.k}")
    if pool.n_pos + pool.n_neg == 0:
        raise InvalidInputError("empty pharos pool")
    return float(_psi_many(b.signs()[None, :].astype(np.float64), pool)[0])


def _psi_many(cands: np.ndarray, pool: WeightedPool) -> np.ndarray:
    # cands: (M, K) float signs. Distances via D_H = (K - <a, b>) / 2.
    k = pool.k
    fp, fn = _side_factors(pool.n_pos, pool.n_neg)
    out = np.zeros(cands.shape[0])
    if pool.n_pos:
        d_pos = (k - cands @ pool.pos_signs().T) / 2.0
        out += fp * (d_pos @ pool.w_pos)
    if pool.n_neg:
        d_neg = (k - cands @ pool.neg_signs().T) / 2.0
        out -= fn * (d_neg @ pool.w_neg)
    return out


def all_codes(k: int) -> np.ndarray:
    """Every code of length ``k`` as ``(2**k, k)`` int8 signs, in packed-integer order."""
    if k > BRUTEFORCE_MAX_BITS:
        raise GuardError(f"exhaustive enumeration limited to K <= {BRUTEFORCE_MAX_BITS}, got {k}")
    ints = np.arange(2 ** k, dtype=np.int64)
    bits = (ints[:, None] >> np.arange(k)) & 1
    return (bits * 2 - 1).astype(np.int8)


def pharos_bruteforce(pool: WeightedPool) -> HashCode:
    """Exhaustive argmin of :func:`psi_objective`; smallest packed integer wins ties."""
    if pool.k > BRUTEFORCE_MAX_BITS:
        raise GuardError(f"brute force limited to K <= {BRUTEFORCE_MAX_BITS}, got {pool.k}")
    if pool.n_pos + pool.n_neg == 0:
        raise InvalidInputError("empty pharos pool")
    cands = all_codes(pool.k)
    vals = _psi_many(cands.astype(np.float64), pool)
    return HashCode.from_signs(cands[int(np.argmin(vals))])


def anchor_code(codes) -> HashCode:
    """Per-bit majority vote over ``codes`` (a CodeTable or a list of HashCode)."""
    table = codes if isinstance(codes, CodeTable) else CodeTable.from_codes(codes) if len(codes) else None
    if table is None or len(table) == 0:
        raise InvalidInputError("anchor code needs at least one code")
    sums = table.signs().astype(np.int64).sum(axis=0)
    return HashCode.from_signs(np.where(sums >= 0, 1, -1))


def _label_groups(labels: np.ndarray):
    """Distinct label rows, the inverse map and the counts (rows sorted by bit key)."""
    c = labels.shape[1]
    if c <= 62:
        key = labels.astype(np.int64) @ (np.int64(1) << np.arange(c, dtype=np.int64))
        _, first, inv, counts = np.unique(key, return_index=True, return_inverse=True, return_counts=True)
        return labels[first], inv.reshape(-1), counts
    groups, inv, counts = np.unique(labels, axis=0, return_inverse=True, return_counts=True)
    return groups, inv.reshape(-1), counts


def pharos_batch(query_labels, codes: CodeTable, labels, scheme: str = "dice", cap: int | None = None,
                 seed: int = 0) -> tuple[CodeTable, np.ndarray]:
    """Pharos codes for many queries against one pool.

    Equivalent to ``pgm_pharos(weighted_pool(q, codes, labels, scheme))`` per
    query. Weights depend only on the pair of label sets, so pool codes are
    summed per distinct label set first and the weighting happens on the
    (query set x pool set) grid. ``cap`` keeps the same seeded pool subset
    for every query. Returns the codes and per-query tie counts.
    """
    if scheme not in SCHEMES:
        raise InvalidInputError(f"unknown weight scheme {scheme!r}")
    q = as_labels(np.atleast_2d(query_labels))
    labels = as_labels(np.atleast_2d(labels), q.shape[1])
    if labels.shape[0] != len(codes):
        raise DimensionError(f"{labels.shape[0]} label rows for {len(codes)} codes")
    if len(codes) == 0:
        raise InvalidInputError("empty pharos pool")
    keep = _cap_indices(len(codes), cap, seed)
    if keep.size < len(codes):
        codes, labels = codes[keep], labels[keep]
    groups, inv, counts = _label_groups(labels)
    order = np.argsort(inv, kind="stable")
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    group_sums = np.add.reduceat(codes.signs()[order].astype(np.float64), starts, axis=0)
    q_groups, q_inv, _ = _label_groups(q)

    positive = q_groups.astype(np.int64) @ groups.T.astype(np.int64) > 0
    if scheme == "dice":
        s = _dice_rows(q_groups, groups)
    else:
        s = positive.astype(np.float64)
    n_pos = positive @ counts
    n_neg = len(codes) - n_pos
    f_pos = np.where(n_neg > 0, n_neg, 1).astype(np.float64)[:, None]
    f_neg = np.where(n_pos > 0, n_pos, 1).astype(np.float64)[:, None]
    w = np.where(positive, s * f_pos, (s - 1.0) * f_neg)
    sums = (w @ group_sums)[q_inv]
    signs = np.where(sums >= 0, 1, -1).astype(np.int8)
    return CodeTable.from_signs(signs), np.count_nonzero(sums == 0, axis=1)


def write_phl(path, labels) -> None:
    Path(path).write_bytes(labels_to_bytes(labels))


def labels_to_bytes(labels) -> bytes:
    lab = as_labels(np.atleast_2d(labels))
    return _PHL_HEADER.pack(PHL_MAGIC, lab.shape[1], lab.shape[0]) + lab.tobytes()


def labels_from_bytes(buf: bytes, offset: int = 0, path=None) -> tuple[np.ndarray, int]:
    end = offset + _PHL_HEADER.size
    if len(buf) < end:
        raise FormatError("truncated label header", len(buf), path)
    magic, c, n = _PHL_HEADER.unpack_from(buf, offset)
    if magic != PHL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {PHL_MAGIC!r}", offset, path)
    if c < 1:
        raise FormatError("label width must be positive", offset + 4, path)
    stop = end + n * c
    if len(buf) < stop:
        raise FormatError(f"truncated label rows: need {stop} bytes, have {len(buf)}", len(buf), path)
    lab = np.frombuffer(buf, dtype=np.uint8, count=n * c, offset=end).reshape(n, c).copy()
    if lab.size and lab.max() > 1:
        bad = int(np.flatnonzero(lab.reshape(-1) > 1)[0])
        raise FormatError("label bytes must be 0 or 1", end + bad, path)
    return lab, stop


def read_phl(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    lab, end = labels_from_bytes(buf, 0, path)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after label rows", end, path)
    return lab
