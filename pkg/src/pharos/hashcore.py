"""Binary hash codes: packing, Hamming arithmetic and the ``.phc`` code file.

A code of length K is a vector over {-1, +1}. It is stored packed into
little-endian 64-bit words: element ``k`` lives in word ``k // 64`` at bit
``k % 64``, +1 is a set bit, -1 a clear bit, and unused high bits are zero.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DimensionError, FormatError, InvalidInputError

MAX_BITS = 4096
PHC_MAGIC = b"PHC1"
_PHC_HEADER = struct.Struct("<4sIQ")


def n_words(k: int) -> int:
    return (k + 63) // 64


def _check_k(k: int) -> int:
    k = int(k)
    if not 1 <= k <= MAX_BITS:
        raise InvalidInputError(f"code length must be in [1, {MAX_BITS}], got {k}")
    return k


def pack_signs(signs) -> np.ndarray:
    """Pack a ``(N, K)`` (or ``(K,)``) array of +/-1 into ``(N, W)`` uint64 words."""
    s = np.asarray(signs)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    k = _check_k(s.shape[1])
    if not np.all((s == 1) | (s == -1)):
        raise InvalidInputError("hash code entries must be -1 or +1")
    w = n_words(k)
    bits = np.zeros((s.shape[0], w * 64), dtype=bool)
    bits[:, :k] = s > 0
    words = np.packbits(bits, axis=1, bitorder="little").view("<u8").astype(np.uint64)
    return words[0] if single else words


def unpack_words(words, k: int) -> np.ndarray:
    """Inverse of :func:`pack_signs`; returns int8 signs."""
    wd = np.asarray(words, dtype=np.uint64)
    single = wd.ndim == 1
    wd = np.atleast_2d(wd)
    if wd.shape[1] != n_words(k):
        raise DimensionError(f"{wd.shape[1]} words cannot hold exactly {k} bits")
    raw = np.ascontiguousarray(wd.astype("<u8")).view(np.uint8)
    bits = np.unpackbits(raw, axis=1, bitorder="little")[:, :k]
    signs = bits.astype(np.int8) * 2 - 1
    return signs[0] if single else signs


def _quantize(h: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(h)):
        raise InvalidInputError("cannot quantize non-finite values")
    # sign(0) = +1
    return np.where(h >= 0, 1, -1).astype(np.int8)


@dataclass(frozen=True, eq=False)
class HashCode:
    """A single immutable K-bit code."""

    k: int
    words: np.ndarray

    def __post_init__(self):
        k = _check_k(self.k)
        w = np.array(self.words, dtype=np.uint64).reshape(-1)
        if w.shape[0] != n_words(k):
            raise DimensionError(f"expected {n_words(k)} words for K={k}, got {w.shape[0]}")
        tail = k % 64
        if tail and int(w[-1]) >> tail:
            raise InvalidInputError("unused high bits of the last word must be zero")
        w.flags.writeable = False
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "words", w)

    @classmethod
    def from_signs(cls, signs) -> "HashCode":
        s = np.asarray(signs).reshape(-1)
        return cls(s.shape[0], pack_signs(s))

    def signs(self) -> np.ndarray:
        return unpack_words(self.words, self.k)

    def __len__(self):
        return self.k

    def __eq__(self, other):
        if not isinstance(other, HashCode):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.words, other.words)

    def __hash__(self):
        return hash((self.k, self.words.tobytes()))

    def __neg__(self):
        return negate(self)

    def __repr__(self):
        s = "".join("+" if v > 0 else "-" for v in self.signs()[:32])
        return f"HashCode(k={self.k}, {s}{'...' if self.k > 32 else ''})"


def sign_quantize(h) -> HashCode:
    """Quantize a real vector to a code; zero maps to +1."""
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    return HashCode.from_signs(_quantize(h))


def _pair_check(a: HashCode, b: HashCode):
    if a.k != b.k:
        raise DimensionError(f"code lengths differ: {a.k} vs {b.k}")


def hamming(a: HashCode, b: HashCode) -> int:
    _pair_check(a, b)
    return int(np.bitwise_count(a.words ^ b.words).sum())


def inner(a: HashCode, b: HashCode) -> int:
    """Inner product of the sign vectors."""
    _pair_check(a, b)
    return int(a.signs().astype(np.int64) @ b.signs().astype(np.int64))


def _tail_mask(words: np.ndarray, k: int) -> np.ndarray:
    tail = k % 64
    if tail:
        words[..., -1] &= np.uint64((1 << tail) - 1)
    return words


def negate(a):
    """Flip every bit of a HashCode or of every row of a CodeTable."""
    w = _tail_mask(~a.words, a.k)
    return type(a)(a.k, w)


def _rows_check(a, b):
    if a.k != b.k:
        raise DimensionError(f"code lengths differ: {a.k} vs {b.k}")
    if len(a) != len(b):
        raise DimensionError(f"row counts differ: {len(a)} vs {len(b)}")


def hamming_rows(a: "CodeTable", b: "CodeTable") -> np.ndarray:
    """Hamming distance between row i of ``a`` and row i of ``b``."""
    _rows_check(a, b)
    return np.bitwise_count(a.words ^ b.words).sum(axis=1, dtype=np.int64)


def inner_rows(a: "CodeTable", b: "CodeTable") -> np.ndarray:
    """Row-wise inner products of the sign vectors."""
    _rows_check(a, b)
    return np.einsum("ij,ij->i", a.signs().astype(np.int32), b.signs().astype(np.int32)).astype(np.int64)


@dataclass(frozen=True, eq=False)
class CodeTable:
    """N codes of equal length, packed row-wise as ``(N, W)`` uint64."""

    k: int
    words: np.ndarray

    def __post_init__(self):
        k = _check_k(self.k)
        w = np.array(self.words, dtype=np.uint64)
        if w.ndim == 1 and w.size == 0:
            w = w.reshape(0, n_words(k))
        if w.ndim != 2 or w.shape[1] != n_words(k):
            raise DimensionError(f"expected (N, {n_words(k)}) words for K={k}, got {w.shape}")
        w.flags.writeable = False
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "words", w)

    @classmethod
    def from_signs(cls, signs) -> "CodeTable":
        s = np.atleast_2d(np.asarray(signs))
        return cls(s.shape[1], pack_signs(s))

    @classmethod
    def from_real(cls, h) -> "CodeTable":
        """Row-wise :func:`sign_quantize`."""
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        return cls.from_signs(_quantize(h))

    @classmethod
    def from_codes(cls, codes) -> "CodeTable":
        codes = list(codes)
        if not codes:
            raise InvalidInputError("empty code list")
        k = codes[0].k
        for c in codes:
            _pair_check(codes[0], c)
        return cls(k, np.stack([c.words for c in codes]))

    def signs(self) -> np.ndarray:
        return np.atleast_2d(unpack_words(self.words, self.k)) if len(self) else np.zeros((0, self.k), np.int8)

    def __len__(self):
        return self.words.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return HashCode(self.k, self.words[i])
        return CodeTable(self.k, self.words[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, CodeTable):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.words, other.words)

    def distances(self, other: "CodeTable") -> np.ndarray:
        if self.k != other.k:
            raise DimensionError(f"code lengths differ: {self.k} vs {other.k}")
        return kernels.hamming_distances(self.words, other.words)

    def to_bytes(self) -> bytes:
        return _PHC_HEADER.pack(PHC_MAGIC, self.k, len(self)) + self.words.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0, path=None) -> tuple["CodeTable", int]:
        """Parse a ``.phc`` block at ``offset``; returns the table and the end offset."""
        end = offset + _PHC_HEADER.size
        if len(buf) < end:
            raise FormatError("truncated code header", len(buf), path)
        magic, k, n = _PHC_HEADER.unpack_from(buf, offset)
        if magic != PHC_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {PHC_MAGIC!r}", offset, path)
        if not 1 <= k <= MAX_BITS:
            raise FormatError(f"code length {k} out of range", offset + 4, path)
        w = n_words(k)
        stop = end + n * w * 8
        if len(buf) < stop:
            raise FormatError(f"truncated code rows: need {stop} bytes, have {len(buf)}", len(buf), path)
        words = np.frombuffer(buf, dtype="<u8", count=n * w, offset=end).reshape(n, w)
        tail = k % 64
        if tail and n and np.any(words[:, -1] >> np.uint64(tail)):
            raise FormatError("nonzero padding bits in code rows", end, path)
        return cls(k, words.astype(np.uint64)), stop


def write_phc(path, table: CodeTable) -> None:
    Path(path).write_bytes(table.to_bytes())


def read_phc(path) -> CodeTable:
    buf = Path(path).read_bytes()
    table, end = CodeTable.from_bytes(buf, 0, path)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after code rows", end, path)
    return table
