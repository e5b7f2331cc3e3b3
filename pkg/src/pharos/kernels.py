"""Hot loops of the retrieval path: XOR/popcount distances, top-N ranking, AP.

Each kernel exists twice, as a numba ``_nb`` function and a numpy ``_np``
function. The unsuffixed name dispatches on :data:`pharos._accel.USE_NUMBA`.
Both paths are exact integer arithmetic for the distance and ranking kernels,
so they must agree bit for bit.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# Rows processed per chunk by the numpy path; bounds the (Q, N, W) XOR buffer.
_NP_CHUNK = 64


# --- numba ------------------------------------------------------------------


@njit(inline="always")
def _popcount64(x):
    x = x - ((x >> np.uint64(1)) & np.uint64(0x5555555555555555))
    x = (x & np.uint64(0x3333333333333333)) + ((x >> np.uint64(2)) & np.uint64(0x3333333333333333))
    x = (x + (x >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return (x * np.uint64(0x0101010101010101)) >> np.uint64(56)


@njit
def hamming_distances_nb(q_words, db_words):
    nq, w = q_words.shape
    n = db_words.shape[0]
    out = np.empty((nq, n), dtype=np.int32)
    for a in range(nq):
        for b in range(n):
            d = 0
            for j in range(w):
                d += _popcount64(q_words[a, j] ^ db_words[b, j])
            out[a, b] = d
    return out


@njit
def hamming_topn_nb(q_words, db_words, k_bits, topn):
    # Counting sort on distance: buckets are visited in increasing distance and
    # filled in increasing id, which is exactly the (distance, id) order.
    nq, w = q_words.shape
    n = db_words.shape[0]
    ids = np.empty((nq, topn), dtype=np.int64)
    dists = np.empty((nq, topn), dtype=np.int32)
    dist = np.empty(n, dtype=np.int32)
    counts = np.empty(k_bits + 2, dtype=np.int64)
    for a in range(nq):
        counts[:] = 0
        for b in range(n):
            d = 0
            for j in range(w):
                d += _popcount64(q_words[a, j] ^ db_words[b, j])
            dist[b] = d
            counts[d + 1] += 1
        for d in range(1, k_bits + 2):
            counts[d] += counts[d - 1]
        # counts[d] is now the first output slot for distance d
        for b in range(n):
            d = dist[b]
            pos = counts[d]
            if pos < topn:
                ids[a, pos] = b
                dists[a, pos] = d
            counts[d] = pos + 1
    return ids, dists


@njit
def average_precision_nb(rel):
    nq, n = rel.shape
    out = np.zeros(nq, dtype=np.float64)
    for a in range(nq):
        hits = 0
        acc = 0.0
        for k in range(n):
            if rel[a, k]:
                hits += 1
                acc += hits / (k + 1.0)
        if hits > 0:
            out[a] = acc / hits
    return out


# --- numpy ------------------------------------------------------------------


def hamming_distances_np(q_words, db_words):
    q_words = np.asarray(q_words, dtype=np.uint64)
    db_words = np.asarray(db_words, dtype=np.uint64)
    out = np.empty((q_words.shape[0], db_words.shape[0]), dtype=np.int32)
    for lo in range(0, q_words.shape[0], _NP_CHUNK):
        x = np.bitwise_xor(q_words[lo:lo + _NP_CHUNK, None, :], db_words[None, :, :])
        out[lo:lo + _NP_CHUNK] = np.bitwise_count(x).sum(axis=2, dtype=np.int32)
    return out


def hamming_topn_np(q_words, db_words, k_bits, topn):
    dist = hamming_distances_np(q_words, db_words)
    order = np.argsort(dist, axis=1, kind="stable")[:, :topn]
    return order.astype(np.int64), np.take_along_axis(dist, order, axis=1)


def average_precision_np(rel):
    rel = np.asarray(rel, dtype=bool)
    hits = np.cumsum(rel, axis=1)
    prec = hits / np.arange(1, rel.shape[1] + 1)
    n_rel = hits[:, -1] if rel.shape[1] else np.zeros(rel.shape[0], dtype=np.int64)
    total = np.where(rel, prec, 0.0).sum(axis=1)
    return np.divide(total, n_rel, out=np.zeros(rel.shape[0]), where=n_rel > 0)


# --- dispatch ---------------------------------------------------------------


def _c_words(words):
    return np.ascontiguousarray(words, dtype=np.uint64)


def hamming_distances(q_words, db_words, use_numba=None):
    """All-pairs Hamming distances between two packed code tables, ``(Q, N)`` int32."""
    if USE_NUMBA if use_numba is None else use_numba:
        return hamming_distances_nb(_c_words(q_words), _c_words(db_words))
    return hamming_distances_np(q_words, db_words)


def hamming_topn(q_words, db_words, k_bits, topn, use_numba=None):
    """Ids and distances of the ``topn`` nearest database rows per query.

    Ordering is by distance, then by database id. ``topn`` is clamped to N.
    """
    topn = int(min(topn, len(db_words)))
    if USE_NUMBA if use_numba is None else use_numba:
        return hamming_topn_nb(_c_words(q_words), _c_words(db_words), int(k_bits), topn)
    return hamming_topn_np(q_words, db_words, k_bits, topn)


def average_precision_rows(rel, use_numba=None):
    """AP of each row of a 0/1 relevance matrix, normalized by hits in the row."""
    rel = np.ascontiguousarray(rel, dtype=np.bool_)
    if rel.ndim != 2:
        raise ValueError("relevance matrix must be 2-D")
    if USE_NUMBA if use_numba is None else use_numba:
        return average_precision_nb(rel)
    return average_precision_np(rel)
