"""Euclidean ranking and k-reciprocal Jaccard re-ranking.

Distances are squared L2 throughout. All tie-breaking is by ascending
gallery index so results are deterministic. Re-ranking operates on a
square distance matrix over the joint query+gallery set; the final
distance is euclidean + lambda * jaccard over expanded reciprocal sets.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InvalidArgumentError, InvalidShapeError

PAND_MAGIC = b"PAND"


def pairwise_sqdist(queries, gallery):
    """Squared Euclidean distances, [n_query, n_gallery]."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise InvalidShapeError(f"dim mismatch: {q.shape} vs {g.shape}")
    d = (q**2).sum(axis=1)[:, None] + (g**2).sum(axis=1)[None, :] - 2.0 * (q @ g.T)
    np.maximum(d, 0.0, out=d)
    return d


@dataclass
class RankList:
    query_id: int
    order: np.ndarray  # gallery indices, ascending distance
    distances: np.ndarray  # distances in list order
    relevant: np.ndarray  # bool flags in list order


def _stable_order(row):
    # argsort with mergesort is stable; ties fall back to ascending index
    return np.argsort(row, kind="stable")


def rank(dist, query_meta, gallery_meta, cross_camera_only=False):
    """Per-query gallery orderings with relevance flags.

    ``query_meta``/``gallery_meta`` are sequences of (identity, camera).
    With ``cross_camera_only``, same-identity same-camera gallery items
    are removed from both the ranking and the relevance counts.
    """
    dist = np.asarray(dist, dtype=np.float64)
    nq, ng = dist.shape
    if len(query_meta) != nq or len(gallery_meta) != ng:
        raise InvalidArgumentError(
            f"metadata lengths ({len(query_meta)}, {len(gallery_meta)}) "
            f"vs matrix {dist.shape}"
        )
    g_id = np.array([m[0] for m in gallery_meta])
    g_cam = np.array([m[1] for m in gallery_meta])
    lists = []
    for qi in range(nq):
        ident, cam = query_meta[qi]
        keep = np.ones(ng, dtype=bool)
        if cross_camera_only:
            keep &= ~((g_id == ident) & (g_cam == cam))
        idx = np.nonzero(keep)[0]
        order = idx[_stable_order(dist[qi, idx])]
        lists.append(
            RankList(
                query_id=qi,
                order=order,
                distances=dist[qi, order].copy(),
                relevant=(g_id[order] == ident),
            )
        )
    return lists


@dataclass
class KReciprocalSet:
    anchor: int
    members: frozenset
    k: int


def _knn(dist, k):
    """k nearest neighbours per row, self excluded, index tie-break."""
    n = dist.shape[0]
    d = dist.copy()
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :k]


def k_reciprocal(anchor, k, dist, _nn=None):
    """R(p, k): items in p's top-k whose own top-k contains p."""
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if dist.shape[0] != dist.shape[1]:
        raise InvalidShapeError(f"expected square matrix, got {dist.shape}")
    if not 1 <= k < n:
        raise InvalidArgumentError(f"k must satisfy 1 <= k < {n}, got {k}")
    nn = _knn(dist, k) if _nn is None else _nn
    members = frozenset(int(x) for x in nn[anchor] if anchor in nn[x])
    return KReciprocalSet(anchor, members, k)


def expand_set(r, k, dist, _nn_half=None, _r_half=None):
    """R*: add half-k reciprocal sets of members overlapping R by >= 2/3."""
    dist = np.asarray(dist, dtype=np.float64)
    kh = (k + 1) // 2
    expanded = set(r.members)
    for q in sorted(r.members):
        if _r_half is not None:
            rq = _r_half[q]
        else:
            rq = k_reciprocal(q, kh, dist, _nn=_nn_half).members
        if rq and len(rq & r.members) >= (2.0 / 3.0) * len(rq):
            expanded |= rq
    return KReciprocalSet(r.anchor, frozenset(expanded), k)


def jaccard_distance(a, b):
    """1 - |a & b| / |a | b|; two empty sets are maximally dissimilar (1)."""
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 1.0
    return 1.0 - len(a & b) / len(union)


def expanded_sets(dist, k):
    """R* for every element of a square joint distance matrix."""
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if not 1 <= k < n:
        raise InvalidArgumentError(f"k must satisfy 1 <= k < {n}, got {k}")
    nn = _knn(dist, k)
    kh = (k + 1) // 2
    nn_half = nn[:, :kh]
    r_sets = [k_reciprocal(i, k, dist, _nn=nn) for i in range(n)]
    r_half = [
        frozenset(int(x) for x in nn_half[i] if i in nn_half[x]) for i in range(n)
    ]
    return [expand_set(r, k, dist, _r_half=r_half) for r in r_sets]


def rerank(dist, k=20, lam=1.0):
    """Final distances: euclidean + lam * jaccard over R* sets.

    ``dist`` is square over the joint query+gallery set; the full
    re-ranked square matrix is returned.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape[0] != dist.shape[1]:
        raise InvalidShapeError(f"rerank expects a square matrix, got {dist.shape}")
    if lam == 0.0:
        return dist.copy()
    n = dist.shape[0]
    sets = expanded_sets(dist, k)
    membership = np.zeros((n, n), dtype=bool)
    for i, s in enumerate(sets):
        membership[i, list(s.members)] = True
    sizes = membership.sum(axis=1)
    inter = (membership.astype(np.float64) @ membership.T.astype(np.float64))
    union = sizes[:, None] + sizes[None, :] - inter
    with np.errstate(invalid="ignore"):
        jac = 1.0 - np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return dist + lam * jac


def save_distances(path, dist, n_query, n_gallery):
    """Write "PAND": magic | u32 n_query | u32 n_gallery | f32 row-major."""
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape != (n_query, n_gallery):
        raise InvalidShapeError(f"matrix {dist.shape} vs ({n_query}, {n_gallery})")
    with open(path, "wb") as f:
        f.write(PAND_MAGIC)
        f.write(struct.pack("<II", n_query, n_gallery))
        f.write(dist.astype("<f4").tobytes())


def load_distances(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != PAND_MAGIC:
        raise DataError(f"{path}: bad magic {buf[:4]!r}, expected {PAND_MAGIC!r}")
    nq, ng = struct.unpack_from("<II", buf, 4)
    expected = 12 + 4 * nq * ng
    if len(buf) != expected:
        raise DataError(f"{path}: expected {expected} bytes, got {len(buf)}")
    vals = np.frombuffer(buf, dtype="<f4", offset=12).astype(np.float64)
    return vals.reshape(nq, ng)
