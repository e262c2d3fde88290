"""IVF-PQ approximate nearest-neighbour index.

A coarse k-means quantizer splits the space into ``nlist`` inverted lists.
Each vector is stored as its list id plus ``m`` one-byte codes that quantize
the residual ``x - centroid`` one subspace at a time. Queries are scored
with asymmetric distance computation (ADC): the raw query residual against
per-subspace lookup tables.

Binary layout (little-endian)::

    b"LFAIVFPQ1"
    version u32 | D u32 | nlist u32 | m u32 | k_pq u32 | N u64 | seed u64
    coarse centroids   nlist * D          float32
    codebooks          m * k_pq * (D/m)   float32
    nlist x [ length u64 | ids length*u64 | codes length*m u8 ]
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from lfakit.kmeans import KMeansModel, as_matrix, assign_exact, derive_seed, kmeans
from lfakit.manifest import EmbeddingStore

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"LFAIVFPQ1"
INDEX_VERSION = 1
_HEADER = struct.Struct("<IIIIIQQ")
_U64 = struct.Struct("<Q")


class IndexFormatError(ValueError):
    pass


@dataclass(eq=False)
class PqCodebook:
    m: int
    sub_dim: int
    k_pq: int
    codebooks: np.ndarray  # (m, k_pq, sub_dim) float32


@dataclass(eq=False)
class IvfPqIndex:
    dim: int
    nlist: int
    coarse: KMeansModel
    pq: PqCodebook
    seed: int = 0
    list_ids: list = field(default_factory=list)    # nlist arrays of uint64
    list_codes: list = field(default_factory=list)  # nlist arrays of uint8, shape (n_i, m)

    def __post_init__(self):
        if not self.list_ids:
            self.list_ids = [np.empty(0, dtype=np.uint64) for _ in range(self.nlist)]
            self.list_codes = [np.empty((0, self.pq.m), dtype=np.uint8) for _ in range(self.nlist)]

    @property
    def m(self) -> int:
        return self.pq.m

    @property
    def ntotal(self) -> int:
        return int(sum(len(ids) for ids in self.list_ids))

    def add(self, data, ids=None) -> None:
        x = as_matrix(data)
        if x.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: index D={self.dim}, data D={x.shape[1]}")
        if ids is None:
            start = self.ntotal
            ids = np.arange(start, start + len(x), dtype=np.uint64)
        ids = np.asarray(ids, dtype=np.uint64)
        if len(ids) != len(x):
            raise ValueError("ids and data lengths differ")
        list_no, codes = encode_batch(x, self)
        for l in np.unique(list_no):
            sel = list_no == l
            self.list_ids[l] = np.concatenate([self.list_ids[l], ids[sel]])
            self.list_codes[l] = np.concatenate([self.list_codes[l], codes[sel]])

    def reconstruct(self, list_id: int, codes) -> np.ndarray:
        cb = self.pq.codebooks.astype(np.float64)
        parts = cb[np.arange(self.m), np.asarray(codes, dtype=np.int64)]
        return self.coarse.centroids[list_id].astype(np.float64) + parts.reshape(-1)


@dataclass
class SearchResult:
    ids: np.ndarray        # uint64, ascending distance, ties by ascending id
    distances: np.ndarray  # squared L2 (ADC)

    @property
    def neighbors(self) -> list:
        return [(int(i), float(d)) for i, d in zip(self.ids, self.distances)]

    def __len__(self):
        return len(self.ids)


# --- defaults -------------------------------------------------------------

def default_nlist(n: int) -> int:
    nlist = min(max(4 * math.ceil(math.sqrt(max(n, 0))), 8), 1024)
    return max(1, min(nlist, n))


def default_nprobe(nlist: int) -> int:
    return max(1, nlist // 8)


# --- training -------------------------------------------------------------

def normalize_rows(store) -> EmbeddingStore:
    x = np.asarray(as_matrix(store), dtype=np.float64)
    norms = np.sqrt((x * x).sum(1))
    zero = np.flatnonzero(norms == 0.0)
    if len(zero):
        raise ValueError(f"zero-norm row {int(zero[0])} cannot be normalized")
    return EmbeddingStore((x / norms[:, None]).astype(np.float32))


def _split(x: np.ndarray, m: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, m, d // m)


def train_pq(data, assignments, coarse: KMeansModel, m: int, seed: int = 0,
             k_pq: int = 256, max_iter: int = 25, tol: float = 1e-4) -> PqCodebook:
    x = np.asarray(as_matrix(data), dtype=np.float64)
    n, d = x.shape
    if m < 1 or d % m:
        raise ValueError(f"dimension not divisible: D={d}, m={m}")
    if k_pq > 256:
        raise ValueError("k_pq must fit in one byte (<= 256)")
    if n < k_pq:
        logger.warning("only %d training vectors; capping PQ codebook size at %d", n, n)
        k_pq = n
    if k_pq < 1:
        raise ValueError("cannot train PQ on an empty dataset")
    resid = x - coarse.centroids.astype(np.float64)[np.asarray(assignments)]
    sub = _split(resid, m)
    books = np.empty((m, k_pq, d // m), dtype=np.float32)
    for j in range(m):
        books[j] = kmeans(sub[:, j, :], k_pq, seed=derive_seed(seed, 1, j),
                          max_iter=max_iter, tol=tol).centroids
    return PqCodebook(m=m, sub_dim=d // m, k_pq=k_pq, codebooks=books)


def train_index(data, nlist: Optional[int] = None, m: int = 8, seed: int = 0,
                k_pq: int = 256, max_iter: int = 25, tol: float = 1e-4) -> IvfPqIndex:
    """Train the coarse quantizer and codebooks; the returned index is empty."""
    x = as_matrix(data)
    n, d = x.shape
    if d % m:
        raise ValueError(f"dimension not divisible: D={d}, m={m}")
    nlist = default_nlist(n) if nlist is None else nlist
    coarse = kmeans(x, nlist, seed=derive_seed(seed, 0), max_iter=max_iter, tol=tol)
    labels, _ = assign_exact(x, coarse.centroids)
    pq = train_pq(x, labels, coarse, m, seed=seed, k_pq=k_pq, max_iter=max_iter, tol=tol)
    return IvfPqIndex(dim=d, nlist=nlist, coarse=coarse, pq=pq, seed=int(seed))


def build_index(data, nlist: Optional[int] = None, m: int = 8, seed: int = 0,
                k_pq: int = 256, ids=None, **kw) -> IvfPqIndex:
    index = train_index(data, nlist=nlist, m=m, seed=seed, k_pq=k_pq, **kw)
    index.add(data, ids=ids)
    return index


# --- encoding and search --------------------------------------------------

def encode_batch(data, index: IvfPqIndex) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(as_matrix(data), dtype=np.float64)
    if x.shape[1] != index.dim:
        raise ValueError(f"dimension mismatch: index D={index.dim}, vector D={x.shape[1]}")
    list_no, _ = assign_exact(x, index.coarse.centroids)
    resid = _split(x - index.coarse.centroids.astype(np.float64)[list_no], index.m)
    codes = np.empty((len(x), index.m), dtype=np.uint8)
    for j in range(index.m):
        codes[:, j], _ = assign_exact(resid[:, j, :], index.pq.codebooks[j])
    return list_no, codes


def encode(x, index: IvfPqIndex) -> tuple[int, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    list_no, codes = encode_batch(x, index)
    return int(list_no[0]), codes[0]


def adc_tables(residual: np.ndarray, index: IvfPqIndex) -> np.ndarray:
    """(m, k_pq) squared distances from each residual subvector to each codeword."""
    r = residual.reshape(index.m, 1, index.pq.sub_dim)
    return ((r - index.pq.codebooks.astype(np.float64)) ** 2).sum(-1)


def _top_k(ids: np.ndarray, dists: np.ndarray, k: int) -> SearchResult:
    order = np.lexsort((ids, dists))[:k]
    return SearchResult(ids[order], dists[order])


def search(query, index: IvfPqIndex, k: int, nprobe: Optional[int] = None) -> SearchResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != index.dim:
        raise ValueError(f"dimension mismatch: index D={index.dim}, query D={q.shape[0]}")
    nprobe = default_nprobe(index.nlist) if nprobe is None else nprobe
    if not 1 <= nprobe <= index.nlist:
        raise ValueError(f"nprobe must lie in [1, {index.nlist}], got {nprobe}")
    cents = index.coarse.centroids.astype(np.float64)
    cd = ((cents - q) ** 2).sum(1)
    probes = np.lexsort((np.arange(index.nlist), cd))[:nprobe]
    all_ids, all_d = [], []
    rows = np.arange(index.m)
    for l in probes:
        ids = index.list_ids[l]
        if not len(ids):
            continue
        table = adc_tables(q - cents[l], index)
        all_ids.append(ids)
        all_d.append(table[rows, index.list_codes[l].astype(np.int64)].sum(1))
    if not all_ids:
        return SearchResult(np.empty(0, dtype=np.uint64), np.empty(0))
    return _top_k(np.concatenate(all_ids), np.concatenate(all_d), k)


def exact_knn(query, data, k: int) -> SearchResult:
    """Brute-force squared-L2 kNN, ties by ascending row id."""
    x = np.asarray(as_matrix(data), dtype=np.float64)
    q = np.asarray(query, dtype=np.float64).ravel()
    d = ((x - q) ** 2).sum(1)
    return _top_k(np.arange(len(x), dtype=np.uint64), d, k)


# --- serialization --------------------------------------------------------

def serialize_index(index: IvfPqIndex) -> bytes:
    parts = [INDEX_MAGIC,
             _HEADER.pack(INDEX_VERSION, index.dim, index.nlist, index.m, index.pq.k_pq,
                          index.ntotal, index.seed & 0xFFFFFFFFFFFFFFFF),
             np.ascontiguousarray(index.coarse.centroids, dtype="<f4").tobytes(),
             np.ascontiguousarray(index.pq.codebooks, dtype="<f4").tobytes()]
    for ids, codes in zip(index.list_ids, index.list_codes):
        parts.append(_U64.pack(len(ids)))
        parts.append(np.ascontiguousarray(ids, dtype="<u8").tobytes())
        parts.append(np.ascontiguousarray(codes, dtype=np.uint8).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise IndexFormatError(f"truncated index while reading {what} at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def deserialize_index(buf: bytes) -> IvfPqIndex:
    rd = _Reader(buf)
    if rd.take(len(INDEX_MAGIC), "magic") != INDEX_MAGIC:
        raise IndexFormatError("bad magic; not an IVF-PQ index")
    version, dim, nlist, m, k_pq, ntotal, seed = _HEADER.unpack(rd.take(_HEADER.size, "header"))
    if version != INDEX_VERSION:
        raise IndexFormatError(f"unsupported index version {version} (expected {INDEX_VERSION})")
    if m == 0 or dim % m:
        raise IndexFormatError(f"header D={dim} not divisible by m={m}")
    sub = dim // m
    cents = np.frombuffer(rd.take(4 * nlist * dim, "coarse centroids"), dtype="<f4").reshape(nlist, dim)
    books = np.frombuffer(rd.take(4 * m * k_pq * sub, "codebooks"), dtype="<f4").reshape(m, k_pq, sub)
    list_ids, list_codes = [], []
    for l in range(nlist):
        (n,) = _U64.unpack(rd.take(8, f"list {l} length"))
        list_ids.append(np.frombuffer(rd.take(8 * n, f"list {l} ids"), dtype="<u8").astype(np.uint64))
        list_codes.append(np.frombuffer(rd.take(n * m, f"list {l} codes"), dtype=np.uint8)
                          .reshape(n, m).copy())
    if rd.pos != len(buf):
        raise IndexFormatError(f"{len(buf) - rd.pos} trailing bytes after index payload")
    if sum(len(i) for i in list_ids) != ntotal:
        raise IndexFormatError("list lengths do not sum to header N")
    coarse = KMeansModel(k=nlist, dim=dim, centroids=cents.astype(np.float32), seed=seed)
    pq = PqCodebook(m=m, sub_dim=sub, k_pq=k_pq, codebooks=books.astype(np.float32))
    return IvfPqIndex(dim=dim, nlist=nlist, coarse=coarse, pq=pq, seed=seed,
                      list_ids=list_ids, list_codes=list_codes)


def save_index(index: IvfPqIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_index(index))


def load_index(path) -> IvfPqIndex:
    with open(path, "rb") as fh:
        return deserialize_index(fh.read())
