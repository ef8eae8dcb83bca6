"""Vector and graph file formats.

``.fvecs`` / ``.bvecs`` / ``.ivecs``: per vector a little-endian int32
dimension followed by that many float32 / uint8 / int32 components.

Graph files: a 28-byte header (magic ``KNNG0001``, uint64 n, uint32 k,
uint32 metric code, uint32 flags) followed by ``n*k`` records of
``(id, float32 dist)``; ids are uint32, or uint64 when ``WIDE_IDS`` is set.
Everything is little-endian.
"""

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError
from .graph import Dataset, KnnGraph
from .knnlist import OLD, SENTINEL_ID
from .metrics import Metric

MAGIC = b"KNNG0001"
_HEADER = struct.Struct("<8sQIII")

GLOBAL_IDS = 1 << 0
WIDE_IDS = 1 << 1

_COMPONENT = {
    "fvecs": np.dtype("<f4"),
    "bvecs": np.dtype("u1"),
    "ivecs": np.dtype("<i4"),
}


def vecs_kind(path, kind=None):
    kind = kind or Path(path).suffix.lstrip(".").lower()
    if kind not in _COMPONENT:
        raise UsageError(f"unknown vector format {kind!r} for {path}; expected fvecs, bvecs or ivecs")
    return kind


def _locate_defect(buf, comp_size):
    """Byte offset and reason of the first bad record in a vecs buffer."""
    off = 0
    d0 = None
    while off < len(buf):
        if off + 4 > len(buf):
            return off, "truncated dimension header"
        (d,) = struct.unpack_from("<i", buf, off)
        if d < 1:
            return off, f"invalid dimension {d}"
        if d0 is None:
            d0 = d
        elif d != d0:
            return off, f"dimension {d} differs from first vector's {d0}"
        if off + 4 + d * comp_size > len(buf):
            return off, "truncated vector body"
        off += 4 + d * comp_size
    return None


def load_vecs(path, kind=None, mmap=False):
    """Raw component matrix of a vecs file, in its stored dtype."""
    kind = vecs_kind(path, kind)
    comp = _COMPONENT[kind]
    size = os.path.getsize(path)
    if size == 0:
        raise FormatError(f"{path}: empty vector file", 0)
    if size < 4:
        raise FormatError(f"{path}: truncated dimension header", 0)
    with open(path, "rb") as f:
        (d,) = struct.unpack("<i", f.read(4))
    rec = 4 + d * comp.itemsize
    if d < 1 or size % rec:
        with open(path, "rb") as f:
            bad = _locate_defect(f.read(), comp.itemsize)
        offset, reason = bad if bad else (0, "size is not a whole number of records")
        raise FormatError(f"{path}: {reason}", offset)
    n = size // rec
    if mmap:
        raw = np.memmap(path, dtype=np.uint8, mode="r", shape=(n, rec))
    else:
        raw = np.fromfile(path, dtype=np.uint8).reshape(n, rec)
    dims = raw[:, :4].view("<i4").ravel()
    bad = np.flatnonzero(dims != d)
    if bad.size:
        raise FormatError(f"{path}: dimension {int(dims[bad[0]])} differs from first vector's {d}",
                          int(bad[0]) * rec)
    body = raw[:, 4:]
    if mmap:
        # strided view; rows are copied out only when sliced
        return body.view(comp)
    return np.ascontiguousarray(body).view(comp)


def read_vecs(path, kind=None):
    """Load a vecs file as a :class:`Dataset` (components widened to float32)."""
    return Dataset(load_vecs(path, kind).astype(np.float32, copy=False))


def write_vecs(path, vectors, kind=None):
    kind = vecs_kind(path, kind)
    comp = _COMPONENT[kind]
    arr = np.asarray(vectors)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise UsageError(f"need a non-empty 2-d matrix, got shape {arr.shape}")
    if kind != "fvecs" and not np.array_equal(arr, arr.astype(comp)):
        raise UsageError(f"values do not fit the {kind} component type")
    n, d = arr.shape
    out = np.empty((n, 4 + d * comp.itemsize), dtype=np.uint8)
    out[:, :4] = np.full((n, 1), d, dtype="<i4").view(np.uint8)
    out[:, 4:] = np.ascontiguousarray(arr.astype(comp)).view(np.uint8).reshape(n, -1)
    _atomic_write(path, out.tobytes())


def read_ground_truth(path):
    """Neighbor id matrix from an ivecs ground-truth file."""
    return load_vecs(path, "ivecs").astype(np.int64)


def write_ground_truth(path, graph):
    write_vecs(path, np.asarray(getattr(graph, "ids", graph), dtype=np.int64), "ivecs")


@dataclass(frozen=True)
class GraphFileHeader:
    n: int
    k: int
    metric: Metric
    flags: int = 0

    @property
    def global_ids(self):
        return bool(self.flags & GLOBAL_IDS)

    @property
    def wide_ids(self):
        return bool(self.flags & WIDE_IDS)

    @property
    def record_dtype(self):
        id_t = "<u8" if self.wide_ids else "<u4"
        return np.dtype([("id", id_t), ("dist", "<f4")])

    def pack(self):
        return _HEADER.pack(MAGIC, self.n, self.k, int(self.metric), self.flags)

    @classmethod
    def unpack(cls, raw, path="<graph>"):
        if len(raw) < _HEADER.size:
            raise FormatError(f"{path}: truncated graph header", len(raw))
        magic, n, k, metric, flags = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}", 0)
        try:
            metric = Metric(metric)
        except ValueError:
            raise FormatError(f"{path}: unknown metric code {metric}", 20) from None
        if k < 1:
            raise FormatError(f"{path}: invalid degree {k}", 16)
        if flags & ~(GLOBAL_IDS | WIDE_IDS):
            raise FormatError(f"{path}: unknown flag bits {flags:#x}", 24)
        return cls(n, k, metric, flags)


def write_graph(graph, path, *, global_ids=False, wide_ids=False):
    """Write a finalized graph."""
    if not graph.is_finalized:
        raise UsageError("graph must be finalized before writing")
    if np.any(graph.ids == SENTINEL_ID):
        raise UsageError("graph has unfilled slots")
    if not wide_ids and graph.ids.size and graph.ids.max() > np.iinfo(np.uint32).max:
        raise UsageError("ids exceed 32 bits; write with wide_ids=True")
    flags = (GLOBAL_IDS if global_ids else 0) | (WIDE_IDS if wide_ids else 0)
    header = GraphFileHeader(graph.n, graph.k, graph.metric, flags)
    rec = np.empty(graph.n * graph.k, dtype=header.record_dtype)
    rec["id"] = graph.ids.ravel()
    rec["dist"] = graph.dists.ravel()
    _atomic_write(path, header.pack() + rec.tobytes())


def read_graph_header(path):
    with open(path, "rb") as f:
        return GraphFileHeader.unpack(f.read(_HEADER.size), path)


def read_graph(path, return_header=False):
    with open(path, "rb") as f:
        raw = f.read()
    header = GraphFileHeader.unpack(raw, path)
    rdt = header.record_dtype
    body = len(raw) - _HEADER.size
    expected = header.n * header.k * rdt.itemsize
    if body != expected:
        raise FormatError(
            f"{path}: header declares n={header.n}, k={header.k} ({expected} bytes of records) "
            f"but file holds {body}",
            _HEADER.size + min(body, expected),
        )
    rec = np.frombuffer(raw, dtype=rdt, offset=_HEADER.size)
    ids = rec["id"].astype(np.int64).reshape(header.n, header.k)
    dists = rec["dist"].astype(np.float32).reshape(header.n, header.k)
    graph = KnnGraph(ids, dists, np.full(ids.shape, OLD, dtype=np.uint8), header.metric, None)
    return (graph, header) if return_header else graph


def _atomic_write(path, payload):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)
