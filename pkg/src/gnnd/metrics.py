"""Distance metrics.

Every kernel accumulates in float64 and is compiled with numba so the same
code path serves the builder, the brute-force oracle and ``metric_eval``.
Stored graph distances are the float32 rounding of these values.
"""

import enum

import numba
import numpy as np

from .errors import DomainError, UsageError


class Metric(enum.IntEnum):
    SQEUCLIDEAN = 0
    COSINE = 1
    CHI2 = 2

    @classmethod
    def parse(cls, name):
        if isinstance(name, Metric):
            return name
        try:
            return _ALIASES[str(name).lower()]
        except KeyError:
            raise UsageError(
                f"unknown metric {name!r}; expected one of l2, cosine, chi2"
            ) from None

    @property
    def cli_name(self):
        return {Metric.SQEUCLIDEAN: "l2", Metric.COSINE: "cosine", Metric.CHI2: "chi2"}[self]


_ALIASES = {
    "l2": Metric.SQEUCLIDEAN,
    "sqeuclidean": Metric.SQEUCLIDEAN,
    "squared-euclidean": Metric.SQEUCLIDEAN,
    "euclidean": Metric.SQEUCLIDEAN,
    "cosine": Metric.COSINE,
    "cosine-distance": Metric.COSINE,
    "chi2": Metric.CHI2,
    "chi-square": Metric.CHI2,
}


@numba.njit(fastmath=False, cache=True, inline="always")
def sqeuclidean(u, v):
    acc = 0.0
    for i in range(u.shape[0]):
        diff = np.float64(u[i]) - np.float64(v[i])
        acc += diff * diff
    return acc


@numba.njit(fastmath=False, cache=True, inline="always")
def cosine(u, v):
    dot = 0.0
    nu = 0.0
    nv = 0.0
    for i in range(u.shape[0]):
        a = np.float64(u[i])
        b = np.float64(v[i])
        dot += a * b
        nu += a * a
        nv += b * b
    if nu == 0.0 or nv == 0.0:
        return 1.0
    out = 1.0 - dot / (np.sqrt(nu) * np.sqrt(nv))
    return out if out > 0.0 else 0.0


@numba.njit(fastmath=False, cache=True, inline="always")
def chi2(u, v):
    acc = 0.0
    for i in range(u.shape[0]):
        a = np.float64(u[i])
        b = np.float64(v[i])
        diff = a - b
        acc += diff * diff / (a + b)
    return acc


@numba.njit(cache=True, inline="always")
def distance(kind, u, v):
    if kind == 0:
        return sqeuclidean(u, v)
    elif kind == 1:
        return cosine(u, v)
    return chi2(u, v)


def check_domain(metric, vectors):
    """Raise DomainError if ``vectors`` violate the metric's domain."""
    metric = Metric.parse(metric)
    vectors = np.asarray(vectors)
    if metric is Metric.CHI2 and vectors.size and not np.all(vectors > 0):
        raise DomainError("chi-square distance requires strictly positive components")
    if metric is Metric.COSINE and vectors.size:
        norms = np.einsum("...i,...i->...", vectors, vectors, dtype=np.float64)
        if np.any(norms == 0):
            raise DomainError("cosine distance is undefined for zero vectors")


def metric_eval(metric, u, v):
    """Distance between two vectors under ``metric``.

    >>> metric_eval("l2", [1, 2], [4, 6])
    25.0
    """
    metric = Metric.parse(metric)
    u = np.ascontiguousarray(u, dtype=np.float32)
    v = np.ascontiguousarray(v, dtype=np.float32)
    if u.ndim != 1 or u.shape != v.shape:
        raise UsageError(f"dimension mismatch: {u.shape} vs {v.shape}")
    check_domain(metric, np.stack([u, v]))
    return float(distance(int(metric), u, v))
