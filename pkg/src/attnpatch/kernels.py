"""Gaussian kernels with determinant-scaled bandwidth, kernel constants and KDE.

The bandwidth matrix is ``H = h I`` and the scaled kernel is

    k_H(x, z) = k((x - z) / |H|) / |H|,    |H| = h**d

i.e. the displacement is divided by the determinant, not by ``h`` per axis.
In one dimension both conventions coincide.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

FAMILIES = ("gaussian",)

# below this log-kernel maximum, sums switch to the log-space path
LOG_UNDERFLOW = -50.0


class ContractError(ValueError):
    """A documented precondition was violated."""


@dataclass(frozen=True)
class Bandwidth:
    h: float
    d: int
    det: float = field(init=False)

    def __post_init__(self):
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ContractError(f"bandwidth must be positive and finite, got {self.h}")
        if self.d < 1:
            raise ContractError(f"dimension must be >= 1, got {self.d}")
        det = 1.0
        for _ in range(self.d):
            det *= self.h
        object.__setattr__(self, "det", det)


@dataclass(frozen=True)
class KernelConstants:
    mu2: float
    Rk: float
    d: int


@dataclass(frozen=True)
class KernelSpec:
    family: str = "gaussian"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unsupported kernel family {self.family!r}; have {FAMILIES}")

    def constants(self, d):
        return kernel_constants(self, d)


GAUSSIAN = KernelSpec("gaussian")


def gaussian_density(u):
    """Standard normal density in ``u.shape[-1]`` dimensions."""
    u = np.asarray(u, dtype=float)
    d = u.shape[-1] if u.ndim else 1
    return np.exp(-0.5 * np.sum(u * u, axis=-1) - 0.5 * d * math.log(2 * math.pi))


def _check_vec(v, d, name):
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape[0] != d:
        raise ContractError(f"{name} has length {v.shape[0]}, bandwidth dimension is {d}")
    if not np.all(np.isfinite(v)):
        raise ContractError(f"{name} contains non-finite values")
    return v


def kernel_eval(spec, bw, x, y):
    """Scaled kernel ``k_H(x, y)`` for a single pair of points."""
    x = _check_vec(x, bw.d, "x")
    y = _check_vec(y, bw.d, "y")
    return float(gaussian_density((x - y) / bw.det) / bw.det)


def log_kernel_matrix(bw, queries, refs):
    """``log k_H(q_a, r_b)`` for all query/reference pairs, shape ``(len(q), len(r))``."""
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    refs = np.atleast_2d(np.asarray(refs, dtype=float))
    if queries.shape[1] != bw.d or refs.shape[1] != bw.d:
        raise ContractError(
            f"points of width {queries.shape[1]}/{refs.shape[1]} for a {bw.d}-d bandwidth"
        )
    sq = (
        np.sum(queries**2, axis=1)[:, None]
        + np.sum(refs**2, axis=1)[None, :]
        - 2.0 * queries @ refs.T
    )
    np.maximum(sq, 0.0, out=sq)
    return -0.5 * sq / bw.det**2 - 0.5 * bw.d * math.log(2 * math.pi) - math.log(bw.det)


def kernel_constants(spec, d):
    """Closed-form ``mu2(k)`` and ``R(k) = int k^2`` for the base kernel in ``d`` dims."""
    if d < 1:
        raise ContractError(f"dimension must be >= 1, got {d}")
    if spec.family != "gaussian":
        raise ContractError(f"unsupported kernel family {spec.family!r}")
    return KernelConstants(mu2=1.0, Rk=(2.0 * math.sqrt(math.pi)) ** (-d), d=d)


def bandwidth_schedule(n, d, mode="paper_attention", alpha=None, c=1.0):
    """Bandwidth as a function of sample size.

    ``paper_attention`` gives ``sqrt(d) * n**(-1/d)``, the normalisation used
    inside the attention patch (``n`` is the reference batch size there).
    ``theorem_rate`` gives ``c * n**(-alpha)``, which satisfies
    ``h -> 0`` and ``n h**d -> inf`` exactly when ``0 < alpha < 1/d``.
    """
    if n < 1 or d < 1:
        raise ContractError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    if mode == "paper_attention":
        return Bandwidth(math.sqrt(d) * n ** (-1.0 / d), d)
    if mode == "theorem_rate":
        if alpha is None or not 0.0 < alpha < 1.0 / d:
            raise ContractError(
                f"alpha={alpha} violates the bandwidth conditions h->0, n h^d->inf; "
                f"need 0 < alpha < 1/d = {1.0 / d:g}"
            )
        if c <= 0:
            raise ContractError(f"scale c must be positive, got {c}")
        return Bandwidth(c * n ** (-alpha), d)
    raise ContractError(f"unknown bandwidth mode {mode!r}")


def kde(spec, bw, query, refs):
    """Kernel density estimate at ``query``: mean of ``k_H(query, r_i)``."""
    return float(kde_many(spec, bw, np.atleast_2d(query), refs)[0])


def kde_many(spec, bw, queries, refs):
    """Vectorised :func:`kde` over the rows of ``queries``."""
    refs = np.atleast_2d(np.asarray(refs, dtype=float))
    if refs.shape[0] == 0:
        raise ContractError("kde needs at least one reference point")
    if spec.family != "gaussian":
        raise ContractError(f"unsupported kernel family {spec.family!r}")
    logk = log_kernel_matrix(bw, queries, refs)
    n = refs.shape[0]
    out = np.empty(logk.shape[0])
    peak = logk.max(axis=1)
    direct = peak >= LOG_UNDERFLOW
    out[direct] = np.exp(logk[direct]).mean(axis=1)
    if not np.all(direct):
        out[~direct] = np.exp(logsumexp(logk[~direct], axis=1) - math.log(n))
    return out
