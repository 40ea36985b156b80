"""Maximum-likelihood detection over the real QPSK lattice.

The sphere decoder runs a depth-first Schnorr-Euchner search on a sorted QR
factorization of the real generator, with the finite alphabet ``{-a, +a}`` per
coordinate and the Babai point (the first zig-zag descent) as the initial radius.  Ties within ``TIE_TOL``
(relative) resolve to the lexicographically smallest real symbol vector, which
is also the order the exhaustive decoder enumerates in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .stcode import QPSK_LEVEL, CodeSpec, equivalent_channel, real_to_symbols, vec_real

MAX_EXHAUSTIVE = 2**24
TIE_TOL = 1e-12


class RankDeficientError(ValueError):
    pass


@dataclass(frozen=True)
class RealLattice:
    generator: np.ndarray
    level: float = QPSK_LEVEL

    @property
    def dim(self) -> int:
        return self.generator.shape[1]


@dataclass(frozen=True)
class DecodeResult:
    symbols: np.ndarray
    real: np.ndarray
    metric: float
    nodes: int


def complex_to_real(h, y) -> tuple[RealLattice, np.ndarray]:
    """``H_eq = [[Re H, -Im H], [Im H, Re H]]`` and ``y_R = [Re y; Im y]``."""
    h = np.asarray(h, dtype=complex)
    y = np.asarray(y, dtype=complex)
    if h.shape[0] != y.shape[0]:
        raise ValueError(f"H has {h.shape[0]} rows but y has {y.shape[0]} entries")
    g = np.block([[h.real, -h.imag], [h.imag, h.real]])
    return RealLattice(g), np.concatenate([y.real, y.imag])


def real_to_complex(lattice: RealLattice, y_r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`complex_to_real` for generators in its block form."""
    g = lattice.generator
    r, c = g.shape[0] // 2, g.shape[1] // 2
    h = g[:r, :c] + 1j * g[r:, :c]
    return h, y_r[:r] + 1j * y_r[r:]


def _setup(y, h, spec: CodeSpec) -> tuple[np.ndarray, np.ndarray]:
    g = equivalent_channel(h, spec)
    y = np.asarray(y, dtype=complex)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape != (spec.m, spec.t):
        raise ValueError(f"received block shape {y.shape}, expected {(spec.m, spec.t)}")
    return g, vec_real(y)


def _candidates(k: int, level: float, start: int, stop: int) -> np.ndarray:
    """Rows ``start..stop-1`` of the lexicographic enumeration of ``{-a, a}^k``."""
    idx = np.arange(start, stop)[:, None]
    bits = (idx >> np.arange(k - 1, -1, -1)) & 1
    return (2 * bits - 1) * level


def ml_exhaustive(y, h, spec: CodeSpec, *, chunk: int = 1 << 16) -> DecodeResult:
    g, yr = _setup(y, h, spec)
    k = g.shape[1]
    total = 1 << k
    if total > MAX_EXHAUSTIVE:
        raise ValueError(f"{total} candidates exceed the exhaustive limit; use sphere_decode")
    best_m, best_i = math.inf, -1
    for start in range(0, total, chunk):
        cand = _candidates(k, QPSK_LEVEL, start, min(total, start + chunk))
        d = np.sum((yr[None, :] - cand @ g.T) ** 2, axis=1)
        i = int(np.argmin(d))
        if d[i] < best_m:
            best_m, best_i = float(d[i]), start + i
    x = _candidates(k, QPSK_LEVEL, best_i, best_i + 1)[0]
    return DecodeResult(real_to_symbols(x), x, best_m, total)


def sorted_qr(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sorted QR (modified Gram-Schmidt, weakest remaining column first).

    Returns ``Q`` (n x k), upper-triangular ``R`` (k x k) and ``perm`` with
    ``g[:, perm] = Q R``.
    """
    q = np.array(g, dtype=float)
    n, k = q.shape
    if n < k:
        raise RankDeficientError(f"generator {g.shape} cannot have full column rank")
    r = np.zeros((k, k))
    perm = np.arange(k)
    norms = np.sum(q**2, axis=0)
    scale = math.sqrt(norms.max()) if norms.size else 0.0
    for i in range(k):
        j = i + int(np.argmin(norms[i:]))
        q[:, [i, j]] = q[:, [j, i]]
        r[:, [i, j]] = r[:, [j, i]]
        norms[[i, j]] = norms[[j, i]]
        perm[[i, j]] = perm[[j, i]]
        # downdated norms pick the pivot; the diagonal comes from the residual itself
        r[i, i] = math.sqrt(float(q[:, i] @ q[:, i]))
        if not r[i, i] > 1e-12 * scale:
            raise RankDeficientError("lattice generator is rank deficient")
        q[:, i] /= r[i, i]
        for l in range(i + 1, k):
            r[i, l] = q[:, i] @ q[:, l]
            q[:, l] -= r[i, l] * q[:, i]
            norms[l] -= r[i, l] ** 2
    return q, r, perm


@numba.njit(cache=True, nogil=True)
def _lex_less(a, b):
    for j in range(a.shape[0]):
        if a[j] < b[j]:
            return True
        if a[j] > b[j]:
            return False
    return False


@numba.njit(cache=True, nogil=True)
def _search(r, z, level, perm, offset):
    """Finite-alphabet Schnorr-Euchner search.

    Returns ``(x, metric, nodes)`` with ``x`` in original coordinate order and
    ``metric`` the partial metric (without ``offset``).
    """
    k = r.shape[0]
    cur = np.empty(k)
    # radius starts unbounded: the first zig-zag descent reaches the Babai point
    best_m = np.inf
    best = np.empty(k)
    cand = np.empty(k)

    part = np.zeros(k + 1)
    ctr = np.empty(k)
    tried = np.zeros(k, dtype=np.int64)
    nodes = 0
    i = k - 1
    ctr[i] = z[i] / r[i, i]
    while True:
        if tried[i] == 2:
            i += 1
            if i >= k:
                break
            continue
        first = level if ctr[i] >= 0 else -level
        s = first if tried[i] == 0 else -first
        tried[i] += 1
        e = r[i, i] * (ctr[i] - s)
        pm = part[i + 1] + e * e
        tol = TIE_TOL * (1.0 + best_m + offset) if best_m < np.inf else 0.0
        if pm > best_m + tol:
            # the sibling is farther from the centre still
            tried[i] = 2
            continue
        nodes += 1
        cur[i] = s
        part[i] = pm
        if i > 0:
            i -= 1
            acc = z[i]
            for j in range(i + 1, k):
                acc -= r[i, j] * cur[j]
            ctr[i] = acc / r[i, i]
            tried[i] = 0
            continue
        for j in range(k):
            cand[perm[j]] = cur[j]
        if pm < best_m - tol or _lex_less(cand, best):
            best_m = min(pm, best_m) if pm >= best_m - tol else pm
            best[:] = cand
    return best, best_m, nodes


@numba.njit(cache=True, nogil=True)
def _search_batch(rs, qts, perms, which, ys, level, out_x, out_m, out_n):
    for b in range(ys.shape[0]):
        w = which[b]
        z = qts[w] @ ys[b]
        off = 0.0
        for t in range(ys.shape[1]):
            off += ys[b, t] * ys[b, t]
        for t in range(z.shape[0]):
            off -= z[t] * z[t]
        if off < 0.0:
            off = 0.0
        x, m, nn = _search(rs[w], z, level, perms[w], off)
        out_x[b, :] = x
        out_m[b] = m + off
        out_n[b] = nn


@dataclass(frozen=True)
class Preprocessed:
    """Sorted-QR factors for a bank of lattice generators."""

    g: np.ndarray
    qt: np.ndarray
    r: np.ndarray
    perm: np.ndarray

    @classmethod
    def from_generators(cls, gs: np.ndarray) -> Preprocessed:
        gs = np.asarray(gs, dtype=float)
        qs, rs, ps = zip(*(sorted_qr(g) for g in gs))
        return cls(gs, np.ascontiguousarray(np.swapaxes(np.stack(qs), 1, 2)),
                   np.stack(rs), np.stack(ps).astype(np.int64))


def sphere_decode_batch(pre: Preprocessed, which: np.ndarray, y_r: np.ndarray):
    """Decode rows of ``y_r`` against generator ``which[b]``.

    Returns ``(x, metric, nodes)`` with ``x`` the real symbol vectors and
    ``metric = ||y - G x||^2`` evaluated directly.  ``nodes`` counts the tree
    nodes (partial symbol vectors, leaves included) found inside the current
    radius.
    """
    which = np.asarray(which, dtype=np.int64)
    y_r = np.ascontiguousarray(y_r, dtype=float)
    b, k = y_r.shape[0], pre.r.shape[1]
    out_x = np.empty((b, k))
    out_m = np.empty(b)
    out_n = np.empty(b, dtype=np.int64)
    _search_batch(pre.r, pre.qt, pre.perm, which, y_r, QPSK_LEVEL, out_x, out_m, out_n)
    resid = y_r - np.einsum("bij,bj->bi", pre.g[which], out_x)
    return out_x, np.sum(resid**2, axis=1), out_n


def sphere_decode(y, h, spec: CodeSpec) -> DecodeResult:
    g, yr = _setup(y, h, spec)
    pre = Preprocessed.from_generators(g[None])
    x, m, n = sphere_decode_batch(pre, np.zeros(1, dtype=np.int64), yr[None])
    return DecodeResult(real_to_symbols(x[0]), x[0], float(m[0]), int(n[0]))
