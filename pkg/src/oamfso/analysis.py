"""Mode-dependent loss statistics and MDL-minimizing mode selection."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fieldgrid import ModeIndex
from .propagation import ChannelMatrix, read_channel_bank

RANK_RTOL = 1e-12


@dataclass(frozen=True)
class ModeSet:
    charges: tuple[int, ...]

    def __post_init__(self):
        c = tuple(sorted(int(x) for x in self.charges))
        if len(set(c)) != len(c):
            raise ValueError(f"duplicate charges in {self.charges}")
        object.__setattr__(self, "charges", c)

    def __len__(self):
        return len(self.charges)

    def __str__(self):
        return "{" + ",".join(f"{c:+d}" if c else "0" for c in self.charges) + "}"


@dataclass(frozen=True, eq=False)
class ChannelEnsemble:
    """Channel realizations ``h`` of shape ``(count, M, M)`` over ``charges``."""

    charges: tuple[int, ...]
    h: np.ndarray = field(repr=False)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.complex128)
        m = len(self.charges)
        if h.ndim != 3 or h.shape[1:] != (m, m) or h.shape[0] < 1:
            raise ValueError(f"ensemble array shape {h.shape} incompatible with {m} modes")
        object.__setattr__(self, "charges", tuple(int(c) for c in self.charges))
        object.__setattr__(self, "h", h)

    @classmethod
    def from_bank(cls, path: str | Path) -> ChannelEnsemble:
        hdr, h = read_channel_bank(path)
        meta = {"cn2": hdr.cn2, "z": hdr.z, "master_seed": hdr.master_seed,
                "placement": hdr.placement, "source": str(path)}
        return cls(hdr.charges, h, meta)

    def __len__(self):
        return self.h.shape[0]

    def realization(self, i: int) -> ChannelMatrix:
        return ChannelMatrix(tuple(ModeIndex(0, c) for c in self.charges), self.h[i])

    def indices(self, subset: ModeSet | Iterable[int]) -> list[int]:
        charges = subset.charges if isinstance(subset, ModeSet) else tuple(subset)
        try:
            return [self.charges.index(c) for c in charges]
        except ValueError:
            raise KeyError(f"charges {charges} not all in ensemble set {self.charges}") from None

    def restrict(self, subset: ModeSet | Iterable[int]) -> ChannelEnsemble:
        idx = self.indices(subset)
        return ChannelEnsemble(tuple(self.charges[i] for i in idx),
                               self.h[:, idx][:, :, idx], dict(self.meta))


def _as_array(h) -> np.ndarray:
    return h.h if isinstance(h, ChannelMatrix) else np.asarray(h)


def mdl_db_batch(h: np.ndarray) -> np.ndarray:
    """MDL in dB for a stack ``(..., M, M)``; ``inf`` marks rank-deficient matrices."""
    s = np.linalg.svd(np.asarray(h), compute_uv=False)
    smax, smin = s[..., 0], s[..., -1]
    with np.errstate(divide="ignore"):
        out = 20 * np.log10(smax / smin)
    bad = ~(smin > RANK_RTOL * smax)
    return np.where(bad, np.inf, out)


def mdl_db(h) -> float:
    """``10 log10(lmax / lmin)`` over the eigenvalues of ``H^H H``.

    A rank-deficient ``H`` (smallest singular value below ``1e-12`` of the
    largest) returns ``inf`` instead of raising.
    """
    return float(mdl_db_batch(_as_array(h)[None])[0])


def submatrix(h: ChannelMatrix, subset: ModeSet | Sequence[int]) -> ChannelMatrix:
    charges = subset.charges if isinstance(subset, ModeSet) else tuple(subset)
    idx = []
    for c in charges:
        if c not in h.charges:
            raise KeyError(f"charge {c} not in channel mode set {h.charges}")
        idx.append(h.charges.index(c))
    return ChannelMatrix(tuple(h.modes[i] for i in idx), h.h[np.ix_(idx, idx)])


@dataclass(frozen=True)
class MdlStats:
    mean: float
    stderr: float
    n: int
    excluded: int


def _stats(values: np.ndarray) -> MdlStats:
    finite = values[np.isfinite(values)]
    n = finite.size
    if n == 0:
        return MdlStats(math.inf, math.nan, 0, values.size)
    se = float(finite.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return MdlStats(float(finite.mean()), se, n, values.size - n)


def average_mdl(ensemble: ChannelEnsemble, subset: ModeSet | Sequence[int]) -> MdlStats:
    """Mean and standard error of per-realization MDL; rank-deficient draws are excluded and counted."""
    return _stats(mdl_db_batch(ensemble.restrict(subset).h))


def crosstalk_batch(h: np.ndarray) -> np.ndarray:
    """Fraction of captured power on off-diagonal entries, per realization."""
    p = np.abs(h) ** 2
    total = p.sum(axis=(-2, -1))
    diag = np.trace(p, axis1=-2, axis2=-1)
    return (total - diag) / total


@dataclass(frozen=True)
class Selection:
    modes: ModeSet
    mean_mdl: float
    stderr: float
    crosstalk: float
    ensemble_size: int
    excluded: int
    tie_break: str = "mean MDL, then mean crosstalk, then lexicographic charges"


def select_modes(ensemble: ChannelEnsemble, m: int, *, chunk: int = 256) -> Selection:
    """Exhaustive search for the ``m``-subset of the ensemble's charges with least mean MDL."""
    n = len(ensemble.charges)
    if not 1 <= m <= n:
        raise ValueError(f"subset size {m} out of range for {n} candidate modes")
    h = ensemble.h
    best_key = None
    best = None
    combos = itertools.combinations(range(n), m)
    while True:
        block = list(itertools.islice(combos, chunk))
        if not block:
            break
        idx = np.array(block)
        # (subsets, realizations, m, m)
        sub = h[:, idx[:, :, None], idx[:, None, :]].transpose(1, 0, 2, 3)
        vals = mdl_db_batch(sub)
        for k, combo in enumerate(block):
            st = _stats(vals[k])
            charges = tuple(ensemble.charges[i] for i in combo)
            key = (st.mean, None, tuple(sorted(charges)))
            if best_key is not None and key[0] > best_key[0]:
                continue
            xt = float(np.mean(crosstalk_batch(sub[k])))
            key = (st.mean, xt, tuple(sorted(charges)))
            if best_key is None or key < best_key:
                best_key, best = key, (charges, st, xt)
    charges, st, xt = best
    return Selection(ModeSet(charges), st.mean, st.stderr, xt, st.n, st.excluded)


def mdl_map(ensemble: ChannelEnsemble) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise mean MDL and its standard error; the diagonal is NaN."""
    n = len(ensemble.charges)
    mean = np.full((n, n), np.nan)
    se = np.full((n, n), np.nan)
    for i, j in itertools.combinations(range(n), 2):
        st = _stats(mdl_db_batch(ensemble.h[:, [i, j]][:, :, [i, j]]))
        mean[i, j] = mean[j, i] = st.mean
        se[i, j] = se[j, i] = st.stderr
    return mean, se


def write_mdl_map_csv(path: str | Path, charges: Sequence[int], mean: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p\\q", *charges])
        for c, row in zip(charges, mean):
            w.writerow([c, *("" if np.isnan(v) else f"{v:.6f}" for v in row)])


def read_mdl_map_csv(path: str | Path) -> tuple[list[int], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    charges = [int(c) for c in rows[0][1:]]
    mean = np.array([[float(v) if v else np.nan for v in r[1:]] for r in rows[1:]])
    return charges, mean
