"""Monte Carlo BER estimation for coded and uncoded OAM MIMO links.

Seeding: batch ``b`` of SNR point ``i`` draws its bits and noise from the key
``(master_seed, i, b)``.  Codeword ``c`` (counted over the whole point) uses
channel realization ``c mod K`` of the normalized bank.  Batches are committed
in index order and the stopping rule is only checked between batches, so the
result does not depend on the number of worker threads.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .analysis import ChannelEnsemble
from .decode import Preprocessed, RankDeficientError, sorted_qr, sphere_decode_batch
from .stcode import CodeSpec, demap, equivalent_channel, get_code, modulate, real_to_symbols, vec_real
from .turbulence import rng_from_key

BER_COLUMNS = ("snr_db", "bits", "errors", "ber", "codewords", "capped")


def normalize_ensemble(h) -> tuple[np.ndarray, float]:
    """Scale all realizations by one ``c`` so that ``mean ||H||_F^2 / M == 1``."""
    arr = np.asarray(getattr(h, "h", h), dtype=np.complex128)
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise ValueError("need a non-empty (count, M, M) ensemble")
    m = arr.shape[-1]
    mean_gain = float(np.mean(np.sum(np.abs(arr) ** 2, axis=(1, 2)))) / m
    c = 1 / math.sqrt(mean_gain)
    return arr * c, c


def awgn(symbols, n0: float, seed) -> np.ndarray:
    """Add circular complex Gaussian noise of variance ``n0`` per complex entry."""
    if n0 < 0:
        raise ValueError("noise variance must be non-negative")
    x = np.asarray(symbols, dtype=complex)
    if n0 == 0:
        return x.copy()
    rng = seed if isinstance(seed, np.random.Generator) else rng_from_key(seed)
    sd = math.sqrt(n0 / 2)
    return x + sd * (rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape))


@dataclass(frozen=True)
class SimConfig:
    snr_db: tuple[float, ...] = (0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0)
    min_errors: int = 100
    max_bits: int = 10_000_000
    code: str = "uncoded"
    charges: tuple[int, ...] | None = None
    bank: str | None = None
    master_seed: int = 0
    batch_size: int = 2000
    threads: int = 1
    normalization: str = "frobenius"
    node_log: str | None = None
    """Debug CSV of per-codeword sphere-decoder node counts."""
    stop_ber: float = 0.0
    """A sweep ends after the first point whose BER falls below this value."""

    def __post_init__(self):
        object.__setattr__(self, "snr_db", tuple(float(s) for s in self.snr_db))
        if self.charges is not None:
            object.__setattr__(self, "charges", tuple(int(c) for c in self.charges))
        if not self.snr_db:
            raise ValueError("SNR grid is empty")
        if self.min_errors < 1:
            raise ValueError("min_errors must be >= 1")
        if self.batch_size < 1 or self.threads < 1:
            raise ValueError("batch_size and threads must be >= 1")
        if self.normalization not in ("frobenius", "none"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @classmethod
    def from_mapping(cls, kv: Mapping[str, str]) -> SimConfig:
        """Build from ``key=value`` strings; lists are comma separated."""
        known = {f.name for f in fields(cls)}
        unknown = set(kv) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        out = {}
        for k, v in kv.items():
            v = str(v).strip()
            if k == "snr_db":
                out[k] = tuple(float(x) for x in v.split(",") if x.strip())
            elif k == "charges":
                out[k] = None if v in ("", "none") else tuple(int(x) for x in v.split(",") if x.strip())
            elif k == "bank":
                out[k] = None if v in ("", "none", "identity") else v
            elif k == "node_log":
                out[k] = v or None
            elif k in ("code", "normalization"):
                out[k] = v
            elif k == "stop_ber":
                out[k] = float(v)
            else:
                out[k] = int(float(v))
        return cls(**out)

    def as_record(self) -> dict:
        d = asdict(self)
        d["snr_db"] = list(self.snr_db)
        d["charges"] = None if self.charges is None else list(self.charges)
        return d


def read_kv_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    kv = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    return kv


@dataclass
class BerPoint:
    snr_db: float
    bits: int
    errors: int
    codewords: int
    capped: bool
    wall: float = field(default=0.0, compare=False)

    @property
    def ber(self) -> float:
        return self.errors / self.bits if self.bits else math.nan

    def stderr(self) -> float:
        p = self.ber
        return math.sqrt(max(p * (1 - p), 0.0) / self.bits) if self.bits else math.nan


@dataclass
class Link:
    """Everything a BER point needs: code, normalized channels and their lattice factors."""

    spec: CodeSpec
    channels: np.ndarray
    scale: float
    pre: Preprocessed
    dropped: int = 0
    """Realizations left out of the round-robin because their lattice is rank deficient."""

    @classmethod
    def build(cls, cfg: SimConfig, ensemble: ChannelEnsemble | None = None) -> Link:
        if ensemble is None and cfg.bank is not None:
            ensemble = ChannelEnsemble.from_bank(cfg.bank)
        if ensemble is None:
            m = len(cfg.charges) if cfg.charges else (2 if cfg.code in ("uncoded", "golden", "silver") else 3)
            h = np.eye(m, dtype=complex)[None]
            scale = 1.0
        else:
            if cfg.charges is not None:
                ensemble = ensemble.restrict(cfg.charges)
            h = ensemble.h
            scale = 1.0
            if cfg.normalization == "frobenius":
                h, scale = normalize_ensemble(h)
        m = h.shape[-1]
        spec = get_code(cfg.code, m)
        g = equivalent_channel(h, spec) * spec.energy_scale()
        keep = []
        for i, gi in enumerate(g):
            try:
                sorted_qr(gi)
            except RankDeficientError:
                continue
            keep.append(i)
        if not keep:
            raise RankDeficientError("every channel realization gives a rank-deficient lattice")
        return cls(spec, h[keep], scale, Preprocessed.from_generators(g[keep]), len(h) - len(keep))


def _run_batch(link: Link, cfg: SimConfig, n0: float, point: int, b: int):
    spec = link.spec
    n = cfg.batch_size
    rng = rng_from_key(cfg.master_seed, point, b)
    bits = rng.integers(0, 2, size=(n, spec.bits_per_codeword), dtype=np.int8)
    x = spec.encode(modulate(bits)) * spec.energy_scale()
    which = (b * n + np.arange(n)) % link.channels.shape[0]
    y = link.channels[which] @ x
    y = awgn(y, n0, rng)
    xr, _, nodes = sphere_decode_batch(link.pre, which, vec_real(y))
    got = demap(real_to_symbols(xr))
    return int(np.count_nonzero(got != bits)), bits.size, which, nodes


def run_ber_point(cfg: SimConfig, snr_db: float, *, point: int = 0, link: Link | None = None) -> BerPoint:
    """Simulate one SNR (Es/N0, Es = 1) until ``min_errors`` or ``max_bits``."""
    if link is None:
        link = Link.build(cfg)
    t0 = time.perf_counter()
    n0 = 10 ** (-snr_db / 10)
    errors = bits = batches = 0
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    log = None
    if cfg.node_log:
        new = not Path(cfg.node_log).exists()
        log = open(cfg.node_log, "a", newline="")
        if new:
            log.write("snr_db,batch,index,realization,nodes\n")
    try:
        done = False
        while not done:
            wave = range(batches, batches + cfg.threads)
            if pool is None:
                results = [_run_batch(link, cfg, n0, point, b) for b in wave]
            else:
                results = list(pool.map(lambda b: _run_batch(link, cfg, n0, point, b), wave))
            for e, nb, which, nodes in results:
                if log is not None:
                    log.writelines(f"{snr_db:g},{batches},{i},{w},{n}\n"
                                   for i, (w, n) in enumerate(zip(which, nodes)))
                errors += e
                bits += nb
                batches += 1
                if errors >= cfg.min_errors or bits >= cfg.max_bits:
                    done = True
                    break
    finally:
        if pool is not None:
            pool.shutdown()
        if log is not None:
            log.close()
    return BerPoint(snr_db, bits, errors, batches * cfg.batch_size,
                    errors < cfg.min_errors, time.perf_counter() - t0)


def run_sweep(cfg: SimConfig, ensemble: ChannelEnsemble | None = None, *,
              link: Link | None = None) -> list[BerPoint]:
    """Points in grid order; stops early once a point's BER is below ``cfg.stop_ber``."""
    if link is None:
        link = Link.build(cfg, ensemble)
    out = []
    for i, s in enumerate(cfg.snr_db):
        out.append(run_ber_point(cfg, s, point=i, link=link))
        if out[-1].ber < cfg.stop_ber:
            break
    return out


def write_ber_csv(path: str | Path, points: Sequence[BerPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BER_COLUMNS)
        for p in points:
            w.writerow([f"{p.snr_db:g}", p.bits, p.errors, f"{p.ber:.6e}", p.codewords, int(p.capped)])


def read_ber_csv(path: str | Path) -> list[BerPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [BerPoint(float(r["snr_db"]), int(r["bits"]), int(r["errors"]),
                     int(r["codewords"]), bool(int(r["capped"]))) for r in rows]


def snr_at_ber(points: Sequence[BerPoint], target: float) -> float:
    """SNR where the BER curve crosses ``target`` (log-BER linear interpolation)."""
    pts = [p for p in points if p.errors > 0]
    for a, b in zip(pts, pts[1:]):
        if a.ber >= target >= b.ber and a.ber > b.ber:
            la, lb, lt = math.log10(a.ber), math.log10(b.ber), math.log10(target)
            return a.snr_db + (b.snr_db - a.snr_db) * (la - lt) / (la - lb)
    return math.nan
