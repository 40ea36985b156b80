"""QPSK mapping, space-time block encoders and their real-lattice channel form.

Encoders take symbols on the last axis and return codewords of shape
``(..., M, T)``; all of them are linear over the reals.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

QPSK_LEVEL = 1 / math.sqrt(2)
QPSK_POINTS = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) * QPSK_LEVEL
"""Gray map: index ``2*b0 + b1`` for bits ``b0 b1``; ``00 -> (1+i)/sqrt2``."""


def modulate(bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int8)
    if bits.shape[-1] % 2:
        raise ValueError(f"QPSK needs an even number of bits, got {bits.shape[-1]}")
    b = bits.reshape(*bits.shape[:-1], -1, 2)
    return ((1 - 2 * b[..., 0]) + 1j * (1 - 2 * b[..., 1])) * QPSK_LEVEL


def demap(symbols) -> np.ndarray:
    s = np.asarray(symbols)
    b = np.stack([(s.real < 0), (s.imag < 0)], axis=-1).astype(np.int8)
    return b.reshape(*s.shape[:-1], -1)


GOLDEN = (1 + math.sqrt(5)) / 2
GOLDEN_BAR = (1 - math.sqrt(5)) / 2


def golden_encode(s, printed_alpha: bool = False) -> np.ndarray:
    """Golden code codeword ``(1/sqrt5) [[a(s1+t s2), a(s3+t s4)], [i ab(s3+tb s4), ab(s1+tb s2)]]``.

    ``a = 1+i-i*theta`` and ``ab = 1+i-i*theta_bar`` by default, which gives
    unit energy per entry and normalized minimum determinant 1/5.  With
    ``printed_alpha=True`` the ``+i*theta`` variant is used instead.
    """
    s = np.asarray(s, dtype=complex)
    sign = 1 if printed_alpha else -1
    a = 1 + 1j + sign * 1j * GOLDEN
    ab = 1 + 1j + sign * 1j * GOLDEN_BAR
    s1, s2, s3, s4 = (s[..., k] for k in range(4))
    x = np.empty(s.shape[:-1] + (2, 2), dtype=complex)
    x[..., 0, 0] = a * (s1 + GOLDEN * s2)
    x[..., 0, 1] = a * (s3 + GOLDEN * s4)
    x[..., 1, 0] = 1j * ab * (s3 + GOLDEN_BAR * s4)
    x[..., 1, 1] = ab * (s1 + GOLDEN_BAR * s2)
    return x / math.sqrt(5)


def _alamouti(a, b) -> np.ndarray:
    x = np.empty(np.shape(a) + (2, 2), dtype=complex)
    x[..., 0, 0] = a
    x[..., 0, 1] = -np.conj(b)
    x[..., 1, 0] = b
    x[..., 1, 1] = np.conj(a)
    return x


SILVER_MIX = np.array([[1 + 1j, -1 + 2j], [1 + 2j, 1 - 1j]]) / math.sqrt(7)


def silver_encode(s) -> np.ndarray:
    s = np.asarray(s, dtype=complex)
    z = s[..., 2:4] @ SILVER_MIX.T
    x1 = _alamouti(s[..., 0], s[..., 1])
    xz = _alamouti(z[..., 0], z[..., 1])
    xz[..., 1, :] *= -1
    return x1 + xz


TAST_PHI = np.exp(1j * np.pi / 12)
TAST_J = np.exp(2j * np.pi / 3)
TAST_THETA = np.exp(1j * np.pi / 9)


def tast3_encode(s) -> np.ndarray:
    """3x3 threaded algebraic code: thread ``t`` carries symbols ``3t+1..3t+3``."""
    s = np.asarray(s, dtype=complex)
    th, j = TAST_THETA, TAST_J
    p1, p2 = TAST_PHI ** (1 / 3), TAST_PHI ** (2 / 3)

    def comb(k, c1, c2):
        return s[..., k] + c1 * th * s[..., k + 1] + c2 * th**2 * s[..., k + 2]

    x = np.empty(s.shape[:-1] + (3, 3), dtype=complex)
    x[..., 0, 0] = comb(0, 1, 1)
    x[..., 1, 1] = comb(0, j, j**2)
    x[..., 2, 2] = comb(0, j**2, j)
    x[..., 1, 0] = p1 * comb(3, 1, 1)
    x[..., 2, 1] = p1 * comb(3, j, j**2)
    x[..., 0, 2] = p1 * comb(3, j**2, j)
    x[..., 2, 0] = p2 * comb(6, 1, 1)
    x[..., 0, 1] = p2 * comb(6, j, j**2)
    x[..., 1, 2] = p2 * comb(6, j**2, j)
    return x / math.sqrt(3)


def uncoded_encode(s) -> np.ndarray:
    s = np.asarray(s, dtype=complex)
    return s[..., :, None]


@dataclass(frozen=True)
class CodeSpec:
    name: str
    m: int
    t: int
    n_symbols: int
    encoder: Callable[[np.ndarray], np.ndarray]

    def encode(self, s) -> np.ndarray:
        s = np.asarray(s)
        if s.shape[-1] != self.n_symbols:
            raise ValueError(f"{self.name} takes {self.n_symbols} symbols, got {s.shape[-1]}")
        return self.encoder(s)

    @property
    def n_real(self) -> int:
        return 2 * self.n_symbols

    @property
    def bits_per_codeword(self) -> int:
        return 2 * self.n_symbols

    def basis(self) -> np.ndarray:
        """Codewords of the real unit vectors ``[Re s; Im s]``: shape ``(2S, M, T)``."""
        e = np.eye(self.n_real)
        return self.encoder(e[:, : self.n_symbols] + 1j * e[:, self.n_symbols :])

    def energy_per_use(self) -> float:
        """Mean ``||X||_F^2 / T`` for i.i.d. unit-energy QPSK symbols (exact)."""
        b = self.basis()
        return float(np.sum(np.abs(b) ** 2) * 0.5 / self.t)

    def energy_scale(self) -> float:
        """Amplitude factor bringing the energy per channel use to ``M``."""
        return math.sqrt(self.m / self.energy_per_use())


CODE_NAMES = ("uncoded", "golden", "silver", "tast3")


def get_code(name: str, m: int | None = None) -> CodeSpec:
    if name == "uncoded":
        if m is None:
            raise ValueError("uncoded transmission needs the number of modes")
        return CodeSpec("uncoded", m, 1, m, uncoded_encode)
    fixed = {"golden": (2, golden_encode), "silver": (2, silver_encode), "tast3": (3, tast3_encode)}
    if name not in fixed:
        raise ValueError(f"unknown code {name!r}; choose from {CODE_NAMES}")
    size, enc = fixed[name]
    if m is not None and m != size:
        raise ValueError(f"{name} is a {size}x{size} code, not {m}x{m}")
    return CodeSpec(name, size, size, size * size, enc)


def equivalent_channel(h, spec: CodeSpec) -> np.ndarray:
    """Real matrix ``G`` with ``[Re vec(HX); Im vec(HX)] = G [Re s; Im s]``.

    ``vec`` stacks the ``T`` received columns; ``H`` is held constant over them.
    """
    h = np.asarray(getattr(h, "h", h), dtype=complex)
    if h.shape[-2:] != (spec.m, spec.m):
        raise ValueError(f"channel shape {h.shape} does not match {spec.name} ({spec.m}x{spec.m})")
    hb = h[..., None, :, :] @ spec.basis()  # (..., 2S, M, T)
    cols = np.swapaxes(hb, -1, -2).reshape(*hb.shape[:-2], -1)  # column-major vec
    g = np.concatenate([cols.real, cols.imag], axis=-1)
    return np.swapaxes(g, -1, -2)


def vec_real(y) -> np.ndarray:
    """``[Re vec(Y); Im vec(Y)]`` for a received block ``(..., M, T)``."""
    y = np.asarray(y)
    v = np.swapaxes(y, -1, -2).reshape(*y.shape[:-2], -1)
    return np.concatenate([v.real, v.imag], axis=-1)


def real_to_symbols(x) -> np.ndarray:
    x = np.asarray(x)
    k = x.shape[-1] // 2
    return x[..., :k] + 1j * x[..., k:]


@functools.lru_cache(maxsize=None)
def _codebook(name: str) -> np.ndarray:
    spec = get_code(name)
    syms = np.array(list(itertools.product(QPSK_POINTS, repeat=spec.n_symbols)))
    return spec.encode(syms)


@dataclass(frozen=True)
class MinDeterminant:
    min_abs_det: float
    normalized: float
    """``min |det dX|^2 / d_min^(2M)`` with the codebook scaled to energy ``M`` per channel use."""
    pairs: int


def min_determinant(name: str) -> MinDeterminant:
    """Brute-force minimum determinant over all distinct QPSK codeword pairs (2x2 codes)."""
    spec = get_code(name)
    if spec.m != 2 or spec.t != 2:
        raise ValueError("exhaustive minimum determinant is implemented for 2x2 codes")
    cb = _codebook(name)
    best = math.inf
    for i in range(len(cb) - 1):
        d = cb[i] - cb[i + 1 :]
        det = np.abs(d[:, 0, 0] * d[:, 1, 1] - d[:, 0, 1] * d[:, 1, 0])
        best = min(best, float(det.min()))
    dmin = 2 * QPSK_LEVEL
    scale = spec.energy_scale()
    norm = (best * scale**spec.m) ** 2 / dmin ** (2 * spec.m)
    return MinDeterminant(best, norm, len(cb) * (len(cb) - 1) // 2)
