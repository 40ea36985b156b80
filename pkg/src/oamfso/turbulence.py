"""Modified Kolmogorov turbulence: spectrum, Rytov variance and FFT phase screens.

Screen seeding
--------------
Every random draw comes from ``numpy.random.SeedSequence`` built from an
integer key path.  A stack generated from key ``(*seed, )`` with ``count``
screens draws screen ``j`` from ``(*seed, count, j)``, so screens never
depend on generation order and changing ``count`` changes every screen.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import scipy.fft as sfft

from .fieldgrid import GridSpec

SeedKey = Union[int, Sequence[int]]

SCREEN_MAGIC = b"OAMS"
_SCREEN_HEADER = struct.Struct("<4sIdIdQddd")

PLACEMENTS = ("end", "mid")


def rng_from_key(*key: SeedKey) -> np.random.Generator:
    """Counter-style generator: the same flattened integer key, the same stream."""
    flat: list[int] = []
    for k in key:
        if isinstance(k, (int, np.integer)):
            flat.append(int(k))
        else:
            flat.extend(int(x) for x in k)
    if any(x < 0 for x in flat):
        raise ValueError(f"seed key entries must be non-negative: {flat}")
    return np.random.default_rng(np.random.SeedSequence(flat))


@dataclass(frozen=True)
class TurbulenceParams:
    """Turbulence strength and scales.

    ``printed_outer_scale`` switches the outer-scale term from
    ``(kappa^2 + 1/L0^2)`` to the dimensionally inconsistent
    ``(kappa^2 + 1/L0)`` variant, kept for comparison runs only.
    """

    cn2: float = 1e-14
    l0: float = 5e-3
    L0: float = 20.0
    printed_outer_scale: bool = False

    def __post_init__(self):
        if not self.cn2 > 0:
            raise ValueError(f"cn2 must be positive, got {self.cn2}")
        if not 0 < self.l0 < self.L0:
            raise ValueError(f"need 0 < l0 < L0, got l0={self.l0}, L0={self.L0}")

    @property
    def kappa_l(self) -> float:
        return 3.3 / self.l0


def spectrum_phi(kappa, params: TurbulenceParams):
    """Refractive-index power spectrum (modified Kolmogorov), units m^3."""
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa < 0):
        raise ValueError("kappa must be non-negative")
    kl = params.kappa_l
    outer = 1 / params.L0 if params.printed_outer_scale else 1 / params.L0**2
    x = kappa / kl
    f = 1 + 1.802 * x - 0.254 * x ** (7 / 6)
    return 0.033 * params.cn2 * np.exp(-(x**2)) / (kappa**2 + outer) ** (11 / 6) * f


def phase_spectrum(kappa, params: TurbulenceParams, wavelength: float, slab: float):
    """Phase power spectrum of a slab of thickness ``slab``: ``2 pi k^2 dz Phi_n``."""
    k = 2 * np.pi / wavelength
    return 2 * np.pi * k**2 * slab * spectrum_phi(kappa, params)


def rytov_variance(params: TurbulenceParams, wavelength: float, z: float) -> float:
    if not z > 0:
        raise ValueError(f"path length must be positive, got {z}")
    return 1.23 * params.cn2 * (2 * np.pi / wavelength) ** (7 / 6) * z ** (11 / 6)


def classify_regime(sigma_r2: float) -> str:
    """``"weak"`` below 1, ``"strong"`` above, ``"boundary"`` at exactly 1."""
    if sigma_r2 < 1:
        return "weak"
    if sigma_r2 > 1:
        return "strong"
    return "boundary"


@dataclass(frozen=True, eq=False)
class PhaseScreen:
    grid: GridSpec
    phase: np.ndarray = field(repr=False)

    def __post_init__(self):
        ph = np.asarray(self.phase, dtype=float)
        if ph.shape != (self.grid.n, self.grid.n):
            raise ValueError(f"screen shape {ph.shape} does not match {self.grid}")
        if not np.all(np.isfinite(ph)):
            raise ValueError("phase screen has non-finite samples")
        ph.flags.writeable = False
        object.__setattr__(self, "phase", ph)


@dataclass(frozen=True, eq=False)
class ScreenStack:
    """Ordered screens, one per slab of length ``spacing``.

    ``placement="end"`` puts screen ``j`` (1-based) at ``j * spacing``;
    ``"mid"`` puts it at the slab centre ``(j - 1/2) * spacing``.
    """

    screens: tuple[PhaseScreen, ...]
    spacing: float
    placement: str = "end"

    def __post_init__(self):
        object.__setattr__(self, "screens", tuple(self.screens))
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}")
        if not self.spacing > 0:
            raise ValueError("screen spacing must be positive")

    @property
    def count(self) -> int:
        return len(self.screens)

    @property
    def z_total(self) -> float:
        return self.count * self.spacing

    def positions(self) -> np.ndarray:
        j = np.arange(1, self.count + 1, dtype=float)
        if self.placement == "mid":
            j -= 0.5
        return j * self.spacing


def screen_amplitude(grid: GridSpec, params: TurbulenceParams, wavelength: float, slab: float):
    """Per-bin standard deviation ``dk * sqrt(Phi_phase(kappa))``, DC bin zeroed."""
    kx, ky = grid.frequencies()
    dk = 2 * np.pi / (grid.n * grid.dx)
    amp = dk * np.sqrt(phase_spectrum(np.hypot(kx, ky), params, wavelength, slab))
    amp[0, 0] = 0.0
    return amp


def gen_phase_screen(
    grid: GridSpec,
    params: TurbulenceParams,
    seed: SeedKey,
    *,
    wavelength: float = 1550e-9,
    slab: float = 50.0,
    _amplitude: np.ndarray | None = None,
) -> PhaseScreen:
    """Draw one FFT phase screen.

    Each frequency bin gets a circular complex Gaussian with unit variance per
    quadrature, scaled by ``dk * sqrt(Phi_phase)``; the screen is the real
    part of the inverse transform.
    """
    amp = screen_amplitude(grid, params, wavelength, slab) if _amplitude is None else _amplitude
    rng = rng_from_key(seed)
    n = grid.n
    c = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    phase = sfft.ifft2(c * amp, norm="forward").real
    return PhaseScreen(grid, phase)


def gen_screen_stack(
    grid: GridSpec,
    params: TurbulenceParams,
    z_total: float,
    count: int,
    seed: SeedKey,
    *,
    spacing: float | None = None,
    wavelength: float = 1550e-9,
    placement: str = "end",
) -> ScreenStack:
    if count < 1:
        raise ValueError(f"need at least one screen, got count={count}")
    if not z_total > 0:
        raise ValueError(f"path length must be positive, got {z_total}")
    if spacing is None:
        spacing = z_total / count
    elif not math.isclose(spacing * count, z_total, rel_tol=1e-12):
        raise ValueError(f"{count} screens x {spacing} m does not cover {z_total} m")
    key = [seed] if isinstance(seed, (int, np.integer)) else list(seed)
    amp = screen_amplitude(grid, params, wavelength, spacing)
    screens = [
        gen_phase_screen(grid, params, (*key, count, j), wavelength=wavelength,
                         slab=spacing, _amplitude=amp)
        for j in range(count)
    ]
    return ScreenStack(tuple(screens), spacing, placement)


def write_screen_bank(
    path: str | Path, stack: ScreenStack, master_seed: int, params: TurbulenceParams
) -> None:
    """Write ``stack`` as an ``OAMS`` file with float32 phases."""
    grid = stack.screens[0].grid
    with open(path, "wb") as fh:
        fh.write(_SCREEN_HEADER.pack(
            SCREEN_MAGIC, grid.n, grid.dx, stack.count, stack.spacing,
            master_seed, params.cn2, params.l0, params.L0,
        ))
        for s in stack.screens:
            fh.write(np.ascontiguousarray(s.phase, dtype="<f4").tobytes())


@dataclass(frozen=True)
class ScreenBankHeader:
    n: int
    dx: float
    count: int
    spacing: float
    master_seed: int
    cn2: float
    l0: float
    L0: float


def read_screen_bank(path: str | Path, placement: str = "end") -> tuple[ScreenBankHeader, ScreenStack]:
    data = Path(path).read_bytes()
    if len(data) < _SCREEN_HEADER.size:
        raise ValueError(f"{path}: truncated screen bank header")
    magic, *rest = _SCREEN_HEADER.unpack_from(data)
    if magic != SCREEN_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {SCREEN_MAGIC!r}")
    hdr = ScreenBankHeader(*rest)
    body = np.frombuffer(data, dtype="<f4", offset=_SCREEN_HEADER.size)
    if body.size != hdr.count * hdr.n**2:
        raise ValueError(f"{path}: expected {hdr.count} screens of {hdr.n}^2, found {body.size} values")
    grid = GridSpec(hdr.n, hdr.dx)
    screens = tuple(
        PhaseScreen(grid, p.astype(float)) for p in body.reshape(hdr.count, hdr.n, hdr.n)
    )
    return hdr, ScreenStack(screens, hdr.spacing, placement)


def structure_function(screens: Sequence[PhaseScreen], lags: Sequence[int]) -> np.ndarray:
    """Ensemble phase structure function at integer pixel ``lags``.

    Differences are taken along both axes without wrap-around and averaged.
    """
    out = []
    for lag in lags:
        acc, cnt = 0.0, 0
        for s in screens:
            ph = s.phase
            dx_ = ph[:, lag:] - ph[:, :-lag]
            dy_ = ph[lag:, :] - ph[:-lag, :]
            acc += float(np.sum(dx_**2) + np.sum(dy_**2))
            cnt += dx_.size + dy_.size
        out.append(acc / cnt)
    return np.array(out)
