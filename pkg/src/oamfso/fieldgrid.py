"""Sampled scalar fields on a square grid and Laguerre-Gauss mode synthesis."""

from __future__ import annotations

import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FIELD_MAGIC = b"OAMF"
_FIELD_HEADER = struct.Struct("<4sIdd")


class GridMismatchError(ValueError):
    """Two fields (or a field and a screen) do not live on the same grid."""


@dataclass(frozen=True)
class GridSpec:
    """Square sampling grid: ``n`` samples per side, spacing ``dx`` meters."""

    n: int = 512
    dx: float = 5e-3

    def __post_init__(self):
        if self.n < 2 or self.n & (self.n - 1):
            raise ValueError(f"grid size must be a power of two, got n={self.n}")
        if not self.dx > 0:
            raise ValueError(f"grid spacing must be positive, got dx={self.dx}")

    @property
    def half_width(self) -> float:
        return self.n * self.dx / 2

    def coords(self) -> np.ndarray:
        """Cell-centre coordinates along one axis."""
        return (np.arange(self.n) - self.n / 2 + 0.5) * self.dx

    def polar(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(r, phi)`` on the grid; rows index y, columns index x."""
        c = self.coords()
        x, y = np.meshgrid(c, c, indexing="xy")
        return np.hypot(x, y), np.arctan2(y, x)

    def frequencies(self) -> tuple[np.ndarray, np.ndarray]:
        """Angular spatial frequencies ``(kx, ky)`` in rad/m, FFT ordering."""
        k = 2 * np.pi * np.fft.fftfreq(self.n, d=self.dx)
        kx, ky = np.meshgrid(k, k, indexing="xy")
        return kx, ky


@dataclass(frozen=True)
class BeamParams:
    w0: float = 0.016
    wavelength: float = 1550e-9

    def __post_init__(self):
        if not (self.w0 > 0 and self.wavelength > 0):
            raise ValueError("beam waist and wavelength must be positive")

    @property
    def k(self) -> float:
        return 2 * np.pi / self.wavelength

    @property
    def z_r(self) -> float:
        """Rayleigh range."""
        return np.pi * self.w0**2 / self.wavelength

    def w(self, z: float) -> float:
        """Fundamental beam radius at distance ``z``."""
        return self.w0 * math.sqrt(1 + (z / self.z_r) ** 2)


@dataclass(frozen=True, order=True)
class ModeIndex:
    p: int = 0
    m: int = 0

    def __post_init__(self):
        if self.p < 0:
            raise ValueError(f"radial index must be non-negative, got p={self.p}")


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Complex field samples on ``grid`` at plane ``z``.

    The sample array is made read-only on construction.
    """

    grid: GridSpec
    samples: np.ndarray = field(repr=False)
    z: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.shape != (self.grid.n, self.grid.n):
            raise ValueError(
                f"expected {self.grid.n}x{self.grid.n} samples, got {s.shape}"
            )
        if not np.iscomplexobj(s):
            s = s.astype(np.complex128)
        s.flags.writeable = False
        object.__setattr__(self, "samples", s)

    def scaled(self, c: complex) -> ScalarField:
        return ScalarField(self.grid, self.samples * c, self.z)

    def normalized(self) -> ScalarField:
        pw = power(self)
        if pw == 0:
            raise ValueError("cannot normalize a zero field")
        return self.scaled(1 / math.sqrt(pw))


def laguerre(p: int, alpha: float, x: np.ndarray) -> np.ndarray:
    """Generalized Laguerre polynomial ``L_p^alpha(x)`` by upward recurrence."""
    x = np.asarray(x, dtype=float)
    prev = np.ones_like(x)
    if p == 0:
        return prev
    cur = 1 + alpha - x
    for j in range(1, p):
        prev, cur = cur, ((2 * j + 1 + alpha - x) * cur - (j + alpha) * prev) / (j + 1)
    return cur


def beam_radius(mode: ModeIndex, beam: BeamParams, z: float) -> float:
    """Second-moment radius ``w(z) * sqrt(2p + |m| + 1)`` of an LG mode."""
    return beam.w(z) * math.sqrt(2 * mode.p + abs(mode.m) + 1)


def check_grid_capacity(mode: ModeIndex, beam: BeamParams, z: float, grid: GridSpec):
    radius = beam_radius(mode, beam, z)
    if radius > grid.half_width / 2:
        raise ValueError(
            f"LG{mode.p},{mode.m} radius {radius:.4g} m exceeds half the grid "
            f"half-width {grid.half_width:.4g} m"
        )
    if radius > grid.half_width / 4:
        warnings.warn(
            f"LG{mode.p},{mode.m} radius {radius:.4g} m exceeds a quarter of the "
            f"grid half-width {grid.half_width:.4g} m",
            stacklevel=3,
        )


def lg_field(mode: ModeIndex, beam: BeamParams, z: float, grid: GridSpec) -> ScalarField:
    """Sample the Laguerre-Gauss mode ``mode`` at plane ``z``.

    The field carries the Gouy phase ``(2p+|m|+1) atan(z/zR)``, the wavefront
    curvature ``exp(-i k r^2 z / 2(z^2+zR^2))`` and the azimuthal factor
    ``exp(-i m phi)``.  It is then scaled to unit discrete power; the ratio of
    the analytic normalization to the discrete one is logged at DEBUG level.
    """
    check_grid_capacity(mode, beam, z, grid)
    p, am = mode.p, abs(mode.m)
    r, phi = grid.polar()
    w = beam.w(z)
    zr = beam.z_r
    rho = r * math.sqrt(2) / w
    amp = rho**am * laguerre(p, am, rho**2) * np.exp(-(r**2) / w**2) / w
    phase = (
        -beam.k * r**2 * z / (2 * (z**2 + zr**2))
        + (2 * p + am + 1) * math.atan2(z, zr)
        - mode.m * phi
    )
    u = amp * np.exp(1j * phase)

    analytic = math.sqrt(2 * math.factorial(p) / (math.pi * math.factorial(p + am)))
    discrete = 1 / math.sqrt(float(np.sum(amp**2)) * grid.dx**2)
    log.debug("LG%d,%d analytic/discrete normalization ratio %.6g", p, mode.m, analytic / discrete)
    return ScalarField(grid, u * discrete, z)


def _check_same_plane(a: ScalarField, b: ScalarField):
    if a.grid != b.grid:
        raise GridMismatchError(f"grid mismatch: {a.grid} vs {b.grid}")
    if not math.isclose(a.z, b.z, rel_tol=1e-12, abs_tol=1e-9):
        raise GridMismatchError(f"plane mismatch: z={a.z} vs z={b.z}")


def inner_product(a: ScalarField, b: ScalarField) -> complex:
    """Discrete overlap ``sum(a * conj(b)) dx^2``."""
    _check_same_plane(a, b)
    return complex(np.vdot(b.samples, a.samples) * a.grid.dx**2)


def power(a: ScalarField) -> float:
    s = a.samples
    return float(np.vdot(s, s).real * a.grid.dx**2)


def gram_matrix(fields: list[ScalarField]) -> np.ndarray:
    """``G[p, q] = inner_product(fields[q], fields[p])``."""
    for f in fields[1:]:
        _check_same_plane(fields[0], f)
    stack = np.stack([f.samples.ravel() for f in fields])
    return stack.conj() @ stack.T * fields[0].grid.dx**2


def second_moment_radius(a: ScalarField) -> float:
    """Beam radius ``sqrt(2 <r^2>)`` from the intensity second moment."""
    r, _ = a.grid.polar()
    i = np.abs(a.samples) ** 2
    return math.sqrt(2 * float(np.sum(r**2 * i) / np.sum(i)))


def write_field(path: str | Path, a: ScalarField) -> None:
    """Dump ``a`` as an ``OAMF`` file (24-byte header, then LE complex128)."""
    with open(path, "wb") as fh:
        fh.write(_FIELD_HEADER.pack(FIELD_MAGIC, a.grid.n, a.grid.dx, a.z))
        fh.write(np.ascontiguousarray(a.samples, dtype="<c16").tobytes())


def read_field(path: str | Path) -> ScalarField:
    data = Path(path).read_bytes()
    if len(data) < _FIELD_HEADER.size:
        raise ValueError(f"{path}: truncated field header")
    magic, n, dx, z = _FIELD_HEADER.unpack_from(data)
    if magic != FIELD_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = np.frombuffer(data, dtype="<c16", offset=_FIELD_HEADER.size)
    if body.size != n * n:
        raise ValueError(f"{path}: expected {n * n} samples, found {body.size}")
    return ScalarField(GridSpec(n, dx), body.reshape(n, n).astype(np.complex128), z)
