"""Split-step Fourier propagation and channel-matrix synthesis.

Propagation uses the same ``exp(-i k z)`` phase convention as the Laguerre-Gauss
fields in :mod:`oamfso.fieldgrid`, so a vacuum-propagated ``lg_field(z=0)``
reproduces ``lg_field(z)``.
"""

from __future__ import annotations

import functools
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.fft as sfft

from .fieldgrid import BeamParams, GridMismatchError, GridSpec, ModeIndex, ScalarField, lg_field
from .turbulence import (
    PLACEMENTS,
    ScreenStack,
    TurbulenceParams,
    gen_phase_screen,
    screen_amplitude,
)

CHANNEL_MAGIC = b"OAMH"
PASSIVITY_EPS = 1e-3


@dataclass(frozen=True)
class LinkParams:
    """Link geometry and numerics.

    ``substeps`` splits each slab's vacuum step; ``absorber`` enables a
    raised-cosine edge window applied after every vacuum step; ``precision``
    is ``"double"`` or ``"single"`` (complex64 workspace for ensembles).
    """

    z_total: float = 1000.0
    beam: BeamParams = field(default_factory=BeamParams)
    grid: GridSpec = field(default_factory=GridSpec)
    placement: str = "end"
    substeps: int = 1
    absorber: bool = False
    precision: str = "double"

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.precision not in ("double", "single"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.complex64 if self.precision == "single" else np.complex128


@dataclass(frozen=True, eq=False)
class ChannelMatrix:
    """``h[p, q]``: amplitude coupling from transmit mode ``q`` into receive mode ``p``."""

    modes: tuple[ModeIndex, ...]
    h: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        h = np.array(self.h, dtype=np.complex128)
        m = len(self.modes)
        if h.shape != (m, m):
            raise ValueError(f"channel matrix shape {h.shape} does not match {m} modes")
        if not np.all(np.isfinite(h)):
            raise ValueError("channel matrix has non-finite entries")
        h.flags.writeable = False
        object.__setattr__(self, "h", h)

    @property
    def charges(self) -> tuple[int, ...]:
        return tuple(md.m for md in self.modes)

    @property
    def size(self) -> int:
        return len(self.modes)


@functools.lru_cache(maxsize=8)
def _transfer(n: int, dx: float, wavelength: float, dz: float, dtype) -> np.ndarray:
    grid = GridSpec(n, dx)
    kx, ky = grid.frequencies()
    k = 2 * np.pi / wavelength
    k2 = kx**2 + ky**2
    prop = k2 < k**2
    # kz - k evaluated without cancellation; the carrier phase k*dz is reduced mod 2pi
    dkz = np.where(prop, -k2 / (k + np.sqrt(np.where(prop, k**2 - k2, 0.0))), 0.0)
    carrier = 2 * np.pi * math.fmod(dz / wavelength, 1.0)
    h = np.where(prop, np.exp(-1j * (carrier + dz * dkz)), 0.0).astype(dtype)
    h.flags.writeable = False
    return h


@functools.lru_cache(maxsize=4)
def _edge_window(n: int, frac: float = 0.1) -> np.ndarray:
    """Separable raised-cosine taper over the outer ``frac`` of each side."""
    t = max(1, int(round(n * frac)))
    w = np.ones(n)
    ramp = 0.5 * (1 - np.cos(np.pi * (np.arange(t) + 0.5) / t))
    w[:t] = ramp
    w[-t:] = ramp[::-1]
    out = np.outer(w, w)
    out.flags.writeable = False
    return out


def _vacuum(u: np.ndarray, grid: GridSpec, dz: float, wavelength: float, absorber: bool = False):
    h = _transfer(grid.n, grid.dx, wavelength, dz, u.dtype.type)
    out = sfft.ifft2(sfft.fft2(u, axes=(-2, -1)) * h, axes=(-2, -1), overwrite_x=True)
    if absorber:
        out *= _edge_window(grid.n).astype(out.real.dtype)
    return out


def vacuum_step(a: ScalarField, dz: float, beam: BeamParams) -> ScalarField:
    """Angular-spectrum step of length ``dz``; evanescent components are zeroed."""
    if not dz > 0:
        raise ValueError(f"step length must be positive, got {dz}")
    out = _vacuum(np.asarray(a.samples, dtype=np.complex128), a.grid, dz, beam.wavelength)
    return ScalarField(a.grid, out, a.z + dz)


def _schedule(stack: ScreenStack | None, link: LinkParams) -> list[tuple[float, int | None]]:
    """Steps as ``(vacuum length, screen index or None)``."""
    if stack is None or stack.count == 0:
        return [(link.z_total, None)]
    if not math.isclose(stack.z_total, link.z_total, rel_tol=1e-12):
        raise ValueError(f"stack covers {stack.z_total} m, link is {link.z_total} m")
    pos = stack.positions()
    steps = []
    z = 0.0
    for j, zj in enumerate(pos):
        steps.append((zj - z, j))
        z = zj
    if link.z_total - z > 1e-9 * link.z_total:
        steps.append((link.z_total - z, None))
    return steps


def _propagate_array(u: np.ndarray, phases: Sequence[np.ndarray | None] | None,
                     stack: ScreenStack | None, link: LinkParams) -> np.ndarray:
    grid = link.grid
    pending = 0.0
    steps = _schedule(stack, link)
    for n, (dz, j) in enumerate(steps):
        pending += dz
        factor = None if j is None else phases[j]
        if factor is None and n < len(steps) - 1:
            # an all-zero screen is the identity: merge the vacuum steps around it
            continue
        if pending > 0:
            sub = pending / link.substeps
            for _ in range(link.substeps):
                u = _vacuum(u, grid, sub, link.beam.wavelength, link.absorber)
        pending = 0.0
        if factor is not None:
            u *= factor
    return u


def _screen_factors(stack: ScreenStack | None, dtype) -> list[np.ndarray | None] | None:
    """``exp(i phase)`` per screen; ``None`` marks an identically zero screen."""
    if stack is None:
        return None
    return [np.exp(1j * s.phase).astype(dtype) if np.any(s.phase) else None for s in stack.screens]


def _check_grid(link: LinkParams, grid: GridSpec, stack: ScreenStack | None):
    if grid != link.grid:
        raise GridMismatchError(f"field grid {grid} differs from link grid {link.grid}")
    if stack is not None:
        for s in stack.screens:
            if s.grid != link.grid:
                raise GridMismatchError(f"screen grid {s.grid} differs from link grid {link.grid}")


def propagate(a: ScalarField, stack: ScreenStack | None, link: LinkParams) -> ScalarField:
    """Propagate ``a`` over ``link.z_total`` through ``stack`` (``None`` or empty: vacuum)."""
    _check_grid(link, a.grid, stack)
    u = np.array(a.samples, dtype=link.dtype)
    out = _propagate_array(u, _screen_factors(stack, link.dtype), stack, link)
    return ScalarField(a.grid, out.astype(np.complex128), a.z + link.z_total)


def transmit_fields(modes: Sequence[ModeIndex], link: LinkParams) -> np.ndarray:
    return np.stack([lg_field(md, link.beam, 0.0, link.grid).samples for md in modes])


def receive_basis(modes: Sequence[ModeIndex], link: LinkParams) -> np.ndarray:
    """Vacuum-propagated transmit modes at ``z_total``, each of unit discrete power."""
    u = transmit_fields(modes, link).astype(np.complex128)
    v = _vacuum(u, link.grid, link.z_total, link.beam.wavelength)
    pw = np.sum(np.abs(v) ** 2, axis=(-2, -1)) * link.grid.dx**2
    return v / np.sqrt(pw)[:, None, None]


def _project(received: np.ndarray, basis: np.ndarray, dx: float) -> np.ndarray:
    m = basis.shape[0]
    b = basis.reshape(m, -1).astype(np.complex128)
    r = received.reshape(received.shape[0], -1).astype(np.complex128)
    # h[p, q] = sum(r_q * conj(b_p)) dx^2
    return (b.conj() @ r.T) * dx**2


def channel_matrix(
    modes: Sequence[ModeIndex],
    stack: ScreenStack | None,
    link: LinkParams,
    *,
    basis: np.ndarray | None = None,
    transmit: np.ndarray | None = None,
) -> ChannelMatrix:
    """Propagate every transmit mode through ``stack`` and project on the receive basis.

    ``basis``/``transmit`` may carry precomputed :func:`receive_basis` and
    :func:`transmit_fields` arrays when many stacks share one mode set.
    """
    modes = tuple(modes)
    if len(modes) < 2 or len(set(modes)) != len(modes):
        raise ValueError("need at least two distinct modes")
    _check_grid(link, link.grid, stack)
    if basis is None:
        basis = receive_basis(modes, link)
    if transmit is None:
        transmit = transmit_fields(modes, link)
    u = np.array(transmit, dtype=link.dtype)
    out = _propagate_array(u, _screen_factors(stack, link.dtype), stack, link)
    return ChannelMatrix(modes, _project(out, basis, link.grid.dx))


def generate_channels(
    modes: Sequence[ModeIndex],
    turb: TurbulenceParams,
    link: LinkParams,
    count: int,
    master_seed: int,
    *,
    screens: int = 20,
    threads: int = 1,
    start: int = 0,
    progress=None,
) -> np.ndarray:
    """Channel matrices for realizations ``start .. start+count-1`` as ``(count, M, M)``.

    Realization ``r`` draws screen ``j`` from seed key ``(master_seed, r, screens, j)``;
    the result does not depend on ``threads``.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    modes = tuple(modes)
    basis = receive_basis(modes, link)
    transmit = transmit_fields(modes, link)
    spacing = link.z_total / screens
    amp = screen_amplitude(link.grid, turb, link.beam.wavelength, spacing)

    def one(r: int) -> np.ndarray:
        stack = ScreenStack(
            tuple(
                gen_phase_screen(link.grid, turb, (master_seed, r, screens, j),
                                 wavelength=link.beam.wavelength, slab=spacing, _amplitude=amp)
                for j in range(screens)
            ),
            spacing,
            link.placement,
        )
        h = channel_matrix(modes, stack, link, basis=basis, transmit=transmit).h
        if progress is not None:
            progress()
        return h

    idx = range(start, start + count)
    if threads <= 1:
        hs = [one(r) for r in idx]
    else:
        with ThreadPoolExecutor(threads) as pool:
            hs = list(pool.map(one, idx))
    return np.stack(hs)


@dataclass(frozen=True)
class ChannelBankHeader:
    charges: tuple[int, ...]
    count: int
    cn2: float
    z: float
    master_seed: int
    placement: str

    def pack(self) -> bytes:
        m = len(self.charges)
        return b"".join([
            CHANNEL_MAGIC,
            struct.pack("<I", m),
            struct.pack(f"<{m}i", *self.charges),
            struct.pack("<IddQB", self.count, self.cn2, self.z, self.master_seed,
                        PLACEMENTS.index(self.placement)),
        ])


def write_channel_bank(path: str | Path, header: ChannelBankHeader, h: np.ndarray) -> None:
    """Write ``(count, M, M)`` matrices, each stored column-major."""
    h = np.asarray(h, dtype=np.complex128)
    m = len(header.charges)
    if h.shape != (header.count, m, m):
        raise ValueError(f"bank array shape {h.shape} does not match header")
    with open(path, "wb") as fh:
        fh.write(header.pack())
        fh.write(np.ascontiguousarray(h.transpose(0, 2, 1), dtype="<c16").tobytes())


def read_channel_bank(path: str | Path) -> tuple[ChannelBankHeader, np.ndarray]:
    data = Path(path).read_bytes()

    def fail(what):
        raise ValueError(f"{path}: channel bank header check failed: {what}")

    if len(data) < 8:
        fail("file shorter than magic + mode count")
    if data[:4] != CHANNEL_MAGIC:
        fail(f"magic {data[:4]!r} != {CHANNEL_MAGIC!r}")
    (m,) = struct.unpack_from("<I", data, 4)
    if m < 1 or 8 + 4 * m + 29 > len(data):
        fail(f"mode count {m} inconsistent with file size")
    charges = struct.unpack_from(f"<{m}i", data, 8)
    off = 8 + 4 * m
    count, cn2, z, seed, plc = struct.unpack_from("<IddQB", data, off)
    off += 29
    if plc >= len(PLACEMENTS):
        fail(f"placement code {plc}")
    body = data[off:]
    if len(body) != count * m * m * 16:
        fail(f"payload {len(body)} bytes, expected {count * m * m * 16}")
    h = np.frombuffer(body, dtype="<c16").reshape(count, m, m).transpose(0, 2, 1)
    return ChannelBankHeader(tuple(charges), count, cn2, z, seed, PLACEMENTS[plc]), np.array(h)
