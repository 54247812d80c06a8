"""Multicoil image / k-space containers and Kronecker-structured operators.

Data is stored coil-major: ``data[c, row, col]``, so the flattened vector is
``[x_1^T, ..., x_C^T]^T`` with row-major pixels inside each coil. The second
spatial axis (columns) is the phase-encode direction everywhere in the package.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.fft as sfft

from .errors import ConfigurationError, DimensionError, DomainMismatchError

IMAGE = "image"
KSPACE = "kspace"
_DOMAINS = (IMAGE, KSPACE)


@dataclass(frozen=True)
class ComplexLattice:
    """An ``n1 x n2 x c`` grid of complex samples tagged with its domain."""

    data: np.ndarray
    domain: str = IMAGE

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise DimensionError(f"lattice data must be (c, n1, n2), got {arr.shape}")
        if self.domain not in _DOMAINS:
            raise ConfigurationError(f"unknown domain tag {self.domain!r}")
        arr = np.ascontiguousarray(arr, dtype=np.complex128)
        if not np.all(np.isfinite(arr)):
            raise ConfigurationError("lattice contains NaN or Inf samples")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def c(self) -> int:
        return self.data.shape[0]

    @property
    def n1(self) -> int:
        return self.data.shape[1]

    @property
    def n2(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def replace(self, data: np.ndarray, domain: str | None = None) -> "ComplexLattice":
        return ComplexLattice(data, self.domain if domain is None else domain)

    def require(self, domain: str) -> "ComplexLattice":
        if self.domain != domain:
            raise DomainMismatchError(f"expected {domain} lattice, got {self.domain}")
        return self

    @classmethod
    def zeros(cls, n1: int, n2: int, c: int = 1, domain: str = IMAGE) -> "ComplexLattice":
        return cls(np.zeros((c, n1, n2), complex), domain)


@dataclass(frozen=True)
class RepetitionStack:
    """R repeated acquisitions with identical dimensions and domain."""

    reps: tuple[ComplexLattice, ...]

    def __post_init__(self):
        reps = tuple(self.reps)
        if not reps:
            raise DimensionError("a repetition stack needs at least one member")
        first = reps[0]
        for r in reps[1:]:
            if r.shape != first.shape or r.domain != first.domain:
                raise DimensionError("repetitions must share dimensions and domain")
        object.__setattr__(self, "reps", reps)

    @classmethod
    def from_array(cls, arr: np.ndarray, domain: str = IMAGE) -> "RepetitionStack":
        """Build from an array shaped ``(R, c, n1, n2)`` or ``(R, n1, n2)``."""
        arr = np.asarray(arr)
        if arr.ndim == 3:
            arr = arr[:, None]
        return cls(tuple(ComplexLattice(a, domain) for a in arr))

    def __len__(self) -> int:
        return len(self.reps)

    def __getitem__(self, i: int) -> ComplexLattice:
        return self.reps[i]

    def as_array(self) -> np.ndarray:
        return np.stack([r.data for r in self.reps])

    def mean(self) -> ComplexLattice:
        return self.reps[0].replace(self.as_array().mean(axis=0))


@dataclass(frozen=True)
class PixelwiseOperator:
    """``I_N (x) V``: one ``M x C`` matrix, or one per pixel.

    ``matrices`` is ``(M, C)`` for the global variant or ``(M, C, n1, n2)`` for
    the per-pixel variant.
    """

    matrices: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrices, dtype=np.complex128)
        if m.ndim not in (2, 4):
            raise DimensionError(f"pixelwise matrices must be (M, C) or (M, C, n1, n2), got {m.shape}")
        object.__setattr__(self, "matrices", m)

    @property
    def per_pixel(self) -> bool:
        return self.matrices.ndim == 4

    @property
    def in_channels(self) -> int:
        return self.matrices.shape[1]

    @property
    def out_channels(self) -> int:
        return self.matrices.shape[0]

    def at(self, i: int, j: int) -> np.ndarray:
        return self.matrices[:, :, i, j] if self.per_pixel else self.matrices

    def adjoint(self) -> "PixelwiseOperator":
        return PixelwiseOperator(np.conj(np.swapaxes(self.matrices, 0, 1)))

    def compose(self, other: "PixelwiseOperator") -> "PixelwiseOperator":
        """Return ``self @ other`` pixel by pixel."""
        a, b = self.matrices, other.matrices
        if a.ndim == 2 and b.ndim == 2:
            return PixelwiseOperator(a @ b)
        a4 = a if a.ndim == 4 else a[:, :, None, None]
        b4 = b if b.ndim == 4 else b[:, :, None, None]
        return PixelwiseOperator(np.einsum("mkxy,kcxy->mcxy", a4, b4))


def dft2_array(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unitary 2D DFT over the last two axes."""
    fn = sfft.ifft2 if inverse else sfft.fft2
    return fn(x, axes=(-2, -1), norm="ortho")


def dft2_channelwise(x: ComplexLattice) -> ComplexLattice:
    """``(F (x) I_C) x``: unitary 2D DFT of every coil, image -> k-space."""
    x.require(IMAGE)
    return ComplexLattice(dft2_array(x.data), KSPACE)


def idft2_channelwise(k: ComplexLattice) -> ComplexLattice:
    """Adjoint (and inverse) of :func:`dft2_channelwise`."""
    k.require(KSPACE)
    return ComplexLattice(dft2_array(k.data, inverse=True), IMAGE)


def apply_pixelwise_array(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply ``(M, C)`` or ``(M, C, n1, n2)`` matrices to ``(..., C, n1, n2)`` data."""
    if mat.ndim == 2:
        return np.einsum("mc,...cxy->...mxy", mat, x)
    return np.einsum("mcxy,...cxy->...mxy", mat, x)


def pixelwise_apply(op: PixelwiseOperator, x: ComplexLattice) -> ComplexLattice:
    if op.in_channels != x.c:
        raise DimensionError(f"operator expects {op.in_channels} channels, lattice has {x.c}")
    if op.per_pixel and op.matrices.shape[2:] != (x.n1, x.n2):
        raise DimensionError("per-pixel operator grid does not match lattice")
    return x.replace(apply_pixelwise_array(op.matrices, x.data))


def kernel_transfer(kernel: np.ndarray, n1: int, n2: int) -> np.ndarray:
    """Unnormalized DFT of centered stencils embedded in an ``n1 x n2`` grid.

    ``kernel`` has shape ``(..., kh, kw)`` with odd ``kh, kw``; the tap at the
    stencil center sits at grid offset ``(0, 0)``. Stencils larger than the grid
    wrap around.
    """
    kh, kw = kernel.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"stencil dims must be odd, got {kh}x{kw}")
    lead = kernel.shape[:-2]
    if kh <= n1 and kw <= n2:
        padded = np.zeros(lead + (n1, n2), complex)
        padded[..., :kh, :kw] = kernel
        padded = np.roll(padded, (-(kh // 2), -(kw // 2)), axis=(-2, -1))
    else:
        padded = np.zeros(lead + (n1, n2), complex)
        rows = (np.arange(kh) - kh // 2) % n1
        cols = (np.arange(kw) - kw // 2) % n2
        for a, r in enumerate(rows):
            for b, c in enumerate(cols):
                padded[..., r, c] += kernel[..., a, b]
    return sfft.fft2(padded, axes=(-2, -1))


def extract_stencil(full: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Inverse of the zero-padding in :func:`kernel_transfer` (grid -> centered taps)."""
    rolled = np.roll(full, (kh // 2, kw // 2), axis=(-2, -1))
    return rolled[..., :kh, :kw]


def conv2_circular(x: ComplexLattice, kernel: np.ndarray) -> ComplexLattice:
    """Periodic 2D convolution mixing coils through a stencil bank.

    ``kernel`` is ``(out_c, in_c, kh, kw)`` (a 2D stencil is treated as a
    coil-diagonal bank). ``out[o][n] = sum_i sum_d kernel[o, i][d] x[i][n - d]``.
    """
    kernel = np.asarray(kernel, dtype=np.complex128)
    if kernel.ndim == 2:
        kernel = np.einsum("oi,xy->oixy", np.eye(x.c), kernel)
    if kernel.ndim != 4 or kernel.shape[1] != x.c:
        raise DimensionError(f"kernel bank shape {kernel.shape} incompatible with {x.c} coils")
    transfer = kernel_transfer(kernel, x.n1, x.n2)
    xf = sfft.fft2(x.data, axes=(-2, -1))
    out = sfft.ifft2(np.einsum("oixy,ixy->oxy", transfer, xf), axes=(-2, -1))
    return x.replace(out)


def stack_lattices(items: Sequence[ComplexLattice]) -> np.ndarray:
    return np.stack([it.data for it in items])
