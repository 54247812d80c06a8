"""GRAPPA calibration, k-space interpolation and its image-domain pixel operator.

All missing-line offsets of a uniform ``A``-fold lattice are packed into a
single k-space stencil: for a target ``o`` lines past an acquired line, the
source taps sit at phase-encode offsets ``d = -o + A*j``, so each residue class
of ``d`` modulo ``A`` serves exactly one target offset and the stencil center
(class 0) is the identity. Interpolation is therefore one circular convolution
of the zero-filled lattice data, which is what makes the image-domain
diagonalization exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft
import scipy.linalg as sla

from .errors import CalibrationError, ConfigurationError, DimensionError, SolverError
from .lattice import KSPACE, ComplexLattice, PixelwiseOperator, kernel_transfer
from .sampling import SamplingScheme

DEFAULT_PE_TAPS = 4
DEFAULT_FE_TAPS = 5
DEFAULT_REG = 1e-4


def source_offsets(acceleration: int, offset: int, n_pe: int) -> np.ndarray:
    """Phase-encode offsets of the acquired source lines for one target offset."""
    lo = -((n_pe - 1) // 2)
    return -offset + acceleration * np.arange(lo, lo + n_pe)


def read_offsets(n_fe: int) -> np.ndarray:
    return np.arange(n_fe) - n_fe // 2


@dataclass(frozen=True)
class GrappaKernel:
    """Interpolation weights ``weights[o - 1, target_coil, source_coil, pe_tap, fe_tap]``."""

    weights: np.ndarray
    acceleration: int
    n_pe: int = DEFAULT_PE_TAPS
    n_fe: int = DEFAULT_FE_TAPS

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.complex128)
        a = self.acceleration
        if a < 1 or self.n_fe % 2 == 0 or self.n_pe < 1:
            raise ConfigurationError("invalid GRAPPA geometry")
        if w.ndim != 5 or w.shape[0] != a - 1 or w.shape[3:] != (self.n_pe, self.n_fe):
            raise DimensionError(f"weights shape {w.shape} inconsistent with geometry")
        if not np.all(np.isfinite(w)):
            raise SolverError("non-finite GRAPPA weights")
        object.__setattr__(self, "weights", w)

    @property
    def coils(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def identity(cls, acceleration: int, coils: int, n_pe: int = DEFAULT_PE_TAPS,
                 n_fe: int = DEFAULT_FE_TAPS) -> "GrappaKernel":
        """A kernel that leaves every missing line at zero (pure zero filling)."""
        return cls(np.zeros((acceleration - 1, coils, coils, n_pe, n_fe)), acceleration, n_pe, n_fe)

    def half_widths(self) -> tuple[int, int]:
        a = self.acceleration
        pe = 0
        for o in range(1, a):
            pe = max(pe, int(np.abs(source_offsets(a, o, self.n_pe)).max()))
        return self.n_fe // 2, pe

    def correlation_stencil(self, coils: int | None = None) -> np.ndarray:
        """Full stencil ``(C, C, kh, kw)`` with ``out[t] = sum_d w[d] in[t + d]``."""
        c = self.weights.shape[1] if coils is None else coils
        hr, hp = self.half_widths()
        st = np.zeros((c, c, 2 * hr + 1, 2 * hp + 1), complex)
        st[np.arange(c), np.arange(c), hr, hp] = 1.0
        rows = hr + read_offsets(self.n_fe)
        for o in range(1, self.acceleration):
            cols = hp + source_offsets(self.acceleration, o, self.n_pe)
            for j, col in enumerate(cols):
                st[:, :, rows, col] += self.weights[o - 1, :, :, j, :]
        return st

    def convolution_stencil(self, coils: int | None = None) -> np.ndarray:
        """Same operator as :meth:`correlation_stencil` in convolution form."""
        return self.correlation_stencil(coils)[..., ::-1, ::-1]


@dataclass(frozen=True)
class ImageDomainGrappa:
    """Per-pixel ``C x C`` blocks ``Lambda_n`` with ``G_conv^H = F Lambda F^H``."""

    lam: PixelwiseOperator

    @property
    def matrices(self) -> np.ndarray:
        return self.lam.matrices


def _acs_block(acs_block: ComplexLattice, scheme: SamplingScheme) -> np.ndarray:
    acs_block.require(KSPACE)
    if acs_block.n2 == scheme.n2 and scheme.acs_lines != scheme.n2:
        return acs_block.data[:, :, scheme.acs_order]
    if acs_block.n2 == scheme.acs_lines:
        return acs_block.data
    raise DimensionError(f"ACS block has {acs_block.n2} lines, expected {scheme.acs_lines} or {scheme.n2}")


def grappa_calibrate(acs_block: ComplexLattice, scheme: SamplingScheme, reg: float = DEFAULT_REG,
                     n_pe: int = DEFAULT_PE_TAPS, n_fe: int = DEFAULT_FE_TAPS) -> GrappaKernel:
    """Fit interpolation weights on the fully sampled ACS block by ridge regression.

    ``reg`` is relative to the mean diagonal of the source Gram matrix. The read
    direction wraps around, matching the circular interpolation.
    """
    a = scheme.acceleration
    acs = _acs_block(acs_block, scheme)
    c, n1, nacs = acs.shape
    if a == 1:
        return GrappaKernel.identity(1, c, n_pe, n_fe)
    if nacs < a * n_pe:
        raise CalibrationError(f"{nacs} ACS lines cannot calibrate a {n_pe}-line kernel at A={a}")
    if reg < 0:
        raise ConfigurationError("regularization must be nonnegative")
    fe = read_offsets(n_fe)
    rolled = np.stack([np.roll(acs, -e, axis=1) for e in fe], axis=-1)  # (c, n1, nacs, n_fe)
    weights = np.empty((a - 1, c, c, n_pe, n_fe), complex)
    for o in range(1, a):
        d = source_offsets(a, o, n_pe)
        t0, t1 = max(0, -d.min()), nacs - 1 - max(0, d.max())
        if t1 < t0:
            raise CalibrationError("ACS block narrower than the kernel span")
        t = np.arange(t0, t1 + 1)
        src = rolled[:, :, t[:, None] + d[None, :], :]  # (c, n1, T, n_pe, n_fe)
        x = np.moveaxis(src, 0, 2).reshape(n1 * len(t), c * n_pe * n_fe)
        y = acs[:, :, t].transpose(1, 2, 0).reshape(n1 * len(t), c)
        gram = x.conj().T @ x
        lam = reg * np.real(np.trace(gram)) / gram.shape[0]
        try:
            w = sla.solve(gram + lam * np.eye(gram.shape[0]), x.conj().T @ y, assume_a="pos")
        except (np.linalg.LinAlgError, sla.LinAlgError) as exc:
            raise SolverError(f"GRAPPA normal equations are singular (reg={reg})") from exc
        # w rows are (coil, pe_tap, fe_tap); columns target coil
        weights[o - 1] = w.T.reshape(c, c, n_pe, n_fe)
    return GrappaKernel(weights, a, n_pe, n_fe)


def _check_geometry(kernel: GrappaKernel, scheme: SamplingScheme, n2: int) -> None:
    if kernel.acceleration != scheme.acceleration:
        raise ConfigurationError("kernel and scheme accelerations differ")
    if scheme.n2 != n2:
        raise DimensionError(f"scheme covers {scheme.n2} lines, data has {n2}")
    if n2 % scheme.acceleration:
        raise ConfigurationError("phase-encode width must be a multiple of the acceleration")


def _transfer(kernel: GrappaKernel, c: int, n1: int, n2: int) -> np.ndarray:
    return kernel_transfer(kernel.convolution_stencil(c), n1, n2)


def grappa_conv_array(k: np.ndarray, transfer: np.ndarray, adjoint: bool = False) -> np.ndarray:
    """Circular k-space convolution ``G_conv^H`` (or its adjoint) on ``(..., C, n1, n2)``."""
    kf = sfft.fft2(k, axes=(-2, -1))
    if adjoint:
        out = np.einsum("oixy,...oxy->...ixy", np.conj(transfer), kf)
    else:
        out = np.einsum("oixy,...ixy->...oxy", transfer, kf)
    return sfft.ifft2(out, axes=(-2, -1))


class GrappaOperator:
    """The linear map ``G^H`` from acquired k-space to a completed grid, with adjoint.

    Without ACS: ``G^H = M_xi + M_xi' G_conv^H M_xi``. With ACS the acquired
    block overwrites the synthesized lines: ``M_theta + M_theta' (...)``.
    """

    def __init__(self, kernel: GrappaKernel, scheme: SamplingScheme, n1: int, n2: int,
                 c: int, include_acs: bool = False):
        _check_geometry(kernel, scheme, n2)
        self.kernel, self.scheme, self.include_acs = kernel, scheme, include_acs
        self.transfer = _transfer(kernel, c, n1, n2)
        self.xi = scheme.line_mask("xi")
        self.theta = scheme.line_mask("theta") if include_acs else np.zeros(n2, bool)

    def forward(self, k: np.ndarray) -> np.ndarray:
        src = k * self.xi
        out = grappa_conv_array(src, self.transfer)
        out[..., self.xi] = k[..., self.xi]
        out[..., self.theta] = k[..., self.theta]
        return out

    def adjoint(self, u: np.ndarray) -> np.ndarray:
        keep = ~self.theta
        rest = u * keep
        missing = rest * ~self.xi
        v = grappa_conv_array(missing, self.transfer, adjoint=True) * self.xi
        v = v + rest * self.xi
        v[..., self.theta] += u[..., self.theta]
        return v


def grappa_interpolate(k_sub: ComplexLattice, kernel: GrappaKernel, scheme: SamplingScheme,
                       include_acs: bool = False) -> ComplexLattice:
    """Synthesize missing phase-encode lines; acquired lines pass through unchanged."""
    k_sub.require(KSPACE)
    op = GrappaOperator(kernel, scheme, k_sub.n1, k_sub.n2, k_sub.c, include_acs)
    return k_sub.replace(op.forward(k_sub.data))


def grappa_conv(k: ComplexLattice, kernel: GrappaKernel) -> ComplexLattice:
    """Unmasked ``G_conv^H k`` (no zero filling, no passthrough)."""
    k.require(KSPACE)
    return k.replace(grappa_conv_array(k.data, _transfer(kernel, k.c, k.n1, k.n2)))


def grappa_image_operator(kernel: GrappaKernel, scheme: SamplingScheme, n1: int, n2: int,
                          coils: int | None = None) -> ImageDomainGrappa:
    """Per-pixel blocks of the k-space convolution, via the convolution theorem.

    A k-space convolution with stencil ``g`` multiplies the image by
    ``lambda[n] = sum_d g[d] exp(+2 pi i d n / N)``, i.e. the forward DFT of the
    correlation-form stencil.
    """
    _check_geometry(kernel, scheme, n2)
    lam = kernel_transfer(kernel.correlation_stencil(coils), n1, n2)
    return ImageDomainGrappa(PixelwiseOperator(lam))
