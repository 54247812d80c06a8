"""Coil noise: synthesis, estimation, whitening, analytic and empirical noise-level maps.

Complex Gaussian convention: a unit-variance complex normal sample has
variance 1/2 in each of its real and imaginary parts, so ``E|b|^2 = 1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .coils import _maps_array
from .errors import (
    ConfigurationError,
    DimensionError,
    InsufficientSamplesError,
    NotPositiveDefiniteError,
    UnsupportedOperationError,
)
from .grappa import ImageDomainGrappa
from .lattice import IMAGE, KSPACE, ComplexLattice, RepetitionStack, apply_pixelwise_array, conv2_circular

SINGULAR_RTOL = 1e-12


def as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def complex_normal(rng, shape) -> np.ndarray:
    """i.i.d. standard complex normal samples (``E|b|^2 = 1``)."""
    rng = as_rng(rng)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def _lower_factor(sigma: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with ``L L^H = sigma`` that tolerates singular PSD input."""
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(sigma)
        root = vecs * np.sqrt(np.clip(vals, 0, None))
        _, r = np.linalg.qr(root.conj().T)
        return r.conj().T


@dataclass(frozen=True)
class CoilCovariance:
    """Hermitian PSD coil covariance ``sigma`` and a lower factor ``chol``."""

    sigma: np.ndarray
    chol: np.ndarray | None = None

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.sigma, dtype=np.complex128))
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise DimensionError(f"covariance must be square, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ConfigurationError("covariance contains NaN or Inf")
        scale = max(np.abs(s).max(), 1.0)
        if np.abs(s - s.conj().T).max() > 1e-12 * scale:
            raise ConfigurationError("covariance is not Hermitian")
        s = (s + s.conj().T) / 2
        if np.linalg.eigvalsh(s).min() < -1e-12 * scale:
            raise NotPositiveDefiniteError("covariance has negative eigenvalues")
        chol = _lower_factor(s) if self.chol is None else np.asarray(self.chol, complex)
        object.__setattr__(self, "sigma", s)
        object.__setattr__(self, "chol", chol)

    @property
    def c(self) -> int:
        return self.sigma.shape[0]

    def inverse_sqrt(self) -> np.ndarray:
        """Hermitian ``sigma^{-1/2}``; raises when (numerically) singular."""
        vals, vecs = np.linalg.eigh(self.sigma)
        if vals.max() <= 0 or vals.min() <= SINGULAR_RTOL * vals.max():
            raise NotPositiveDefiniteError("covariance is singular")
        return (vecs / np.sqrt(vals)) @ vecs.conj().T

    def inverse(self) -> np.ndarray:
        isq = self.inverse_sqrt()
        return isq @ isq

    def scaled(self, factor: float) -> "CoilCovariance":
        return CoilCovariance(self.sigma * factor)


@dataclass(frozen=True)
class CovGenParams:
    sigma_diag: float = 0.15
    sigma_jitter: float = 0.02
    sigma_corr: float = 0.3
    seed: int = 0

    def __post_init__(self):
        vals = (self.sigma_diag, self.sigma_jitter, self.sigma_corr)
        if not all(np.isfinite(v) for v in vals):
            raise ConfigurationError("covariance parameters must be finite")
        if self.sigma_diag < 0 or self.sigma_jitter < 0 or self.sigma_corr < 0:
            raise ConfigurationError("covariance parameters must be nonnegative")


@dataclass(frozen=True)
class NoiseLevelMap:
    """Per-pixel standard deviation of a coil-combined image."""

    sigma: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=np.float64)
        if s.ndim != 2:
            raise DimensionError(f"noise-level map must be 2D, got {s.shape}")
        if not np.all(np.isfinite(s)) or s.min() < 0:
            raise ConfigurationError("noise-level map must be finite and nonnegative")
        object.__setattr__(self, "sigma", s)

    def __array__(self, dtype=None, copy=None):
        return self.sigma if dtype is None else self.sigma.astype(dtype)

    def scaled(self, factor: float) -> "NoiseLevelMap":
        return NoiseLevelMap(self.sigma * factor)


@dataclass(frozen=True)
class WhiteningTransform:
    w: np.ndarray
    scale: float
    compensation_z: np.ndarray


def synthesize_covariance(p: CovGenParams, c: int, rng=None) -> CoilCovariance:
    """Random covariance ``L L^H`` with ``L_ii ~ N(diag, jitter^2)``, ``L_ij ~ U(-corr/C, corr/C)``."""
    if c < 1:
        raise ConfigurationError("coil count must be >= 1")
    rng = as_rng(p.seed if rng is None else rng)
    bound = p.sigma_corr / c
    lmat = rng.uniform(-bound, bound, (c, c)) if bound > 0 else np.zeros((c, c))
    lmat[np.diag_indices(c)] = rng.normal(p.sigma_diag, p.sigma_jitter, c) if p.sigma_jitter > 0 \
        else p.sigma_diag
    return CoilCovariance(lmat @ lmat.T)


def expected_mean_diagonal(p: CovGenParams, c: int) -> float:
    """``E[Sigma_ii]`` under :func:`synthesize_covariance`."""
    return p.sigma_diag**2 + p.sigma_jitter**2 + (c - 1) * (p.sigma_corr / c) ** 2 / 3


def draw_noise_array(cov: CoilCovariance, shape: tuple[int, ...], rng) -> np.ndarray:
    """Noise of ``shape`` (coil axis third from last) with pixelwise covariance ``sigma``."""
    b = complex_normal(rng, shape)
    return apply_pixelwise_array(cov.chol, b)


def draw_noise(cov: CoilCovariance, n1: int, n2: int, rng=None, domain: str = KSPACE) -> ComplexLattice:
    return ComplexLattice(draw_noise_array(cov, (cov.c, n1, n2), as_rng(rng)), domain)


def sample_covariance(samples: np.ndarray) -> np.ndarray:
    """``1/(N-1) sum_n xi[n] xi[n]^H`` from ``(C, ...)`` samples, no mean removal."""
    flat = samples.reshape(samples.shape[0], -1)
    n = flat.shape[1]
    if n < 2:
        raise InsufficientSamplesError("need at least two noise samples")
    return flat @ flat.conj().T / (n - 1)


def estimate_cov_noise_scan(noise: ComplexLattice) -> CoilCovariance:
    est = sample_covariance(noise.data)
    return CoilCovariance((est + est.conj().T) / 2)


def haar_hh_kernel() -> np.ndarray:
    """Orthonormal 2x2 Haar high-high filter embedded in a 3x3 stencil."""
    k = np.zeros((3, 3))
    k[1:, 1:] = [[0.5, -0.5], [-0.5, 0.5]]
    return k


def estimate_cov_wavelet(noisy: ComplexLattice) -> CoilCovariance:
    """Pseudo noise scan from the Haar HH band of each coil image."""
    noisy.require(IMAGE)
    return estimate_cov_noise_scan(conv2_circular(noisy, haar_hh_kernel()))


def whitening_transform(cov: CoilCovariance, k: ComplexLattice, s) -> WhiteningTransform:
    """``W = scale * sigma^{-1/2}`` with the scale keeping the k-space peak magnitude."""
    isq = cov.inverse_sqrt()
    peak = np.abs(k.data).max()
    white_peak = np.abs(apply_pixelwise_array(isq, k.data)).max()
    scale = float(peak / white_peak) if white_peak > 0 else 1.0
    maps = _maps_array(s)
    quad = np.real(np.einsum("cxy,cd,dxy->xy", maps.conj(), isq @ isq, maps))
    z = scale * np.sqrt(np.clip(quad, 0, None))
    return WhiteningTransform(scale * isq, scale, z)


def _quadratic(vecs: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    return np.real(np.einsum("cxy,cd,dxy->xy", vecs.conj(), sigma, vecs))


def grappa_effective_maps(s, lam: ImageDomainGrappa) -> np.ndarray:
    """``Lambda_n^H s[n]``: the coil weights seen by the acquired noise."""
    return np.einsum("ocxy,oxy->cxy", lam.matrices.conj(), _maps_array(s))


def noise_level_fully_sampled(s, cov: CoilCovariance) -> NoiseLevelMap:
    return NoiseLevelMap(np.sqrt(np.clip(_quadratic(_maps_array(s), cov.sigma), 0, None)))


def noise_level_grappa(s, cov: CoilCovariance, lam: ImageDomainGrappa, a: int) -> NoiseLevelMap:
    if a < 1:
        raise ConfigurationError("acceleration must be >= 1")
    v = grappa_effective_maps(s, lam)
    return NoiseLevelMap(np.sqrt(np.clip(_quadratic(v, cov.sigma) / a, 0, None)))


def noise_level_grappa_acs(s, cov: CoilCovariance, lam: ImageDomainGrappa, a: int, p: float) -> NoiseLevelMap:
    if not 0 <= p < 1:
        raise ConfigurationError(f"ACS fraction must lie in [0, 1), got {p}")
    if a < 1:
        raise ConfigurationError("acceleration must be >= 1")
    v = grappa_effective_maps(s, lam)
    var = (1 - p) / a * _quadratic(v, cov.sigma) + p * _quadratic(_maps_array(s), cov.sigma)
    return NoiseLevelMap(np.sqrt(np.clip(var, 0, None)))


def empirical_noise_level(stack: RepetitionStack | np.ndarray, mean: ComplexLattice | np.ndarray) -> NoiseLevelMap:
    """Pixelwise sample standard deviation over repetitions about a known mean."""
    reps = stack.as_array() if isinstance(stack, RepetitionStack) else np.asarray(stack)
    mu = mean.data if isinstance(mean, ComplexLattice) else np.asarray(mean)
    if reps.ndim == 4:
        reps = reps[:, 0]
    if mu.ndim == 3:
        mu = mu[0]
    r = reps.shape[0]
    if r < 2:
        raise InsufficientSamplesError("need at least two repetitions")
    return NoiseLevelMap(np.sqrt(np.sum(np.abs(reps - mu) ** 2, axis=0) / (r - 1)))


def relative_rms(estimate, reference, mask: np.ndarray | None = None) -> float:
    """``||est - ref|| / ||ref||`` over ``mask``."""
    e, r = np.asarray(estimate, float), np.asarray(reference, float)
    if mask is not None:
        e, r = e[mask], r[mask]
    return float(np.linalg.norm(e - r) / np.linalg.norm(r))


@dataclass(frozen=True)
class LinearPipeline:
    """A linear map from full-grid multicoil k-space noise to a combined image.

    ``forward`` takes ``(..., C, n1, n2)`` and returns ``(..., n1, n2)``;
    ``adjoint`` goes the other way.
    """

    forward: Callable[[np.ndarray], np.ndarray]
    adjoint: Callable[[np.ndarray], np.ndarray]
    coils: int
    grid: tuple[int, int]


def check_linear(pipe: LinearPipeline, rng=0, rtol: float = 1e-9) -> None:
    """Superposition and adjoint dot-product tests; raise if either fails."""
    rng = as_rng(rng)
    shape = (2, pipe.coils) + pipe.grid
    a, b = complex_normal(rng, shape)
    alpha, beta = 0.7 - 0.3j, -1.2 + 0.5j
    lhs = pipe.forward(alpha * a + beta * b)
    rhs = alpha * pipe.forward(a) + beta * pipe.forward(b)
    scale = np.linalg.norm(rhs) + 1e-300
    if not np.all(np.isfinite(lhs)) or np.linalg.norm(lhs - rhs) > rtol * scale:
        raise UnsupportedOperationError("reconstruction pipeline is not linear")
    y = complex_normal(rng, pipe.grid)
    dot1 = np.vdot(y, pipe.forward(a))
    dot2 = np.vdot(pipe.adjoint(y), a)
    if abs(dot1 - dot2) > rtol * max(abs(dot1), 1e-300) * 10:
        raise UnsupportedOperationError("pipeline adjoint is inconsistent with its forward map")


def covariance_probe(recon: LinearPipeline, cov: CoilCovariance, row_index: int) -> np.ndarray:
    """Exact covariance between all pixels of one image row.

    Columns of the identity at ``(row_index, j)`` are pushed through
    ``T (I_N (x) Sigma) T^H``; entry ``[i, j]`` is ``Cov(y[row, i], y[row, j])``.
    """
    check_linear(recon)
    n1, n2 = recon.grid
    if not 0 <= row_index < n1:
        raise DimensionError(f"row {row_index} outside 0..{n1 - 1}")
    probes = np.zeros((n2, n1, n2), complex)
    probes[np.arange(n2), row_index, np.arange(n2)] = 1.0
    back = recon.adjoint(probes)
    cols = recon.forward(apply_pixelwise_array(cov.sigma, back))
    return cols[:, row_index, :].T


def row_offset_profile(cov_row: np.ndarray) -> np.ndarray:
    """``profile[d] = max_i |C[i, (i + d) mod N2]|`` for a probed row covariance."""
    n = cov_row.shape[0]
    i = np.arange(n)
    return np.array([np.abs(cov_row[i, (i + d) % n]).max() for d in range(n)])


def correlated_offsets(cov_row: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Circular column offsets ``0 < d <= N2/2`` whose correlation exceeds ``rtol * max diag``."""
    prof = row_offset_profile(cov_row)
    n = len(prof)
    folded = np.maximum(prof[: n // 2 + 1], np.r_[prof[0], prof[:0:-1]][: n // 2 + 1])
    return np.nonzero(folded[1:] > rtol * prof[0])[0] + 1
