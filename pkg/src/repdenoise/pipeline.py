"""End-to-end linear reconstruction paths: k-space -> coil-combined image.

Each builder returns a :class:`~repdenoise.noise.LinearPipeline` with an exact
adjoint so that :func:`~repdenoise.noise.covariance_probe` can evaluate the
image-domain noise covariance of any path.
"""
from __future__ import annotations

import numpy as np

from .coils import SensitivityMaps, _maps_array, combine_array
from .errors import DimensionError, InsufficientSamplesError
from .grappa import DEFAULT_REG, GrappaKernel, GrappaOperator, grappa_calibrate, grappa_image_operator
from .lattice import IMAGE, KSPACE, ComplexLattice, apply_pixelwise_array, dft2_array
from .noise import (
    CoilCovariance,
    LinearPipeline,
    NoiseLevelMap,
    as_rng,
    draw_noise_array,
    noise_level_fully_sampled,
    noise_level_grappa,
    noise_level_grappa_acs,
    whitening_transform,
)
from .sampling import SamplingScheme


def _safe_divide(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """Elementwise ``num / den`` with ``0 / 0 == 0``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den != 0, num / np.where(den != 0, den, 1), 0)


def combine_pipeline(weights: np.ndarray, pre: np.ndarray | None = None,
                     grappa: GrappaOperator | None = None,
                     line_mask: np.ndarray | None = None) -> LinearPipeline:
    """``y = weights^H F^H G^H M pre xi`` with optional pieces left out."""
    c, n1, n2 = weights.shape

    def forward(xi):
        k = xi if pre is None else apply_pixelwise_array(pre, xi)
        if line_mask is not None:
            k = k * line_mask
        if grappa is not None:
            k = grappa.forward(k)
        return combine_array(dft2_array(k, inverse=True), weights)

    def adjoint(y):
        k = dft2_array(weights * np.asarray(y)[..., None, :, :])
        if grappa is not None:
            k = grappa.adjoint(k)
        if line_mask is not None:
            k = k * line_mask
        return k if pre is None else apply_pixelwise_array(np.conj(pre).T, k)

    return LinearPipeline(forward, adjoint, c, (n1, n2))


def fully_sampled_pipeline(s) -> LinearPipeline:
    return combine_pipeline(_maps_array(s))


def grappa_pipeline(s, kernel: GrappaKernel, scheme: SamplingScheme, include_acs: bool = False) -> LinearPipeline:
    maps = _maps_array(s)
    c, n1, n2 = maps.shape
    op = GrappaOperator(kernel, scheme, n1, n2, c, include_acs)
    mask = scheme.line_mask("omega" if include_acs else "xi")
    return combine_pipeline(maps, grappa=op, line_mask=mask)


def whitened_weights(s, w: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Combination weights ``W s[n] / Z[n]^2`` (zero where ``Z`` is zero)."""
    ws = apply_pixelwise_array(w, _maps_array(s))
    return _safe_divide(ws, (z**2)[None])


def whitened_pipeline(s, cov: CoilCovariance, k: ComplexLattice,
                      kernel: GrappaKernel | None = None, scheme: SamplingScheme | None = None,
                      include_acs: bool = False) -> LinearPipeline:
    wt = whitening_transform(cov, k, s)
    weights = whitened_weights(s, wt.w, wt.compensation_z)
    if kernel is None or scheme is None or scheme.acceleration == 1:
        return combine_pipeline(weights, pre=wt.w)
    c, n1, n2 = weights.shape
    op = GrappaOperator(kernel, scheme, n1, n2, c, include_acs)
    mask = scheme.line_mask("omega" if include_acs else "xi")
    return combine_pipeline(weights, pre=wt.w, grappa=op, line_mask=mask)


def noise_level_map(s, cov: CoilCovariance, scheme: SamplingScheme | None = None,
                    kernel: GrappaKernel | None = None, include_acs: bool = False) -> NoiseLevelMap:
    """Dispatch to the fully sampled, GRAPPA or GRAPPA+ACS noise-level formula."""
    if scheme is None or scheme.acceleration == 1:
        return noise_level_fully_sampled(s, cov)
    maps = _maps_array(s)
    lam = grappa_image_operator(kernel, scheme, maps.shape[1], maps.shape[2], maps.shape[0])
    if include_acs and scheme.acs_lines:
        return noise_level_grappa_acs(maps, cov, lam, scheme.acceleration, scheme.p)
    return noise_level_grappa(maps, cov, lam, scheme.acceleration)


def reconstruct_array(k: np.ndarray, s, scheme: SamplingScheme | None = None,
                      kernel: GrappaKernel | None = None, include_acs: bool = False) -> np.ndarray:
    """Coil-combined images from ``(..., C, n1, n2)`` k-space (batched)."""
    maps = _maps_array(s)
    if k.shape[-3:] != maps.shape:
        raise DimensionError(f"k-space {k.shape} does not match maps {maps.shape}")
    if scheme is not None and scheme.acceleration > 1:
        mask = scheme.line_mask("omega" if include_acs else "xi")
        op = GrappaOperator(kernel, scheme, maps.shape[1], maps.shape[2], maps.shape[0], include_acs)
        k = op.forward(k * mask)
    return combine_array(dft2_array(k, inverse=True), maps)


def reconstruct(k: ComplexLattice, s: SensitivityMaps, scheme: SamplingScheme | None = None,
                kernel: GrappaKernel | None = None, include_acs: bool = False) -> ComplexLattice:
    k.require(KSPACE)
    return ComplexLattice(reconstruct_array(k.data, s, scheme, kernel, include_acs)[None], IMAGE)


def whitened_reconstruct(k: ComplexLattice, cov: CoilCovariance, s: SensitivityMaps,
                         scheme: SamplingScheme | None = None, include_acs: bool = True,
                         reg: float = DEFAULT_REG) -> tuple[ComplexLattice, NoiseLevelMap]:
    """Whiten, (GRAPPA-)reconstruct, combine and compensate; return image and its noise map.

    The combined image is ``Z^{-1} R^H F^H k'`` with ``R = Z^{-1} W S``, i.e. the
    sensitivity-compensated prewhitened combination. In the whitened domain the
    coil noise covariance is ``scale^2 I``.
    """
    k.require(KSPACE)
    maps = _maps_array(s)
    wt = whitening_transform(cov, k, maps)
    kw = apply_pixelwise_array(wt.w, k.data)
    weights = whitened_weights(maps, wt.w, wt.compensation_z)
    white_cov = CoilCovariance(wt.scale**2 * np.eye(cov.c))
    if scheme is None or scheme.acceleration == 1:
        image = combine_array(dft2_array(kw, inverse=True), weights)
        sigma = NoiseLevelMap(np.real(_safe_divide(np.full(maps.shape[1:], wt.scale, complex),
                                                   wt.compensation_z.astype(complex))))
        return ComplexLattice(image[None], IMAGE), sigma
    acs = ComplexLattice(kw, KSPACE)
    kernel = grappa_calibrate(acs, scheme, reg)
    image = reconstruct_array(kw, weights, scheme, kernel, include_acs)
    sigma = noise_level_map(weights, white_cov, scheme, kernel, include_acs)
    return ComplexLattice(image[None], IMAGE), sigma


def monte_carlo_noise_map(s, cov: CoilCovariance, scheme: SamplingScheme | None = None,
                          kernel: GrappaKernel | None = None, include_acs: bool = False,
                          trials: int = 2000, rng=0, chunk: int = 100) -> NoiseLevelMap:
    """Pixelwise std of ``trials`` reconstructions of pure k-space noise (zero mean)."""
    if trials < 2:
        raise InsufficientSamplesError("need at least two trials")
    maps = _maps_array(s)
    rng = as_rng(rng)
    acc = np.zeros(maps.shape[1:])
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        k = draw_noise_array(cov, (n,) + maps.shape, rng)
        acc += np.sum(np.abs(reconstruct_array(k, maps, scheme, kernel, include_acs)) ** 2, axis=0)
        done += n
    return NoiseLevelMap(np.sqrt(acc / trials))
