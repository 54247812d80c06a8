"""Synthetic multicoil acquisitions and the reconstructed datasets used for training.

A *volume* shares one coil covariance and one set of sensitivity maps across
its slices. Each slice yields ``R`` noisy k-space repetitions, which are
reconstructed (fully sampled, GRAPPA, or GRAPPA with ACS) into coil-combined
images labeled with an exact and an estimated per-repetition noise-level map.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coils import SensitivityMaps, make_synthetic_sensitivities
from .errors import ConfigurationError
from .grappa import DEFAULT_REG, GrappaKernel, GrappaOperator, grappa_calibrate
from .lattice import IMAGE, KSPACE, ComplexLattice, dft2_array
from .noise import CoilCovariance, CovGenParams, draw_noise_array, estimate_cov_wavelet, synthesize_covariance
from .phantom import make_phantom
from .pipeline import noise_level_map, reconstruct_array
from .sampling import SamplingScheme
from .training import DatasetEntry

FULL = "full"
GRAPPA = "grappa"
GRAPPA_ACS = "grappa_acs"
MODES = (FULL, GRAPPA, GRAPPA_ACS)


@dataclass(frozen=True)
class AcquisitionSetup:
    n1: int = 96
    n2: int = 96
    coils: int = 4
    reps: int = 2
    cov: CovGenParams = field(default_factory=CovGenParams)
    acceleration: int = 2
    acs_lines: int = 24
    scale_range: tuple[float, float] = (0.6, 1.4)

    def scheme(self, mode: str) -> SamplingScheme:
        if mode == FULL:
            return SamplingScheme.full(self.n2)
        return SamplingScheme(self.acceleration, self.acs_lines, self.n2)


@dataclass
class SimulatedSlice:
    """Ground truth, coil model and ``R`` fully sampled noisy k-space repetitions."""

    gt: np.ndarray
    maps: SensitivityMaps
    cov: CoilCovariance
    kspace: np.ndarray  # (R, C, n1, n2)

    @property
    def support(self) -> np.ndarray:
        return self.maps.support


@dataclass
class ReconSlice:
    """Coil-combined repetitions ``reps (R, n1, n2)`` with their noise-level maps."""

    gt: np.ndarray
    reps: np.ndarray
    sigma_exact: np.ndarray
    sigma_est: np.ndarray
    support: np.ndarray
    mode: str = FULL

    def sigma(self, which: str = "estimated") -> np.ndarray:
        if which not in ("estimated", "exact"):
            raise ConfigurationError(f"unknown noise map {which!r}")
        return self.sigma_est if which == "estimated" else self.sigma_exact

    def entry(self, which: str = "estimated") -> DatasetEntry:
        return DatasetEntry(self.reps, self.sigma(which), self.gt, self.support)


def simulate_slice(gt: np.ndarray, maps: SensitivityMaps, cov: CoilCovariance, reps: int, rng) -> SimulatedSlice:
    """``k_r = F S x + L b_r`` for ``r = 1..R``."""
    clean = dft2_array(maps.s * gt[None])
    noise = draw_noise_array(cov, (reps,) + clean.shape, rng)
    return SimulatedSlice(gt, maps, cov, clean[None] + noise)


def simulate_volumes(setup: AcquisitionSetup, volumes: int, slices: int, seed: int = 0) -> list[SimulatedSlice]:
    """``volumes * slices`` slices; per-slice phantom intensity drawn from ``scale_range``."""
    rng = np.random.default_rng(seed)
    out = []
    for v in range(volumes):
        vseed = int(rng.integers(2**31))
        maps = make_synthetic_sensitivities(setup.n1, setup.n2, setup.coils, vseed)
        cov = synthesize_covariance(setup.cov, setup.coils, np.random.default_rng(vseed + 1))
        for _ in range(slices):
            scale = rng.uniform(*setup.scale_range)
            gt = make_phantom(setup.n1, setup.n2, int(rng.integers(2**31)), scale)
            out.append(simulate_slice(gt, maps, cov, setup.reps, rng))
    return out


def _masked(k: np.ndarray, scheme: SamplingScheme, include_acs: bool) -> np.ndarray:
    return k * scheme.line_mask("omega" if include_acs else "xi")


def calibrate_slice(sl: SimulatedSlice, scheme: SamplingScheme, reg: float = DEFAULT_REG) -> GrappaKernel:
    """GRAPPA weights from the ACS block of the repetition-averaged k-space."""
    acs = ComplexLattice(sl.kspace.mean(axis=0), KSPACE)
    return grappa_calibrate(acs, scheme, reg)


def reconstruct_slice(sl: SimulatedSlice, setup: AcquisitionSetup, mode: str = FULL,
                      reg: float = DEFAULT_REG) -> ReconSlice:
    """Reconstruct every repetition and attach exact and estimated noise maps.

    The estimated map plugs a wavelet (Haar HH) coil-covariance estimate from
    the first repetition's reconstructed coil images into the same analytic
    formula that gives the exact map.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown reconstruction mode {mode!r}")
    scheme = setup.scheme(mode)
    include_acs = mode == GRAPPA_ACS
    if mode == FULL:
        kernel = None
        coil_k = sl.kspace[0]
        reps = reconstruct_array(sl.kspace, sl.maps)
    else:
        kernel = calibrate_slice(sl, scheme, reg)
        k = _masked(sl.kspace, scheme, include_acs)
        reps = reconstruct_array(k, sl.maps, scheme, kernel, include_acs)
        op = GrappaOperator(kernel, scheme, setup.n1, setup.n2, setup.coils, include_acs)
        coil_k = op.forward(k[0])
    cov_est = estimate_cov_wavelet(ComplexLattice(dft2_array(coil_k, inverse=True), IMAGE))
    exact = noise_level_map(sl.maps, sl.cov, scheme, kernel, include_acs).sigma
    est = noise_level_map(sl.maps, cov_est, scheme, kernel, include_acs).sigma
    return ReconSlice(sl.gt, reps, exact, est, sl.support, mode)


def build_dataset(setup: AcquisitionSetup, volumes: int, slices: int, seed: int = 0,
                  modes: tuple[str, ...] = MODES) -> dict[str, list[ReconSlice]]:
    sims = simulate_volumes(setup, volumes, slices, seed)
    return {mode: [reconstruct_slice(s, setup, mode) for s in sims] for mode in modes}


def entries(slices: list[ReconSlice], which: str = "estimated") -> list[DatasetEntry]:
    return [s.entry(which) for s in slices]
