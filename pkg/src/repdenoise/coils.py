"""Coil sensitivity maps and sensitivity-weighted coil combination."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .lattice import IMAGE, ComplexLattice


@dataclass(frozen=True)
class SensitivityMaps:
    """Per-pixel unit-norm coil profiles ``s[c, row, col]`` on an elliptical support."""

    s: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.complex128)
        if s.ndim == 2:
            s = s[None]
        support = np.asarray(self.support, dtype=bool)
        if s.ndim != 3 or support.shape != s.shape[1:]:
            raise DimensionError(f"maps {s.shape} and support {support.shape} disagree")
        s = np.where(support[None], s, 0)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "support", support)

    @property
    def c(self) -> int:
        return self.s.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.s.shape[1:]

    def expand(self, x: ComplexLattice | np.ndarray) -> ComplexLattice:
        """``S x``: spread a single-coil image over the coils."""
        arr = x.data[0] if isinstance(x, ComplexLattice) else np.asarray(x)
        return ComplexLattice(self.s * arr[None], IMAGE)


def elliptical_support(n1: int, n2: int) -> np.ndarray:
    """Boolean ellipse inscribed in the ``n1 x n2`` grid."""
    r = (np.arange(n1) - (n1 - 1) / 2) / (n1 / 2)
    c = (np.arange(n2) - (n2 - 1) / 2) / (n2 / 2)
    return r[:, None] ** 2 + c[None, :] ** 2 <= 1.0


def normalize_maps(raw: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Scale each pixel to unit norm and make the first coil real-positive."""
    norm = np.linalg.norm(raw, axis=0)
    phase = np.exp(-1j * np.angle(raw[0]))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(support & (norm > 0), raw * phase / norm, 0)
    return out


def make_synthetic_sensitivities(n1: int, n2: int, c: int, seed: int = 0) -> SensitivityMaps:
    """Smooth complex coil profiles: Gaussian bumps around the border with phase ramps."""
    if c < 1:
        raise ConfigurationError("coil count must be >= 1")
    rng = np.random.default_rng(seed)
    support = elliptical_support(n1, n2)
    rows = (np.arange(n1) - (n1 - 1) / 2) / (n1 / 2)
    cols = (np.arange(n2) - (n2 - 1) / 2) / (n2 / 2)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    angles = 2 * np.pi * (np.arange(c) + rng.uniform(-0.15, 0.15, c)) / c
    raw = np.empty((c, n1, n2), complex)
    for i, ang in enumerate(angles):
        cr, ccol = 1.1 * np.sin(ang), 1.1 * np.cos(ang)
        width = rng.uniform(0.7, 1.0)
        mag = np.exp(-((rr - cr) ** 2 + (cc - ccol) ** 2) / (2 * width**2))
        ramp = rng.uniform(-np.pi / 2, np.pi / 2, 2)
        raw[i] = mag * np.exp(1j * (ramp[0] * rr + ramp[1] * cc + rng.uniform(-np.pi, np.pi)))
    return SensitivityMaps(normalize_maps(raw, support), support)


def _maps_array(s) -> np.ndarray:
    return s.s if isinstance(s, SensitivityMaps) else np.asarray(s)


def combine_array(x: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``s[n]^H x[n]`` over the coil axis (third from last) of ``x``."""
    return np.einsum("cxy,...cxy->...xy", np.conj(s), x)


def coil_combine(x: ComplexLattice, s: SensitivityMaps) -> ComplexLattice:
    """``y = S^H x`` for an image-domain multicoil lattice."""
    x.require(IMAGE)
    maps = _maps_array(s)
    if maps.shape != x.shape:
        raise DimensionError(f"maps {maps.shape} do not match lattice {x.shape}")
    return ComplexLattice(combine_array(x.data, maps)[None], IMAGE)
