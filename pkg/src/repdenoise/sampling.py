"""Cartesian phase-encode undersampling (columns are phase-encode lines)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError
from .lattice import KSPACE, ComplexLattice


@dataclass(frozen=True)
class SamplingScheme:
    """Uniform ``A``-fold line lattice ``xi`` plus an ACS block ``theta`` around DC.

    k-space is stored unshifted (DC at index 0), so the ACS block wraps around
    the array edge; ``acs_order`` lists its lines in ascending frequency.
    ``omega = xi | theta``. The DC line is always on the uniform lattice.
    """

    acceleration: int
    acs_lines: int
    n2: int
    xi: np.ndarray = field(init=False, repr=False)
    theta: np.ndarray = field(init=False, repr=False)
    acs_order: np.ndarray = field(init=False, repr=False)
    omega: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        a, acs, n2 = int(self.acceleration), int(self.acs_lines), int(self.n2)
        if a < 1:
            raise ConfigurationError(f"acceleration must be >= 1, got {a}")
        if n2 < 1:
            raise ConfigurationError("n2 must be positive")
        if acs < 0 or acs >= n2:
            raise ConfigurationError(f"ACS width {acs} invalid for {n2} lines")
        xi = np.arange(0, n2, a)
        acs_order = (np.arange(acs) - acs // 2) % n2
        object.__setattr__(self, "acceleration", a)
        object.__setattr__(self, "acs_lines", acs)
        object.__setattr__(self, "n2", n2)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "theta", np.sort(acs_order))
        object.__setattr__(self, "acs_order", acs_order)
        object.__setattr__(self, "omega", np.union1d(xi, acs_order))

    @property
    def p(self) -> float:
        """Fraction of phase-encode lines inside the ACS block."""
        return self.acs_lines / self.n2

    def line_mask(self, which: str = "xi") -> np.ndarray:
        idx = {"xi": self.xi, "theta": self.theta, "omega": self.omega}[which]
        mask = np.zeros(self.n2, bool)
        mask[idx] = True
        return mask

    @classmethod
    def full(cls, n2: int) -> "SamplingScheme":
        return cls(1, 0, n2)


def apply_sampling(k: ComplexLattice, scheme: SamplingScheme, include_acs: bool = False) -> ComplexLattice:
    """Zero-fill every phase-encode line outside ``xi`` (or ``omega``)."""
    k.require(KSPACE)
    if k.n2 != scheme.n2:
        raise DimensionError(f"scheme covers {scheme.n2} lines, k-space has {k.n2}")
    mask = scheme.line_mask("omega" if include_acs else "xi")
    return k.replace(k.data * mask)
