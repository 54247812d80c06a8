"""Synthetic complex head-like phantoms used in place of clinical data."""
from __future__ import annotations

import numpy as np
import scipy.ndimage as ndi
from scipy.special import expit

from .coils import elliptical_support


def _soft_ellipse(rr, cc, center, axes, angle, edge):
    ca, sa = np.cos(angle), np.sin(angle)
    dr, dc = rr - center[0], cc - center[1]
    u = (ca * dr + sa * dc) / axes[0]
    v = (-sa * dr + ca * dc) / axes[1]
    dist = np.sqrt(u**2 + v**2)
    return expit((1.0 - dist) / edge)


def make_phantom(n1: int, n2: int, seed: int = 0, scale: float = 1.0) -> np.ndarray:
    """Complex ``n1 x n2`` image: bright rim, tissue compartments, small lesions,
    mild texture and a smooth phase, all inside the inscribed ellipse."""
    rng = np.random.default_rng(seed)
    rr, cc = np.meshgrid(np.linspace(-1, 1, n1), np.linspace(-1, 1, n2), indexing="ij")
    edge = 0.6 / max(n1, n2)
    axes = rng.uniform(0.72, 0.84, 2)
    tilt = rng.uniform(-0.2, 0.2)
    head = _soft_ellipse(rr, cc, (0, 0), axes, tilt, edge)
    brain = _soft_ellipse(rr, cc, (0, 0), axes - 0.08, tilt, edge)
    img = 0.9 * (head - brain) + 0.45 * brain
    for _ in range(rng.integers(4, 7)):
        center = rng.uniform(-0.4, 0.4, 2)
        ax = rng.uniform(0.08, 0.3, 2)
        img += rng.uniform(-0.25, 0.45) * brain * _soft_ellipse(rr, cc, center, ax, rng.uniform(0, np.pi), edge)
    for _ in range(rng.integers(2, 5)):
        center = rng.uniform(-0.45, 0.45, 2)
        r = rng.uniform(0.03, 0.06)
        img += rng.uniform(0.2, 0.5) * brain * _soft_ellipse(rr, cc, center, (r, r), 0.0, edge)
    texture = ndi.gaussian_filter(rng.standard_normal((n1, n2)), 1.5, mode="wrap")
    img = img * (1 + 0.25 * texture / texture.std() * brain)
    bias = 1 + 0.15 * (rng.uniform(-1, 1) * rr + rng.uniform(-1, 1) * cc)
    img = np.clip(img * bias, 0, None)
    phase = rng.uniform(-0.6, 0.6) * rr + rng.uniform(-0.6, 0.6) * cc + rng.uniform(-0.5, 0.5) * (rr**2 + cc**2)
    img = scale * img * np.exp(1j * (phase + rng.uniform(-np.pi, np.pi)))
    return np.where(elliptical_support(n1, n2), img, 0)
