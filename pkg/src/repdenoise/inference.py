"""Repetition-averaging inference strategies and sharpening/dithering post-processing."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .cdlnet import CdlnetParams, cdlnet_apply
from .errors import ConfigurationError, DimensionError
from .lattice import IMAGE, ComplexLattice, RepetitionStack, conv2_circular
from .noise import NoiseLevelMap

DEFAULT_SHARPEN_KERNEL = np.array([[0.0, -1.0, 0.0], [-1.0, 5.0, -1.0], [0.0, -1.0, 0.0]])


class InferenceStrategy(Enum):
    PRE_AVG_ADA = "pre-avg-ada"
    POST_AVG = "post-avg"
    PRE_AVG = "pre-avg"

    @classmethod
    def parse(cls, name) -> "InferenceStrategy":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower().replace("_", "-"))
        except ValueError as exc:
            raise ConfigurationError(f"unknown strategy {name!r}") from exc

    @property
    def adaptive(self) -> bool:
        return self is not InferenceStrategy.PRE_AVG


def _reps_array(stack) -> np.ndarray:
    if isinstance(stack, RepetitionStack):
        arr = stack.as_array()
        if arr.shape[1] != 1:
            raise DimensionError("inference takes coil-combined repetitions")
        return arr[:, 0]
    arr = np.asarray(stack, complex)
    return arr[None] if arr.ndim == 2 else arr


def infer_array(reps: np.ndarray, sigma, model: CdlnetParams, strategy) -> np.ndarray:
    """``reps (R, n1, n2)`` -> denoised ``(n1, n2)`` image."""
    strategy = InferenceStrategy.parse(strategy)
    if strategy.adaptive != model.adaptive:
        kind = "an adaptive" if strategy.adaptive else "a non-adaptive"
        raise ConfigurationError(f"strategy {strategy.value} needs {kind} model")
    r = reps.shape[0]
    if r < 1:
        raise ConfigurationError("need at least one repetition")
    sig = None if sigma is None else np.asarray(sigma, float)
    if sig is not None and sig.shape != reps.shape[1:]:
        raise DimensionError("noise map does not match the repetitions")
    if strategy is InferenceStrategy.PRE_AVG_ADA:
        return cdlnet_apply(reps.mean(axis=0), sig / np.sqrt(r), model)
    if strategy is InferenceStrategy.POST_AVG:
        return np.mean(cdlnet_apply(reps, np.broadcast_to(sig, reps.shape), model), axis=0)
    return cdlnet_apply(reps.mean(axis=0), None, model)


def infer(stack, sigma: NoiseLevelMap | np.ndarray | None, model: CdlnetParams, strategy) -> ComplexLattice:
    """Pre-Avg+Ada ``f(mean; sigma/sqrt(R))``, Post-Avg ``mean_r f(y_r; sigma)``,
    or Pre-Avg ``f(mean)``; returns a single-coil image lattice."""
    sig = sigma.sigma if isinstance(sigma, NoiseLevelMap) else sigma
    if InferenceStrategy.parse(strategy).adaptive and sig is None:
        raise ConfigurationError("adaptive strategies need a noise-level map")
    out = infer_array(_reps_array(stack), sig, model, strategy)
    return ComplexLattice(out[None], IMAGE)


@dataclass(frozen=True)
class PostprocConfig:
    sharpen_a: float = 0.0
    sharpen_kernel: np.ndarray = field(default_factory=lambda: DEFAULT_SHARPEN_KERNEL.copy())
    dither_w: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.sharpen_a <= 1.0:
            raise ConfigurationError(f"sharpening weight {self.sharpen_a} outside [0, 1]")
        if not 0.0 <= self.dither_w < 1.0:
            raise ConfigurationError(f"dithering weight {self.dither_w} outside [0, 1)")
        k = np.asarray(self.sharpen_kernel, float)
        if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
            raise ConfigurationError("sharpening kernel must be a 2D stencil with odd sides")


def _image(x):
    return x.data[0] if isinstance(x, ComplexLattice) else np.asarray(x)


def sharpen(xhat, a: float = 0.2, kernel: np.ndarray | None = None) -> np.ndarray:
    """``(1 - a) x + a (h * x)`` with circular convolution."""
    if not 0.0 <= a <= 1.0:
        raise ConfigurationError(f"sharpening weight {a} outside [0, 1]")
    x = _image(xhat)
    if a == 0:
        return x.copy()
    h = DEFAULT_SHARPEN_KERNEL if kernel is None else np.asarray(kernel, float)
    filtered = conv2_circular(ComplexLattice(np.asarray(x, complex)[None], IMAGE), h).data[0]
    return (1 - a) * x + a * filtered


def dither(x_sharp, y_noisy, w: float = 0.2) -> np.ndarray:
    """``(1 - w) x + w y``: blend the noisy input back in with weight ``w``."""
    if not 0.0 <= w < 1.0:
        raise ConfigurationError(f"dithering weight {w} outside [0, 1)")
    x, y = _image(x_sharp), _image(y_noisy)
    if x.shape != y.shape:
        raise DimensionError("images differ in shape")
    if w == 0:
        return x.copy()
    return (1 - w) * x + w * y


def postprocess(xhat, y_noisy, cfg: PostprocConfig) -> np.ndarray:
    return dither(sharpen(xhat, cfg.sharpen_a, cfg.sharpen_kernel), y_noisy, cfg.dither_w)
