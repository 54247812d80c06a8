"""Complex-valued ISTA and the unrolled, noise-adaptive CDLNet denoiser.

Convolutions are circular and evaluated in the Fourier domain. A bank of ``M``
stencils ``w[m]`` (each ``k x k``, centered) maps ``M`` subbands to one image,
``(W z)[n] = sum_m sum_d w[m][d] z[m][n - d]``; its adjoint correlates.

Gradients follow the real/imaginary convention: for a real loss ``L`` and a
complex array ``p`` the gradient is ``dL/dRe(p) + 1j * dL/dIm(p)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft as sfft

from .errors import ConfigurationError, DimensionError, ReconLabError
from .lattice import ComplexLattice, extract_stencil, kernel_transfer

_WORKERS = 1
NORM_GRID = (128, 128)


def set_threads(n: int) -> None:
    """Worker count for the FFTs used by the denoiser."""
    global _WORKERS
    _WORKERS = max(1, int(n))


def _fft2(x):
    return sfft.fft2(x, axes=(-2, -1), workers=_WORKERS)


def _ifft2(x):
    return sfft.ifft2(x, axes=(-2, -1), workers=_WORKERS)


def _shrink(z: np.ndarray, tau) -> np.ndarray:
    mag = np.abs(z)
    inv = np.divide(1.0, mag, out=np.zeros_like(mag), where=mag > tau)
    gain = 1.0 - tau * inv
    gain[inv == 0] = 0.0
    return z * gain


def soft_threshold(z: np.ndarray, tau) -> np.ndarray:
    """Complex soft-thresholding: shrink magnitudes by ``tau``, keep phases."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ConfigurationError("thresholds must be nonnegative")
    return _shrink(np.asarray(z), tau)


def soft_threshold_backward(u: np.ndarray, tau: np.ndarray, grad_out: np.ndarray):
    """Gradients w.r.t. the input and the threshold; zero on ``|u| <= tau``.

    With ``r = |u|`` and ``gain = 1 - tau / r`` on the active set:
    ``grad_u = gain * g + tau * u * Re(g conj(u)) / r^3``, ``grad_tau = -Re(g conj(u)) / r``.
    """
    mag = np.abs(u)
    inv = np.divide(1.0, mag, out=np.zeros_like(mag), where=mag > tau)
    radial = (grad_out.real * u.real + grad_out.imag * u.imag) * inv
    gain = 1.0 - tau * inv
    gain[inv == 0] = 0.0
    grad_u = gain * grad_out + (tau * inv * inv * radial) * u
    return grad_u, -radial


def bank_transfer(bank: np.ndarray, n1: int, n2: int) -> np.ndarray:
    return kernel_transfer(bank, n1, n2)


def synthesis_norm_sq(bank: np.ndarray, grid: tuple[int, int] = NORM_GRID) -> float:
    """Exact ``||W||^2`` of an ``M -> 1`` circular convolution on ``grid``."""
    t = bank_transfer(bank, *grid)
    return float(np.max(np.sum(np.abs(t) ** 2, axis=0)))


def power_iteration_norm(bank: np.ndarray, grid: tuple[int, int] = NORM_GRID, iters: int = 50,
                         seed: int = 0) -> float:
    """Operator norm ``||W||`` of an ``M -> 1`` convolution by power iteration on ``W^H W``."""
    t = bank_transfer(bank, *grid)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((bank.shape[0],) + grid) + 1j * rng.standard_normal((bank.shape[0],) + grid)
    est = 0.0
    for _ in range(iters):
        z /= np.linalg.norm(z)
        zf = _fft2(z)
        xf = np.sum(t * zf, axis=0)
        est = np.linalg.norm(xf) / np.sqrt(np.prod(grid))
        z = _ifft2(np.conj(t) * xf[None])
    return float(est)


# ---------------------------------------------------------------------------
# classical ISTA


@dataclass(frozen=True)
class IstaConfig:
    lam: float
    eta: float
    iters: int
    dictionary: np.ndarray
    grid: tuple[int, int] = NORM_GRID

    def __post_init__(self):
        d = np.asarray(self.dictionary, dtype=np.complex128)
        if d.ndim == 2:
            d = d[None]
        object.__setattr__(self, "dictionary", d)
        if self.lam < 0 or self.eta <= 0 or self.iters < 1:
            raise ConfigurationError("ISTA needs lam >= 0, eta > 0, iters >= 1")
        lip = synthesis_norm_sq(d, self.grid)
        if self.eta > (1.0 + 1e-12) / lip:
            raise ConfigurationError(f"step {self.eta} exceeds 1/||D||^2 = {1 / lip}")


def ista_objective(y: np.ndarray, z: np.ndarray, d_hat: np.ndarray, lam: float) -> float:
    x = _ifft2(np.sum(d_hat * _fft2(z), axis=0))
    return float(lam * np.abs(z).sum() + 0.5 * np.linalg.norm(y - x) ** 2)


def ista_denoise(y, cfg: IstaConfig):
    """Run ISTA from ``z = 0``; return ``(D z, z, objective per iteration)``."""
    y = y.data[0] if isinstance(y, ComplexLattice) else np.asarray(y, complex)
    n1, n2 = y.shape
    d_hat = bank_transfer(cfg.dictionary, n1, n2)
    yf = _fft2(y)
    z = np.zeros((cfg.dictionary.shape[0], n1, n2), complex)
    trace = []
    for _ in range(cfg.iters):
        rf = np.sum(d_hat * _fft2(z), axis=0) - yf
        z = soft_threshold(z - cfg.eta * _ifft2(np.conj(d_hat) * rf[None]), cfg.eta * cfg.lam)
        trace.append(ista_objective(y, z, d_hat, cfg.lam))
    x = _ifft2(np.sum(d_hat * _fft2(z), axis=0))
    return x, z, np.array(trace)


# ---------------------------------------------------------------------------
# CDLNet

PARAM_NAMES = ("d", "a", "b", "tau0", "tau1")


@dataclass
class CdlnetParams:
    """``d: (M, k, k)``, ``a, b: (K, M, k, k)``, ``tau0, tau1: (K, M)``."""

    d: np.ndarray
    a: np.ndarray
    b: np.ndarray
    tau0: np.ndarray
    tau1: np.ndarray
    adaptive: bool = True

    def __post_init__(self):
        self.d = np.asarray(self.d, np.complex128)
        self.a = np.asarray(self.a, np.complex128)
        self.b = np.asarray(self.b, np.complex128)
        self.tau0 = np.asarray(self.tau0, np.float64)
        self.tau1 = np.asarray(self.tau1, np.float64)
        k_, m, ks = self.a.shape[:3]
        if k_ < 1 or m < 1:
            raise ConfigurationError("depth and subband count must be positive")
        if self.b.shape != self.a.shape or self.d.shape != (m, ks, ks) or self.a.shape[3] != ks:
            raise DimensionError("inconsistent kernel bank shapes")
        if self.tau0.shape != (k_, m) or self.tau1.shape != (k_, m):
            raise DimensionError("threshold arrays must be (K, M)")
        if np.any(self.tau0 < 0) or np.any(self.tau1 < 0):
            raise ConfigurationError("thresholds must be nonnegative")

    @property
    def depth(self) -> int:
        return self.a.shape[0]

    @property
    def subbands(self) -> int:
        return self.a.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.a.shape[-1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "CdlnetParams":
        return replace(self, **{k: v.copy() for k, v in self.tensors().items()})

    def project(self) -> None:
        """Clamp thresholds to the feasible set in place."""
        np.clip(self.tau0, 0, None, out=self.tau0)
        np.clip(self.tau1, 0, None, out=self.tau1)


def init_params(depth: int = 6, subbands: int = 32, kernel_size: int = 7, seed: int = 0,
                adaptive: bool = True, tau0: float = 1e-2, tau1: float = 0.1) -> CdlnetParams:
    """Random complex banks scaled to unit operator norm; ``A = B``, ``D = B^(K-1)``."""
    if depth < 1 or subbands < 1 or kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigurationError("depth, subbands must be positive and kernel size odd")
    rng = np.random.default_rng(seed)
    shape = (depth, subbands, kernel_size, kernel_size)
    b = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)
    for k in range(depth):
        b[k] /= np.sqrt(synthesis_norm_sq(b[k]))
    return CdlnetParams(
        d=b[-1].copy(), a=b.copy(), b=b,
        tau0=np.full((depth, subbands), tau0), tau1=np.full((depth, subbands), tau1),
        adaptive=adaptive,
    )


@dataclass
class CdlnetCache:
    """Everything the backward pass needs from one forward call."""

    params: CdlnetParams
    y_hat: np.ndarray
    sigma: np.ndarray | None
    u: list = field(default_factory=list)
    tau: list = field(default_factory=list)
    z_hat: list = field(default_factory=list)
    r_hat: list = field(default_factory=list)
    z_final_hat: np.ndarray | None = None
    transfers: tuple = ()
    squeeze: bool = False


def _as_batch(y, sigma):
    squeeze = False
    if isinstance(y, ComplexLattice):
        if y.c != 1:
            raise DimensionError("the denoiser takes single-coil images")
        y = y.data
        squeeze = False
    y = np.asarray(y, np.complex128)
    if y.ndim == 2:
        y, squeeze = y[None], True
    if sigma is not None:
        sigma = np.asarray(sigma, np.float64)
        sigma = np.broadcast_to(sigma, y.shape) if sigma.ndim == 2 else sigma
        if sigma.shape != y.shape:
            raise DimensionError(f"noise map {sigma.shape} does not match input {y.shape}")
    return y, sigma, squeeze


def cdlnet_forward(y, sigma, p: CdlnetParams, thresholds=None):
    """Unrolled forward pass ``x = D z^(K)``; returns ``(x, cache)``.

    Thresholds are ``tau0[k, m] + sigma[n] * tau1[k, m]``; with ``sigma=None`` only
    ``tau0`` is used. ``thresholds`` (``(K, ..., M, n1, n2)``-broadcastable,
    indexed by iteration first) overrides both.
    """
    y, sigma, squeeze = _as_batch(y, sigma)
    bsz, n1, n2 = y.shape
    a_hat = bank_transfer(p.a, n1, n2)
    b_hat = bank_transfer(p.b, n1, n2)
    d_hat = bank_transfer(p.d, n1, n2)
    y_hat = _fft2(y)[:, None]
    cache = CdlnetCache(p, y_hat, sigma, transfers=(a_hat, b_hat, d_hat), squeeze=squeeze)
    z = None
    for k in range(p.depth):
        if z is None:
            r_hat = -y_hat
            u = -_ifft2(np.conj(a_hat[k]) * r_hat)
            cache.z_hat.append(None)
        else:
            z_hat = _fft2(z)
            r_hat = np.sum(b_hat[k] * z_hat, axis=1, keepdims=True) - y_hat
            u = z - _ifft2(np.conj(a_hat[k]) * r_hat)
            cache.z_hat.append(z_hat)
        if thresholds is not None:
            tau = np.broadcast_to(np.asarray(thresholds[k], float), u.shape)
        elif sigma is None:
            tau = np.broadcast_to(p.tau0[k][None, :, None, None], u.shape)
        else:
            tau = p.tau0[k][None, :, None, None] + sigma[:, None] * p.tau1[k][None, :, None, None]
        z = _shrink(u, tau)
        cache.u.append(u)
        cache.tau.append(tau)
        cache.r_hat.append(r_hat)
    cache.z_final_hat = _fft2(z)
    x = _ifft2(np.sum(d_hat * cache.z_final_hat, axis=1))
    return (x[0] if squeeze else x), cache


def _stencil_grad(big_hat: np.ndarray, small_hat: np.ndarray, ks: int) -> np.ndarray:
    """``sum_batch ifft2(big * conj(small))`` cut to a ``ks x ks`` centered stencil."""
    full = _ifft2(np.sum(big_hat * np.conj(small_hat), axis=0))
    return extract_stencil(full, ks, ks)


def cdlnet_backward(cache: CdlnetCache, grad_x: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a real loss w.r.t. every parameter tensor."""
    p = cache.params
    grad_x = np.asarray(grad_x, np.complex128)
    if cache.squeeze and grad_x.ndim == 2:
        grad_x = grad_x[None]
    if grad_x.shape[-2:] != cache.y_hat.shape[-2:] or len(cache.u) != p.depth:
        raise ReconLabError("gradient does not match the cached forward pass")
    ks = p.kernel_size
    a_hat, b_hat, d_hat = cache.transfers
    grads = {
        "a": np.zeros_like(p.a), "b": np.zeros_like(p.b), "d": np.zeros_like(p.d),
        "tau0": np.zeros_like(p.tau0), "tau1": np.zeros_like(p.tau1),
    }
    gx_hat = _fft2(grad_x)[:, None]
    grads["d"] = _stencil_grad(gx_hat, cache.z_final_hat, ks)
    gz = _ifft2(np.conj(d_hat) * gx_hat)
    for k in reversed(range(p.depth)):
        gu, gtau = soft_threshold_backward(cache.u[k], cache.tau[k], gz)
        grads["tau0"][k] = gtau.sum(axis=(0, 2, 3))
        if cache.sigma is not None:
            grads["tau1"][k] = np.einsum("bmxy,bxy->m", gtau, cache.sigma)
        gv_hat = -_fft2(gu)
        r_hat = cache.r_hat[k]
        grads["a"][k] = _stencil_grad(r_hat, gv_hat, ks)
        gr_hat = np.sum(a_hat[k] * gv_hat, axis=1, keepdims=True)
        if k == 0:
            break
        grads["b"][k] = _stencil_grad(gr_hat, cache.z_hat[k], ks)
        gz = gu + _ifft2(np.conj(b_hat[k]) * gr_hat)
    if not p.adaptive:
        grads["tau1"][:] = 0
    return grads


def cdlnet_apply(y, sigma, p: CdlnetParams) -> np.ndarray:
    """Forward pass without keeping intermediates around."""
    return cdlnet_forward(y, sigma, p)[0]
