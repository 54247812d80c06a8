"""Losses (supervised MSE, MC-SURE, Rep2Rep), patch sampling, Adam and the training loop.

All losses are sums over pixels (and batch) of squared complex moduli. Gradients
with respect to denoiser outputs follow the ``dL/dRe + 1j * dL/dIm`` convention
used by :func:`repdenoise.cdlnet.cdlnet_backward`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cdlnet import CdlnetParams, cdlnet_backward, cdlnet_forward, init_params
from .errors import ConfigurationError, DimensionError
from .noise import as_rng, complex_normal

SUPERVISED = "mse"
MC_SURE = "mc_sure"
REP2REP = "rep2rep"


@dataclass(frozen=True)
class LossKind:
    name: str
    h: float = 1e-3
    probes: int = 1

    def __post_init__(self):
        if self.name not in (SUPERVISED, MC_SURE, REP2REP):
            raise ConfigurationError(f"unknown loss {self.name!r}")
        if self.h <= 0 or self.probes < 1:
            raise ConfigurationError("MC-SURE needs h > 0 and at least one probe")

    @classmethod
    def supervised(cls) -> "LossKind":
        return cls(SUPERVISED)

    @classmethod
    def mc_sure(cls, h: float = 1e-3, probes: int = 1) -> "LossKind":
        return cls(MC_SURE, h, probes)

    @classmethod
    def rep2rep(cls) -> "LossKind":
        return cls(REP2REP)

    @property
    def needs_target(self) -> bool:
        return self.name != MC_SURE


@dataclass(frozen=True)
class TrainConfig:
    patch: int = 128
    batch: int = 8
    steps: int = 1000
    lr: float = 5e-4
    seed: int = 0
    loss: LossKind = field(default_factory=LossKind.rep2rep)
    adaptive: bool = True
    depth: int = 6
    subbands: int = 32
    kernel_size: int = 7

    def __post_init__(self):
        if self.patch < 1 or self.batch < 1 or self.steps < 0 or self.lr <= 0:
            raise ConfigurationError("patch, batch, lr must be positive and steps nonnegative")


@dataclass
class DatasetEntry:
    """One slice: ``reps (R, n1, n2)`` noisy repetitions, per-repetition ``sigma``,
    optional clean ``target`` and the support mask."""

    reps: np.ndarray
    sigma: np.ndarray
    target: np.ndarray | None = None
    support: np.ndarray | None = None

    def __post_init__(self):
        self.reps = np.asarray(self.reps, np.complex128)
        if self.reps.ndim == 2:
            self.reps = self.reps[None]
        self.sigma = np.asarray(self.sigma, np.float64)
        grid = self.reps.shape[1:]
        if self.sigma.shape != grid:
            raise DimensionError(f"noise map {self.sigma.shape} does not match images {grid}")
        if self.target is not None and np.shape(self.target) != grid:
            raise DimensionError("target does not match images")
        if self.support is None:
            self.support = np.ones(grid, bool)


@dataclass
class TrainingSample:
    input: np.ndarray
    target: np.ndarray | None
    sigma: np.ndarray
    support: np.ndarray
    swapped: bool = False


@dataclass
class LossResult:
    """Loss value plus what is needed to push its gradient into the model."""

    value: float
    output: np.ndarray
    grad_output: np.ndarray
    cache: object = None


def _call(f, y, sigma):
    out = f(y, sigma)
    return out if isinstance(out, tuple) else (out, None)


def loss_mse(xhat: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if np.shape(xhat) != np.shape(target):
        raise DimensionError("prediction and target differ in shape")
    diff = xhat - target
    return float(np.sum(np.abs(diff) ** 2)), 2 * diff


def mc_divergence(f: Callable, y: np.ndarray, sigma, h: float, rng, probes: int = 1000) -> float:
    """Monte-Carlo estimate of ``div_y(sigma^2 * f(y))`` with complex Gaussian probes."""
    if h <= 0:
        raise ConfigurationError("h must be positive")
    rng = as_rng(rng)
    w = np.broadcast_to(np.asarray(sigma, float) ** 2, np.shape(y))
    base = f(y)
    total = 0.0
    for _ in range(probes):
        b = complex_normal(rng, np.shape(y))
        total += np.real(np.vdot(b, w * (f(y + h * b) - base))) / h
    return float(total / probes)


def _check_sigma(sigma, support):
    sigma = np.asarray(sigma, float)
    inside = sigma if support is None else sigma[np.broadcast_to(support, sigma.shape)]
    if np.any(sigma < 0) or np.any(inside <= 0):
        raise ConfigurationError("MC-SURE needs a strictly positive noise map on the support")
    return sigma


def loss_mc_sure(f: Callable, y: np.ndarray, sigma, kind: LossKind, rng, support=None) -> LossResult:
    """``||y - f(y)||^2 - sum sigma^2 + 2 div`` with the probe held fixed.

    ``f(y, sigma)`` may return an array or ``(array, cache)``; it is evaluated
    once on the stacked batch ``[y, y + h b_1, ..., y + h b_P]`` so one backward
    call covers both the residual and the probe branch.
    """
    sigma = _check_sigma(sigma, support)
    rng = as_rng(rng)
    y = np.asarray(y, complex)
    if y.ndim == 2:
        y = y[None]
    sigma = np.broadcast_to(sigma, y.shape)
    bsz, p, h = y.shape[0], kind.probes, kind.h
    probes = complex_normal(rng, (p,) + y.shape)
    stacked = np.concatenate([y] + [y + h * probes[i] for i in range(p)])
    sig_stacked = np.concatenate([sigma] * (p + 1))
    out, cache = _call(f, stacked, sig_stacked)
    f0 = out[:bsz]
    w = sigma**2
    div = sum(np.real(np.vdot(probes[i], w * (out[(i + 1) * bsz:(i + 2) * bsz] - f0))) for i in range(p)) / (h * p)
    value = float(np.sum(np.abs(y - f0) ** 2) - np.sum(w) + 2 * div)
    grad = np.empty_like(out)
    grad[:bsz] = 2 * (f0 - y) - 2 * w * probes.sum(axis=0) / (h * p)
    for i in range(p):
        grad[(i + 1) * bsz:(i + 2) * bsz] = 2 * w * probes[i] / (h * p)
    return LossResult(value, out, grad, cache)


def loss_rep2rep(f: Callable, y1: np.ndarray, sigma, y2: np.ndarray) -> LossResult:
    """``||y2 - f(y1; sigma)||^2``; the gradient flows through ``f`` only."""
    if np.shape(y1) != np.shape(y2):
        raise DimensionError("repetitions differ in shape")
    out, cache = _call(f, y1, sigma)
    value, grad = loss_mse(out, y2)
    return LossResult(value, out, grad, cache)


def loss_supervised(f: Callable, y: np.ndarray, sigma, target: np.ndarray) -> LossResult:
    out, cache = _call(f, y, sigma)
    value, grad = loss_mse(out, target)
    return LossResult(value, out, grad, cache)


# ---------------------------------------------------------------------------
# data


def sample_patch(entry: DatasetEntry, cfg: TrainConfig, rng) -> TrainingSample:
    """Random crop of input, target and noise map with identical geometry.

    Rep2Rep draws an ordered pair of distinct repetitions (roles swapped at
    random); the other losses denoise the repetition mean with ``sigma/sqrt(R)``.
    """
    rng = as_rng(rng)
    r, n1, n2 = entry.reps.shape
    ps = cfg.patch
    if ps > n1 or ps > n2:
        raise ConfigurationError(f"patch {ps} larger than image {n1}x{n2}")
    i0 = int(rng.integers(0, n1 - ps + 1))
    j0 = int(rng.integers(0, n2 - ps + 1))
    win = (slice(i0, i0 + ps), slice(j0, j0 + ps))
    swapped = False
    if cfg.loss.name == REP2REP:
        if r < 2:
            raise ConfigurationError("Rep2Rep needs at least two repetitions per entry")
        a, b = rng.choice(r, size=2, replace=False)
        swapped = bool(a > b)
        inp, tgt, sig = entry.reps[a], entry.reps[b], entry.sigma
    else:
        inp = entry.reps.mean(axis=0)
        sig = entry.sigma / np.sqrt(r)
        tgt = entry.target
        if cfg.loss.name == SUPERVISED and tgt is None:
            raise ConfigurationError("supervised training needs clean targets")
        if cfg.loss.name == MC_SURE:
            tgt = None
    return TrainingSample(
        inp[win].copy(), None if tgt is None else tgt[win].copy(), sig[win].copy(),
        entry.support[win].copy(), swapped,
    )


def sample_batch(dataset: list[DatasetEntry], cfg: TrainConfig, rng) -> list[TrainingSample]:
    rng = as_rng(rng)
    idx = rng.integers(0, len(dataset), size=cfg.batch)
    return [sample_patch(dataset[i], cfg, rng) for i in idx]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict


def _real_view(a: np.ndarray) -> np.ndarray:
    return a.view(np.float64) if np.iscomplexobj(a) else a


def _tensors(params) -> dict:
    return params.tensors() if isinstance(params, CdlnetParams) else params


def adam_init(params) -> AdamState:
    t = _tensors(params)
    return AdamState(0, {k: np.zeros(_real_view(v).shape) for k, v in t.items()},
                     {k: np.zeros(_real_view(v).shape) for k, v in t.items()})


def adam_step(params, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam on the real/imaginary parameterization, in place.

    Thresholds of a :class:`CdlnetParams` are projected to ``>= 0`` afterwards.
    """
    t = _tensors(params)
    state.step += 1
    c1 = 1 - beta1**state.step
    c2 = 1 - beta2**state.step
    for name, p in t.items():
        g = _real_view(np.ascontiguousarray(grads[name]))
        pr = _real_view(p)
        if g.shape != pr.shape or state.m[name].shape != pr.shape:
            raise DimensionError(f"gradient/state shape mismatch for {name}")
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        pr -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    if isinstance(params, CdlnetParams):
        params.project()
    return state


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: CdlnetParams
    history: list
    state: AdamState
    validation: list = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.state.step


def model_closure(params: CdlnetParams):
    """``f(y, sigma) -> (x, cache)`` honoring the model's adaptivity."""

    def f(y, sigma):
        return cdlnet_forward(y, sigma if params.adaptive else None, params)

    return f


def batch_loss(params: CdlnetParams, samples: list[TrainingSample], loss: LossKind, rng) -> tuple[float, dict]:
    """Loss summed over the batch and its parameter gradients."""
    y = np.stack([s.input for s in samples])
    sig = np.stack([s.sigma for s in samples])
    f = model_closure(params)
    if loss.name == MC_SURE:
        sup = np.stack([s.support for s in samples])
        res = loss_mc_sure(f, y, sig, loss, rng, support=sup)
    else:
        tgt = np.stack([s.target for s in samples])
        res = (loss_rep2rep if loss.name == REP2REP else loss_supervised)(f, y, sig, tgt)
    return res.value, cdlnet_backward(res.cache, res.grad_output)


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Per-step stream so resumed runs replay the exact same batches."""
    return np.random.default_rng([seed, step])


def train(dataset: list[DatasetEntry], cfg: TrainConfig, resume: TrainResult | None = None,
          params: CdlnetParams | None = None, validate: Callable | None = None,
          validate_every: int = 0, on_step: Callable | None = None) -> TrainResult:
    """Sample batch, forward, loss, backward, Adam; deterministic for a fixed seed.

    ``resume`` continues a previous run up to ``cfg.steps`` total steps.
    History entries are per-pixel batch losses.
    """
    if not dataset:
        raise ConfigurationError("empty dataset")
    if cfg.loss.name == REP2REP and any(e.reps.shape[0] < 2 for e in dataset):
        raise ConfigurationError("Rep2Rep needs at least two repetitions per entry")
    if cfg.loss.name == SUPERVISED and any(e.target is None for e in dataset):
        raise ConfigurationError("supervised training needs clean targets")
    smallest = min(min(e.reps.shape[1:]) for e in dataset)
    if cfg.patch > smallest:
        raise ConfigurationError(f"patch {cfg.patch} exceeds smallest image dim {smallest}")
    if resume is not None:
        params, state, history = resume.params, resume.state, list(resume.history)
        validation = list(resume.validation)
    else:
        if params is None:
            params = init_params(cfg.depth, cfg.subbands, cfg.kernel_size, cfg.seed, cfg.adaptive)
        state, history, validation = adam_init(params), [], []
    npix = cfg.batch * cfg.patch**2
    while state.step < cfg.steps:
        rng = step_rng(cfg.seed, state.step)
        samples = sample_batch(dataset, cfg, rng)
        value, grads = batch_loss(params, samples, cfg.loss, rng)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {state.step}")
        adam_step(params, grads, state, cfg.lr)
        history.append(value / npix)
        if validate is not None and validate_every and state.step % validate_every == 0:
            validation.append((state.step, validate(params)))
        if on_step is not None:
            on_step(state.step, params, state)
    return TrainResult(params, history, state, validation)
