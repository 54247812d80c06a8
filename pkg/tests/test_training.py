import numpy as np
import pytest
import scipy.fft as sfft

from repdenoise.cdlnet import PARAM_NAMES, cdlnet_backward, init_params
from repdenoise.errors import ConfigurationError, DimensionError
from repdenoise.phantom import make_phantom
from repdenoise.training import (
    DatasetEntry,
    LossKind,
    TrainConfig,
    adam_init,
    adam_step,
    batch_loss,
    loss_mc_sure,
    loss_mse,
    loss_rep2rep,
    loss_supervised,
    mc_divergence,
    model_closure,
    sample_batch,
    sample_patch,
    train,
)

from conftest import crandn

BINOMIAL = np.outer([1, 2, 1], [1, 2, 1]) / 16.0


def smoothing_transfer(shape, kernel=BINOMIAL):
    """DFT of a centered stencil wrapped onto the grid (circular convolution)."""
    grid = np.zeros(shape)
    kh, kw = kernel.shape
    for i in range(kh):
        for j in range(kw):
            grid[(i - kh // 2) % shape[0], (j - kw // 2) % shape[1]] = kernel[i, j]
    return sfft.fft2(grid)


def linear_filter(transfer):
    def f(y, sigma=None):
        return sfft.ifft2(transfer * sfft.fft2(y, axes=(-2, -1)), axes=(-2, -1))

    return f


def blend_family(transfer, alpha):
    """``(1 - alpha) y + alpha (g * y)``: one-parameter smoothing strength."""
    smooth = linear_filter(transfer)

    def f(y, sigma=None):
        return (1 - alpha) * y + alpha * smooth(y)

    return f


@pytest.fixture(scope="module")
def stein_case():
    n = 32
    x = make_phantom(n, n, seed=4).astype(complex)
    ii, jj = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing="ij")
    sigma = 0.1 + 0.2 * ii * jj
    return x, sigma, smoothing_transfer((n, n))


def noisy_draws(rng, x, sigma, count):
    return x[None] + sigma[None] * crandn(rng, (count,) + x.shape)


def small_entry(rng, reps=2, n=16, target=True):
    x = crandn(rng, (n, n))
    sigma = 0.1 + 0.05 * rng.random((n, n))
    y = x[None] + sigma[None] * crandn(rng, (reps, n, n))
    return DatasetEntry(y, sigma, x if target else None)


class TestLossMse:
    def test_equal_is_zero(self, rng):
        x = crandn(rng, (8, 8))
        value, grad = loss_mse(x, x)
        assert value == 0 and not np.any(grad)

    def test_constant_offset(self, rng):
        x = crandn(rng, (8, 8))
        c = 0.3 - 0.4j
        value, _ = loss_mse(x + c, x)
        assert value == pytest.approx(64 * abs(c) ** 2, rel=1e-12)

    def test_gradient_finite_difference(self, rng):
        xhat, tgt = crandn(rng, (6, 6)), crandn(rng, (6, 6))
        _, grad = loss_mse(xhat, tgt)
        h = 1e-6
        for _ in range(10):
            v = crandn(rng, xhat.shape)
            fd = (loss_mse(xhat + h * v, tgt)[0] - loss_mse(xhat - h * v, tgt)[0]) / (2 * h)
            an = np.real(np.vdot(v, grad))
            assert abs(fd - an) <= 1e-8 * max(1.0, abs(an))

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            loss_mse(np.zeros((4, 4)), np.zeros((4, 5)))


class TestMcDivergence:
    def test_identity_gives_pixel_count(self, rng):
        y = crandn(rng, (64, 64))
        est = mc_divergence(lambda v: v, y, 1.0, 1e-3, rng, probes=1000)
        assert est == pytest.approx(64 * 64, rel=0.02)

    def test_zero_map_gives_zero(self, rng):
        y = crandn(rng, (16, 16))
        assert mc_divergence(lambda v: np.zeros_like(v), y, 1.0, 1e-3, rng, probes=20) == 0.0

    def test_linear_filter_trace(self, rng):
        n = 64
        transfer = smoothing_transfer((n, n))
        trace = np.real(np.sum(transfer))
        est = mc_divergence(linear_filter(transfer), crandn(rng, (n, n)), 1.0, 1e-3, rng, probes=1000)
        assert est == pytest.approx(trace, rel=0.02)

    def test_sigma_weighting(self, rng):
        # identity with a spatial map: divergence of sigma^2 * y is sum sigma^2
        sig = np.linspace(0.5, 2.0, 256).reshape(16, 16)
        est = mc_divergence(lambda v: v, crandn(rng, (16, 16)), sig, 1e-3, rng, probes=2000)
        assert est == pytest.approx(np.sum(sig**2), rel=0.03)

    def test_bad_h(self, rng):
        with pytest.raises(ConfigurationError):
            mc_divergence(lambda v: v, np.zeros((4, 4)), 1.0, 0.0, rng)


class TestMcSure:
    def test_identity_denoiser(self, rng):
        sig = 0.2 + 0.1 * rng.random((32, 32))
        y = crandn(rng, (32, 32))
        res = loss_mc_sure(lambda v, s: v, y, sig, LossKind.mc_sure(probes=200), rng)
        assert res.value == pytest.approx(np.sum(sig**2), rel=0.03)

    def test_nonpositive_sigma_rejected(self, rng):
        sig = np.full((8, 8), 0.1)
        sig[3, 3] = 0.0
        with pytest.raises(ConfigurationError):
            loss_mc_sure(lambda v, s: v, crandn(rng, (8, 8)), sig, LossKind.mc_sure(), rng)

    def test_zero_sigma_outside_support_allowed(self, rng):
        sig = np.full((8, 8), 0.1)
        sig[0] = 0.0
        support = np.ones((8, 8), bool)
        support[0] = False
        res = loss_mc_sure(lambda v, s: v, crandn(rng, (8, 8)), sig, LossKind.mc_sure(), rng, support=support)
        assert np.isfinite(res.value)

    def test_stein_identity(self, stein_case):
        x, sigma, transfer = stein_case
        f = linear_filter(transfer)
        rng = np.random.default_rng(21)
        sure, mse = 0.0, 0.0
        draws, chunk = 10_000, 1000
        for _ in range(draws // chunk):
            y = noisy_draws(rng, x, sigma, chunk)
            sure += loss_mc_sure(f, y, sigma, LossKind.mc_sure(), rng).value
            mse += np.sum(np.abs(x[None] - f(y)) ** 2)
        assert abs(sure - mse) / mse < 0.02

    def test_misscaled_sigma_shifts_minimizer(self, stein_case):
        x, sigma, transfer = stein_case
        rng = np.random.default_rng(22)
        alphas = np.linspace(0, 1, 50)
        y = noisy_draws(rng, x, sigma, 500)
        probe_seed = 5

        def sweep(scale):
            out = []
            for a in alphas:
                res = loss_mc_sure(blend_family(transfer, a), y, scale * sigma,
                                   LossKind.mc_sure(), np.random.default_rng(probe_seed))
                out.append(res.value)
            return np.array(out)

        mse = np.array([np.sum(np.abs(x[None] - blend_family(transfer, a)(y)) ** 2) for a in alphas])
        exact = int(np.argmin(sweep(1.0)))
        biased = int(np.argmin(sweep(1.3)))
        assert abs(exact - int(np.argmin(mse))) <= 1
        # an overestimated noise level asks for more smoothing
        assert biased > exact + 1


class TestRep2Rep:
    def test_perfect_target(self, rng):
        y1 = crandn(rng, (8, 8))
        res = loss_rep2rep(lambda v, s: 0.5 * v, y1, None, 0.5 * y1)
        assert res.value == 0.0

    def test_gradient_is_prediction_error(self, rng):
        y1, y2 = crandn(rng, (8, 8)), crandn(rng, (8, 8))
        res = loss_rep2rep(lambda v, s: 0.5 * v, y1, None, y2)
        np.testing.assert_allclose(res.grad_output, 2 * (0.5 * y1 - y2))

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            loss_rep2rep(lambda v, s: v, np.zeros((4, 4)), None, np.zeros((4, 5)))

    def test_noise2noise_identity(self, stein_case):
        x, sigma, transfer = stein_case
        f = linear_filter(transfer)
        rng = np.random.default_rng(31)
        r2r, mse = 0.0, 0.0
        draws, chunk = 10_000, 1000
        for _ in range(draws // chunk):
            y1 = noisy_draws(rng, x, sigma, chunk)
            y2 = noisy_draws(rng, x, sigma, chunk)
            r2r += loss_rep2rep(f, y1, sigma, y2).value
            mse += loss_supervised(f, y1, sigma, np.broadcast_to(x, y1.shape)).value
        gap = (r2r - mse) / draws
        assert gap == pytest.approx(np.sum(sigma**2), rel=0.02)

    def test_argmin_matches_supervised(self, stein_case):
        x, sigma, transfer = stein_case
        rng = np.random.default_rng(32)
        alphas = np.linspace(0, 1, 50)
        y1 = noisy_draws(rng, x, sigma, 1000)
        y2 = noisy_draws(rng, x, sigma, 1000)
        tgt = np.broadcast_to(x, y1.shape)
        r2r = [loss_rep2rep(blend_family(transfer, a), y1, sigma, y2).value for a in alphas]
        mse = [loss_supervised(blend_family(transfer, a), y1, sigma, tgt).value for a in alphas]
        assert abs(int(np.argmin(r2r)) - int(np.argmin(mse))) <= 1
        # the sweep must have an interior optimum to be informative
        assert 0 < int(np.argmin(mse)) < len(alphas) - 1


def _active(cache):
    return [np.abs(u) > t for u, t in zip(cache.u, cache.tau)]


@pytest.mark.parametrize("kind", ["mse", "rep2rep", "mc_sure"])
@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients_match_finite_differences(kind, seed):
    rng = np.random.default_rng(100 + seed)
    p = init_params(2, 4, 3, seed=seed)
    p.tau0[...] = 0.02 * rng.random(p.tau0.shape)
    p.tau1[...] = 0.5 * rng.random(p.tau1.shape)
    y = crandn(rng, (2, 8, 8))
    sig = 0.1 + 0.1 * rng.random((2, 8, 8))
    other = crandn(rng, (2, 8, 8))
    loss = LossKind(kind)

    def evaluate(q):
        f = model_closure(q)
        if kind == "mc_sure":
            return loss_mc_sure(f, y, sig, loss, np.random.default_rng(7))
        if kind == "rep2rep":
            return loss_rep2rep(f, y, sig, other)
        return loss_supervised(f, y, sig, other)

    res = evaluate(p)
    grads = cdlnet_backward(res.cache, res.grad_output)
    base = _active(res.cache)
    for name in PARAM_NAMES:
        arr = getattr(p, name)
        v = crandn(rng, arr.shape) if np.iscomplexobj(arr) else rng.standard_normal(arr.shape)
        if name == "b":
            v[0] = 0
        step = 1e-6
        for _ in range(4):
            qp, qm = p.copy(), p.copy()
            getattr(qp, name)[...] += step * v
            getattr(qm, name)[...] -= step * v
            rp, rm = evaluate(qp), evaluate(qm)
            if all(np.array_equal(a, b) and np.array_equal(a, c)
                   for a, b, c in zip(base, _active(rp.cache), _active(rm.cache))):
                break
            step /= 10
        fd = (rp.value - rm.value) / (2 * step)
        an = np.real(np.vdot(v, grads[name])) if np.iscomplexobj(arr) else np.sum(v * grads[name])
        assert abs(fd - an) / max(abs(an), 1e-12) < 1e-4, name


class TestSampling:
    def test_full_patch_is_deterministic(self, rng):
        e = small_entry(rng)
        cfg = TrainConfig(patch=16, loss=LossKind.supervised())
        s = sample_patch(e, cfg, rng)
        np.testing.assert_array_equal(s.input, e.reps.mean(axis=0))
        np.testing.assert_array_equal(s.target, e.target)
        np.testing.assert_array_equal(s.sigma, e.sigma / np.sqrt(2))

    def test_sigma_crop_alignment(self, rng):
        e = small_entry(rng, n=24)
        cfg = TrainConfig(patch=8, loss=LossKind.rep2rep())
        for _ in range(20):
            s = sample_patch(e, cfg, rng)
            # locate the window through the input, then check sigma is the same window
            hits = [(i, j) for i in range(17) for j in range(17)
                    if np.array_equal(e.reps[0, i:i + 8, j:j + 8], s.input)
                    or np.array_equal(e.reps[1, i:i + 8, j:j + 8], s.input)]
            assert len(hits) == 1
            i, j = hits[0]
            np.testing.assert_array_equal(s.sigma, e.sigma[i:i + 8, j:j + 8])
            tgt = e.reps[0 if s.swapped else 1, i:i + 8, j:j + 8]
            np.testing.assert_array_equal(s.target, tgt)

    def test_role_swap_frequency(self):
        rng = np.random.default_rng(9)
        e = small_entry(rng, n=8)
        cfg = TrainConfig(patch=4, loss=LossKind.rep2rep())
        swaps = sum(sample_patch(e, cfg, rng).swapped for _ in range(10_000))
        assert abs(swaps / 10_000 - 0.5) < 0.02

    def test_sure_has_no_target(self, rng):
        cfg = TrainConfig(patch=8, loss=LossKind.mc_sure())
        assert sample_patch(small_entry(rng), cfg, rng).target is None

    def test_patch_too_large(self, rng):
        with pytest.raises(ConfigurationError):
            sample_patch(small_entry(rng), TrainConfig(patch=17), rng)

    def test_rep2rep_needs_two_reps(self, rng):
        with pytest.raises(ConfigurationError):
            sample_patch(small_entry(rng, reps=1), TrainConfig(patch=8), rng)

    def test_batch_size(self, rng):
        data = [small_entry(rng) for _ in range(3)]
        assert len(sample_batch(data, TrainConfig(patch=8, batch=5), rng)) == 5

    def test_entry_validation(self, rng):
        with pytest.raises(DimensionError):
            DatasetEntry(crandn(rng, (2, 8, 8)), np.ones((8, 9)))


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0]), "z": np.array([1 + 1j])}
        before = {k: v.copy() for k, v in p.items()}
        st = adam_init(p)
        for _ in range(3):
            adam_step(p, {"w": np.zeros(2), "z": np.zeros(1, complex)}, st, 1e-2)
        for k in p:
            np.testing.assert_array_equal(p[k], before[k])

    def test_first_step_has_size_lr(self):
        p = {"w": np.array([0.0, 0.0, 0.0]), "z": np.array([0j])}
        st = adam_init(p)
        adam_step(p, {"w": np.array([3.0, -0.5, 1e-3]), "z": np.array([2 - 7j])}, st, 1e-2)
        np.testing.assert_allclose(p["w"], [-1e-2, 1e-2, -1e-2], rtol=1e-4)
        # real and imaginary parts are separate coordinates
        np.testing.assert_allclose(p["z"], [-1e-2 + 1e-2j], rtol=1e-6)

    def test_quadratic_bowl(self):
        p = {"w": np.ones(5)}
        st = adam_init(p)
        for _ in range(500):
            adam_step(p, {"w": p["w"].copy()}, st, 1e-2)
        assert np.max(np.abs(p["w"])) < 1e-3

    def test_thresholds_projected(self):
        p = init_params(2, 4, 3, seed=0)
        grads = {k: np.zeros_like(v) for k, v in p.tensors().items()}
        grads["tau0"] = np.full(p.tau0.shape, 1.0)
        st = adam_init(p)
        for _ in range(200):
            adam_step(p, grads, st, 1e-1)
        assert np.all(p.tau0 >= 0)

    def test_shape_mismatch(self):
        p = {"w": np.ones(3)}
        with pytest.raises(DimensionError):
            adam_step(p, {"w": np.ones(4)}, adam_init(p), 1e-2)


def _toy_data(seed=0, count=3, n=16):
    rng = np.random.default_rng(seed)
    return [small_entry(rng, n=n) for _ in range(count)]


TOY = dict(patch=12, batch=2, steps=6, depth=2, subbands=4, kernel_size=3)


class TestTrain:
    @pytest.mark.parametrize("loss", [LossKind.supervised(), LossKind.mc_sure(), LossKind.rep2rep()])
    def test_identical_seeds_are_bit_identical(self, loss):
        cfg = TrainConfig(loss=loss, seed=3, **TOY)
        a = train(_toy_data(), cfg)
        b = train(_toy_data(), cfg)
        assert a.history == b.history
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(getattr(a.params, name), getattr(b.params, name))

    def test_resume_matches_uninterrupted(self):
        full = train(_toy_data(), TrainConfig(seed=1, **TOY))
        half = train(_toy_data(), TrainConfig(seed=1, **{**TOY, "steps": 3}))
        resumed = train(_toy_data(), TrainConfig(seed=1, **TOY), resume=half)
        assert resumed.history == full.history
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(getattr(resumed.params, name), getattr(full.params, name))

    def test_zero_steps_returns_init(self):
        cfg = TrainConfig(seed=2, **{**TOY, "steps": 0})
        res = train(_toy_data(), cfg)
        ref = init_params(2, 4, 3, seed=2)
        assert res.history == []
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(getattr(res.params, name), getattr(ref, name))

    def test_different_seeds_differ(self):
        a = train(_toy_data(), TrainConfig(seed=1, **TOY))
        b = train(_toy_data(), TrainConfig(seed=2, **TOY))
        assert a.history != b.history

    def test_loss_decreases_on_toy(self):
        cfg = TrainConfig(seed=0, lr=1e-2, **{**TOY, "steps": 60})
        res = train(_toy_data(), cfg)
        assert np.mean(res.history[-10:]) < np.mean(res.history[:10])

    def test_validation_hook(self):
        cfg = TrainConfig(seed=0, **TOY)
        res = train(_toy_data(), cfg, validate=lambda p: 1.0, validate_every=2)
        assert [s for s, _ in res.validation] == [2, 4, 6]

    def test_rep2rep_needs_pairs(self):
        rng = np.random.default_rng(0)
        data = [small_entry(rng, reps=1)]
        with pytest.raises(ConfigurationError):
            train(data, TrainConfig(**TOY))

    def test_supervised_needs_targets(self):
        rng = np.random.default_rng(0)
        data = [small_entry(rng, target=False)]
        with pytest.raises(ConfigurationError):
            train(data, TrainConfig(loss=LossKind.supervised(), **TOY))

    def test_patch_exceeds_data(self):
        with pytest.raises(ConfigurationError):
            train(_toy_data(), TrainConfig(**{**TOY, "patch": 17}))

    def test_empty_dataset(self):
        with pytest.raises(ConfigurationError):
            train([], TrainConfig(**TOY))

    def test_nonfinite_loss_raises(self):
        data = _toy_data()
        data[0].reps[0, 0, 0] = np.nan
        data[1].reps[0, 0, 0] = np.nan
        data[2].reps[0, 0, 0] = np.nan
        with pytest.raises(FloatingPointError):
            train(data, TrainConfig(**{**TOY, "patch": 16}))

    def test_batch_loss_sums_samples(self):
        rng = np.random.default_rng(4)
        p = init_params(2, 4, 3, seed=0)
        cfg = TrainConfig(patch=8, batch=2, loss=LossKind.supervised())
        samples = sample_batch(_toy_data(), cfg, rng)
        total, _ = batch_loss(p, samples, cfg.loss, rng)
        parts = sum(batch_loss(p, [s], cfg.loss, rng)[0] for s in samples)
        assert total == pytest.approx(parts, rel=1e-12)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigurationError):
        LossKind("l1")
    with pytest.raises(ConfigurationError):
        LossKind.mc_sure(h=0)
