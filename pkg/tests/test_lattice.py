import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repdenoise.coils import coil_combine, make_synthetic_sensitivities
from repdenoise.errors import ConfigurationError, DimensionError, DomainMismatchError
from repdenoise.lattice import (
    IMAGE,
    KSPACE,
    ComplexLattice,
    PixelwiseOperator,
    RepetitionStack,
    conv2_circular,
    dft2_channelwise,
    idft2_channelwise,
    kernel_transfer,
    pixelwise_apply,
)
from repdenoise.noise import haar_hh_kernel

from conftest import crandn


def lattice(rng, n1, n2, c, domain=IMAGE):
    return ComplexLattice(crandn(rng, (c, n1, n2)), domain)


class TestComplexLattice:
    def test_rejects_nan(self):
        data = np.zeros((1, 4, 4), complex)
        data[0, 1, 1] = np.nan
        with pytest.raises(ConfigurationError):
            ComplexLattice(data)

    def test_rejects_bad_domain(self):
        with pytest.raises(ConfigurationError):
            ComplexLattice(np.zeros((1, 2, 2)), "sinogram")

    def test_2d_input_is_single_coil(self):
        x = ComplexLattice(np.ones((3, 5)))
        assert x.shape == (1, 3, 5)
        assert (x.n1, x.n2, x.c) == (3, 5, 1)

    def test_data_is_read_only(self):
        x = ComplexLattice.zeros(4, 4, 2)
        with pytest.raises(ValueError):
            x.data[0, 0, 0] = 1

    def test_stack_requires_equal_dims(self, rng):
        with pytest.raises(DimensionError):
            RepetitionStack((lattice(rng, 4, 4, 1), lattice(rng, 4, 5, 1)))
        with pytest.raises(DimensionError):
            RepetitionStack(())

    def test_stack_mean(self, rng):
        arr = crandn(rng, (3, 2, 4, 4))
        stack = RepetitionStack.from_array(arr)
        assert len(stack) == 3
        np.testing.assert_allclose(stack.mean().data, arr.mean(axis=0))


class TestDft:
    def test_impulse_gives_flat_spectrum(self):
        x = np.zeros((1, 8, 8), complex)
        x[0, 0, 0] = 1
        k = dft2_channelwise(ComplexLattice(x))
        assert k.domain == KSPACE
        np.testing.assert_allclose(np.abs(k.data), 1 / 8, atol=1e-15)

    def test_flat_spectrum_gives_impulse(self):
        k = ComplexLattice(np.full((1, 8, 8), 1 / 8, complex), KSPACE)
        x = idft2_channelwise(k)
        expected = np.zeros((1, 8, 8))
        expected[0, 0, 0] = 1
        np.testing.assert_allclose(x.data, expected, atol=1e-15)

    def test_zero_maps_to_zero(self):
        z = ComplexLattice.zeros(6, 6, 2, KSPACE)
        assert not np.any(idft2_channelwise(z).data)

    @pytest.mark.parametrize("shape", [(8, 8, 2), (16, 16, 4), (64, 64, 8), (5, 7, 3)])
    def test_unitary_and_inverse(self, rng, shape):
        n1, n2, c = shape
        x = lattice(rng, n1, n2, c)
        k = dft2_channelwise(x)
        assert abs(np.linalg.norm(k.data) - np.linalg.norm(x.data)) < 1e-12 * np.linalg.norm(x.data)
        back = idft2_channelwise(k)
        assert back.domain == IMAGE
        np.testing.assert_allclose(back.data, x.data, atol=1e-12)

    def test_domain_is_checked(self, rng):
        x = lattice(rng, 4, 4, 1)
        with pytest.raises(DomainMismatchError):
            idft2_channelwise(x)
        with pytest.raises(DomainMismatchError):
            dft2_channelwise(dft2_channelwise(x))


class TestPixelwise:
    def test_identity(self, rng):
        x = lattice(rng, 6, 5, 3)
        np.testing.assert_array_equal(pixelwise_apply(PixelwiseOperator(np.eye(3)), x).data, x.data)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            pixelwise_apply(PixelwiseOperator(np.eye(2)), lattice(rng, 4, 4, 3))

    def test_per_pixel_grid_mismatch(self, rng):
        op = PixelwiseOperator(np.ones((1, 2, 3, 3)))
        with pytest.raises(DimensionError):
            pixelwise_apply(op, lattice(rng, 4, 4, 2))

    def test_conjugate_maps_match_coil_combine(self, rng):
        maps = make_synthetic_sensitivities(8, 8, 3, seed=4)
        x = lattice(rng, 8, 8, 3)
        op = PixelwiseOperator(np.conj(maps.s)[None])
        np.testing.assert_allclose(pixelwise_apply(op, x).data, coil_combine(x, maps).data, atol=1e-14)

    def test_per_pixel_matches_loop(self, rng):
        mats = crandn(rng, (2, 3, 4, 5))
        x = lattice(rng, 4, 5, 3)
        out = pixelwise_apply(PixelwiseOperator(mats), x).data
        for i in range(4):
            for j in range(5):
                np.testing.assert_allclose(out[:, i, j], mats[:, :, i, j] @ x.data[:, i, j], atol=1e-14)

    @pytest.mark.parametrize("c", [1, 4, 8])
    def test_commutes_with_channelwise_dft(self, rng, c):
        w = PixelwiseOperator(crandn(rng, (3, c)))
        x = lattice(rng, 16, 12, c)
        lhs = pixelwise_apply(w, dft2_channelwise(x)).data
        rhs = dft2_channelwise(pixelwise_apply(w, x)).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_adjoint_and_compose(self, rng):
        a = PixelwiseOperator(crandn(rng, (2, 3, 4, 4)))
        b = PixelwiseOperator(crandn(rng, (3, 3)))
        x = lattice(rng, 4, 4, 3)
        np.testing.assert_allclose(pixelwise_apply(a.compose(b), x).data,
                                   pixelwise_apply(a, pixelwise_apply(b, x)).data, atol=1e-12)
        y = lattice(rng, 4, 4, 2)
        lhs = np.vdot(y.data, pixelwise_apply(a, x).data)
        rhs = np.vdot(pixelwise_apply(a.adjoint(), y).data, x.data)
        assert abs(lhs - rhs) < 1e-12 * abs(lhs)


class TestConvolution:
    def test_delta_is_identity(self, rng):
        x = lattice(rng, 8, 8, 2)
        np.testing.assert_allclose(conv2_circular(x, np.ones((1, 1))).data, x.data, atol=1e-14)

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ConfigurationError):
            conv2_circular(lattice(rng, 8, 8, 1), np.ones((2, 2)))

    def test_haar_hh_kills_constants(self):
        x = ComplexLattice(np.full((2, 8, 8), 3 - 2j))
        assert np.abs(conv2_circular(x, haar_hh_kernel()).data).max() < 1e-15

    def test_convolution_theorem(self, rng):
        x = lattice(rng, 12, 10, 2)
        g = crandn(rng, (3, 2, 3, 5))
        out = conv2_circular(x, g)
        transfer = kernel_transfer(g, 12, 10)
        rhs = np.einsum("oixy,ixy->oxy", transfer, dft2_channelwise(x).data)
        np.testing.assert_allclose(dft2_channelwise(out).data, rhs, atol=1e-10)

    def test_matches_direct_sum(self, rng):
        x = lattice(rng, 6, 7, 1)
        g = crandn(rng, (3, 3))
        out = conv2_circular(x, g).data[0]
        direct = np.zeros((6, 7), complex)
        for a in range(3):
            for b in range(3):
                direct += g[a, b] * np.roll(x.data[0], (a - 1, b - 1), axis=(0, 1))
        np.testing.assert_allclose(out, direct, atol=1e-12)

    def test_stencil_larger_than_grid_wraps(self, rng):
        x = lattice(rng, 3, 3, 1)
        g = crandn(rng, (5, 5))
        out = conv2_circular(x, g).data[0]
        direct = np.zeros((3, 3), complex)
        for a in range(5):
            for b in range(5):
                direct += g[a, b] * np.roll(x.data[0], (a - 2, b - 2), axis=(0, 1))
        np.testing.assert_allclose(out, direct, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31), ar=st.floats(-3, 3), ai=st.floats(-3, 3),
           br=st.floats(-3, 3), bi=st.floats(-3, 3))
    def test_linearity(self, seed, ar, ai, br, bi):
        rng = np.random.default_rng(seed)
        a, b = complex(ar, ai), complex(br, bi)
        x, y = crandn(rng, (2, 8, 8)), crandn(rng, (2, 8, 8))
        g = crandn(rng, (2, 2, 3, 3))
        f = lambda v: conv2_circular(ComplexLattice(v), g).data  # noqa: E731
        lhs = f(a * x + b * y)
        rhs = a * f(x) + b * f(y)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + np.abs(rhs).max()))
