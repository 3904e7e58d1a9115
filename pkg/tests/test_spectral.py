import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import band_limited
from fraclab.errors import (
    AlphaOutOfRange,
    BumpOutsideBox,
    ExponentOutOfRange,
    GridMismatch,
    InvalidGrid,
    NegativeExponentNonMeanZero,
)
from fraclab.spectral import (
    Exponent,
    Field,
    Grid,
    compare_inner,
    fit_riesz_constant,
    frac_laplacian,
    l2_inner,
    make_bump,
    mean_zero_probe,
    riesz_direct,
    riesz_potential,
    sobolev_norm,
    symbol,
)
from oracles import dft_multiplier, freq_magnitudes, neg_laplacian_fd, sobolev_by_sum

exps = st.floats(0.05, 1.95)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestGrid:
    def test_spacing_and_frequencies(self):
        g = Grid(1, 16, math.pi)
        assert g.h == pytest.approx(2 * math.pi / 16)
        assert np.sum(g.freqs == 0) == 1
        assert g.freqs[8] == pytest.approx(-8.0)

    @pytest.mark.parametrize("args", [(4, 16, 1.0), (1, 12, 1.0), (1, 4, 1.0), (1, 16, 0.0), (3, 256, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(InvalidGrid):
            Grid(*args)

    def test_freq_oracle(self):
        g = Grid(2, 16, 3.0)
        assert np.array_equal(g.kmag(), freq_magnitudes(2, 16, 3.0))

    def test_field_immutable_and_finite(self):
        g = Grid(1, 16, 1.0)
        u = g.zeros()
        with pytest.raises(ValueError):
            u.values[0] = 1.0
        with pytest.raises(ValueError):
            Field(g, np.full(16, np.nan))

    def test_exponent_parts(self):
        e = Exponent(2.3)
        assert e.floor == 2 and e.frac == pytest.approx(0.3) and e.is_fractional
        assert not Exponent(1.0).is_fractional


class TestFracLaplacian:
    def test_cosine_mode(self):
        g = Grid(1, 16, math.pi)
        u = Field(g, np.cos(2 * g.x))
        out = frac_laplacian(u, 0.5)
        assert np.max(np.abs(out.values - 2 * np.cos(2 * g.x))) < 1e-13

    @pytest.mark.parametrize("n,N", [(1, 32), (2, 16)])
    def test_every_mode_is_eigenfunction(self, n, N):
        g = Grid(n, N, 2.0)
        k = g.kmag()
        for idx in list(np.ndindex(g.shape))[:: max(1, g.size // 40)]:
            coef = np.zeros(g.shape, dtype=complex)
            coef[idx] = 1.0
            u = np.fft.ifftn(coef)
            for part in (np.real(u), np.imag(u)):
                if np.linalg.norm(part) == 0:
                    continue
                out = frac_laplacian(Field(g, part), 0.37).values
                lam = k[idx] ** 0.74 if k[idx] > 0 else 0.0
                assert np.max(np.abs(out - lam * part)) <= 1e-13 * max(1, lam) * np.max(np.abs(part)) * 10

    @given(s1=exps, s2=exps, n=st.sampled_from([1, 2]), seed=st.integers(0, 2**16))
    def test_semigroup(self, s1, s2, n, seed):
        g = Grid(n, 256 if n == 1 else 64, 3.0)
        u = band_limited(g, np.random.default_rng(seed))
        a = frac_laplacian(frac_laplacian(u, s1), s2).values
        b = frac_laplacian(u, s1 + s2).values
        assert np.linalg.norm(a - b) <= 1e-11 * np.linalg.norm(b)

    def test_semigroup_fixed_example(self, rng):
        g = Grid(1, 128, 2.0)
        u = band_limited(g, rng)
        a = frac_laplacian(frac_laplacian(u, 0.3), 0.7).values
        assert rel(a, frac_laplacian(u, 1.0).values) <= 1e-12

    def test_semigroup_negative_step(self, rng):
        g = Grid(2, 32, 2.0)
        u = band_limited(g, rng, mean_zero=True)
        a = frac_laplacian(frac_laplacian(u, -0.4), 0.9).values
        assert rel(a, frac_laplacian(u, 0.5).values) <= 1e-11

    @given(s=st.floats(-0.45, 2.0), n=st.sampled_from([1, 2]), seed=st.integers(0, 2**16))
    def test_self_adjoint(self, s, n, seed):
        g = Grid(n, 128 if n == 1 else 32, 2.0)
        r = np.random.default_rng(seed)
        u, v = band_limited(g, r, mean_zero=True), band_limited(g, r, mean_zero=True)
        a = l2_inner(frac_laplacian(u, s), v)
        b = l2_inner(u, frac_laplacian(v, s))
        assert abs(a - b) <= 1e-12 * frac_laplacian(u, s).norm() * v.norm() * 10

    @pytest.mark.parametrize("n,N,s", [(1, 32, 0.3), (1, 16, 1.7), (2, 16, 0.5), (2, 32, -0.4), (1, 32, -0.2)])
    def test_dft_oracle(self, n, N, s, rng):
        g = Grid(n, N, 2.5)
        u = Field(g, rng.normal(size=g.shape))
        u = u.with_values(u.values - u.mean()) if s < 0 else u
        sym = freq_magnitudes(n, N, 2.5)
        m = np.zeros_like(sym)
        m[sym > 0] = sym[sym > 0] ** (2 * s)
        ref = dft_multiplier(u.values, m)
        assert np.max(np.abs(frac_laplacian(u, s).values - ref)) <= 1e-10 * np.max(np.abs(ref))

    def test_zero_mode_convention(self):
        g = Grid(1, 16, 1.0)
        assert symbol(g, 0.5)[0] == 0.0
        assert np.allclose(frac_laplacian(Field(g, np.ones(16)), 0.5).values, 0)

    def test_fd_oracle_second_order(self):
        errs = []
        for N in (64, 128, 256):
            g = Grid(1, N, 8.0)
            u = Field(g, np.exp(-g.x**2))
            errs.append(np.max(np.abs(frac_laplacian(u, 1.0).values - neg_laplacian_fd(u.values, g.h))))
        rates = [errs[i] / errs[i + 1] for i in range(2)]
        assert all(3.8 < r < 4.2 for r in rates)

    def test_negative_exponent_errors(self):
        g = Grid(1, 16, 1.0)
        u = Field(g, np.ones(16))
        with pytest.raises(NegativeExponentNonMeanZero):
            frac_laplacian(u, -0.2)
        assert np.allclose(frac_laplacian(u, -0.2, project_mean=True).values, 0)
        with pytest.raises(ExponentOutOfRange):
            frac_laplacian(u, -0.5)
        assert "spectral_core" in str(ExponentOutOfRange("x"))


class TestSobolev:
    def test_parseval(self, rng):
        g = Grid(2, 32, 2.0)
        u = Field(g, rng.normal(size=g.shape))
        for hom in (True, False):
            assert sobolev_norm(u, 0, hom) == pytest.approx(math.sqrt(l2_inner(u, u)), rel=1e-13)
        assert sobolev_norm(u, 0) == pytest.approx(g.h * np.linalg.norm(u.values), rel=1e-13)

    def test_plane_wave(self):
        g = Grid(1, 64, 3.0)
        xi = 5 * math.pi / 3.0
        u = Field(g, np.sin(xi * g.x))
        assert sobolev_norm(u, 1.3, True) == pytest.approx(xi**1.3 * u.norm(), rel=1e-12)

    @pytest.mark.parametrize("r,hom", [(0.7, True), (1.5, False), (-0.5, False), (2.0, True)])
    def test_frequency_sum_oracle(self, r, hom, rng):
        g = Grid(2, 16, 1.5)
        u = Field(g, rng.normal(size=g.shape))
        assert sobolev_norm(u, r, hom) == pytest.approx(sobolev_by_sum(u.values, 1.5, r, hom), rel=1e-13)

    def test_homogeneous_negative_needs_mean_zero(self):
        g = Grid(1, 16, 1.0)
        with pytest.raises(NegativeExponentNonMeanZero):
            sobolev_norm(Field(g, np.ones(16)), -0.3, True)


class TestBumpAndInner:
    def test_bump_basics(self):
        g = Grid(2, 64, 2.0)
        assert np.all(make_bump(g, (0.2, -0.1), 0.5, 0.0).values == 0)
        b = make_bump(g, (0.2, -0.1), 0.5)
        assert np.all((b.values != 0) <= (g.radius((0.2, -0.1)) < 0.5))
        with pytest.raises(BumpOutsideBox):
            make_bump(g, (1.8, 0), 0.3)

    def test_bump_refinement(self):
        vals = []
        for N in (128, 256):
            g = Grid(1, N, 4.0)
            vals.append(frac_laplacian(make_bump(g, 0.1, 1.0), 0.25).norm())
        assert abs(vals[0] / vals[1] - 1) <= 0.01

    def test_inner_products(self, rng):
        g = Grid(1, 128, 2.0)
        u, v = band_limited(g, rng), band_limited(g, rng)
        assert l2_inner(u, u) == pytest.approx(u.norm() ** 2, rel=1e-14)
        a = l2_inner(frac_laplacian(u, 0.35), frac_laplacian(v, 0.35))
        assert a == pytest.approx(l2_inner(frac_laplacian(u, 0.7), v), rel=1e-12)
        w1, w2 = Field(g, np.sin(math.pi * g.x)), Field(g, np.cos(math.pi * g.x))
        assert abs(l2_inner(w1, w2)) < 1e-14
        with pytest.raises(GridMismatch):
            l2_inner(u, Grid(1, 64, 2.0).zeros())


class TestRiesz:
    def test_alpha_range(self):
        g = Grid(2, 16, 1.0)
        with pytest.raises(AlphaOutOfRange):
            riesz_potential(g.zeros(), 2.0, project_mean=True)

    def test_needs_mean_zero(self):
        g = Grid(2, 16, 1.0)
        with pytest.raises(NegativeExponentNonMeanZero):
            riesz_potential(Field(g, np.ones(g.shape)), 1.0)

    def test_inverse_relation_constant(self):
        """(-Delta)^{(n-alpha)/2} I_alpha u = kappa u, kappa the same for every probe."""
        g = Grid(2, 128, 4.0)
        alpha = 1.0
        r = np.random.default_rng(7)
        ks = []
        for _ in range(10):
            u = mean_zero_probe(g, r)
            back = frac_laplacian(Field(g, riesz_direct(u, g, alpha)), (2 - alpha) / 2).values
            ks.append(compare_inner(back, u, g)[0])
        ks = np.array(ks)
        assert np.max(np.abs(ks / ks.mean() - 1)) <= 0.01

    def test_radial_symmetry(self):
        g = Grid(2, 64, 4.0)
        u = Field(g, np.exp(-4 * g.radius() ** 2) - np.exp(-g.radius() ** 2) / 4)
        u = u.with_values(u.values - u.mean())
        for backend in ("direct", "spectral"):
            out = riesz_potential(u, 1.0, backend).values
            core = out[1:, 1:]
            assert np.allclose(core, core.T, atol=1e-12 * np.abs(core).max())
            assert np.allclose(core, core[::-1, :], atol=1e-12 * np.abs(core).max())

    def test_backends_agree(self):
        g = Grid(2, 128, 4.0)
        u = Field(g, mean_zero_probe(g, np.random.default_rng(99)))
        a = riesz_potential(u, 1.0, "spectral").values
        b = riesz_potential(u, 1.0, "direct").values
        _, err = compare_inner(b, a, g)
        assert err <= 0.05

    def test_fitted_constant_stable(self):
        kappa, spread = fit_riesz_constant(Grid(2, 128, 4.0), 1.0)
        assert spread <= 0.05
        # free-space value 2 pi; the fitted one absorbs the periodic and quadrature bias
        assert abs(kappa / (2 * math.pi) - 1) <= 0.02
