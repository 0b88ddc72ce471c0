import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shcenhance.errors import ConfigError, ShapeError
from shcenhance.sh_core import acn_index, design_directions, sh_synthesize
from shcenhance.sht import (
    ArrayGeometry, FrequencyGrid, UnderdeterminedWarning, basis_matrix, design_geometry,
    group_sizes, merge_groups, partition_groups, per_mic_contributions, sht_forward,
    sht_forward_ls, sht_inverse, uca_geometry,
)

pytestmark = pytest.mark.filterwarnings("ignore::shcenhance.sht.UnderdeterminedWarning")


def field_on(geom, coeffs):
    return sh_synthesize(coeffs, geom.theta, geom.phi)


class TestGeometry:
    def test_uca(self):
        g = uca_geometry(16, 0.035)
        assert g.n_mics == 16
        d0 = g.direction(0)
        assert (g.radius[0], d0.theta, d0.phi) == pytest.approx((0.035, math.pi / 2, 0.0))
        assert g.direction(4).phi == pytest.approx(math.pi / 2)
        np.testing.assert_allclose(np.linalg.norm(g.positions(), axis=1), 0.035)

    def test_single_mic(self):
        g = uca_geometry(1, 1.0)
        assert g.n_mics == 1 and g.phi[0] == 0.0

    def test_design(self):
        g = design_geometry(8, 0.035)
        assert g.n_mics == len(design_directions(8)[0])
        assert np.sum(np.full(g.n_mics, 4 * math.pi / g.n_mics)) == pytest.approx(4 * math.pi)
        with pytest.raises(ConfigError):
            design_geometry(7, 0.035)

    def test_dict_roundtrip(self):
        g = uca_geometry(8, 0.05)
        h = ArrayGeometry.from_dict(g.to_dict())
        np.testing.assert_array_equal(g.phi, h.phi)

    def test_frequency_grid(self):
        fg = FrequencyGrid()
        assert fg.n_bins == 201
        assert fg.freqs[-1] == 8000.0
        assert np.all(np.diff(fg.wavenumbers) > 0)
        assert fg.wavenumbers[10] == pytest.approx(2 * math.pi * 400 / 343)


class TestForward:
    def test_constant_field(self):
        for g in (uca_geometry(16, 0.035), design_geometry(8, 0.035), uca_geometry(3, 1.0)):
            p = sht_forward(np.ones(g.n_mics), g, 4)
            assert p[0] == pytest.approx(math.sqrt(4 * math.pi), abs=1e-12)

    def test_constant_field_design_only_p00(self):
        p = sht_forward(np.ones(40), design_geometry(8, 1.0), 4)
        assert np.abs(p[1:]).max() < 1e-12

    def test_uca_elevation_alias(self):
        # every UCA mic sits on the equator where Y_2^0 = -1/2 sqrt(5/4pi),
        # so the equal-weight sum is -sqrt(5 pi)
        p = sht_forward(np.ones(16), uca_geometry(16, 0.035), 4)
        assert p[acn_index(2, 0)].real == pytest.approx(-math.sqrt(5 * math.pi), abs=1e-12)
        assert abs(p[acn_index(2, 0)]) > 1.0

    def test_design_recovers_coefficients(self, cr):
        g = design_geometry(8, 0.035)
        c = cr(25)
        p = sht_forward(field_on(g, c), g, 4)
        assert np.abs(p - c).max() < 1e-9 * np.abs(c).max()

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            sht_forward(np.ones((15, 3)), uca_geometry(16, 0.035), 4)

    def test_underdetermined_warning(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            with pytest.raises(UnderdeterminedWarning):
                sht_forward(np.ones(16), uca_geometry(16, 0.035), 4)

    def test_shapes(self, cr):
        g = uca_geometry(16, 0.035)
        assert sht_forward(cr(16, 7, 201), g, 4).shape == (25, 7, 201)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_linearity(self, seed):
        r = np.random.default_rng(seed)
        g = uca_geometry(16, 0.035)
        x, y = (r.standard_normal((16, 3, 5)) + 1j * r.standard_normal((16, 3, 5)) for _ in range(2))
        a, b = r.standard_normal(2) + 1j * r.standard_normal(2)
        lhs = sht_forward(a * x + b * y, g, 4)
        rhs = a * sht_forward(x, g, 4) + b * sht_forward(y, g, 4)
        assert np.abs(lhs - rhs).max() < 1e-12 * max(1.0, np.abs(lhs).max())


class TestPerMic:
    def test_sums_to_forward(self, cr):
        g = uca_geometry(16, 0.035)
        x = cr(16, 4, 201)
        contrib = per_mic_contributions(x, g, 4)
        assert contrib.shape == (25, 16, 4, 201)
        assert np.abs(contrib.sum(axis=1) - sht_forward(x, g, 4)).max() <= 1e-15 * np.abs(x).max() * 10

    def test_group_shapes(self, cr):
        contrib = per_mic_contributions(cr(16), uca_geometry(16, 0.035), 4)
        assert [grp.shape for grp in partition_groups(contrib)] == [(4, 16), (5, 16), (7, 16), (9, 16)]

    def test_single_mic(self, cr):
        g = uca_geometry(1, 0.1)
        x = cr(1, 3)
        np.testing.assert_array_equal(per_mic_contributions(x, g, 0)[:, 0], sht_forward(x, g, 0))


class TestLeastSquares:
    def test_matches_quadrature_on_design(self, cr):
        g = design_geometry(8, 0.035)
        x = cr(40, 6)
        a = sht_forward(x, g, 4)
        b = sht_forward_ls(x, g, 4, ridge=0.0)
        assert np.abs(a - b).max() < 1e-8 * np.abs(a).max()

    def test_large_ridge_shrinks(self, cr):
        g = design_geometry(8, 0.035)
        x = cr(40)
        assert np.abs(sht_forward_ls(x, g, 4, ridge=1e12)).max() < 1e-9

    def test_uca_rank_deficient(self, cr):
        g = uca_geometry(16, 0.035)
        y = basis_matrix(g, 4)
        assert np.linalg.matrix_rank(y) < 25
        assert np.linalg.matrix_rank(y.conj().T @ y) < 25
        p = sht_forward_ls(cr(16, 5), g, 4)
        assert np.all(np.isfinite(p))

    def test_ls_fits_samples_on_uca(self):
        # a field in the span of the basis is reproduced at the mics
        g = uca_geometry(16, 0.035)
        c = np.zeros(25, complex)
        c[acn_index(3, 3)] = 1.0
        x = field_on(g, c)
        p = sht_forward_ls(x, g, 4)
        np.testing.assert_allclose(basis_matrix(g, 4) @ p, x, atol=1e-6)


class TestInverse:
    def test_constant(self, rng):
        c = np.zeros(25, complex)
        c[0] = math.sqrt(4 * math.pi)
        th, ph = np.arccos(rng.uniform(-1, 1, 9)), rng.uniform(0, 6.28, 9)
        np.testing.assert_allclose(sht_inverse(c, th, ph), 1.0, atol=1e-12)

    def test_pole(self):
        c = np.zeros(4, complex)
        c[acn_index(1, 0)] = 1.0
        assert sht_inverse(c, 0.0, 0.0)[0] == pytest.approx(math.sqrt(3 / (4 * math.pi)))

    @pytest.mark.parametrize("order,t", [(2, 4), (3, 6), (4, 8), (5, 10)])
    def test_round_trip(self, cr, order, t):
        g = design_geometry(t, 1.0)
        x = field_on(g, cr((order + 1) ** 2, 3))
        y = sht_inverse(sht_forward(x, g, order), g.theta, g.phi)
        assert np.abs(y - x).max() < 1e-8 * np.abs(x).max()


class TestGroups:
    def test_sizes(self):
        assert group_sizes(4) == [4, 5, 7, 9]
        assert group_sizes(1) == [4]
        assert sum(group_sizes(7)) == 64

    def test_merge_exact(self, cr):
        x = cr(25, 3, 4)
        parts = partition_groups(x)
        assert [p.shape[0] for p in parts] == [4, 5, 7, 9]
        np.testing.assert_array_equal(merge_groups(parts), x)

    @given(st.integers(1, 12))
    def test_cover(self, order):
        sizes = group_sizes(order)
        assert sum(sizes) == (order + 1) ** 2
        assert sizes[1:] == [2 * n + 1 for n in range(2, order + 1)]
