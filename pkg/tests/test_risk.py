"""Student-t marginal, quantiles, VaR and lower-tail CVaR."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from conftest import mp_t_quantile
from travnav import risk
from travnav.errors import ValidationError
from travnav.nig import DEFAULT_PRIOR, NigState, nig_update_batch

# CVaR of the default prior cell (gamma .5, kappa 1, a 1, b 1) at level 0.1.
# Frozen after checking against direct numerical integration of the tail below.
PRIOR_CVAR = -5.5


def integral_cvar(dof, loc, scale, c):
    """E[X | X < VaR_c] by quadrature of the t density; independent of the package."""
    q = mp_t_quantile(dof, c)
    num, _ = integrate.quad(lambda t: t * stats.t.pdf(t, dof), -np.inf, q, epsabs=1e-12)
    return loc + scale * num / c


class TestMarginal:
    def test_unit_prior(self):
        m = risk.marginal(NigState(0.0, 1.0, 1.0, 1.0))
        assert (m.dof, m.loc) == (2.0, 0.0)
        assert m.scale == pytest.approx(math.sqrt(2.0), rel=1e-15)

    def test_posterior_of_batch_example(self):
        m = risk.marginal(NigState(0.75, 4.0, 2.5, 1.375))
        assert (m.dof, m.loc) == (5.0, 0.75)
        assert m.scale == pytest.approx(math.sqrt(0.6875), rel=1e-15)

    @pytest.mark.parametrize("k,a,b", [(1, 1, 3), (0.2, 7, 0.01), (9, 0.6, 2)])
    def test_loc_is_gamma(self, k, a, b):
        assert risk.marginal(NigState(0.37, k, a, b)).loc == 0.37

    @pytest.mark.parametrize("k,a,b", [(0, 1, 1), (1, -1, 1), (1, 1, 0)])
    def test_rejects_non_positive(self, k, a, b):
        with pytest.raises(ValidationError):
            risk.marginal(NigState(0.5, k, a, b))


class TestExactQuantile:
    def test_cauchy_closed_form(self):
        assert risk.t_quantile_exact(1.0, 0.25) == pytest.approx(-1.0, abs=1e-12)

    @pytest.mark.parametrize("dof", [0.5, 1, 3.3, 40, 1e4])
    def test_median_is_zero(self, dof):
        assert risk.t_quantile_exact(dof, 0.5) == 0.0

    def test_dof_two_closed_form(self):
        c = 0.1
        expect = (2 * c - 1) * math.sqrt(2 / (4 * c * (1 - c)))
        assert expect == pytest.approx(-1.8856, abs=1e-4)
        assert risk.t_quantile_exact(2.0, c) == pytest.approx(expect, abs=1e-12)

    @pytest.mark.parametrize("dof", [1.5, 2.5, 3.7, 7.5, 12.0, 39.9])
    @pytest.mark.parametrize("c", [0.01, 0.05, 0.1, 0.2])
    def test_against_mpmath(self, dof, c):
        assert abs(risk.t_quantile_exact(dof, c) - mp_t_quantile(dof, c)) < 1e-10

    def test_array_form_agrees(self, rng):
        d = rng.uniform(1.1, 50, 200)
        got = risk.t_quantile_exact_array(d, 0.05)
        assert np.max(np.abs(got - [risk.t_quantile_exact(x, 0.05) for x in d])) < 1e-12

    @pytest.mark.parametrize("c", [0.0, 1.0, -0.1, 1.5])
    def test_level_out_of_range(self, c):
        with pytest.raises(ValidationError):
            risk.t_quantile_exact(3.0, c)


class TestQuantileTable:
    @pytest.fixture(scope="class")
    @classmethod
    def table(cls):
        return risk.default_table()

    def test_knot_values_are_exact(self, table):
        for i, c in enumerate(table.levels):
            for d, v in zip(table.dof_knots, table.values[i]):
                assert abs(table.quantile(float(d), c) - v) < 1e-9
                assert abs(v - mp_t_quantile(float(d), c)) < 1e-9

    def test_knot_grid(self, table):
        assert table.dof_knots[0] == 2.5 and table.dof_knots[-1] == 40.0
        assert np.allclose(np.diff(table.dof_knots), 0.5)
        assert table.levels == (0.01, 0.05, 0.1, 0.2, 0.5)

    @pytest.mark.parametrize("dof,c", [(7.5, 0.1), (3.0, 0.05)])
    def test_examples_within_tolerance(self, table, dof, c):
        assert abs(risk.t_quantile_fast(table, dof, c) - mp_t_quantile(dof, c)) < 1e-3

    def test_dense_error_bound(self, table):
        from travnav.bench import quantile_error
        rep = quantile_error(table, dof_step=0.25)
        assert rep["max_abs_quantile_error"] < 1e-3

    def test_below_minimum_rejected(self, table):
        with pytest.raises(ValidationError):
            table.quantile(2.0, 0.1)

    def test_above_gaussian_switch_rejected(self, table):
        with pytest.raises(ValidationError):
            table.quantile(41.0, 0.1)

    def test_unknown_level_rejected(self, table):
        with pytest.raises(ValidationError):
            table.quantile(5.0, 0.3)

    def test_vectorized_equals_scalar(self, table, rng):
        d = rng.uniform(2.5, 40, 300)
        vec = table.quantile_array(d, 0.1)
        assert np.max(np.abs(vec - [table.quantile(x, 0.1) for x in d])) < 1e-12


class TestVarCvar:
    def test_gaussian_var_examples(self):
        g = risk.TMarginal(math.inf, 0.0, 1.0)
        assert risk.var(g, 0.5) == 0.0
        assert risk.var(g, 0.05) == pytest.approx(-1.6449, abs=1e-4)

    def test_var_t_branch(self):
        m = risk.TMarginal(5.0, 0.75, math.sqrt(0.6875))
        assert risk.var(m, 0.1) == pytest.approx(0.75 + math.sqrt(0.6875) * mp_t_quantile(5, 0.1), abs=1e-3)

    def test_gaussian_cvar_example(self):
        got = risk.cvar(risk.TMarginal(math.inf, 0.0, 1.0), 0.05)
        assert got == pytest.approx(-2.0627, abs=1e-4)
        assert got == pytest.approx(-stats.norm.pdf(stats.norm.ppf(0.05)) / 0.05, rel=1e-12)

    def test_monte_carlo_expected_shortfall(self):
        # 10^7 draws; the estimate must sit within 3 standard errors
        x = np.random.default_rng(7).standard_t(5, 10_000_000)
        q = np.quantile(x, 0.1)
        tail = x[x < q]
        se = tail.std(ddof=1) / math.sqrt(tail.size)
        got = risk.cvar(risk.TMarginal(5.0, 0.0, 1.0), 0.1)
        assert abs(got - tail.mean()) < 3 * se

    @pytest.mark.parametrize("dof", [1.5, 2.0, 3.0, 5.0, 11.25, 39.0])
    @pytest.mark.parametrize("c", [0.01, 0.05, 0.1, 0.2])
    def test_against_quadrature(self, dof, c):
        expect = integral_cvar(dof, 0.3, 0.7, c)
        assert risk.cvar(risk.TMarginal(dof, 0.3, 0.7), c) == pytest.approx(expect, abs=2e-3)
        assert risk.cvar_t_exact(risk.TMarginal(dof, 0.3, 0.7), c) == pytest.approx(expect, abs=1e-8)

    def test_dof_at_most_one_rejected(self):
        with pytest.raises(ValidationError):
            risk.cvar(risk.TMarginal(1.0, 0.0, 1.0), 0.1)

    def test_gaussian_switch_is_strictly_above_forty(self):
        m40 = risk.TMarginal(40.0, 0.0, 1.0)
        assert risk.cvar(m40, 0.1) == pytest.approx(risk.cvar_t_exact(m40, 0.1), abs=1e-3)
        m41 = risk.TMarginal(40.5, 0.0, 1.0)
        assert risk.cvar(m41, 0.1) == risk.cvar_gaussian(m41, 0.1)

    @pytest.mark.parametrize("dof", [40.5, 50.0, 120.0, 1000.0])
    @pytest.mark.parametrize("c", [0.01, 0.05, 0.1, 0.2])
    def test_gaussian_branch_tracks_t_tail(self, dof, c):
        # the corrected normal stays within 3e-4 relative of the t tail (quadrature oracle)
        m = risk.TMarginal(dof, 0.2, 0.3)
        expect = integral_cvar(dof, 0.2, 0.3, c)
        assert risk.cvar(m, c) == pytest.approx(expect, rel=3e-4)
        assert risk.var(m, c) == pytest.approx(0.2 + 0.3 * mp_t_quantile(dof, c), abs=5e-5)

    def test_gaussian_branch_at_infinity_is_normal(self):
        m = risk.TMarginal(math.inf, 0.2, 0.3)
        z = stats.norm.ppf(0.05)
        assert risk.cvar(m, 0.05) == pytest.approx(0.2 - 0.3 * stats.norm.pdf(z) / 0.05, rel=1e-14)
        assert risk.var(m, 0.05) == pytest.approx(0.2 + 0.3 * z, rel=1e-14)

    def test_gaussian_convergence(self):
        gaps = []
        for dof in (60, 100, 1000):
            m = risk.TMarginal(dof, 0.0, 1.0)
            g = risk.cvar_gaussian(m, 0.1)
            gaps.append(abs(risk.cvar_t_exact(m, 0.1) - g))
            if dof == 60:
                assert gaps[-1] / abs(g) < 0.01
        assert gaps[0] > gaps[1] > gaps[2]


class TestCellCvar:
    def test_prior_cell_constant(self):
        assert risk.cvar_for_cell(DEFAULT_PRIOR) == pytest.approx(PRIOR_CVAR, abs=1e-12)
        assert integral_cvar(2.0, 0.5, math.sqrt(2.0), 0.1) == pytest.approx(PRIOR_CVAR, abs=1e-8)

    def test_converges_just_below_sample_level(self, rng):
        xs = np.clip(0.9 + 0.01 * rng.standard_normal(50_000), 0, 1)
        vals = []
        for n in (10, 100, 1000, 50_000):
            post = nig_update_batch(DEFAULT_PRIOR, xs[:n])
            vals.append(risk.cvar_for_cell(post))
        assert all(v < 0.9 for v in vals)
        assert vals == sorted(vals) and vals[-1] > 0.85
        # Monte-Carlo check on the final posterior's t marginal
        m = risk.marginal(post)
        draws = m.loc + m.scale * np.random.default_rng(3).standard_t(m.dof, 4_000_000)
        tail = draws[draws < np.quantile(draws, 0.1)]
        assert abs(vals[-1] - tail.mean()) < 3 * tail.std() / math.sqrt(tail.size)

    def test_identical_cells_identical_cvar(self):
        s = NigState(0.61, 3.0, 2.5, 0.4)
        assert risk.cvar_for_cell(s) == risk.cvar_for_cell(NigState(0.61, 3.0, 2.5, 0.4))

    def test_arrays_match_scalar(self, rng):
        n = 400
        g = rng.uniform(0, 1, n)
        k = rng.uniform(0.5, 50, n)
        a = rng.uniform(0.6, 40, n)
        b = rng.uniform(0.01, 2, n)
        got = risk.cvar_arrays(g, k, a, b, 0.1)
        ref = [risk.cvar_for_cell(NigState(*v)) for v in zip(g, k, a, b)]
        assert np.max(np.abs(got - ref)) < 1e-9


marg_st = st.builds(risk.TMarginal, st.floats(1.5, 200.0), st.floats(-2.0, 2.0), st.floats(0.01, 3.0))


class TestProperties:
    @settings(max_examples=150, deadline=None)
    @given(marg_st, st.sampled_from([0.01, 0.05, 0.1, 0.2]))
    def test_cvar_below_var_below_loc(self, m, c):
        assert risk.cvar(m, c) <= risk.var(m, c) <= m.loc

    @settings(max_examples=100, deadline=None)
    @given(marg_st)
    def test_monotone_in_level(self, m):
        vals = [risk.cvar(m, c) for c in (0.01, 0.05, 0.1, 0.2, 0.5)]
        assert all(x <= y + 1e-9 for x, y in zip(vals, vals[1:]))

    @settings(max_examples=150, deadline=None)
    @given(marg_st, st.floats(-3, 3), st.floats(0.05, 5.0), st.sampled_from([0.05, 0.1]))
    def test_location_scale_equivariance(self, m, shift, k, c):
        base = risk.cvar(risk.TMarginal(m.dof, 0.0, 1.0), c)
        moved = risk.cvar(risk.TMarginal(m.dof, shift, k), c)
        assert moved == pytest.approx(shift + k * base, abs=1e-9 * (1 + abs(k * base)))
