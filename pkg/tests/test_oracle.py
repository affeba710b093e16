from __future__ import annotations

import numpy as np
import pytest

from sslab.dgp import ContextPoint, make_system
from sslab.errors import ArgumentError, DegeneracyError, DomainError
from sslab.oracle import (OracleSettings, PopulationOracle, RegularityRegion,
                          TwoContextCdfQuery, conditional_expectation_partial, marginal_cdf,
                          marginal_quantile, probe_regularity)

W = ContextPoint((1.0, 2.0), 10.0)
CD3 = make_system("CD3")
COPULA = make_system("CD3", law={"rho": 0.5})

# Frozen values from an independent conditional-sampling Monte Carlo of the
# Gaussian copula (10^6 draws per seed, seeds 1-3 and 20240611, written out in
# plain numpy/scipy): at w = (p=(1,2), x=10), Y_2 = 2.2 pins a_2 = 0.44.
MC_COND_CDF_Y1_3_GIVEN_Y2_22 = 0.3806
MC_COND_DENSITY_Y1_3_GIVEN_Y2_22 = 0.5506
MC_COND_MEDIAN_Y1_GIVEN_Y2_22 = 3.2075
MC_COND_MEDIAN_Y1_GIVEN_Y2_20 = 3.0008


@pytest.fixture(scope="module")
def oracle():
    return PopulationOracle(CD3)


@pytest.fixture(scope="module")
def copula():
    return PopulationOracle(COPULA)


# -- marginals ---------------------------------------------------------------

@pytest.mark.parametrize("y, want", [(3.0, 0.5), (2.0, 0.0), (4.0, 1.0), (3.5, 0.75),
                                     (1.0, 0.0), (5.0, 1.0)])
def test_marginal_cdf_uniform(oracle, y, want):
    assert oracle.marginal_cdf(W, 1, y) == pytest.approx(want, abs=1e-12)


def test_marginal_quantiles(oracle):
    assert oracle.marginal_quantile(W, 1, 0.5) == pytest.approx(3.0, abs=1e-9)
    assert oracle.marginal_quantile(W, 1, 0.25) == pytest.approx(2.5, abs=1e-9)


@pytest.mark.parametrize("alpha", [0.01, 0.1, 0.37, 0.5, 0.9, 0.99])
def test_marginal_round_trip(copula, alpha):
    for i in (1, 2):
        y = copula.marginal_quantile(W, i, alpha)
        assert copula.marginal_cdf(W, i, y) == pytest.approx(alpha, abs=1e-9)


def test_quantile_level_outside_unit_interval(oracle):
    with pytest.raises(ArgumentError):
        oracle.marginal_quantile(W, 1, 1.0)


def test_bad_good_index(oracle):
    with pytest.raises(ArgumentError):
        oracle.marginal_cdf(W, 3, 1.0)


def test_functional_wrappers_match_methods():
    assert marginal_cdf(CD3, W, 1, 3.5) == pytest.approx(0.75, abs=1e-12)
    assert marginal_quantile(CD3, W, 2, 0.5) == pytest.approx(2.0, abs=1e-9)


# -- two-context and conditional CDFs ----------------------------------------

def test_equal_contexts_reproduce_conditional(copula):
    for y1 in (2.6, 3.0, 3.4):
        assert copula.two_context_conditional_cdf(W, W, 1, 2, 2.2, y1) == \
            copula.conditional_cdf(W, 1, 2, 2.2, y1)


def test_independent_two_context_free_of_conditioning(oracle):
    other = ContextPoint((1.1, 1.8), 9.0)
    base = oracle.marginal_cdf(W, 1, 3.3)
    for w_cond in (W, other):
        for y2 in (1.7, 2.0, 2.3):
            val = oracle.two_context(TwoContextCdfQuery(CD3, W, w_cond, 1, 2, y2, 3.3))
            assert val == pytest.approx(base, abs=1e-12)


def test_copula_conditional_cdf_matches_monte_carlo(copula):
    val = copula.conditional_cdf(W, 1, 2, 2.2, 3.0)
    assert abs(val - MC_COND_CDF_Y1_3_GIVEN_Y2_22) <= 2e-3


def test_copula_monte_carlo_path_agrees_with_quadrature():
    mc = PopulationOracle(COPULA, OracleSettings(method="monte_carlo", seed=5))
    exact = PopulationOracle(COPULA).conditional_cdf(W, 1, 2, 2.2, 3.0)
    # window of 0.05 sd in Y_2 keeps ~4% of 10^6 draws: standard error ~ 0.0025
    assert abs(mc.conditional_cdf(W, 1, 2, 2.2, 3.0) - exact) <= 0.01


def test_copula_conditional_differs_from_marginal_off_median(copula):
    gap = abs(copula.conditional_cdf(W, 1, 2, 2.2, 3.0) - copula.marginal_cdf(W, 1, 3.0))
    assert gap > 0.01


def test_copula_conditional_equals_marginal_at_joint_median(copula):
    # both shares at their medians: the conditional latent mean is zero
    assert copula.conditional_cdf(W, 1, 2, 2.0, 3.0) == pytest.approx(0.5, abs=1e-12)


def test_independent_conditional_equals_marginal(oracle):
    for y2 in np.linspace(1.65, 2.35, 5):
        for y1 in np.linspace(2.1, 3.9, 7):
            assert oracle.conditional_cdf(W, 1, 2, y2, y1) == pytest.approx(
                oracle.marginal_cdf(W, 1, y1), abs=1e-12)


def test_conditional_cdf_monotone(copula):
    ys = np.linspace(1.5, 4.5, 100)
    vals = np.array([copula.conditional_cdf(W, 1, 2, 2.2, y) for y in ys])
    assert np.all(np.diff(vals) >= 0.0)
    assert vals[0] == 0.0 and vals[-1] == 1.0


def test_conditioning_outside_image(copula):
    with pytest.raises(DomainError):
        copula.conditional_cdf(W, 1, 2, 5.0, 3.0)


# -- densities ---------------------------------------------------------------

def test_independent_density_is_uniform(oracle):
    assert oracle.conditional_density(W, 1, 2, 2.0, 3.0) == pytest.approx(0.5, abs=1e-6)


def test_density_integrates_to_one(copula):
    ys = np.linspace(2.0 + 1e-6, 4.0 - 1e-6, 801)
    dens = np.array([copula.conditional_density(W, 1, 2, 2.2, y) if 2.01 < y < 3.99
                     else np.nan for y in ys])
    inner = np.isfinite(dens)
    mass = np.trapezoid(dens[inner], ys[inner])
    edge = 1.0 - (copula.conditional_cdf(W, 1, 2, 2.2, ys[inner][-1])
                  - copula.conditional_cdf(W, 1, 2, 2.2, ys[inner][0]))
    assert abs(mass + edge - 1.0) <= 1e-3


def test_copula_density_matches_kernel_monte_carlo(copula):
    val = copula.conditional_density(W, 1, 2, 2.2, 3.0)
    assert abs(val - MC_COND_DENSITY_Y1_3_GIVEN_Y2_22) <= 5e-3


def test_density_below_floor_raises(oracle):
    with pytest.raises(DegeneracyError):
        oracle.conditional_density(W, 1, 2, 2.0, 4.5)


# -- conditional quantiles ---------------------------------------------------

def test_independent_conditional_quantile_is_marginal(oracle):
    for gamma in (0.1, 0.5, 0.8):
        for y2 in (1.7, 2.2):
            assert oracle.conditional_quantile(W, 1, 2, y2, gamma) == pytest.approx(
                oracle.marginal_quantile(W, 1, gamma), abs=1e-9)


@pytest.mark.parametrize("gamma", [0.05, 0.3, 0.5, 0.77, 0.95])
def test_conditional_round_trip(copula, gamma):
    y = copula.conditional_quantile(W, 1, 2, 2.2, gamma)
    assert abs(copula.conditional_cdf(W, 1, 2, 2.2, y) - gamma) <= 1e-9


@pytest.mark.parametrize("y2, want", [(2.0, MC_COND_MEDIAN_Y1_GIVEN_Y2_20),
                                      (2.2, MC_COND_MEDIAN_Y1_GIVEN_Y2_22)])
def test_copula_conditional_median_matches_monte_carlo(copula, y2, want):
    assert abs(copula.conditional_quantile(W, 1, 2, y2, 0.5) - want) <= 2e-3


# -- structural conditional expectation --------------------------------------

@pytest.mark.parametrize("s, want", [(1, -3.0), (2, 0.0), (3, 0.3)])
def test_structural_partial_at_pinned_point(s, want):
    val = conditional_expectation_partial(CD3, W, s, 1, 2, 3.0, 2.0)
    assert val == pytest.approx(want, abs=1e-12)


def test_structural_partial_asym3_cross_price():
    asym = make_system("ASYM3", c=0.5)
    assert conditional_expectation_partial(asym, W, 2, 1, 2, 4.0, 2.0) == pytest.approx(0.5)


def test_structural_partial_rejects_bad_index():
    with pytest.raises(ArgumentError):
        conditional_expectation_partial(CD3, W, 4, 1, 2, 3.0, 2.0)


# -- regularity probes -------------------------------------------------------

def test_interior_region_passes():
    report = probe_regularity(CD3, RegularityRegion(contexts=(W,)))
    assert all(r.status == "pass" for r in report.values())
    assert report["density"].measured["min_density"] > 0.0


def test_boundary_region_warns_on_density():
    region = RegularityRegion(contexts=(W,), share_box=((0.2, 0.4), (0.3, 0.5)))
    assert probe_regularity(CD3, region)["density"].status == "warn"


def test_point_mass_fails_continuity():
    degenerate = make_system("CD3", law={"type": "point_mass", "point": [0.3, 0.4]})
    region = RegularityRegion(contexts=(W,), n_points=3)
    assert probe_regularity(degenerate, region)["continuity"].status == "fail"
