from __future__ import annotations

import numpy as np
import pytest

from sslab.dgp import ContextPoint, Design, make_system, simulate_cross_section, slutsky_asymmetry
from sslab.engine import (correction_C, correction_D, correction_terms, hicksian_gap_report,
                          lemma1_rhs, quantile_indices, symmetry_sides)
from sslab.errors import (ArgumentError, DomainError, ProviderInconsistencyError,
                          UnsupportedChannelError)
from sslab.estimators import KernelQuantileProvider
from sslab.harness import GridDesign, build_grid
from sslab.numdiff import FdScheme, fd_partial
from sslab.oracle import ChannelMode, PopulationOracle, conditional_expectation_partial

W = ContextPoint((1.0, 2.0), 10.0)
FROZEN, OBS, STABLE = ChannelMode.FROZEN, ChannelMode.OBSERVABLE, ChannelMode.STABLE_COMPOSITION

# Frozen-channel corrections for the Gaussian copula (rho = 0.5) at w = (p=(1,2),
# x=10), point (y1, y2) = (3.0, 2.2), pair (1|2).  Fixed by an independent
# two-context computation: 10^6-draw conditional sampling of the share at
# w_cond combined with central differences in w_cond, cross-checked against
# direct quadrature of the Gaussian conditional law.
COPULA_FROZEN_C = 0.0
COPULA_FROZEN_D_P2 = -1.26214
COPULA_FROZEN_DX = 0.25243


@pytest.fixture(scope="module")
def cd3():
    return PopulationOracle(make_system("CD3"))


@pytest.fixture(scope="module")
def copula():
    return PopulationOracle(make_system("CD3", law={"rho": 0.5}))


@pytest.fixture(scope="module")
def asym():
    return PopulationOracle(make_system("ASYM3", c=0.5))


# -- quantile indices --------------------------------------------------------

def test_indices_at_uniform_midpoints(cd3):
    idx = quantile_indices(cd3, W, 1, 2, 3.0, 2.0)
    for v in (idx.alpha_i, idx.alpha_j, idx.gamma_i_given_j, idx.gamma_j_given_i):
        assert v == pytest.approx(0.5, abs=1e-9)


def test_indices_at_quartile(cd3):
    assert quantile_indices(cd3, W, 1, 2, 2.5, 2.0).alpha_i == pytest.approx(0.25, abs=1e-9)


def test_copula_conditional_index_differs_from_marginal(copula):
    idx = quantile_indices(copula, W, 1, 2, 3.0, 2.2)
    assert idx.alpha_i == pytest.approx(0.5, abs=1e-9)
    assert abs(idx.gamma_i_given_j - 0.3806) <= 2e-3
    assert abs(idx.gamma_i_given_j - idx.alpha_i) > 0.1


def test_indices_outside_support(cd3):
    with pytest.raises(DomainError, match="outside the image"):
        quantile_indices(cd3, W, 1, 2, 4.5, 2.0)


class _ShiftedQuantiles:
    """Oracle whose marginal quantiles are biased: inverse identities fail."""

    def __init__(self, base, shift):
        self.base, self.shift = base, shift

    def __getattr__(self, name):
        return getattr(self.base, name)

    def marginal_quantile(self, w, i, alpha):
        return self.base.marginal_quantile(w, i, alpha) + self.shift


def test_indices_detect_inconsistent_provider(cd3):
    with pytest.raises(ProviderInconsistencyError, match="marginal quantile"):
        quantile_indices(_ShiftedQuantiles(cd3, 1e-3), W, 1, 2, 3.0, 2.0)
    quantile_indices(_ShiftedQuantiles(cd3, 1e-8), W, 1, 2, 3.0, 2.0)


def test_indices_need_distinct_goods(cd3):
    with pytest.raises(ArgumentError):
        quantile_indices(cd3, W, 1, 1, 3.0, 3.0)


# -- lemma expression --------------------------------------------------------

@pytest.mark.parametrize("s", [1, 2, 3])
def test_frozen_lemma_matches_structural_expectation(cd3, s):
    idx = quantile_indices(cd3, W, 1, 2, 3.0, 2.0)
    want = conditional_expectation_partial(cd3.system, W, s, 1, 2, 3.0, 2.0)
    assert abs(lemma1_rhs(cd3, W, s, 1, 2, idx, FROZEN) - want) <= 1e-3


def test_frozen_lemma_own_price_value(cd3):
    idx = quantile_indices(cd3, W, 1, 2, 3.0, 2.0)
    assert lemma1_rhs(cd3, W, 1, 1, 2, idx, FROZEN) == pytest.approx(-3.0, abs=1e-3)
    assert lemma1_rhs(cd3, W, 2, 1, 2, idx, FROZEN) == pytest.approx(0.0, abs=1e-3)


@pytest.mark.parametrize("name", ["cd3", "copula", "asym"])
@pytest.mark.parametrize("s", [1, 2, 3])
def test_observable_lemma_collapses(request, name, s):
    provider = request.getfixturevalue(name)
    y1 = 4.0 if name == "asym" else 3.0
    y2 = 2.2 if name == "copula" else 2.0
    idx = quantile_indices(provider, W, 1, 2, y1, y2)
    assert abs(lemma1_rhs(provider, W, s, 1, 2, idx, OBS)) <= 1e-6


def test_copula_frozen_lemma_matches_structural_expectation(copula):
    idx = quantile_indices(copula, W, 1, 2, 3.0, 2.2)
    for s in (1, 2, 3):
        want = conditional_expectation_partial(copula.system, W, s, 1, 2, 3.0, 2.2)
        assert abs(lemma1_rhs(copula, W, s, 1, 2, idx, FROZEN) - want) <= 2e-3


# -- corrections -------------------------------------------------------------

def test_independent_frozen_corrections_vanish(cd3):
    idx = quantile_indices(cd3, W, 1, 2, 3.0, 2.0)
    assert abs(correction_C(cd3, W, 1, 2, idx, FROZEN)) <= 1e-3
    D, Dx = correction_D(cd3, W, 1, 2, idx, FROZEN)
    assert np.all(np.abs(D) <= 1e-3) and abs(Dx) <= 1e-3


def test_observable_C_vanishes(copula):
    idx = quantile_indices(copula, W, 1, 2, 3.0, 2.2)
    assert abs(correction_C(copula, W, 1, 2, idx, OBS)) <= 1e-6


def test_observable_D_is_minus_quantile_gradient(copula):
    idx = quantile_indices(copula, W, 1, 2, 3.0, 2.2)
    D, Dx = correction_D(copula, W, 1, 2, idx, OBS)
    gamma = idx.gamma_i_given_j
    scheme = FdScheme(h=1e-4, relative=False)

    def k(w):
        return copula.conditional_quantile(w, 1, 2, 2.2, gamma)

    grad = [fd_partial(k, W, c, scheme) for c in ("p1", "p2", "x")]
    np.testing.assert_allclose(D, [-grad[0], -grad[1]], atol=1e-6)
    assert Dx == pytest.approx(-grad[2], abs=1e-6)


def test_copula_frozen_corrections_match_two_context_oracle(copula):
    idx = quantile_indices(copula, W, 1, 2, 3.0, 2.2)
    terms = correction_terms(copula, W, 1, 2, idx, FROZEN)
    # the frozen conditioning-value derivative cancels the observable quantile
    # slope exactly for this law, so C is zero rather than material
    assert abs(terms.C - COPULA_FROZEN_C) <= 1e-3
    assert abs(terms.D[1] - COPULA_FROZEN_D_P2) <= 2e-3
    assert abs(terms.Dx - COPULA_FROZEN_DX) <= 2e-3
    assert terms.D[0] == pytest.approx(0.0, abs=1e-3)


def test_stable_composition_drops_frozen_pieces(copula):
    idx = quantile_indices(copula, W, 1, 2, 3.0, 2.2)
    terms = correction_terms(copula, W, 1, 2, idx, STABLE)
    assert np.all(np.asarray(terms.D) == 0.0) and terms.Dx == 0.0


# -- symmetry sides ----------------------------------------------------------

def test_cd3_frozen_residual_zero(cd3):
    res = symmetry_sides(cd3, W, 1, 2, quantile_indices(cd3, W, 1, 2, 3.0, 2.0), FROZEN)
    assert abs(res.residual) <= 2e-3
    assert res.residual == res.lhs - res.rhs


def test_copula_frozen_residual_zero(copula):
    res = symmetry_sides(copula, W, 1, 2, quantile_indices(copula, W, 1, 2, 3.0, 2.2), FROZEN)
    assert abs(res.residual) <= 2e-3


def test_asym3_frozen_residual_equals_asymmetry(asym):
    # a = (0.3, 0.4) at p = (1, 2), x = 10 gives y = (4.0, 2.0)
    res = symmetry_sides(asym, W, 1, 2, quantile_indices(asym, W, 1, 2, 4.0, 2.0), FROZEN)
    want = slutsky_asymmetry(asym.system, (W.p, W.x), (), (0.3, 0.4), 1, 2)
    assert want == pytest.approx(0.3, abs=1e-12)
    assert abs(res.residual - want) <= 5e-3


@pytest.mark.parametrize("name, y1, y2", [("cd3", 3.0, 2.0), ("copula", 3.0, 2.2),
                                          ("asym", 4.0, 2.0)])
def test_observable_sides_vanish(request, name, y1, y2):
    provider = request.getfixturevalue(name)
    res = symmetry_sides(provider, W, 1, 2, quantile_indices(provider, W, 1, 2, y1, y2), OBS)
    assert abs(res.lhs) <= 1e-6 and abs(res.rhs) <= 1e-6


def test_residual_antisymmetric(copula):
    idx = quantile_indices(copula, W, 1, 2, 3.0, 2.2)
    ab = symmetry_sides(copula, W, 1, 2, idx, FROZEN)
    ba = symmetry_sides(copula, W, 2, 1, quantile_indices(copula, W, 2, 1, 2.2, 3.0), FROZEN)
    assert ab.residual == -ba.residual


def test_stable_matches_frozen_for_independent_shares(cd3):
    idx = quantile_indices(cd3, W, 1, 2, 2.7, 2.1)
    frozen = symmetry_sides(cd3, W, 1, 2, idx, FROZEN).residual
    stable = symmetry_sides(cd3, W, 1, 2, idx, STABLE).residual
    assert abs(frozen - stable) <= 2e-3


def test_symmetry_needs_distinct_goods(cd3):
    idx = quantile_indices(cd3, W, 1, 2, 3.0, 2.0)
    with pytest.raises(ArgumentError):
        symmetry_sides(cd3, W, 1, 1, idx, FROZEN)


# -- gap report --------------------------------------------------------------

def test_gap_report_independent_is_small(cd3):
    grid = build_grid(cd3, GridDesign())
    report = hicksian_gap_report(cd3, grid, FROZEN)
    assert len(report["rows"]) == 9
    for row in report["rows"]:
        assert row["error"] is None
        assert max(row["abs_C"], row["norm_D"], row["abs_Dx"]) <= 2e-3
        assert not row["material"]


def test_gap_report_copula_is_material(copula):
    report = hicksian_gap_report(copula, build_grid(copula, GridDesign()), FROZEN)
    assert report["summary"]["norm_D"]["max"] > 0.01


def test_gap_report_empty_grid(cd3):
    report = hicksian_gap_report(cd3, [], FROZEN)
    assert report["rows"] == [] and report["summary"]["abs_C"] is None


def test_gap_report_records_failures(cd3):
    report = hicksian_gap_report(cd3, [(W, 1, 2, 4.5, 2.0), (W, 1, 2, 3.0, 2.0)], FROZEN)
    assert report["rows"][0]["error"].startswith("DomainError")
    assert report["rows"][1]["error"] is None


# -- estimator provider ------------------------------------------------------

def test_estimator_provider_refuses_frozen_channel():
    data = simulate_cross_section(make_system("CD3"), Design(), 100_000, seed=1)
    provider = KernelQuantileProvider(data, scale={"p": 7, "x": 4})
    idx = quantile_indices(provider, W, 1, 2, 3.0, 2.0)
    with pytest.raises(UnsupportedChannelError):
        correction_terms(provider, W, 1, 2, idx, FROZEN)
    res = symmetry_sides(provider, W, 1, 2, idx, OBS)
    # estimator noise bound for the collapse: FD of curves smoothed on the same
    # sample cancels up to grid interpolation
    assert abs(res.lhs) <= 0.05 and abs(res.rhs) <= 0.05
