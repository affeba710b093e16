from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sslab.dgp import ContextPoint, Design, SimulatedDataset, make_system, simulate_cross_section
from sslab.errors import (ArgumentError, DegeneracyError, ExtrapolationError,
                          SparseRegionError, UnsupportedChannelError)
from sslab.estimators import (BandwidthProfile, CurveOnGrid, EstimationTarget,
                              KernelQuantileProvider, _curve_values, _curve_values_direct,
                              biweight, biweight_cdf, estimate_conditional_cdf,
                              estimate_conditional_density, estimate_partial, invert_cdf,
                              kernel_weights, monotone_rearrange, rule_of_thumb,
                              select_bandwidths)

W = ContextPoint((1.0, 2.0), 10.0)
# per-coordinate multipliers of the rule-of-thumb bandwidth; the plain rule
# leaves fewer than 50 effective observations at these sample sizes
SCALE = {"p": 7, "x": 4}


@pytest.fixture(scope="module")
def cd3_1e5():
    return simulate_cross_section(make_system("CD3"), Design(), 100_000, seed=1)


@pytest.fixture(scope="module")
def provider(cd3_1e5):
    return KernelQuantileProvider(cd3_1e5, scale=SCALE)


def tiny_dataset(y1, p=(1.0, 2.0), x=10.0, v=None):
    n = len(y1)
    y = np.column_stack([np.asarray(y1, float), np.full(n, 0.1)])
    return SimulatedDataset(y=y, p=np.tile(p, (n, 1)), x=np.full(n, x), q=np.zeros((n, 0)),
                            s=np.zeros(n), v_true=np.zeros(n), v_hat=v)


# -- kernel ------------------------------------------------------------------

def test_biweight_integrates_to_one_and_cdf_is_its_integral():
    u = np.linspace(-1.2, 1.2, 24001)
    assert np.trapezoid(biweight(u), u) == pytest.approx(1.0, abs=1e-8)
    assert biweight_cdf(-1.0) == pytest.approx(0.0, abs=1e-15)
    assert biweight_cdf(1.0) == pytest.approx(1.0, abs=1e-15)
    mid = 0.5 * (u[1:] + u[:-1])
    numeric = np.cumsum(biweight(mid) * np.diff(u))
    np.testing.assert_allclose(biweight_cdf(u[1:]), numeric, atol=1e-6)


# -- bandwidths --------------------------------------------------------------

def test_rule_of_thumb_standard_normal():
    assert rule_of_thumb(1.0, 10_000, 1) == pytest.approx(1.06 * 10_000 ** -0.2, rel=1e-12)
    assert rule_of_thumb(1.0, 10_000, 1) == pytest.approx(0.168, abs=5e-4)


def test_select_bandwidths_on_standard_normal_column():
    v = np.random.default_rng(0).standard_normal(10_000)
    data = tiny_dataset(np.full(10_000, 3.0), v=v)
    prof = select_bandwidths(data, ["v"])
    assert prof.conditioning["v"] == pytest.approx(1.06 * np.std(v, ddof=1) * 10_000 ** -0.2)
    assert prof.conditioning["v"] == pytest.approx(0.168, abs=0.005)


def test_constant_coordinate_is_degenerate():
    data = tiny_dataset(np.linspace(2, 4, 50))
    with pytest.raises(DegeneracyError):
        select_bandwidths(data, ["x"])


def test_doubling_n_shrinks_bandwidths(cd3_1e5):
    half = cd3_1e5.take(np.arange(50_000))
    names = ["p1", "p2", "x"]
    big = select_bandwidths(cd3_1e5, names)
    small = select_bandwidths(half, names)
    for name in names:
        sd_ratio = np.std(cd3_1e5.column(name), ddof=1) / np.std(half.column(name), ddof=1)
        ratio = big.conditioning[name] / small.conditioning[name] / sd_ratio
        assert ratio == pytest.approx(2 ** (-1 / (4 + 3)), rel=1e-12)


def test_overrides_and_scales(cd3_1e5):
    prof = select_bandwidths(cd3_1e5, ["p1", "x"], outcome="y1", scale={"p": 2.0},
                             overrides={"x": 0.5, "outcome": 0.1})
    base = select_bandwidths(cd3_1e5, ["p1", "x"])
    assert prof.conditioning["x"] == 0.5 and prof.outcome == 0.1
    assert prof.conditioning["p1"] == pytest.approx(2.0 * base.conditioning["p1"])


def test_bandwidth_profile_validation():
    with pytest.raises(ArgumentError):
        BandwidthProfile({"x": 0.0}, 1.0)
    prof = BandwidthProfile({"x": 0.3, "p1": 0.1}, 0.2)
    assert BandwidthProfile.from_dict(prof.to_dict()) == prof


# -- conditional CDF ---------------------------------------------------------

def test_single_row_curve_is_a_smoothed_step():
    data = tiny_dataset([5.0])
    bw = BandwidthProfile({"p1": 1.0, "p2": 1.0, "x": 1.0}, 0.5)
    grid = np.linspace(0.0, 10.0, 101)
    curve = estimate_conditional_cdf(data, W, 1, grid=grid, bandwidths=bw, min_effective=1)
    assert np.all(curve.values[grid <= 4.5] == 0.0)
    assert np.all(curve.values[grid >= 5.5] == 1.0)
    assert curve.values[50] == pytest.approx(0.5)


def test_weights_normalise_to_one(cd3_1e5, provider):
    rows, k = kernel_weights(cd3_1e5, {"p1": 1.0, "p2": 2.0, "x": 10.0}, provider.profile(1))
    w = k / k.sum()
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(k > 0)


def test_marginal_cdf_near_population_value(provider):
    assert abs(provider.marginal_cdf(W, 1, 3.0) - 0.5) <= 0.02


def test_sparse_region_raises(cd3_1e5):
    with pytest.raises(SparseRegionError):
        estimate_conditional_cdf(cd3_1e5, W, 1)


def test_curve_moments_match_brute_force():
    rng = np.random.default_rng(3)
    y = np.sort(rng.uniform(2.0, 4.0, 3000))
    weights = rng.uniform(0.0, 1.0, (3, 3000))
    grid = np.linspace(1.8, 4.2, 401)
    for h in (0.02, 0.05, 0.3):
        fast = _curve_values(y, weights, grid, h, presorted=True)
        slow = _curve_values_direct(y, weights, grid, h)
        np.testing.assert_allclose(fast, slow, atol=1e-10 * weights.sum(axis=1).max())
        cols = np.array([0, 17, 200, 399])
        np.testing.assert_allclose(_curve_values(y, weights, grid, h, columns=cols),
                                   _curve_values_direct(y, weights, grid, h, columns=cols),
                                   atol=1e-10 * weights.sum(axis=1).max())


# -- rearrangement and inversion ---------------------------------------------

def test_rearrange_sorts():
    curve = CurveOnGrid(np.arange(4.0), np.array([0.2, 0.5, 0.4, 0.9]))
    np.testing.assert_array_equal(monotone_rearrange(curve).values, [0.2, 0.4, 0.5, 0.9])


def test_rearrange_idempotent_on_monotone_input():
    curve = CurveOnGrid(np.arange(3.0), np.array([0.1, 0.3, 0.8]))
    out = monotone_rearrange(curve)
    np.testing.assert_array_equal(out.values, curve.values)
    np.testing.assert_array_equal(out.grid, curve.grid)


def test_rearrange_clips():
    curve = CurveOnGrid(np.array([0.0, 1.0]), np.array([-0.1, 1.2]))
    np.testing.assert_array_equal(monotone_rearrange(curve).values, [0.0, 1.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-0.5, 1.5), min_size=2, max_size=60))
def test_rearranged_curves_are_monotone_cdfs(values):
    curve = CurveOnGrid(np.arange(float(len(values))), np.array(values))
    out = monotone_rearrange(curve).values
    assert np.all(np.diff(out) >= 0.0)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_invert_identity():
    g = np.linspace(0.0, 1.0, 11)
    assert invert_cdf(CurveOnGrid(g, g.copy()), 0.3) == pytest.approx(0.3, abs=1e-15)


def test_invert_flat_segment_takes_left_end():
    curve = CurveOnGrid(np.array([1.0, 2.0, 3.0, 4.0]), np.array([0.0, 0.5, 0.5, 1.0]))
    assert invert_cdf(curve, 0.5) == 2.0


def test_invert_round_trip_within_one_cell():
    grid = np.linspace(0.0, 2.0, 41)
    values = (grid / 2.0) ** 2
    curve = CurveOnGrid(grid, values)
    cell = grid[1] - grid[0]
    for level in np.linspace(0.01, 0.99, 25):
        assert abs(invert_cdf(curve, level) - 2.0 * np.sqrt(level)) <= cell


def test_invert_outside_range_raises():
    curve = CurveOnGrid(np.array([0.0, 1.0]), np.array([0.2, 0.8]))
    with pytest.raises(ExtrapolationError):
        invert_cdf(curve, 0.9)


def test_curve_grid_must_increase():
    with pytest.raises(ArgumentError):
        CurveOnGrid(np.array([0.0, 0.0, 1.0]), np.array([0.1, 0.2, 0.3]))


# -- density -----------------------------------------------------------------

def test_density_near_population_value(cd3_1e5, provider):
    est = estimate_conditional_density(cd3_1e5, W, 1, None, 3.0, provider.profile(1))
    assert abs(est.value - 0.5) <= 0.05
    assert not est.floored


def test_density_nonnegative_and_integrates(cd3_1e5, provider):
    ys = np.linspace(1.5, 4.5, 301)
    vals = np.array([estimate_conditional_density(cd3_1e5, W, 1, None, y,
                                                  provider.profile(1)).raw for y in ys])
    assert np.all(vals >= 0.0)
    assert abs(np.trapezoid(vals, ys) - 1.0) <= 0.05


def test_density_floor_flag(cd3_1e5, provider):
    est = estimate_conditional_density(cd3_1e5, W, 1, None, 6.0, provider.profile(1))
    assert est.floored and est.value == 1e-3 and est.raw == 0.0


# -- partial derivatives -----------------------------------------------------

def test_partial_of_constant_in_coordinate_is_small(cd3_1e5, provider):
    target = EstimationTarget("marginal_quantile", 1, 0.5)
    d = estimate_partial(cd3_1e5, target, W, "p2", provider=provider)
    # noise bound: a central difference over 0.5 bandwidths of a quantile with
    # standard error ~0.01 has standard error ~0.01 / (0.25 * 0.33) ~ 0.12
    print(f"d/dp2 k_0.5,1 = {d:+.4f} (population value 0)")
    assert abs(d) <= 0.36


def test_partial_income(cd3_1e5, provider):
    target = EstimationTarget("marginal_quantile", 1, 0.5)
    assert abs(estimate_partial(cd3_1e5, target, W, "x", provider=provider) - 0.3) <= 0.05


def test_estimation_target_validation():
    with pytest.raises(ArgumentError):
        EstimationTarget("conditional_cdf", 1, 3.0)
    with pytest.raises(ArgumentError):
        EstimationTarget("mode", 1, 3.0)


# -- provider ----------------------------------------------------------------

def test_provider_round_trips(provider):
    # quantiles invert the rearranged grid curve: at most one grid cell off
    cell = float(np.diff(provider.grid(1))[0])
    for level in (0.3, 0.5, 0.7):
        y = provider.marginal_quantile(W, 1, level)
        curve = monotone_rearrange(provider.conditional_curve(W, 1))
        assert abs(y - invert_cdf(curve, level)) <= 1e-12
        assert abs(provider.marginal_quantile(W, 1, provider.marginal_cdf(W, 1, y)) - y) <= cell
        assert abs(provider.marginal_cdf(W, 1, y) - level) <= 0.02
        y2 = provider.marginal_quantile(W, 2, level)
        g = provider.conditional_quantile(W, 1, 2, y2, level)
        assert abs(provider.conditional_cdf(W, 1, 2, y2, g) - level) <= 0.02


def test_provider_curves_monotone(provider):
    curve = monotone_rearrange(provider.conditional_curve(W, 1, 2, 2.0))
    assert np.all(np.diff(curve.values) >= 0.0)
    assert curve.values.min() >= 0.0 and curve.values.max() <= 1.0


def test_provider_has_no_frozen_channel(provider):
    with pytest.raises(UnsupportedChannelError):
        provider.two_context_conditional_cdf(W, W, 1, 2, 2.0, 3.0)


def test_replicate_with_unit_counts_matches_base(cd3_1e5, provider):
    counts = np.ones((2, cd3_1e5.n), dtype=np.uint16)
    rep = provider.replicate(counts)
    vals = rep.conditional_quantile(W, 1, 2, 2.0, 0.4)
    base = provider.conditional_quantile(W, 1, 2, 2.0, 0.4)
    np.testing.assert_allclose(vals, base, rtol=0, atol=1e-9)


def test_replicate_matches_explicit_resample(cd3_1e5, provider):
    rng = np.random.default_rng(4)
    counts = rng.multinomial(cd3_1e5.n, np.full(cd3_1e5.n, 1.0 / cd3_1e5.n))[None, :]
    rep = provider.replicate(counts.astype(np.uint16))
    resampled = cd3_1e5.take(np.repeat(np.arange(cd3_1e5.n), counts[0]))
    fixed = KernelQuantileProvider(resampled, scale=SCALE,
                                   overrides={**provider.profile(1, 2).conditioning,
                                              "outcome": provider.profile(1, 2).outcome})
    a = float(rep.conditional_cdf(W, 1, 2, 2.0, 3.1)[0])
    b = float(fixed.conditional_cdf(W, 1, 2, 2.0, 3.1))
    assert a == pytest.approx(b, abs=1e-6)


def test_partial_is_linear_in_the_target(cd3_1e5, provider):
    base = EstimationTarget("conditional_cdf", 1, 2.8, j=2, y_j=2.1)
    scaled = EstimationTarget("conditional_cdf", 1, 2.8, j=2, y_j=2.1, multiplier=-2.5)
    for coord in ("p1", "x", "y2"):
        d = estimate_partial(cd3_1e5, base, W, coord, provider=provider)
        assert estimate_partial(cd3_1e5, scaled, W, coord, provider=provider) == \
            pytest.approx(-2.5 * d, rel=1e-13, abs=1e-15)


@pytest.mark.slow
def test_cdf_error_shrinks_with_sample_size():
    from sslab.harness import GridDesign, build_grid
    from sslab.oracle import PopulationOracle

    system = make_system("CD3")
    oracle = PopulationOracle(system)
    points = list(build_grid(oracle, GridDesign()))
    # wide enough that every context keeps 50 effective observations at n = 1000
    scale = {"p": 10, "x": 6}
    medians = []
    for n in (1_000, 10_000, 100_000):
        errors = []
        for seed in range(100, 105):
            prov = KernelQuantileProvider(simulate_cross_section(system, Design(), n, seed),
                                          scale=scale)
            errors.append(max(abs(prov.conditional_cdf(p.w, 1, 2, p.y_j, p.y_i)
                                  - oracle.conditional_cdf(p.w, 1, 2, p.y_j, p.y_i))
                              for p in points))
        medians.append(float(np.median(errors)))
    print("median max CDF error by n:", medians)
    assert medians[0] >= medians[1] >= medians[2]
