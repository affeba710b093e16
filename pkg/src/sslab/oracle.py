"""Population (infinite-sample) quantile objects of a known demand system.

Every quantity here integrates over the known law of the heterogeneity
``A`` given ``Z``.  When the system's demands are monotone in their own
shares the integrals are exact closed forms built on the share CDFs;
otherwise a common-random-number Monte Carlo with kernel-smoothed
conditioning is used and the result is flagged as approximate.

The central object is the two-context conditional CDF

    G(w_struct, w_cond; y_i | y_j) = P(phi_i(w_struct, A) <= y_i | phi_j(w_cond, A) = y_j),

which separates the structural function from the conditioning event.  With
``w_struct == w_cond`` it is the observable conditional CDF.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as _rng
from .dgp import ContextPoint, DemandSystem, derivative_coordinate
from .errors import (ArgumentError, BracketError, DegeneracyError, DomainError,
                     StateError)
from .numdiff import FdScheme, fd_partial


class ChannelMode(str, enum.Enum):
    """Which dependence path a conditional-CDF derivative traverses.

    OBSERVABLE
        Full derivative of the observable conditional CDF.
    FROZEN
        Derivative through the conditioning level set only, with the
        structural function held at the base context.
    STABLE_COMPOSITION
        Frozen conditioning-channel derivatives assumed to be zero.
    """

    OBSERVABLE = "Observable"
    FROZEN = "Frozen"
    STABLE_COMPOSITION = "StableComposition"


ALL_CHANNELS = (ChannelMode.OBSERVABLE, ChannelMode.FROZEN, ChannelMode.STABLE_COMPOSITION)


def _biweight(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) < 1.0, 15.0 / 16.0 * (1.0 - u * u) ** 2, 0.0)


def _biweight_cdf(u):
    u = np.clip(np.asarray(u, dtype=float), -1.0, 1.0)
    return 0.5 + 15.0 / 16.0 * (u - 2.0 * u ** 3 / 3.0 + u ** 5 / 5.0)


@dataclass(frozen=True)
class OracleSettings:
    """Integration and differentiation settings of the population oracle."""

    method: str = "auto"            # "auto" (closed form when possible) or "monte_carlo"
    mc_draws: int = 1_000_000
    seed: int = 0
    cond_bandwidth: float = 0.05    # conditioning bandwidth, in units of std(Y_j)
    outcome_bandwidth: float = 0.01  # outcome smoothing for Monte Carlo CDFs, std units
    c_min: float = 1e-3
    scheme: FdScheme = field(default_factory=FdScheme)
    bracket_margin: float = 0.1

    def __post_init__(self):
        if self.method not in ("auto", "monte_carlo"):
            raise ArgumentError(f"unknown integration method {self.method!r}")
        if self.mc_draws < 1:
            raise ArgumentError("mc_draws must be positive")


@dataclass(frozen=True)
class TwoContextCdfQuery:
    """Mixed conditional CDF with separate structural and conditioning contexts."""

    system: DemandSystem
    w_struct: ContextPoint
    w_cond: ContextPoint
    i: int
    j: int
    y_j: float
    y_i: float

    def __post_init__(self):
        if self.i == self.j:
            raise ArgumentError("two-context query needs distinct goods")


def bisect_increasing(func, target: float, lo: float, hi: float) -> float:
    """Left-most root of ``func(y) = target`` for nondecreasing ``func``.

    Bisects until the bracket cannot be halved in floating point, which is
    well below the 1e-10 tolerance the quantile contract promises.
    """
    f_lo, f_hi = func(lo), func(hi)
    if not (f_lo < target <= f_hi):
        raise BracketError(f"level {target} not bracketed: F({lo})={f_lo}, F({hi})={f_hi}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            break
        if func(mid) < target:
            lo = mid
        else:
            hi = mid
    return hi


class PopulationOracle:
    """Exact :class:`~sslab.engine.QuantileProvider` for a known system."""

    supports_frozen = True
    roundtrip_tol = 1e-6

    def __init__(self, system: DemandSystem, settings: OracleSettings | None = None):
        self.system = system
        self.settings = settings or OracleSettings()
        self.c_min = self.settings.c_min
        self._draws = None
        self._shares_cache: dict = {}

    # --- provider plumbing -------------------------------------------------
    def fd_scheme(self, coordinate: str, i: int | None = None, j: int | None = None) -> FdScheme:
        return self.settings.scheme

    @property
    def closed_form(self) -> bool:
        return (self.settings.method == "auto" and all(self.system.monotone)
                and hasattr(self.system.law, "cdf"))

    def is_approximate(self) -> bool:
        return not self.closed_form

    def _check_good(self, *goods):
        for g in goods:
            if not 1 <= g <= self.system.n_inside:
                raise ArgumentError(f"good index {g} outside 1..{self.system.n_inside}")

    def _check_context(self, w: ContextPoint):
        if w.n_goods != self.system.n_inside:
            raise DomainError(f"context has {w.n_goods} prices, system has {self.system.n_inside}")

    # --- Monte Carlo machinery ---------------------------------------------
    def _shares(self, v):
        key = None if v is None else float(v)
        if key not in self._shares_cache:
            if self._draws is None:
                gen = _rng.stream(self.settings.seed, _rng.STREAM_ORACLE)
                self._draws = gen.standard_normal((self.settings.mc_draws, 2))
            self._shares_cache[key] = self.system.law.transform(self._draws, v)
        return self._shares_cache[key]

    def _mc_demand(self, w: ContextPoint) -> np.ndarray:
        return self.system._demand(np.asarray(w.p), w.x, self._shares(w.v))

    def _mc_outcome_bw(self, w: ContextPoint, good: int, ys: np.ndarray) -> float:
        return max(self.settings.outcome_bandwidth * float(np.std(ys[:, good - 1])), 1e-12)

    # --- marginal objects --------------------------------------------------
    def marginal_cdf(self, w: ContextPoint, i: int, y: float) -> float:
        """``P(Y_i <= y | W = w)``."""
        self._check_good(i)
        self._check_context(w)
        if self.closed_form:
            share = self.system.share_from_demand(w, i, y)
            return self.system.law.cdf(i - 1, share, w.v)
        ys = self._mc_demand(w)
        h = self._mc_outcome_bw(w, i, ys)
        return float(np.mean(_biweight_cdf((y - ys[:, i - 1]) / h)))

    def bracket(self, w: ContextPoint, i: int) -> tuple:
        if self.closed_form:
            lo, hi = self.system.image(w, i)
        else:
            col = self._mc_demand(w)[:, i - 1]
            lo, hi = float(col.min()), float(col.max())
        pad = self.settings.bracket_margin * max(hi - lo, 1e-12)
        return lo - pad, hi + pad

    def marginal_quantile(self, w: ContextPoint, i: int, alpha: float) -> float:
        """``k_{alpha,i}(w)`` by bisection on :meth:`marginal_cdf`."""
        if not 0.0 < alpha < 1.0:
            raise ArgumentError(f"quantile level {alpha} outside (0, 1)")
        lo, hi = self.bracket(w, i)
        return bisect_increasing(lambda y: self.marginal_cdf(w, i, y), alpha, lo, hi)

    def marginal_density(self, w: ContextPoint, i: int, y: float) -> float:
        return fd_partial(lambda t: self.marginal_cdf(w, i, t), y, None, self.settings.scheme)

    # --- conditional objects -----------------------------------------------
    def two_context_conditional_cdf(self, w_struct: ContextPoint, w_cond: ContextPoint,
                                    i: int, j: int, y_j: float, y_i: float) -> float:
        """``P(phi_i(w_struct, A) <= y_i | phi_j(w_cond, A) = y_j, Z = z)``."""
        if i == j:
            raise ArgumentError("conditional objects need two distinct goods")
        self._check_good(i, j)
        self._check_context(w_struct)
        self._check_context(w_cond)
        if w_struct.v != w_cond.v or w_struct.q != w_cond.q:
            raise DomainError("structural and conditioning contexts must share z = (q, v)")
        if self.closed_form:
            a_j = self.system.share_from_demand(w_cond, j, y_j)
            lo, hi = self.system.share_bounds[j - 1]
            if not lo < a_j < hi:
                raise DomainError(f"conditioning value y{j}={y_j} outside the image of good {j} "
                                  f"at the conditioning context")
            a_i = self.system.share_from_demand(w_struct, i, y_i)
            return self.system.law.conditional_cdf(i - 1, a_i, j - 1, a_j, w_cond.v)
        ys_c = self._mc_demand(w_cond)
        ys_s = self._mc_demand(w_struct) if w_struct != w_cond else ys_c
        col_j = ys_c[:, j - 1]
        b = max(self.settings.cond_bandwidth * float(np.std(col_j)), 1e-12)
        weights = _biweight((col_j - y_j) / b)
        total = float(weights.sum())
        if total <= 0.0:
            raise DomainError(f"conditioning value y{j}={y_j} outside the simulated image")
        h = self._mc_outcome_bw(w_struct, i, ys_s)
        return float(weights @ _biweight_cdf((y_i - ys_s[:, i - 1]) / h) / total)

    def two_context(self, query: TwoContextCdfQuery) -> float:
        return self.two_context_conditional_cdf(query.w_struct, query.w_cond, query.i,
                                                query.j, query.y_j, query.y_i)

    def conditional_cdf(self, w: ContextPoint, i: int, j: int, y_j: float, y_i: float) -> float:
        """``P(Y_i <= y_i | W = w, Y_j = y_j)``."""
        return self.two_context_conditional_cdf(w, w, i, j, y_j, y_i)

    def conditional_density(self, w: ContextPoint, i: int, j: int, y_j: float,
                            y_i: float) -> float:
        """Density of ``Y_i`` given ``(W, Y_j)``; raises below the floor ``c_min``."""
        dens = fd_partial(lambda t: self.conditional_cdf(w, i, j, y_j, t), y_i, None,
                          self.settings.scheme)
        if not dens >= self.c_min:
            raise DegeneracyError(f"conditional density {dens:.3g} of Y{i} | Y{j}={y_j} at "
                                  f"y{i}={y_i} is below the floor {self.c_min}")
        return dens

    def conditional_quantile(self, w: ContextPoint, i: int, j: int, y_j: float,
                             gamma: float) -> float:
        """``k_{gamma,i}(w, y_j)`` by bisection on :meth:`conditional_cdf`."""
        if not 0.0 < gamma < 1.0:
            raise ArgumentError(f"quantile level {gamma} outside (0, 1)")
        lo, hi = self.bracket(w, i)
        return bisect_increasing(lambda y: self.conditional_cdf(w, i, j, y_j, y), gamma, lo, hi)

    # --- structural side ---------------------------------------------------
    def conditional_expectation_partial(self, w: ContextPoint, s: int, i: int, j: int,
                                        y_i: float, y_j: float) -> float:
        """``E[d phi_i / d w_s | W = w, Y_i = y_i, Y_j = y_j]``.

        ``s`` runs over ``1..L``: prices first, income last.
        """
        if i == j:
            raise ArgumentError("conditional expectation needs two distinct goods")
        self._check_good(i, j)
        coord = derivative_coordinate(s, self.system.n_inside)
        if self.closed_form and self.system.invertible:
            y = np.zeros(self.system.n_inside)
            y[i - 1], y[j - 1] = y_i, y_j
            if self.system.n_inside != 2:
                raise StateError("pinning shares needs every demand fixed; only L=3 supported")
            a = self.system.pinned_shares(w, y)
            for k, (lo, hi) in enumerate(self.system.share_bounds):
                if not lo < a[k] < hi:
                    raise DomainError(f"({y_i}, {y_j}) outside the joint image at this context")
            return self._structural_derivative(w, coord, a[None, :])[0, i - 1]
        shares = self._shares(w.v)
        ys = self._mc_demand(w)
        weights = np.ones(ys.shape[0])
        for good, target in ((i, y_i), (j, y_j)):
            col = ys[:, good - 1]
            b = max(self.settings.cond_bandwidth * float(np.std(col)), 1e-12)
            weights = weights * _biweight((col - target) / b)
        total = float(weights.sum())
        if total <= 0.0:
            raise DomainError(f"({y_i}, {y_j}) outside the simulated joint image")
        deriv = self._structural_derivative(w, coord, shares)[:, i - 1]
        return float(weights @ deriv / total)

    def _structural_derivative(self, w: ContextPoint, coord: str, a: np.ndarray) -> np.ndarray:
        p = np.asarray(w.p)
        if coord == "x":
            return self.system._income_derivative(p, w.x, a)
        col = int(coord[1:]) - 1
        return self.system._price_jacobian(p, w.x, a)[..., :, col]


# --------------------------------------------------------------------------
# functional interface
# --------------------------------------------------------------------------

def _oracle(system, settings) -> PopulationOracle:
    return PopulationOracle(system, settings)


def marginal_cdf(system, w, i, y, settings=None) -> float:
    return _oracle(system, settings).marginal_cdf(w, i, y)


def marginal_quantile(system, w, i, alpha, settings=None) -> float:
    return _oracle(system, settings).marginal_quantile(w, i, alpha)


def two_context_conditional_cdf(query: TwoContextCdfQuery, settings=None) -> float:
    return _oracle(query.system, settings).two_context(query)


def conditional_cdf(system, w, i, j, y_j, y_i, settings=None) -> float:
    return _oracle(system, settings).conditional_cdf(w, i, j, y_j, y_i)


def conditional_density(system, w, i, j, y_j, y_i, settings=None) -> float:
    return _oracle(system, settings).conditional_density(w, i, j, y_j, y_i)


def conditional_quantile(system, w, i, j, y_j, gamma, settings=None) -> float:
    return _oracle(system, settings).conditional_quantile(w, i, j, y_j, gamma)


def conditional_expectation_partial(system, w, s, i, j, y_i, y_j, settings=None) -> float:
    return _oracle(system, settings).conditional_expectation_partial(w, s, i, j, y_i, y_j)


# --------------------------------------------------------------------------
# regularity probes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RegularityRegion:
    """Contexts and an interior share box over which regularity is probed.

    ``neighborhood`` widens the box by that fraction of its width on each
    side, since the density lower bound is required on a neighbourhood of
    each point and not only at the point itself.
    """

    contexts: tuple
    share_box: tuple | None = None
    n_points: int = 7
    neighborhood: float = 0.02


@dataclass
class ProbeResult:
    item: str
    status: str          # "pass", "warn" or "fail"
    measured: dict

    def to_dict(self) -> dict:
        return {"item": self.item, "status": self.status, "measured": self.measured}


def probe_regularity(system: DemandSystem, region: RegularityRegion,
                     settings: OracleSettings | None = None) -> dict:
    """Numerically probe density positivity, CDF continuity and quantile smoothness.

    Returns ``{"density": ProbeResult, "continuity": ..., "differentiability": ...}``.
    The approximate-differentiability and joint-density conditions hold
    analytically for the built-in systems and are not probed.
    """
    oracle = PopulationOracle(system, settings)
    box = region.share_box or system.trimmed_bounds()
    n_goods = system.n_inside

    # item 1: density lower bound on the widened box
    min_density = math.inf
    where = None
    for w in region.contexts:
        for i in range(1, n_goods + 1):
            for j in range(1, n_goods + 1):
                if i == j:
                    continue
                lo_i, hi_i = box[i - 1]
                lo_j, hi_j = box[j - 1]
                pad_i = region.neighborhood * (hi_i - lo_i)
                for a_i in np.linspace(lo_i - pad_i, hi_i + pad_i, region.n_points):
                    for a_j in np.linspace(lo_j + 1e-9, hi_j - 1e-9, region.n_points):
                        y_i = system.good_demand(w, i, a_i)
                        y_j = system.good_demand(w, j, a_j)
                        try:
                            dens = fd_partial(
                                lambda t: oracle.conditional_cdf(w, i, j, y_j, t), y_i, None,
                                oracle.settings.scheme)
                        except DomainError:
                            dens = 0.0
                        if dens < min_density:
                            min_density, where = float(dens), {"i": i, "j": j, "y_i": y_i,
                                                               "y_j": y_j}
    density = ProbeResult("density", "pass" if min_density > oracle.c_min else "warn",
                          {"min_density": min_density, "c_min": oracle.c_min, "at": where})

    # item 2: CDF continuity, comparing jumps on a grid and its 10x refinement
    max_jump_coarse, max_jump_fine = 0.0, 0.0
    for w in region.contexts:
        for i in range(1, n_goods + 1):
            lo, hi = system.image(w, i, box)
            span = max(hi - lo, 1e-9)
            for count, slot in ((100, "coarse"), (1000, "fine")):
                ys = np.linspace(lo - 0.05 * span, hi + 0.05 * span, count + 1)
                vals = np.array([oracle.marginal_cdf(w, i, y) for y in ys])
                jump = float(np.max(np.abs(np.diff(vals))))
                if slot == "coarse":
                    max_jump_coarse = max(max_jump_coarse, jump)
                else:
                    max_jump_fine = max(max_jump_fine, jump)
    continuous = max_jump_fine <= 0.5 * max_jump_coarse and max_jump_fine < 0.05
    continuity = ProbeResult("continuity", "pass" if continuous else "fail",
                             {"max_jump_coarse": max_jump_coarse,
                              "max_jump_fine": max_jump_fine})

    # item 3: quantile differentiability, FD stability across two step sizes
    worst = 0.0
    failed = None
    big = FdScheme(h=1e-3, richardson=False)
    small = FdScheme(h=5e-4, richardson=False)
    for w in region.contexts:
        for i in range(1, n_goods + 1):
            for level in (0.25, 0.5, 0.75):
                for coord in [f"p{k}" for k in range(1, n_goods + 1)] + ["x"]:
                    try:
                        f = lambda ww: oracle.marginal_quantile(ww, i, level)
                        d1 = fd_partial(f, w, coord, big)
                        d2 = fd_partial(f, w, coord, small)
                        gap = abs(d1 - d2) / (1.0 + abs(d2))
                    except (BracketError, DomainError, ArgumentError) as exc:
                        gap, failed = math.inf, str(exc)
                    worst = max(worst, gap)
    smooth = ProbeResult("differentiability", "pass" if worst <= 1e-3 else "warn",
                         {"max_relative_gap": worst, "error": failed})
    return {"density": density, "continuity": continuity, "differentiability": smooth}
