"""Kernel estimators of marginal and conditional quantile objects.

All smoothing uses the biweight kernel ``K(u) = 15/16 (1 - u^2)^2`` on
``|u| < 1``; product weights over the conditioning coordinates and the
integrated biweight in the outcome direction.  Derivatives are finite
differences of re-evaluated estimates with the data and bandwidths held
fixed.

:class:`KernelQuantileProvider` wraps these estimators behind the provider
contract used by :mod:`sslab.engine`.  A provider can carry a matrix of
row multiplicities (one row per bootstrap replicate); every method then
returns one value per replicate, which is what resampling rows with
replacement would give, computed without materialising the resamples.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .dgp import ContextPoint, SimulatedDataset
from .errors import (ArgumentError, DegeneracyError, ExtrapolationError,
                     SparseRegionError)
from .numdiff import FdScheme, fd_partial

MIN_EFFECTIVE = 50.0
GRID_POINTS = 401
GRID_EXPAND = 0.05


def biweight(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) < 1.0, 0.9375 * (1.0 - u * u) ** 2, 0.0)


def biweight_cdf(u):
    u = np.clip(np.asarray(u, dtype=float), -1.0, 1.0)
    return 0.5 + 0.9375 * (u - 2.0 * u ** 3 / 3.0 + u ** 5 / 5.0)


@dataclass(frozen=True)
class BandwidthProfile:
    """Bandwidths for one estimation problem.

    Attributes
    ----------
    conditioning : dict
        Coordinate name (``"p1"``, ``"x"``, ``"q1"``, ``"v"``, ``"y2"``, ...)
        to bandwidth.
    outcome : float
        Bandwidth of the integrated kernel in the outcome direction.
    """

    conditioning: dict
    outcome: float

    def __post_init__(self):
        for name, h in self.conditioning.items():
            if not (np.isfinite(h) and h > 0):
                raise ArgumentError(f"bandwidth for {name} must be positive, got {h!r}")
        if not (np.isfinite(self.outcome) and self.outcome > 0):
            raise ArgumentError(f"outcome bandwidth must be positive, got {self.outcome!r}")

    @property
    def coordinates(self) -> tuple:
        return tuple(self.conditioning)

    def to_dict(self) -> dict:
        return {"conditioning": dict(self.conditioning), "outcome": self.outcome}

    @classmethod
    def from_dict(cls, data: dict) -> "BandwidthProfile":
        return cls({k: float(v) for k, v in data["conditioning"].items()},
                   float(data["outcome"]))


@dataclass(frozen=True)
class CurveOnGrid:
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.ndim != 1 or grid.shape != values.shape:
            raise ArgumentError("curve grid and values must be 1-d of equal length")
        if grid.size > 1 and not np.all(np.diff(grid) > 0):
            raise ArgumentError("curve grid must be strictly increasing")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)


def rule_of_thumb(std: float, n: int, d: int) -> float:
    """``1.06 std n^(-1/(4+d))``."""
    return 1.06 * std * n ** (-1.0 / (4 + d))


def scale_for(scale, name: str) -> float:
    """Multiplier for ``name`` from a float or a dict of multipliers.

    Dict lookups try the full name (``"p1"``), then its letter prefix
    (``"p"``), then ``"default"``, then 1.
    """
    if not isinstance(scale, dict):
        return float(scale)
    prefix = name.rstrip("0123456789")
    return float(scale.get(name, scale.get(prefix, scale.get("default", 1.0))))


def select_bandwidths(dataset: SimulatedDataset, coordinates, outcome: str | None = None,
                      scale: float | dict = 1.0, outcome_scale: float = 1.0,
                      overrides: dict | None = None) -> BandwidthProfile:
    """Rule-of-thumb bandwidths for ``coordinates`` and the outcome column.

    Each conditioning bandwidth is ``scale * 1.06 sd n^(-1/(4+d))`` with
    ``d = len(coordinates)``; the outcome bandwidth uses ``d + 1`` and
    ``outcome_scale``.  ``scale`` may be a dict of per-coordinate
    multipliers (see :func:`scale_for`).  ``overrides`` maps coordinate
    names (or ``"outcome"``) to fixed bandwidths that bypass the rule.

    Raises
    ------
    DegeneracyError
        A coordinate has zero sample variance.
    """
    if dataset.n < 1:
        raise ArgumentError("cannot select bandwidths on an empty dataset")
    overrides = dict(overrides or {})
    coordinates = list(coordinates)
    d = len(coordinates)

    def rule(name, dim, factor):
        col = dataset.column(name)
        sd = float(np.std(col, ddof=1)) if dataset.n > 1 else 0.0
        if not sd > 0:
            raise DegeneracyError(f"coordinate {name} has zero variance")
        return factor * rule_of_thumb(sd, dataset.n, dim)

    cond = {}
    for name in coordinates:
        cond[name] = (float(overrides[name]) if name in overrides
                      else rule(name, d, scale_for(scale, name)))
    if "outcome" in overrides:
        out = float(overrides["outcome"])
    elif outcome is None:
        out = 1.0
    else:
        out = rule(outcome, d + 1, outcome_scale)
    return BandwidthProfile(cond, out)


def outcome_grid(dataset: SimulatedDataset, i: int, points: int = GRID_POINTS,
                 expand: float = GRID_EXPAND) -> np.ndarray:
    """Equally spaced grid over the sample range of ``Y_i`` widened by ``expand``."""
    col = dataset.column(f"y{i}")
    lo, hi = float(col.min()), float(col.max())
    pad = expand * (hi - lo) if hi > lo else max(1.0, abs(lo)) * expand
    return np.linspace(lo - pad, hi + pad, points)


def context_coordinates(dataset: SimulatedDataset) -> list:
    names = [f"p{k + 1}" for k in range(dataset.n_goods)] + ["x"]
    names += [f"q{k + 1}" for k in range(dataset.q.shape[1])]
    if dataset.v_hat is not None:
        names.append("v")
    return names


def _query_values(w: ContextPoint, names, j=None, y_j=None) -> dict:
    out = {}
    for name in names:
        if name == "v" and w.v is None:
            raise ArgumentError("dataset conditions on v but the context has none")
        if j is not None and name == f"y{j}":
            out[name] = float(y_j)
        else:
            out[name] = w.coordinate(name)
    return out


def kernel_weights(dataset: SimulatedDataset, target: dict, bandwidths: BandwidthProfile):
    """Rows inside the kernel support and their product-kernel weights."""
    mask = np.ones(dataset.n, dtype=bool)
    for name, value in target.items():
        mask &= np.abs(dataset.column(name) - value) < bandwidths.conditioning[name]
    rows = np.flatnonzero(mask)
    k = np.ones(rows.size)
    for name, value in target.items():
        k *= biweight((dataset.column(name)[rows] - value) / bandwidths.conditioning[name])
    return rows, k


def effective_sample(weights) -> np.ndarray:
    """``sum(w) / max(w)`` along the last axis (zero when all weights vanish)."""
    w = np.asarray(weights, dtype=float)
    top = w.max(axis=-1) if w.shape[-1] else np.zeros(w.shape[:-1])
    total = w.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(top > 0, total / np.where(top > 0, top, 1.0), 0.0)


def _describe(w: ContextPoint, i, j, y_j) -> str:
    base = f"Y{i} at p={w.p}, x={w.x}"
    return base if j is None else f"{base}, Y{j}={y_j}"


def _local_sample(dataset, w, i, j, y_j, bandwidths, min_effective):
    names = list(bandwidths.conditioning)
    rows, k = kernel_weights(dataset, _query_values(w, names, j, y_j), bandwidths)
    eff = float(effective_sample(k)) if rows.size else 0.0
    if eff < min_effective:
        raise SparseRegionError(
            f"only {eff:.1f} effective observations for {_describe(w, i, j, y_j)} "
            f"(need {min_effective:g})")
    return dataset.column(f"y{i}")[rows], k / k.sum()


# biweight_cdf(s) = sum_k _G_COEF[k] s^k on |s| < 1
_G_COEF = (0.5, 0.9375, 0.0, -0.625, 0.0, 0.1875)
_BLOCK = 8.0
_DENSE_COLUMNS = 64
_WINDOW = 8  # grid cells either side of the full-sample crossing for replicates
_BINOM = ((1,), (1, 1), (1, 2, 1), (1, 3, 3, 1), (1, 4, 6, 4, 1), (1, 5, 10, 10, 5, 1))


def _prefix_at(ws, cuts):
    """``ws[:, :c].sum(axis=1)`` for every ``c`` in the nondecreasing ``cuts``."""
    R = ws.shape[0]
    uc, inv = np.unique(cuts, return_inverse=True)
    bounds = np.concatenate([[0], uc])
    seg = np.zeros((R, uc.size))
    nz = np.flatnonzero(bounds[1:] > bounds[:-1])
    if nz.size:
        seg[:, nz] = np.add.reduceat(ws[:, :uc[-1]], bounds[nz], axis=1)
    return np.cumsum(seg, axis=1)[:, inv]


def _curve_values(y, weights, grid, h, columns=None, presorted=False):
    """Smoothed CDF ``sum_r w_r G((t - y_r)/h)`` at ``grid[columns]``.

    ``weights`` is ``(R, m)``; the result is ``(R, len(columns))``.  Rows
    are sorted by outcome.  Rows below the kernel window of ``t`` add their
    full weight; inside the window ``G`` is a quintic in ``(t - y_r)/h``,
    so window sums follow from cumulative power moments of the sorted rows.
    Moments are centred block by block along the grid (blocks span
    ``_BLOCK`` bandwidths) to keep the powers small.
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    cols = np.arange(grid.size) if columns is None else np.asarray(columns)
    if presorted:
        u, ws = y / h, weights
    else:
        order = np.argsort(y, kind="stable")
        u, ws = y[order] / h, weights[:, order]
    tau = grid[cols] / h
    lo = np.searchsorted(u, tau - 1.0, side="right")
    hi = np.searchsorted(u, tau + 1.0, side="left")
    R = ws.shape[0]
    if cols.size <= _DENSE_COLUMNS:
        # few columns: one dense product over the rows any window touches
        r0, r1 = int(lo.min()), int(hi.max())
        out = np.broadcast_to(ws[:, :r0].sum(axis=1)[:, None], (R, cols.size)).copy()
        if r1 > r0:
            out += ws[:, r0:r1] @ biweight_cdf(tau[None, :] - u[r0:r1, None])
        return out
    out = _prefix_at(ws, lo)
    block = np.floor((tau - tau.min()) / _BLOCK).astype(int) if tau.size else tau
    for b in np.unique(block):
        cs = np.flatnonzero(block == b)
        r0, r1 = int(lo[cs].min()), int(hi[cs].max())
        if r1 <= r0:
            continue
        centre = 0.5 * (tau[cs[0]] + tau[cs[-1]])
        uu = u[r0:r1] - centre
        tt = tau[cs] - centre
        a, z = lo[cs] - r0, hi[cs] - r0
        term = ws[:, r0:r1].copy()
        cum = np.zeros((R, r1 - r0 + 1))
        for m in range(6):
            if m:
                term *= uu
            np.cumsum(term, axis=1, out=cum[:, 1:])
            # coefficient of the m-th moment in sum_k a_k (tt - uu)^k
            coef = np.zeros(cs.size)
            for k in range(m, 6):
                if _G_COEF[k]:
                    coef += _G_COEF[k] * _BINOM[k][m] * tt ** (k - m)
            out[:, cs] += ((-1.0) ** m) * coef * (cum[:, z] - cum[:, a])
    return out


def _curve_values_direct(y, weights, grid, h, columns=None):
    """Reference evaluation of :func:`_curve_values` by brute force."""
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    cols = np.arange(grid.size) if columns is None else np.asarray(columns)
    return weights @ biweight_cdf((grid[cols][None, :] - y[:, None]) / h)


def estimate_conditional_cdf(dataset: SimulatedDataset, w: ContextPoint, i: int,
                             conditioning: tuple | None = None, grid=None,
                             bandwidths: BandwidthProfile | None = None,
                             min_effective: float = MIN_EFFECTIVE) -> CurveOnGrid:
    """Nadaraya-Watson smoothed-indicator CDF of ``Y_i`` on a grid.

    Parameters
    ----------
    conditioning : (j, y_j), optional
        Also condition on ``Y_j = y_j``.
    grid : array, optional
        Outcome grid; defaults to :func:`outcome_grid`.
    bandwidths : BandwidthProfile, optional
        Defaults to :func:`select_bandwidths` over the context coordinates
        (plus ``y_j``).

    Returns the raw curve; see :func:`monotone_rearrange`.
    """
    j, y_j = conditioning if conditioning is not None else (None, None)
    if bandwidths is None:
        names = context_coordinates(dataset) + ([f"y{j}"] if j is not None else [])
        bandwidths = select_bandwidths(dataset, names, outcome=f"y{i}")
    grid = outcome_grid(dataset, i) if grid is None else np.asarray(grid, dtype=float)
    y, wts = _local_sample(dataset, w, i, j, y_j, bandwidths, min_effective)
    return CurveOnGrid(grid, _curve_values(y, wts[None, :], grid, bandwidths.outcome)[0])


def monotone_rearrange(curve: CurveOnGrid) -> CurveOnGrid:
    """Sort the values ascending, then clip to ``[0, 1]``."""
    return CurveOnGrid(curve.grid, np.clip(np.sort(curve.values), 0.0, 1.0))


def _invert_rows(values, grid, level):
    """Left-most linear-interpolated crossing of each row of ``values``.

    Rows whose level lies outside their value range give NaN.
    """
    values = np.atleast_2d(values)
    level = np.broadcast_to(np.asarray(level, dtype=float), values.shape[:1])
    above = values >= level[:, None]
    g = np.argmax(above, axis=1)
    ok = above.any(axis=1) & (level >= values[:, 0]) & np.isfinite(level)
    out = np.full(values.shape[0], np.nan)
    at_start = ok & (g == 0)
    out[at_start] = grid[0]
    inner = ok & (g > 0)
    r = np.flatnonzero(inner)
    if r.size:
        g1 = g[r]
        v0, v1 = values[r, g1 - 1], values[r, g1]
        frac = (level[r] - v0) / (v1 - v0)
        out[r] = grid[g1 - 1] + frac * (grid[g1] - grid[g1 - 1])
    return out


def invert_cdf(curve: CurveOnGrid, level: float) -> float:
    """Generalised inverse of a monotone curve by linear interpolation.

    On flat stretches the left-most abscissa reaching ``level`` is returned.

    Raises
    ------
    ExtrapolationError
        ``level`` lies outside ``[values[0], values[-1]]``.
    """
    if not 0.0 < level < 1.0:
        raise ArgumentError(f"level must lie in (0, 1), got {level!r}")
    if level < curve.values[0] or level > curve.values[-1]:
        raise ExtrapolationError(
            f"level {level} outside the curve range [{curve.values[0]}, {curve.values[-1]}]")
    return float(_invert_rows(curve.values[None, :], curve.grid, level)[0])


@dataclass(frozen=True)
class DensityEstimate:
    value: float
    raw: float
    floored: bool


def estimate_conditional_density(dataset: SimulatedDataset, w: ContextPoint, i: int,
                                 conditioning: tuple | None, y: float,
                                 bandwidths: BandwidthProfile | None = None,
                                 c_min: float = 1e-3,
                                 min_effective: float = MIN_EFFECTIVE) -> DensityEstimate:
    """Kernel density of ``Y_i`` at ``y`` with the conditioning weights.

    The value used in ratios is ``max(raw, c_min)``; ``floored`` records
    whether the floor was applied.
    """
    j, y_j = conditioning if conditioning is not None else (None, None)
    if bandwidths is None:
        names = context_coordinates(dataset) + ([f"y{j}"] if j is not None else [])
        bandwidths = select_bandwidths(dataset, names, outcome=f"y{i}")
    ys, wts = _local_sample(dataset, w, i, j, y_j, bandwidths, min_effective)
    h = bandwidths.outcome
    raw = float(wts @ biweight((y - ys) / h) / h)
    return DensityEstimate(max(raw, c_min), raw, raw < c_min)


@dataclass(frozen=True)
class EstimationTarget:
    """A scalar estimated object, differentiable by :func:`estimate_partial`.

    ``kind`` is one of ``marginal_cdf``, ``marginal_quantile``,
    ``conditional_cdf``, ``conditional_quantile``, ``conditional_density``.
    ``value`` is the evaluation point (CDF, density) or the level
    (quantiles).  ``multiplier`` scales the object.
    """

    kind: str
    i: int
    value: float
    j: int | None = None
    y_j: float | None = None
    multiplier: float = 1.0

    _KINDS = ("marginal_cdf", "marginal_quantile", "conditional_cdf",
              "conditional_quantile", "conditional_density")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ArgumentError(f"unknown target {self.kind!r}; expected one of {self._KINDS}")
        if self.kind.startswith("conditional") and self.j is None:
            raise ArgumentError(f"{self.kind} needs a conditioning good")

    def evaluate(self, provider: "KernelQuantileProvider", w: ContextPoint, y_j=None):
        y_j = self.y_j if y_j is None else y_j
        k = self.kind
        if k == "marginal_cdf":
            out = provider.marginal_cdf(w, self.i, self.value)
        elif k == "marginal_quantile":
            out = provider.marginal_quantile(w, self.i, self.value)
        elif k == "conditional_cdf":
            out = provider.conditional_cdf(w, self.i, self.j, y_j, self.value)
        elif k == "conditional_quantile":
            out = provider.conditional_quantile(w, self.i, self.j, y_j, self.value)
        else:
            out = provider.conditional_density(w, self.i, self.j, y_j, self.value)
        return self.multiplier * out


def estimate_partial(dataset: SimulatedDataset, target: EstimationTarget, point: ContextPoint,
                     coordinate: str, scheme: FdScheme | None = None,
                     bandwidths: dict | None = None, provider=None):
    """Finite-difference derivative of an estimated object.

    ``coordinate`` names a context coordinate (``"p1"``, ``"x"``, ...) or
    the conditioning value (``"y{j}"``).  Data and bandwidths are held
    fixed across the perturbed evaluations; the default step is a quarter
    of the coordinate's bandwidth.
    """
    if provider is None:
        provider = KernelQuantileProvider(dataset, **(bandwidths or {}))
    if scheme is None:
        scheme = provider.fd_scheme(coordinate, target.i, target.j)
    if target.j is not None and coordinate == f"y{target.j}":
        return fd_partial(lambda t: target.evaluate(provider, point, y_j=t), target.y_j, None,
                          scheme)
    return fd_partial(lambda ww: target.evaluate(provider, ww), point, coordinate, scheme)


@dataclass
class _Shared:
    """State shared between a provider and its replicate views."""

    profiles: dict = field(default_factory=dict)
    grids: dict = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)


class KernelQuantileProvider:
    """Data-only quantile provider built on the kernel estimators.

    Parameters
    ----------
    dataset : SimulatedDataset
    scale : float or dict
        Multiplier on the rule-of-thumb conditioning bandwidths, optionally
        per coordinate (see :func:`scale_for`).
    outcome_scale : float
        Multiplier on the rule-of-thumb outcome bandwidth.
    overrides : dict, optional
        Fixed bandwidths by coordinate name (``"outcome"`` for the outcome
        direction).
    c_min : float
        Density floor used in ratios.
    fd_fraction : float
        Finite-difference step as a fraction of the coordinate bandwidth.
    counts : array (R, n), optional
        Row multiplicities; when given every method returns an ``(R,)``
        array and replicates failing the effective-sample rule give NaN.
    """

    supports_frozen = False

    def __init__(self, dataset: SimulatedDataset, scale: float = 1.0,
                 outcome_scale: float = 1.0, overrides: dict | None = None,
                 c_min: float = 1e-3, roundtrip_tol: float = 0.02,
                 fd_fraction: float = 0.25, min_effective: float = MIN_EFFECTIVE,
                 grid_points: int = GRID_POINTS, counts=None, _shared: _Shared | None = None):
        if dataset.n < 1:
            raise ArgumentError("empty dataset")
        self.dataset = dataset
        self.scale = dict(scale) if isinstance(scale, dict) else float(scale)
        self.outcome_scale = float(outcome_scale)
        self.overrides = dict(overrides or {})
        self.c_min = float(c_min)
        self.roundtrip_tol = float(roundtrip_tol)
        self.fd_fraction = float(fd_fraction)
        self.min_effective = float(min_effective)
        self.grid_points = int(grid_points)
        self.counts = None if counts is None else np.asarray(counts)
        if self.counts is not None and (self.counts.ndim != 2
                                        or self.counts.shape[1] != dataset.n):
            raise ArgumentError("counts must have one column per dataset row")
        # row-major copy so that gathering the local rows is contiguous
        self._counts_t = (None if self.counts is None
                          else np.ascontiguousarray(self.counts.T, dtype=np.float32))
        self._shared = _shared or _Shared()
        self._cache: OrderedDict = OrderedDict()
        self._cache_lock = threading.Lock()
        self.floor_hits = 0

    # -- configuration -------------------------------------------------
    def settings(self) -> dict:
        scale = dict(self.scale) if isinstance(self.scale, dict) else self.scale
        return {"scale": scale, "outcome_scale": self.outcome_scale,
                "overrides": dict(self.overrides), "c_min": self.c_min,
                "fd_fraction": self.fd_fraction, "min_effective": self.min_effective,
                "grid_points": self.grid_points}

    def replicate(self, counts) -> "KernelQuantileProvider":
        """Provider on the same data, bandwidths and grids with row multiplicities."""
        return KernelQuantileProvider(self.dataset, self.scale, self.outcome_scale,
                                      self.overrides, self.c_min, self.roundtrip_tol,
                                      self.fd_fraction, self.min_effective, self.grid_points,
                                      counts=counts, _shared=self._shared)

    @property
    def n_replicates(self) -> int | None:
        return None if self.counts is None else self.counts.shape[0]

    def profile(self, i: int, j: int | None = None) -> BandwidthProfile:
        key = (i, j)
        with self._shared.lock:
            if key not in self._shared.profiles:
                names = context_coordinates(self.dataset)
                if j is not None:
                    names = names + [f"y{j}"]
                self._shared.profiles[key] = select_bandwidths(
                    self.dataset, names, outcome=f"y{i}", scale=self.scale,
                    outcome_scale=self.outcome_scale, overrides=self.overrides)
            return self._shared.profiles[key]

    def grid(self, i: int) -> np.ndarray:
        with self._shared.lock:
            if i not in self._shared.grids:
                self._shared.grids[i] = outcome_grid(self.dataset, i, self.grid_points)
            return self._shared.grids[i]

    def fd_scheme(self, coordinate: str, i: int = 1, j: int | None = None) -> FdScheme:
        """Absolute step ``fd_fraction * bandwidth`` without extrapolation.

        The bandwidth is the one the ``(i | j)`` estimate uses along
        ``coordinate`` (``j=None`` for marginal objects of good ``i``).
        """
        h = self.profile(i, j).conditioning[coordinate]
        return FdScheme(h=self.fd_fraction * h, richardson=False, relative=False)

    # -- local samples -------------------------------------------------
    def _local(self, w: ContextPoint, i: int, j: int | None, y_j):
        key = (w.key(), i, j, None if y_j is None else float(y_j))
        with self._cache_lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        prof = self.profile(i, j)
        names = list(prof.conditioning)
        rows, k = kernel_weights(self.dataset, _query_values(w, names, j, y_j), prof)
        y = self.dataset.column(f"y{i}")[rows]
        order = np.argsort(y, kind="stable")
        rows, k, y = rows[order], k[order], y[order]
        if self.counts is None:
            eff = float(effective_sample(k)) if rows.size else 0.0
            if eff < self.min_effective:
                raise SparseRegionError(
                    f"only {eff:.1f} effective observations for {_describe(w, i, j, y_j)} "
                    f"(need {self.min_effective:g})")
            weights = (k / k.sum())[None, :]
            valid = np.ones(1, dtype=bool)
            base = weights
        else:
            raw = (self._counts_t[rows] * k[:, None]).T
            valid = effective_sample(raw) >= self.min_effective
            total = raw.sum(axis=1)
            scale = np.where(valid, 1.0 / np.where(total > 0, total, 1.0), 0.0)
            weights = raw * scale[:, None]
            base = (k / k.sum())[None, :] if rows.size else np.zeros((1, 0))
            if not valid.any():
                raise SparseRegionError(
                    f"no replicate has enough effective observations for "
                    f"{_describe(w, i, j, y_j)}")
        entry = (y, weights, valid, base, prof)
        with self._cache_lock:
            self._cache[key] = entry
            if len(self._cache) > 512:
                self._cache.popitem(last=False)
        return entry

    def _finish(self, values, valid):
        values = np.where(valid, values, np.nan)
        if self.counts is None:
            return float(values[0])
        return values

    def _cdf(self, w, i, j, y_j, y):
        ys, weights, valid, _, prof = self._local(w, i, j, y_j)
        vals = weights @ biweight_cdf((y - ys) / prof.outcome)
        return self._finish(vals, valid)

    def _density(self, w, i, j, y_j, y):
        ys, weights, valid, _, prof = self._local(w, i, j, y_j)
        h = prof.outcome
        raw = weights @ biweight((y - ys) / h) / h
        floored = raw < self.c_min
        if np.any(floored & valid):
            self.floor_hits += int(np.sum(floored & valid))
        return self._finish(np.maximum(raw, self.c_min), valid)

    def _quantile(self, w, i, j, y_j, level):
        level_arr = np.asarray(level, dtype=float)
        if np.any((level_arr <= 0) | (level_arr >= 1)):
            raise ArgumentError(f"quantile level must lie in (0, 1), got {level!r}")
        ys, weights, valid, base, prof = self._local(w, i, j, y_j)
        grid = self.grid(i)
        h = prof.outcome
        if self.counts is None:
            raw = _curve_values(ys, weights, grid, h, presorted=True)[0]
            curve = monotone_rearrange(CurveOnGrid(grid, raw))
            if float(level) < curve.values[0] or float(level) > curve.values[-1]:
                raise ExtrapolationError(
                    f"level {float(level)} outside the estimated CDF range at "
                    f"{_describe(w, i, j, y_j)}")
            return float(_invert_rows(curve.values[None, :], grid, level)[0])
        # replicates: locate the crossing on the full-sample curve and
        # evaluate every replicate on a window of grid cells around it
        R = weights.shape[0]
        lvl = np.broadcast_to(level_arr, (R,)).astype(float)
        centre = float(np.nanmedian(lvl)) if np.isfinite(lvl).any() else 0.5
        base_curve = np.sort(_curve_values(ys, base, grid, h, presorted=True)[0])
        g0 = int(np.clip(np.searchsorted(base_curve, centre), 0, grid.size - 1))
        lo, hi = max(0, g0 - _WINDOW), min(grid.size, g0 + _WINDOW + 1)
        vals = _curve_values(ys, weights, grid, h, np.arange(lo, hi), presorted=True)
        vals = np.clip(np.sort(vals, axis=1), 0.0, 1.0)
        out = _invert_rows(vals, grid[lo:hi], lvl)
        missed = ((lvl < vals[:, 0]) & (lo > 0)) | ((lvl > vals[:, -1]) & (hi < grid.size))
        missed &= valid & np.isfinite(lvl)
        if missed.any():
            r = np.flatnonzero(missed)
            full = _curve_values(ys, weights[r], grid, h, presorted=True)
            out[r] = _invert_rows(np.clip(np.sort(full, axis=1), 0.0, 1.0), grid, lvl[r])
        return self._finish(out, valid)

    # -- provider contract ---------------------------------------------
    def marginal_cdf(self, w: ContextPoint, i: int, y: float):
        return self._cdf(w, i, None, None, y)

    def marginal_quantile(self, w: ContextPoint, i: int, alpha):
        return self._quantile(w, i, None, None, alpha)

    def marginal_density(self, w: ContextPoint, i: int, y: float):
        return self._density(w, i, None, None, y)

    def conditional_cdf(self, w: ContextPoint, i: int, j: int, y_j: float, y_i: float):
        return self._cdf(w, i, j, y_j, y_i)

    def conditional_density(self, w: ContextPoint, i: int, j: int, y_j: float, y_i: float):
        return self._density(w, i, j, y_j, y_i)

    def conditional_quantile(self, w: ContextPoint, i: int, j: int, y_j: float, gamma):
        return self._quantile(w, i, j, y_j, gamma)

    def conditional_curve(self, w: ContextPoint, i: int, j: int | None = None,
                          y_j: float | None = None) -> CurveOnGrid:
        """Raw estimated CDF curve of the full sample (no replicates)."""
        ys, _, _, base, prof = self._local(w, i, j, y_j)
        grid = self.grid(i)
        return CurveOnGrid(grid, _curve_values(ys, base, grid, prof.outcome, presorted=True)[0])

    def two_context_conditional_cdf(self, w_struct, w_cond, i, j, y_j, y_i):
        from .errors import UnsupportedChannelError

        raise UnsupportedChannelError(
            "two-context probabilities need the structural function; "
            "the kernel provider only sees data")

    def effective_sample_size(self, w: ContextPoint, i: int, j: int | None = None,
                              y_j: float | None = None) -> float:
        prof = self.profile(i, j)
        _, k = kernel_weights(self.dataset, _query_values(w, list(prof.conditioning), j, y_j),
                              prof)
        return float(effective_sample(k)) if k.size else 0.0
