"""Synthetic heterogeneous demand systems and cross-section simulation.

Good ``L`` is the numeraire with price one; the ``L - 1`` inside goods are
indexed ``1..L-1`` everywhere in the public API.  The built-in systems have
``L = 3``:

``CD3``
    Cobb-Douglas demands ``y_k = a_k x / p_k``.
``ASYM3``
    ``CD3`` plus ``c * p_2`` on good 1, which breaks Slutsky symmetry
    whenever ``c != 0``.

Heterogeneity ``A = (a_1, a_2)`` is a pair of budget shares with uniform
marginals tied together by a Gaussian copula; the latent normals may load on
the first-stage residual ``V`` to create income endogeneity.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import NormalDist

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import ndtr

from . import rng as _rng
from .errors import ArgumentError, DomainError, EstimationError, StateError

_STD_NORMAL = NormalDist()


def norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def norm_ppf(u: float) -> float:
    return _STD_NORMAL.inv_cdf(u)


# --------------------------------------------------------------------------
# context points
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ContextPoint:
    """Conditioning vector ``w = (p, x, q, v)``."""

    p: tuple
    x: float
    q: tuple = ()
    v: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "p", tuple(float(c) for c in self.p))
        object.__setattr__(self, "q", tuple(float(c) for c in self.q))
        object.__setattr__(self, "x", float(self.x))
        if self.v is not None:
            object.__setattr__(self, "v", float(self.v))
        if len(self.p) == 0:
            raise DomainError("context needs at least one price")
        for k, price in enumerate(self.p, start=1):
            if not price > 0:
                raise DomainError(f"price p{k}={price} must be strictly positive")
        if not self.x > 0:
            raise DomainError(f"income x={self.x} must be strictly positive")

    @property
    def n_goods(self) -> int:
        return len(self.p)

    def coordinate(self, name: str) -> float:
        if name == "x":
            return self.x
        if name == "v":
            if self.v is None:
                raise DomainError("context carries no control residual v")
            return self.v
        head, idx = name[0], int(name[1:]) - 1
        if head == "p":
            return self.p[idx]
        if head == "q":
            return self.q[idx]
        raise KeyError(name)

    def shifted(self, name: str, delta: float) -> "ContextPoint":
        if name == "x":
            return replace(self, x=self.x + delta)
        if name == "v":
            return replace(self, v=self.coordinate("v") + delta)
        head, idx = name[0], int(name[1:]) - 1
        if head == "p":
            p = list(self.p)
            p[idx] += delta
            return replace(self, p=tuple(p))
        if head == "q":
            q = list(self.q)
            q[idx] += delta
            return replace(self, q=tuple(q))
        raise KeyError(name)

    def key(self) -> tuple:
        return (self.p, self.x, self.q, self.v)

    def to_dict(self) -> dict:
        return {"p": list(self.p), "x": self.x, "q": list(self.q), "v": self.v}

    @classmethod
    def from_dict(cls, data: dict) -> "ContextPoint":
        return cls(p=tuple(data["p"]), x=data["x"], q=tuple(data.get("q", ())),
                   v=data.get("v"))


def derivative_coordinate(s: int, n_goods: int) -> str:
    """Map the derivative index ``s`` in ``1..L`` to a context coordinate.

    ``s <= L-1`` are prices, ``s == L`` is income.
    """
    if 1 <= s <= n_goods:
        return f"p{s}"
    if s == n_goods + 1:
        return "x"
    raise ArgumentError(f"derivative index s={s} outside 1..{n_goods + 1}")


# --------------------------------------------------------------------------
# heterogeneity laws
# --------------------------------------------------------------------------

class LatentGaussianShares:
    """Budget shares with uniform marginals and a Gaussian copula.

    ``a_k = lo_k + (hi_k - lo_k) * Phi(g_k)`` where, given the first-stage
    residual ``V = v``, the latent pair ``g`` is bivariate normal with mean
    ``loading * v / v_scale`` in both coordinates, variance
    ``1 - loading**2`` and correlation ``rho``.  With ``loading = 0`` the
    shares are independent of ``V`` and their marginals are exactly uniform.
    """

    continuous = True

    def __init__(self, bounds=((0.2, 0.4), (0.3, 0.5)), rho: float = 0.0,
                 loading: float = 0.0, v_scale: float = 0.5):
        self.bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
        for lo, hi in self.bounds:
            if not lo < hi:
                raise ArgumentError(f"share bounds ({lo}, {hi}) are empty")
        if not -1.0 < rho < 1.0:
            raise ArgumentError(f"copula correlation must lie in (-1, 1), got {rho}")
        if not -1.0 < loading < 1.0:
            raise ArgumentError(f"loading must lie in (-1, 1), got {loading}")
        self.rho = float(rho)
        self.loading = float(loading)
        self.v_scale = float(v_scale)

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def params(self) -> dict:
        return {"bounds": [list(b) for b in self.bounds], "rho": self.rho,
                "loading": self.loading, "v_scale": self.v_scale}

    def _location(self, v):
        if self.loading == 0.0:
            return 0.0
        if v is None:
            raise DomainError("heterogeneity loads on V; the context must carry v")
        return self.loading * v / self.v_scale

    def _scale(self) -> float:
        return math.sqrt(1.0 - self.loading ** 2)

    def transform(self, e: np.ndarray, v=None) -> np.ndarray:
        """Map standard-normal innovations ``e`` (n, 2) to shares."""
        e = np.asarray(e, dtype=float)
        rho = self.rho
        v_arr = None if v is None else np.asarray(v, dtype=float)
        if self.loading != 0.0:
            if v_arr is None:
                raise DomainError("heterogeneity loads on V; v is required")
            loc = self.loading * v_arr / self.v_scale
        else:
            loc = 0.0
        sd = self._scale()
        g1 = loc + sd * e[:, 0]
        g2 = loc + sd * (rho * e[:, 0] + math.sqrt(1.0 - rho ** 2) * e[:, 1])
        out = np.empty((e.shape[0], 2))
        for k, g in enumerate((g1, g2)):
            lo, hi = self.bounds[k]
            out[:, k] = lo + (hi - lo) * ndtr(g)
        return out

    def sample(self, n: int, gen: np.random.Generator, v=None) -> np.ndarray:
        return self.transform(gen.standard_normal((n, 2)), v)

    def _latent(self, k: int, t: float) -> float | None:
        lo, hi = self.bounds[k]
        u = (t - lo) / (hi - lo)
        if u <= 0.0:
            return -math.inf
        if u >= 1.0:
            return math.inf
        return norm_ppf(u)

    def cdf(self, k: int, t: float, v=None) -> float:
        """``P(a_k <= t | V = v)`` for the zero-based share index ``k``."""
        g = self._latent(k, t)
        if math.isinf(g):
            return 0.0 if g < 0 else 1.0
        return norm_cdf((g - self._location(v)) / self._scale())

    def conditional_cdf(self, k: int, t: float, j: int, a_j: float, v=None) -> float:
        """``P(a_k <= t | a_j, V = v)`` (zero-based indices)."""
        lo, hi = self.bounds[j]
        if not lo < a_j < hi:
            raise DomainError(f"conditioning share a{j + 1}={a_j} outside ({lo}, {hi})")
        loc, sd = self._location(v), self._scale()
        z_j = (norm_ppf((a_j - lo) / (hi - lo)) - loc) / sd
        g = self._latent(k, t)
        if math.isinf(g):
            return 0.0 if g < 0 else 1.0
        mean = loc + sd * self.rho * z_j
        return norm_cdf((g - mean) / (sd * math.sqrt(1.0 - self.rho ** 2)))

    def spearman(self) -> float:
        """Spearman rank correlation of the shares given ``V``."""
        return 6.0 / math.pi * math.asin(self.rho / 2.0)


class PointMassShares:
    """Degenerate heterogeneity concentrated on a single share vector."""

    continuous = False

    def __init__(self, point=(0.3, 0.4), bounds=((0.2, 0.4), (0.3, 0.5))):
        self.point = tuple(float(c) for c in point)
        self.bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
        self.rho = 0.0
        self.loading = 0.0

    @property
    def dim(self) -> int:
        return len(self.point)

    def params(self) -> dict:
        return {"point": list(self.point), "bounds": [list(b) for b in self.bounds]}

    def transform(self, e: np.ndarray, v=None) -> np.ndarray:
        return np.tile(np.asarray(self.point), (np.asarray(e).shape[0], 1))

    def sample(self, n: int, gen: np.random.Generator, v=None) -> np.ndarray:
        return self.transform(np.zeros((n, 2)))

    def cdf(self, k: int, t: float, v=None) -> float:
        return 1.0 if self.point[k] <= t else 0.0

    def conditional_cdf(self, k: int, t: float, j: int, a_j: float, v=None) -> float:
        if a_j != self.point[j]:
            raise DomainError(f"conditioning share a{j + 1}={a_j} has zero probability")
        return self.cdf(k, t, v)


def make_law(options: dict | None):
    options = dict(options or {})
    kind = options.pop("type", "gaussian_copula")
    if kind in ("gaussian_copula", "uniform"):
        return LatentGaussianShares(**options)
    if kind == "point_mass":
        return PointMassShares(**options)
    raise ArgumentError(f"unknown heterogeneity law {kind!r}")


# --------------------------------------------------------------------------
# demand systems
# --------------------------------------------------------------------------

class DemandSystem:
    """Structural demand ``y = phi(p, x, q, a)`` with closed-form derivatives.

    Subclasses implement the vectorised ``_demand``, ``_price_jacobian`` and
    ``_income_derivative`` over share arrays of shape ``(n, 2)`` and, for
    every good whose demand is strictly increasing in its own share, the
    inverse ``_share_from_demand``.
    """

    name = "abstract"
    dim_goods = 3

    def __init__(self, law=None):
        self.law = law if law is not None else LatentGaussianShares()

    # --- metadata ----------------------------------------------------------
    @property
    def n_inside(self) -> int:
        return self.dim_goods - 1

    @property
    def monotone(self) -> tuple:
        """Whether ``e_j' phi`` is strictly increasing in ``a_j``, per good."""
        return (True,) * self.n_inside

    @property
    def invertible(self) -> bool:
        """Whether observing ``(Y_1, Y_2)`` at a context pins the share vector."""
        return all(self.monotone)

    def params(self) -> dict:
        return {"law": {"type": _law_type(self.law), **self.law.params()}}

    def describe(self) -> dict:
        return {"name": self.name, "params": self.params()}

    @property
    def share_bounds(self):
        return self.law.bounds

    def trimmed_bounds(self, fraction: float = 0.1):
        """Interior share box, trimming ``fraction`` of each range at both ends."""
        return tuple((lo + fraction * (hi - lo), hi - fraction * (hi - lo))
                     for lo, hi in self.share_bounds)

    # --- validation --------------------------------------------------------
    def _check_context(self, p, x):
        p = np.asarray(p, dtype=float)
        if p.shape[-1] != self.n_inside:
            raise DomainError(f"{self.name} expects {self.n_inside} prices, got {p.shape[-1]}")
        if np.any(p <= 0):
            raise DomainError(f"{self.name}: prices must be > 0 (lower bound 0 violated)")
        if np.any(np.asarray(x) <= 0):
            raise DomainError(f"{self.name}: income must be > 0 (lower bound 0 violated)")

    def _check_shares(self, a):
        # structural domain: nonnegative shares that leave room for the numeraire;
        # the sampling law's support is a sub-box of it
        a = np.asarray(a, dtype=float)
        if a.shape[-1] != self.n_inside:
            raise DomainError(f"{self.name} expects {self.n_inside} shares, got {a.shape[-1]}")
        for k in range(self.n_inside):
            if np.any(a[..., k] < 0.0):
                raise DomainError(f"{self.name}: share a{k + 1} below lower bound 0")
        if np.any(a.sum(axis=-1) > 1.0):
            raise DomainError(f"{self.name}: shares sum above upper bound 1")

    # --- structural map ----------------------------------------------------
    def demand(self, p, x, q, a) -> np.ndarray:
        self._check_context(p, x)
        self._check_shares(a)
        return self._demand(np.asarray(p, float), np.asarray(x, float), np.asarray(a, float))

    def price_jacobian(self, p, x, q, a) -> np.ndarray:
        self._check_context(p, x)
        self._check_shares(a)
        return self._price_jacobian(np.asarray(p, float), np.asarray(x, float),
                                    np.asarray(a, float))

    def income_derivative(self, p, x, q, a) -> np.ndarray:
        self._check_context(p, x)
        self._check_shares(a)
        return self._income_derivative(np.asarray(p, float), np.asarray(x, float),
                                       np.asarray(a, float))

    def demand_at(self, w: ContextPoint, a: np.ndarray) -> np.ndarray:
        """Unchecked vectorised demand at a context for shares ``a`` (n, 2)."""
        a = np.atleast_2d(a)
        return self._demand(np.asarray(w.p), w.x, a)

    def good_demand(self, w: ContextPoint, good: int, a_own: float) -> float:
        """Demand for ``good`` as a function of its own share only.

        Only defined for systems where good ``good`` depends on ``a_good``
        alone; used for support images and bisection brackets.
        """
        a = np.array([[b[0] for b in self.share_bounds]], dtype=float)
        a[0, good - 1] = a_own
        return float(self._demand(np.asarray(w.p), w.x, a)[0, good - 1])

    def share_from_demand(self, w: ContextPoint, good: int, y: float) -> float:
        """Own share that produces demand ``y`` for ``good`` at ``w``."""
        if not self.monotone[good - 1]:
            raise StateError(f"{self.name}: good {good} is not monotone in its share")
        return self._share_from_demand(w, good, y)

    def image(self, w: ContextPoint, good: int, bounds=None) -> tuple:
        """Range of demand for ``good`` over the share box at ``w``."""
        lo, hi = (bounds or self.share_bounds)[good - 1]
        ends = sorted((self.good_demand(w, good, lo), self.good_demand(w, good, hi)))
        return ends[0], ends[1]

    def pinned_shares(self, w: ContextPoint, y) -> np.ndarray:
        """Share vector solving ``phi(w, a) = y`` on invertible systems."""
        if not self.invertible:
            raise StateError(f"{self.name} is not invertible")
        return np.array([self.share_from_demand(w, k + 1, y[k]) for k in range(self.n_inside)])

    def _demand(self, p, x, a):
        raise NotImplementedError

    def _price_jacobian(self, p, x, a):
        raise NotImplementedError

    def _income_derivative(self, p, x, a):
        raise NotImplementedError

    def _share_from_demand(self, w, good, y):
        raise NotImplementedError


class CobbDouglas3(DemandSystem):
    """``y_k = a_k x / p_k``; rational, Slutsky matrix symmetric."""

    name = "CD3"

    def _demand(self, p, x, a):
        x = np.asarray(x)[..., None] if np.ndim(x) else x
        return a * x / p

    def _price_jacobian(self, p, x, a):
        y = self._demand(p, x, a)
        jac = np.zeros(y.shape + (2,))
        jac[..., 0, 0] = -y[..., 0] / p[..., 0]
        jac[..., 1, 1] = -y[..., 1] / p[..., 1]
        return jac

    def _income_derivative(self, p, x, a):
        return np.broadcast_to(a / p, np.broadcast_shapes(np.shape(a), np.shape(p))).copy()

    def _share_from_demand(self, w, good, y):
        return y * w.p[good - 1] / w.x


class Asym3(CobbDouglas3):
    """``CD3`` with an extra ``c * p_2`` on good 1."""

    name = "ASYM3"

    def __init__(self, c: float = 0.5, law=None):
        super().__init__(law)
        self.c = float(c)

    def params(self) -> dict:
        return {"c": self.c, **super().params()}

    def _demand(self, p, x, a):
        y = super()._demand(p, x, a)
        y = np.array(y, dtype=float, copy=True)
        y[..., 0] = y[..., 0] + self.c * np.asarray(p)[..., 1]
        return y

    def _price_jacobian(self, p, x, a):
        jac = super()._price_jacobian(p, x, a)
        y_cd = CobbDouglas3._demand(self, p, x, a)
        jac[..., 0, 0] = -y_cd[..., 0] / p[..., 0]
        jac[..., 0, 1] = self.c
        return jac

    def _share_from_demand(self, w, good, y):
        if good == 1:
            return (y - self.c * w.p[1]) * w.p[0] / w.x
        return y * w.p[good - 1] / w.x


def _law_type(law) -> str:
    return "point_mass" if isinstance(law, PointMassShares) else "gaussian_copula"


SYSTEMS = {"CD3": CobbDouglas3, "ASYM3": Asym3}


def make_system(name: str, **params) -> DemandSystem:
    """Build a built-in system, e.g. ``make_system("ASYM3", c=1.0, law={"rho": 0.5})``."""
    try:
        cls = SYSTEMS[name]
    except KeyError:
        raise ArgumentError(f"unknown demand system {name!r}; known: {sorted(SYSTEMS)}") from None
    law = make_law(params.pop("law", None))
    return cls(law=law, **params)


# --------------------------------------------------------------------------
# pointwise operations
# --------------------------------------------------------------------------

def _as_shares(a) -> np.ndarray:
    return np.atleast_1d(np.asarray(a, dtype=float))


def eval_demand(system: DemandSystem, w1, q, a) -> np.ndarray:
    """Demand vector at ``w1 = (p, x)``."""
    p, x = w1
    return system.demand(np.asarray(p, float), float(x), q, _as_shares(a))


def demand_derivatives(system: DemandSystem, w1, q, a):
    """Closed-form price Jacobian and income derivative."""
    p, x = w1
    a = _as_shares(a)
    p = np.asarray(p, float)
    return (system.price_jacobian(p, float(x), q, a),
            system.income_derivative(p, float(x), q, a))


def slutsky_matrix(system: DemandSystem, w1, q, a) -> np.ndarray:
    """``S = D_p phi + (d_x phi) phi'``."""
    jac, dx = demand_derivatives(system, w1, q, a)
    y = eval_demand(system, w1, q, a)
    return jac + np.outer(dx, y)


def slutsky_asymmetry(system: DemandSystem, w1, q, a, i: int, j: int) -> float:
    """``S_ij - S_ji`` with one-based good indices."""
    if i == j:
        raise ArgumentError("slutsky_asymmetry needs two distinct goods")
    for g in (i, j):
        if not 1 <= g <= system.n_inside:
            raise ArgumentError(f"good index {g} outside 1..{system.n_inside}")
    s = slutsky_matrix(system, w1, q, a)
    return float(s[i - 1, j - 1] - s[j - 1, i - 1])


def sample_heterogeneity(system: DemandSystem, n: int, seed: int, v=None) -> np.ndarray:
    """``n`` i.i.d. share vectors, shape ``(n, 2)``, reproducible from ``seed``."""
    if n < 1:
        raise ArgumentError("sample size must be at least 1")
    gen = _rng.stream(seed, _rng.STREAM_HETEROGENEITY)
    return system.law.sample(int(n), gen, v)


# --------------------------------------------------------------------------
# simulation design and datasets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Design:
    """Distributions of the observables.

    Prices, characteristics, exogenous income and the instrument are uniform
    on the given boxes; the first-stage residual ``V`` is normal with
    standard deviation ``v_sd`` truncated at ``±3 v_sd``.  In endogenous mode
    ``X = 0.5 * sum(p) + s + v``.
    """

    p_bounds: tuple = ((0.8, 1.2), (1.6, 2.4))
    x_bounds: tuple = (8.0, 12.0)
    s_bounds: tuple = (7.0, 9.0)
    q_bounds: tuple = ()
    v_sd: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "p_bounds", tuple(tuple(map(float, b)) for b in self.p_bounds))
        object.__setattr__(self, "q_bounds", tuple(tuple(map(float, b)) for b in self.q_bounds))
        object.__setattr__(self, "x_bounds", tuple(map(float, self.x_bounds)))
        object.__setattr__(self, "s_bounds", tuple(map(float, self.s_bounds)))
        if not self.p_bounds:
            raise ArgumentError("design has no price distributions")
        for lo, hi in self.p_bounds + (self.x_bounds, self.s_bounds) + self.q_bounds:
            if not lo < hi:
                raise ArgumentError(f"design interval ({lo}, {hi}) is empty")
        if any(lo <= 0 for lo, _ in self.p_bounds):
            raise DomainError("design prices must be strictly positive")

    def to_dict(self) -> dict:
        return {"p_bounds": [list(b) for b in self.p_bounds], "x_bounds": list(self.x_bounds),
                "s_bounds": list(self.s_bounds), "q_bounds": [list(b) for b in self.q_bounds],
                "v_sd": self.v_sd}

    @classmethod
    def from_dict(cls, data: dict) -> "Design":
        known = {"p_bounds", "x_bounds", "s_bounds", "q_bounds", "v_sd"}
        unknown = set(data) - known
        if unknown:
            raise ArgumentError(f"unknown design keys {sorted(unknown)}")
        return cls(**data)


def first_stage_mean(p: np.ndarray, q: np.ndarray | None = None) -> np.ndarray:
    """``m(p, q)`` of the built-in first stage ``X = m(p, q) + s + v``."""
    return 0.5 * np.sum(p, axis=-1)


@dataclass(frozen=True)
class SimulatedDataset:
    """Immutable cross-section; one row per household."""

    y: np.ndarray
    p: np.ndarray
    x: np.ndarray
    q: np.ndarray
    s: np.ndarray
    v_true: np.ndarray
    v_hat: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("y", "p", "x", "q", "s", "v_true", "v_hat"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.array(arr, dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = self.y.shape[0]
        for name in ("p", "x", "q", "s", "v_true"):
            if getattr(self, name).shape[0] != n:
                raise ArgumentError(f"column {name} has the wrong number of rows")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_goods(self) -> int:
        return self.y.shape[1]

    @property
    def endogenous(self) -> bool:
        return bool(self.meta.get("endogenous", False))

    def column(self, name: str) -> np.ndarray:
        if name == "x":
            return self.x
        if name == "v":
            if self.v_hat is None:
                raise StateError("dataset has no control residuals")
            return self.v_hat
        if name == "s":
            return self.s
        head, idx = name[0], int(name[1:]) - 1
        return {"p": self.p, "q": self.q, "y": self.y}[head][:, idx]

    def take(self, rows) -> "SimulatedDataset":
        rows = np.asarray(rows)
        return SimulatedDataset(
            y=self.y[rows], p=self.p[rows], x=self.x[rows], q=self.q[rows], s=self.s[rows],
            v_true=self.v_true[rows], v_hat=None if self.v_hat is None else self.v_hat[rows],
            meta={**self.meta, "n": int(rows.shape[0])})

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for arr in (self.y, self.p, self.x, self.q, self.s, self.v_true):
            digest.update(np.ascontiguousarray(arr).tobytes())
        if self.v_hat is not None:
            digest.update(np.ascontiguousarray(self.v_hat).tobytes())
        return digest.hexdigest()


def _truncated_normal(gen: np.random.Generator, n: int, sd: float) -> np.ndarray:
    out = gen.standard_normal(n)
    bad = np.abs(out) > 3.0
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 3.0
    return sd * out


def check_design(system: DemandSystem, design: Design, endogenous: bool) -> None:
    """Reject designs whose box is not budget-feasible for every share draw."""
    if len(design.p_bounds) != system.n_inside:
        raise DomainError(f"design has {len(design.p_bounds)} prices; "
                          f"{system.name} needs {system.n_inside}")
    if endogenous:
        x_min = (0.5 * sum(lo for lo, _ in design.p_bounds) + design.s_bounds[0]
                 - 3.0 * design.v_sd)
    else:
        x_min = design.x_bounds[0]
    if x_min <= 0:
        raise DomainError("design admits non-positive income")
    corners_p = np.array(np.meshgrid(*design.p_bounds)).reshape(system.n_inside, -1).T
    corners_a = np.array(np.meshgrid(*system.share_bounds)).reshape(system.n_inside, -1).T
    for p in corners_p:
        y = system._demand(p, x_min, corners_a)
        spend = y @ p
        if np.any(spend > x_min * (1 + 1e-12)):
            raise DomainError(f"design not inside the budget-feasible support of "
                              f"{system.name}: expenditure {spend.max():.4g} exceeds "
                              f"income {x_min:.4g} at prices {tuple(p)}")


def simulate_cross_section(system: DemandSystem, design: Design, n: int, seed: int,
                           endogenous: bool = False) -> SimulatedDataset:
    """Draw ``n`` households from the model ``Y = phi(P, X, Q, A)``.

    Every variable comes from its own counter-based stream keyed by
    ``seed``, so the dataset is a pure function of the arguments.
    """
    if n < 1:
        raise ArgumentError("sample size must be at least 1")
    check_design(system, design, endogenous)
    n = int(n)
    gen_p = _rng.stream(seed, _rng.STREAM_PRICES)
    p = np.column_stack([gen_p.uniform(lo, hi, n) for lo, hi in design.p_bounds])
    gen_q = _rng.stream(seed, _rng.STREAM_CHARACTERISTICS)
    if design.q_bounds:
        q = np.column_stack([gen_q.uniform(lo, hi, n) for lo, hi in design.q_bounds])
    else:
        q = np.zeros((n, 0))
    s = _rng.stream(seed, _rng.STREAM_INSTRUMENT).uniform(*design.s_bounds, n)
    v = _truncated_normal(_rng.stream(seed, _rng.STREAM_FIRST_STAGE), n, design.v_sd)
    if endogenous:
        x = first_stage_mean(p, q) + s + v
    else:
        x = _rng.stream(seed, _rng.STREAM_INCOME).uniform(*design.x_bounds, n)
    gen_a = _rng.stream(seed, _rng.STREAM_HETEROGENEITY)
    a = system.law.sample(n, gen_a, v)
    y = system._demand(p, x, a)
    slack = x - np.sum(p * y, axis=1)
    if np.any(slack < -1e-12):
        raise DomainError(f"simulated expenditure exceeds income in "
                          f"{int(np.sum(slack < -1e-12))} rows")
    meta = {"system": system.describe(), "seed": int(seed), "n": n,
            "design": design.to_dict(), "endogenous": bool(endogenous)}
    return SimulatedDataset(y=y, p=p, x=x, q=q, s=s, v_true=v, meta=meta)


def _rule_of_thumb(values: np.ndarray, d: int) -> float:
    sd = float(np.std(values, ddof=1))
    return 1.06 * sd * values.shape[0] ** (-1.0 / (4 + d))


def kernel_regression(features: np.ndarray, target: np.ndarray,
                      bandwidths: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Nadaraya-Watson fit at every sample point (biweight product kernel)."""
    scaled = features / bandwidths
    tree = cKDTree(scaled)
    fitted = np.empty(target.shape[0])
    for start in range(0, scaled.shape[0], chunk):
        block = scaled[start:start + chunk]
        pairs = cKDTree(block).sparse_distance_matrix(tree, 1.0, p=np.inf,
                                                      output_type="ndarray")
        rows, cols = pairs["i"], pairs["j"]
        u = block[rows] - scaled[cols]
        w = np.prod((1.0 - u * u) ** 2, axis=1)
        num = np.bincount(rows, weights=w * target[cols], minlength=block.shape[0])
        den = np.bincount(rows, weights=w, minlength=block.shape[0])
        # self-pairs always carry weight 1, so den > 0
        fitted[start:start + chunk] = num / den
    return fitted


def control_residuals(dataset: SimulatedDataset, mode: str = "true-v") -> SimulatedDataset:
    """Attach control-function residuals ``v_hat`` to an endogenous dataset.

    ``mode="true-v"`` copies the latent residual; ``mode="estimated"`` fits
    ``E[X | P, Q, S]`` by kernel regression and keeps ``x - fitted``.
    """
    if not dataset.endogenous:
        raise StateError("control residuals need a dataset simulated in endogenous mode")
    if mode in ("true-v", "true"):
        v_hat = dataset.v_true.copy()
    elif mode == "estimated":
        if dataset.n < 2:
            raise EstimationError("at least two rows are needed to fit the first stage")
        feats = np.column_stack([dataset.p, dataset.q, dataset.s])
        d = feats.shape[1]
        bw = np.array([_rule_of_thumb(feats[:, k], d) for k in range(d)])
        if np.any(bw <= 0):
            raise EstimationError("first-stage regressor has zero variance")
        v_hat = dataset.x - kernel_regression(feats, dataset.x, bw)
    else:
        raise ArgumentError(f"unknown control mode {mode!r}")
    meta = {**dataset.meta, "control": mode}
    return replace(dataset, v_hat=v_hat, meta=meta)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def dataset_header(n_goods: int, n_chars: int) -> list:
    return ([f"y{k}" for k in range(1, n_goods + 1)] + [f"p{k}" for k in range(1, n_goods + 1)]
            + ["x"] + [f"q{k}" for k in range(1, n_chars + 1)] + ["s", "v_true", "v_hat"])


def write_dataset(dataset: SimulatedDataset, path) -> tuple:
    """Write ``<path>`` (CSV) and ``<path>.json`` (metadata); return both paths."""
    path = Path(path)
    header = dataset_header(dataset.n_goods, dataset.q.shape[1])
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        body = np.column_stack([dataset.y, dataset.p, dataset.x, dataset.q, dataset.s,
                                dataset.v_true])
        for k, row in enumerate(body):
            vh = "" if dataset.v_hat is None else repr(float(dataset.v_hat[k]))
            writer.writerow([repr(float(c)) for c in row] + [vh])
    meta_path = path.with_name(path.name + ".json")
    meta = {key: dataset.meta.get(key) for key in ("system", "seed", "n", "design", "endogenous")}
    meta.update({k: v for k, v in dataset.meta.items() if k not in meta})
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path, meta_path


def read_dataset(path, meta_path=None) -> SimulatedDataset:
    path = Path(path)
    meta_path = Path(meta_path) if meta_path else path.with_name(path.name + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    m = sum(1 for h in header if h.startswith("y"))
    k = sum(1 for h in header if h.startswith("q"))
    if header != dataset_header(m, k):
        raise ArgumentError(f"unexpected dataset header {header}")
    n = len(rows)
    body = np.array([[float(c) for c in r[:-1]] for r in rows], dtype=float).reshape(n, -1)
    vh_raw = [r[-1] for r in rows]
    present = [c != "" for c in vh_raw]
    if any(present) and not all(present):
        raise ArgumentError("v_hat must be present on every row or on none")
    v_hat = np.array([float(c) for c in vh_raw]) if n and all(present) else None
    col = 0
    y = body[:, col:col + m]; col += m
    p = body[:, col:col + m]; col += m
    x = body[:, col]; col += 1
    q = body[:, col:col + k]; col += k
    s = body[:, col]; col += 1
    v_true = body[:, col]
    return SimulatedDataset(y=y, p=p, x=x, q=q, s=s, v_true=v_true, v_hat=v_hat, meta=meta)


def system_from_meta(meta: dict) -> DemandSystem:
    entry = meta["system"]
    return make_system(entry["name"], **json.loads(json.dumps(entry.get("params", {}))))


def design_from_meta(meta: dict) -> Design:
    return Design.from_dict(meta["design"])

