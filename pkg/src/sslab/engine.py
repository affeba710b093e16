"""Identification formula, correction terms and pointwise symmetry residuals.

The engine is written against the :class:`QuantileProvider` contract only,
so the same code runs on the population oracle and on the kernel
estimators.  Providers may return numpy arrays instead of scalars (one
entry per bootstrap replicate); every formula here is plain arithmetic and
broadcasts.

For an ordered pair ``(i | j)`` at a point ``(y_i*, y_j*)`` with indices
``gamma = F_{Y_i|W,Y_j}(y_i*)`` and ``alpha_j = F_{Y_j|W}(y_j*)``, the
partial effect of coordinate ``s`` is recovered as

    d1_s k + d_s k_marg * C + D_s,
    C   = d2 k + d2 F / f,
    D_s = d_s F / f,

where ``k`` is the conditional ``gamma``-quantile of ``Y_i`` given
``Y_j = y_j*``, ``k_marg`` the marginal ``alpha_j``-quantile of ``Y_j`` and
``f`` the conditional density.  The ``F`` derivatives follow the
:class:`~sslab.oracle.ChannelMode`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Protocol

import numpy as np

from .dgp import ContextPoint, derivative_coordinate
from .errors import (ArgumentError, ProviderInconsistencyError, SslabError,
                     UnsupportedChannelError)
from .numdiff import FdScheme, fd_partial
from .oracle import ChannelMode


class QuantileProvider(Protocol):
    """Contract shared by the population oracle and the kernel estimators."""

    supports_frozen: bool
    roundtrip_tol: float
    c_min: float

    def fd_scheme(self, coordinate: str, i: int = 1, j: int | None = None) -> FdScheme: ...

    def marginal_cdf(self, w: ContextPoint, i: int, y: float) -> Any: ...

    def marginal_quantile(self, w: ContextPoint, i: int, alpha: Any) -> Any: ...

    def conditional_cdf(self, w: ContextPoint, i: int, j: int, y_j: float, y_i: float) -> Any: ...

    def conditional_density(self, w: ContextPoint, i: int, j: int, y_j: float,
                            y_i: float) -> Any: ...

    def conditional_quantile(self, w: ContextPoint, i: int, j: int, y_j: float,
                             gamma: Any) -> Any: ...

    def two_context_conditional_cdf(self, w_struct: ContextPoint, w_cond: ContextPoint,
                                    i: int, j: int, y_j: float, y_i: float) -> Any: ...


@dataclass(frozen=True)
class QuantileIndices:
    """Quantile levels reproducing the point ``(y_i, y_j)`` at context ``w``."""

    alpha_i: Any
    alpha_j: Any
    gamma_i_given_j: Any
    gamma_j_given_i: Any
    y_i: float
    y_j: float

    def oriented(self, i_first: bool) -> tuple:
        """``(gamma, alpha, y_cond, y_eval)`` for the ``(i|j)`` or ``(j|i)`` side."""
        if i_first:
            return self.gamma_i_given_j, self.alpha_j, self.y_j, self.y_i
        return self.gamma_j_given_i, self.alpha_i, self.y_i, self.y_j


@dataclass
class CorrectionTerms:
    C: Any
    D: tuple
    Dx: Any
    channel: ChannelMode
    diagnostics: dict = field(default_factory=dict)


@dataclass
class SymmetryResidual:
    lhs: Any
    rhs: Any
    residual: Any
    w: ContextPoint
    i: int
    j: int
    y_i: float
    y_j: float
    indices: QuantileIndices
    channel: ChannelMode
    corrections_ij: CorrectionTerms | None = None
    corrections_ji: CorrectionTerms | None = None


def _bad(err, tol):
    err = np.asarray(err, dtype=float)
    return ~(err <= tol)


def quantile_indices(provider: QuantileProvider, w: ContextPoint, i: int, j: int,
                     y_i: float, y_j: float) -> QuantileIndices:
    """The four levels at which provider quantiles reproduce ``(y_i, y_j)``.

    Raises :class:`ProviderInconsistencyError` when a quantile evaluated at
    its own level misses the point by more than ``provider.roundtrip_tol``.
    For replicate-vectorised providers, failing replicates are set to NaN
    and only a failure of every replicate raises.
    """
    if i == j:
        raise ArgumentError("quantile indices need two distinct goods")
    alpha_i = provider.marginal_cdf(w, i, y_i)
    alpha_j = provider.marginal_cdf(w, j, y_j)
    gamma_ij = provider.conditional_cdf(w, i, j, y_j, y_i)
    gamma_ji = provider.conditional_cdf(w, j, i, y_i, y_j)
    levels = [alpha_i, alpha_j, gamma_ij, gamma_ji]
    bad = np.zeros(np.shape(alpha_i), dtype=bool)
    for lvl in levels:
        bad |= ~((np.asarray(lvl) > 0.0) & (np.asarray(lvl) < 1.0))
    ok = ~bad
    if np.ndim(ok) == 0 and not ok:
        raise ProviderInconsistencyError(
            f"point ({y_i}, {y_j}) is not interior: levels {[float(x) for x in levels]}")
    if np.ndim(ok) and not ok.any():
        raise ProviderInconsistencyError(f"point ({y_i}, {y_j}) is not interior in any replicate")
    safe = [np.where(ok, lvl, 0.5) if np.ndim(lvl) else lvl for lvl in levels]
    checks = (
        (provider.marginal_quantile(w, i, safe[0]), y_i, "marginal quantile of good i"),
        (provider.marginal_quantile(w, j, safe[1]), y_j, "marginal quantile of good j"),
        (provider.conditional_quantile(w, i, j, y_j, safe[2]), y_i, "conditional quantile i|j"),
        (provider.conditional_quantile(w, j, i, y_i, safe[3]), y_j, "conditional quantile j|i"),
    )
    for got, want, what in checks:
        miss = _bad(np.abs(np.asarray(got) - want), provider.roundtrip_tol)
        if np.ndim(miss) == 0:
            if miss:
                raise ProviderInconsistencyError(
                    f"{what} misses its point: got {float(got)!r}, want {want!r}")
        else:
            bad = bad | miss
    if np.ndim(bad):
        if bad.all():
            raise ProviderInconsistencyError("round trip failed in every replicate")
        levels = [np.where(bad, np.nan, lvl) for lvl in levels]
    return QuantileIndices(*levels, y_i=float(y_i), y_j=float(y_j))


class _PairCalculus:
    """Memoised derivative pieces for one ordered pair ``(i | j)``."""

    def __init__(self, provider, w, i, j, indices: QuantileIndices, channel, scheme,
                 i_first=True):
        if i == j:
            raise ArgumentError("pair calculus needs two distinct goods")
        channel = ChannelMode(channel)
        if channel is ChannelMode.FROZEN and not getattr(provider, "supports_frozen", False):
            raise UnsupportedChannelError(
                "the Frozen channel needs structural access; this provider has none")
        self.provider, self.w, self.i, self.j = provider, w, i, j
        self.gamma, self.alpha_j, self.y_j, self.y_i = indices.oriented(i_first)
        self.channel = channel
        self.scheme = scheme
        self._memo: dict = {}

    def _scheme(self, coordinate, marginal=False):
        if self.scheme is not None:
            return self.scheme
        if marginal:
            return self.provider.fd_scheme(coordinate, self.j, None)
        return self.provider.fd_scheme(coordinate, self.i, self.j)

    def _once(self, key, compute):
        if key not in self._memo:
            self._memo[key] = compute()
        return self._memo[key]

    def density(self):
        return self._once("f", lambda: self.provider.conditional_density(
            self.w, self.i, self.j, self.y_j, self.y_i))

    def dk_cond(self, coord):
        pv, i, j, y_j, g = self.provider, self.i, self.j, self.y_j, self.gamma
        return self._once(("dk", coord), lambda: fd_partial(
            lambda ww: pv.conditional_quantile(ww, i, j, y_j, g), self.w, coord,
            self._scheme(coord)))

    def dk_marg(self, coord):
        pv, j, a = self.provider, self.j, self.alpha_j
        return self._once(("dkm", coord), lambda: fd_partial(
            lambda ww: pv.marginal_quantile(ww, j, a), self.w, coord,
            self._scheme(coord, marginal=True)))

    def d2k(self):
        pv, w, i, j, g = self.provider, self.w, self.i, self.j, self.gamma
        return self._once("d2k", lambda: fd_partial(
            lambda t: pv.conditional_quantile(w, i, j, t, g), self.y_j, None,
            self._scheme(f"y{j}")))

    def d2F(self):
        if self.channel is ChannelMode.STABLE_COMPOSITION:
            return 0.0
        pv, w, i, j, y_i = self.provider, self.w, self.i, self.j, self.y_i
        if self.channel is ChannelMode.FROZEN:
            func = lambda t: pv.two_context_conditional_cdf(w, w, i, j, t, y_i)
        else:
            func = lambda t: pv.conditional_cdf(w, i, j, t, y_i)
        return self._once("d2F", lambda: fd_partial(func, self.y_j, None,
                                                    self._scheme(f"y{j}")))

    def dF(self, coord):
        if self.channel is ChannelMode.STABLE_COMPOSITION:
            return 0.0
        pv, w, i, j, y_j, y_i = self.provider, self.w, self.i, self.j, self.y_j, self.y_i
        if self.channel is ChannelMode.FROZEN:
            func = lambda wc: pv.two_context_conditional_cdf(w, wc, i, j, y_j, y_i)
        else:
            func = lambda ww: pv.conditional_cdf(ww, i, j, y_j, y_i)
        return self._once(("dF", coord), lambda: fd_partial(func, w, coord,
                                                            self._scheme(coord)))

    def C(self):
        return self.d2k() + self.d2F() / self.density()

    def D(self, coord):
        return self.dF(coord) / self.density()

    def lemma_rhs(self, coord):
        return self.dk_cond(coord) + self.dk_marg(coord) * self.C() + self.D(coord)

    def corrections(self) -> CorrectionTerms:
        n = self.w.n_goods
        dens = self.density()
        return CorrectionTerms(
            C=self.C(), D=tuple(self.D(f"p{k}") for k in range(1, n + 1)), Dx=self.D("x"),
            channel=self.channel,
            diagnostics={"density": dens,
                         "floored": bool(np.any(np.asarray(dens) <= self.provider.c_min))})

    def half(self):
        """One side of the symmetry equation (the ``e_i' S e_j`` reconstruction)."""
        pj = f"p{self.j}"
        y_cond = self.y_j
        return (self.dk_cond(pj) + self.dk_cond("x") * y_cond
                + self.C() * (self.dk_marg(pj) + self.dk_marg("x") * y_cond)
                + self.D(pj) + self.D("x") * y_cond)


def lemma1_rhs(provider: QuantileProvider, w: ContextPoint, s: int, i: int, j: int,
               indices: QuantileIndices, channel=ChannelMode.FROZEN,
               scheme: FdScheme | None = None):
    """Quantile-side expression for ``E[d phi_i / d w_s | W, Y_i, Y_j]``.

    ``s`` runs over ``1..L`` (prices, then income).  In the Observable
    channel the expression collapses to zero identically; in the Frozen
    channel it recovers the structural conditional expectation.
    """
    coord = derivative_coordinate(s, w.n_goods)
    return _PairCalculus(provider, w, i, j, indices, channel, scheme).lemma_rhs(coord)


def correction_C(provider, w, i, j, indices, channel=ChannelMode.FROZEN, scheme=None):
    """``d2 k + d2 F / f`` for the ``(i | j)`` side."""
    return _PairCalculus(provider, w, i, j, indices, channel, scheme).C()


def correction_D(provider, w, i, j, indices, channel=ChannelMode.FROZEN, scheme=None):
    """``(D vector over prices, D_x)`` for the ``(i | j)`` side."""
    calc = _PairCalculus(provider, w, i, j, indices, channel, scheme)
    terms = calc.corrections()
    return terms.D, terms.Dx


def correction_terms(provider, w, i, j, indices, channel=ChannelMode.FROZEN,
                     scheme=None) -> CorrectionTerms:
    return _PairCalculus(provider, w, i, j, indices, channel, scheme).corrections()


def symmetry_sides(provider: QuantileProvider, w: ContextPoint, i: int, j: int,
                   indices: QuantileIndices, channel=ChannelMode.FROZEN,
                   scheme: FdScheme | None = None) -> SymmetryResidual:
    """Both sides of the symmetry restriction for the pair ``(i, j)``.

    ``lhs`` is built by conditioning on ``Y_j`` first and ``rhs`` by
    conditioning on ``Y_i`` first; each ``nabla ... e_j`` is read as selecting
    the ``j``-th price component.
    """
    if i == j:
        raise ArgumentError("symmetry needs two distinct goods")
    left = _PairCalculus(provider, w, i, j, indices, channel, scheme, i_first=True)
    right = _PairCalculus(provider, w, j, i, indices, channel, scheme, i_first=False)
    lhs, rhs = left.half(), right.half()
    return SymmetryResidual(lhs=lhs, rhs=rhs, residual=lhs - rhs, w=w, i=i, j=j,
                            y_i=indices.y_i, y_j=indices.y_j, indices=indices,
                            channel=ChannelMode(channel), corrections_ij=left.corrections(),
                            corrections_ji=right.corrections())


def hicksian_gap_report(provider: QuantileProvider, points: Iterable,
                        channel=ChannelMode.FROZEN, scheme: FdScheme | None = None,
                        materiality: float = 0.01) -> dict:
    """Magnitudes of the correction terms across a set of points.

    ``points`` holds objects with attributes ``w, i, j, y_i, y_j`` (such as
    harness grid points) or equivalent tuples.  Failures at individual
    points are reported in the table and do not abort the report.
    """
    rows = []
    for k, pt in enumerate(points):
        w, i, j, y_i, y_j = _unpack_point(pt)
        row = {"point_id": k, "w": w.to_dict(), "i": i, "j": j, "y_i": y_i, "y_j": y_j}
        try:
            idx = quantile_indices(provider, w, i, j, y_i, y_j)
            terms = correction_terms(provider, w, i, j, idx, channel, scheme)
            row.update(abs_C=float(abs(terms.C)),
                       norm_D=float(np.linalg.norm(np.asarray(terms.D, dtype=float))),
                       abs_Dx=float(abs(terms.Dx)), error=None)
            row["material"] = max(row["abs_C"], row["norm_D"], row["abs_Dx"]) > materiality
        except SslabError as exc:
            row.update(abs_C=math.nan, norm_D=math.nan, abs_Dx=math.nan, material=False,
                       error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    summary = {}
    for key in ("abs_C", "norm_D", "abs_Dx"):
        vals = np.array([r[key] for r in rows if r["error"] is None], dtype=float)
        if vals.size:
            q = np.quantile(vals, [0.0, 0.5, 0.9, 1.0])
            summary[key] = {"min": q[0], "median": q[1], "q90": q[2], "max": q[3]}
        else:
            summary[key] = None
    return {"channel": ChannelMode(channel).value, "materiality": materiality,
            "rows": rows, "summary": summary}


def _unpack_point(pt):
    if hasattr(pt, "w"):
        return pt.w, pt.i, pt.j, pt.y_i, pt.y_j
    w, i, j, y_i, y_j = pt
    return w, i, j, y_i, y_j
