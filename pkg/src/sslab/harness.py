"""Evaluation grids, residual fields, the bootstrap test and Monte Carlo studies."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import rng as _rng
from .dgp import ContextPoint, Design, DemandSystem, SimulatedDataset, simulate_cross_section
from .engine import SymmetryResidual, lemma1_rhs, quantile_indices, symmetry_sides
from .errors import (ArgumentError, EmptyGridError, EstimationError, ReportParseError,
                     SslabError, UnreliableBootstrapError, UnsupportedChannelError)
from .estimators import KernelQuantileProvider
from .numdiff import FdScheme
from .oracle import ALL_CHANNELS, ChannelMode

log = logging.getLogger(__name__)

NOMINAL_LEVEL = 0.05
MAX_INVALID_FRACTION = 0.2
MIN_SUCCESS_FRACTION = 0.5

DEFAULT_CONTEXTS = (
    ContextPoint((1.0, 2.0), 10.0),
    ContextPoint((0.95, 2.1), 9.5),
    ContextPoint((1.05, 1.9), 10.5),
)


# -- grids -------------------------------------------------------------------

@dataclass(frozen=True)
class GridDesign:
    """Levels x contexts x good pairs.

    Each level ``l`` places the point at ``(k_{l,i}(w), k_{l,j}(w))``.
    """

    contexts: tuple = DEFAULT_CONTEXTS
    levels: tuple = (0.25, 0.5, 0.75)
    pairs: tuple = ((1, 2),)
    trim: tuple = (0.1, 0.9)

    def __post_init__(self):
        object.__setattr__(self, "contexts", tuple(
            c if isinstance(c, ContextPoint) else ContextPoint.from_dict(c)
            for c in self.contexts))
        object.__setattr__(self, "levels", tuple(float(l) for l in self.levels))
        object.__setattr__(self, "pairs", tuple(tuple(int(g) for g in p) for p in self.pairs))
        object.__setattr__(self, "trim", tuple(float(t) for t in self.trim))
        lo, hi = self.trim
        for level in self.levels:
            if not lo <= level <= hi:
                raise ArgumentError(f"level {level} outside the trimming bounds [{lo}, {hi}]")
        for i, j in self.pairs:
            if i == j:
                raise ArgumentError(f"pair ({i}, {j}) repeats a good")

    def to_dict(self) -> dict:
        return {"contexts": [c.to_dict() for c in self.contexts], "levels": list(self.levels),
                "pairs": [list(p) for p in self.pairs], "trim": list(self.trim)}

    @classmethod
    def from_dict(cls, data: dict) -> "GridDesign":
        unknown = set(data) - {"contexts", "levels", "pairs", "trim"}
        if unknown:
            raise ArgumentError(f"unknown grid design keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in data.items()})


@dataclass(frozen=True)
class GridPoint:
    point_id: int
    w: ContextPoint
    i: int
    j: int
    y_i: float
    y_j: float
    level_i: float
    level_j: float

    def to_dict(self) -> dict:
        return {"point_id": self.point_id, "w": self.w.to_dict(), "i": self.i, "j": self.j,
                "y_i": self.y_i, "y_j": self.y_j, "level_i": self.level_i,
                "level_j": self.level_j}


@dataclass(frozen=True)
class EvaluationGrid:
    points: tuple
    trim: tuple = (0.1, 0.9)
    dropped: tuple = ()

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)


def build_grid(provider, design: GridDesign, allow_empty: bool = False) -> EvaluationGrid:
    """Cartesian product of the design, placed with provider quantiles.

    Points whose conditional densities (either conditioning order) fall
    to the provider's floor, or whose placement fails, are dropped and
    logged.
    """
    points, dropped = [], []
    for w in design.contexts:
        for i, j in design.pairs:
            for level in design.levels:
                try:
                    y_i = float(provider.marginal_quantile(w, i, level))
                    y_j = float(provider.marginal_quantile(w, j, level))
                    for a, b, ya, yb in ((i, j, y_i, y_j), (j, i, y_j, y_i)):
                        f = float(provider.conditional_density(w, a, b, yb, ya))
                        if not f > provider.c_min:
                            raise EstimationError(
                                f"conditional density of Y{a} given Y{b} is {f:.3g}, "
                                f"at or below the floor {provider.c_min}")
                except SslabError as exc:
                    entry = {"w": w.to_dict(), "i": i, "j": j, "level": level,
                             "reason": f"{type(exc).__name__}: {exc}"}
                    log.warning("dropping grid point %s", entry)
                    dropped.append(entry)
                    continue
                points.append(GridPoint(len(points), w, i, j, y_i, y_j, level, level))
    if not points and not allow_empty:
        raise EmptyGridError(f"all {len(dropped)} candidate grid points were dropped")
    return EvaluationGrid(tuple(points), design.trim, tuple(dropped))


# -- residual fields ---------------------------------------------------------

@dataclass
class PointResult:
    """Outcome of the symmetry evaluation at one grid point and channel."""

    point: GridPoint
    channel: ChannelMode
    residual: SymmetryResidual | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.residual is not None

    @property
    def value(self):
        return self.residual.residual if self.ok else math.nan


def _evaluate_point(provider, point: GridPoint, channel, scheme) -> PointResult:
    channel = ChannelMode(channel)
    try:
        idx = quantile_indices(provider, point.w, point.i, point.j, point.y_i, point.y_j)
        res = symmetry_sides(provider, point.w, point.i, point.j, idx, channel, scheme)
    except SslabError as exc:
        return PointResult(point, channel, error=f"{type(exc).__name__}: {exc}")
    return PointResult(point, channel, residual=res)


def evaluate_residual_field(provider, grid: EvaluationGrid, channel=ChannelMode.FROZEN,
                            scheme: FdScheme | None = None,
                            threads: int | None = None) -> list:
    """Symmetry residuals at every grid point; failures are recorded per point."""
    if len(grid) == 0:
        raise EmptyGridError("cannot evaluate a residual field on an empty grid")
    results = _rng.parallel_map(lambda pt: _evaluate_point(provider, pt, channel, scheme),
                                grid.points, threads)
    unsupported = 0
    for r in results:
        if r.ok:
            continue
        if r.error.startswith(UnsupportedChannelError.__name__):
            unsupported += 1
        else:
            log.warning("point %d (%s): %s", r.point.point_id, r.channel.value, r.error)
    if unsupported:
        log.info("%s channel unavailable for this provider at %d points",
                 ChannelMode(channel).value, unsupported)
    return results


def _residual_values(residuals) -> np.ndarray:
    out = []
    for r in residuals:
        if isinstance(r, PointResult):
            out.append(r.value)
        elif isinstance(r, SymmetryResidual):
            out.append(r.residual)
        else:
            out.append(r)
    return np.asarray(out, dtype=float)


def test_statistic(residuals, weights=None) -> float:
    """``T = sum_k w_k r_k^2`` over the valid residuals, weights normalised to one."""
    r = _residual_values(residuals)
    w = np.ones_like(r) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != r.shape:
        raise ArgumentError("weights and residuals differ in length")
    if np.any(w < 0):
        raise ArgumentError("weights must be nonnegative")
    ok = np.isfinite(r) & (w > 0)
    if not ok.any():
        raise EstimationError("no valid residuals to form a statistic")
    w = w[ok] / w[ok].sum()
    return float(np.sum(w * r[ok] ** 2))


test_statistic.__test__ = False  # not a pytest test despite the name


# -- bootstrap ---------------------------------------------------------------

def bootstrap_counts(n: int, seed: int, replicates: Sequence[int]) -> np.ndarray:
    """Row multiplicities of the pairs bootstrap, one stream per replicate."""
    out = np.empty((len(replicates), n), dtype=np.uint16)
    for k, b in enumerate(replicates):
        draws = _rng.stream(seed, _rng.STREAM_BOOTSTRAP + int(b)).integers(0, n, n)
        out[k] = np.bincount(draws, minlength=n)
    return out


@dataclass
class BootstrapResult:
    statistic: float
    p_value: float
    replicates: list
    n_invalid: int
    base: list
    grid: EvaluationGrid


def bootstrap_pvalue(dataset: SimulatedDataset, design: GridDesign,
                     channel=ChannelMode.STABLE_COMPOSITION, B: int = 199, seed: int = 0,
                     estimator: dict | None = None, scheme: FdScheme | None = None,
                     batch: int = 50, threads: int | None = None,
                     weights=None) -> BootstrapResult:
    """Centred pairs-bootstrap p-value of the L2 symmetry statistic.

    Each replicate resamples rows with replacement (expressed as row
    multiplicities); bandwidths and outcome grids are those of the full
    sample.  Replicate statistics are ``sum_k w_k (r_bk - r_k)^2`` over the
    grid points that succeeded on the full sample.  A replicate failing at
    any such point is invalid; the p-value is
    ``(1 + #{T_b >= T}) / (B_valid + 1)``.

    Raises
    ------
    UnreliableBootstrapError
        More than 20% of replicates are invalid.
    """
    if B < 19:
        raise ArgumentError(f"need at least 19 bootstrap replicates, got {B}")
    provider = KernelQuantileProvider(dataset, **(estimator or {}))
    grid = build_grid(provider, design)
    base = evaluate_residual_field(provider, grid, channel, scheme, threads=1)
    r_hat = _residual_values(base)
    ok = np.isfinite(r_hat)
    if ok.mean() < MIN_SUCCESS_FRACTION:
        raise EstimationError(f"only {int(ok.sum())} of {ok.size} grid points succeeded")
    w = np.ones_like(r_hat) if weights is None else np.asarray(weights, dtype=float)
    w = np.where(ok, w, 0.0)
    w = w / w.sum()
    T = float(np.sum(w[ok] * r_hat[ok] ** 2))
    live = [pt for pt, good in zip(grid.points, ok) if good]
    sub = EvaluationGrid(tuple(live), grid.trim)

    def run_batch(ids):
        rep = provider.replicate(bootstrap_counts(dataset.n, seed, ids))
        rows = []
        for pt in sub.points:
            res = _evaluate_point(rep, pt, channel, scheme)
            vals = (np.asarray(res.residual.residual, dtype=float) if res.ok
                    else np.full(len(ids), np.nan))
            rows.append(np.broadcast_to(vals, (len(ids),)))
        return np.array(rows)

    batches = [list(range(s, min(B, s + batch))) for s in range(0, B, batch)]
    fields = np.concatenate(_rng.parallel_map(run_batch, batches, threads), axis=1)
    dev = fields - r_hat[ok][:, None]
    stats = np.sum(w[ok][:, None] * dev ** 2, axis=0)
    valid = np.all(np.isfinite(dev), axis=0)
    stats = np.where(valid, stats, np.nan)
    n_invalid = int((~valid).sum())
    if n_invalid > MAX_INVALID_FRACTION * B:
        raise UnreliableBootstrapError(
            f"{n_invalid} of {B} bootstrap replicates failed (limit {MAX_INVALID_FRACTION:.0%})")
    exceed = int(np.sum(stats[valid] >= T))
    p = (1 + exceed) / (int(valid.sum()) + 1)
    return BootstrapResult(T, p, [float(s) for s in stats], n_invalid, base, grid)


# -- reports -----------------------------------------------------------------

def _num(x):
    """JSON-safe float (NaN and infinities become null)."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _denum(x):
    return math.nan if x is None else float(x)


def point_record(result: PointResult) -> dict:
    pt = result.point
    rec = {"point_id": pt.point_id, "w": pt.w.to_dict(), "y_i": pt.y_i, "y_j": pt.y_j,
           "i": pt.i, "j": pt.j, "level_i": pt.level_i, "level_j": pt.level_j,
           "channel": result.channel.value}
    if result.ok:
        r = result.residual
        c = r.corrections_ij
        rec.update(lhs=_num(r.lhs), rhs=_num(r.rhs), residual=_num(r.residual),
                   corrections={"C": _num(c.C), "D": [_num(d) for d in c.D], "Dx": _num(c.Dx)},
                   error=None)
    else:
        rec.update(lhs=None, rhs=None, residual=None,
                   corrections={"C": None, "D": None, "Dx": None}, error=result.error)
    return rec


_POINT_FIELDS = ("point_id", "w", "y_i", "y_j", "i", "j", "level_i", "level_j", "channel",
                 "lhs", "rhs", "residual", "corrections")
_TOP_FIELDS = ("meta", "points", "statistic", "replicates", "p_value")


@dataclass
class TestReport:
    """Everything a symmetry test run produced.

    ``points`` holds one record per (grid point, channel); the statistic
    and p-value refer to ``channel``.
    """

    __test__ = False

    points: list
    statistic: float | None
    replicates: list
    p_value: float | None
    channel: str
    seed: int
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    runtime_s: float = 0.0
    dropped: list = field(default_factory=list)
    n_invalid: int = 0

    def to_dict(self) -> dict:
        return {
            "meta": {"seed": self.seed, "config_hash": self.config_hash,
                     "runtime_s": self.runtime_s},
            "channel": self.channel,
            "config": self.config,
            "points": self.points,
            "statistic": _num(self.statistic),
            "replicates": [_num(r) for r in self.replicates],
            "n_invalid": self.n_invalid,
            "p_value": _num(self.p_value),
            "dropped": self.dropped,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TestReport":
        for name in _TOP_FIELDS:
            if name not in data:
                raise ReportParseError(f"report is missing field '{name}'")
        meta = data["meta"]
        for name in ("seed", "config_hash", "runtime_s"):
            if name not in meta:
                raise ReportParseError(f"report is missing field 'meta.{name}'")
        for k, rec in enumerate(data["points"]):
            for name in _POINT_FIELDS:
                if name not in rec:
                    raise ReportParseError(f"report is missing field 'points[{k}].{name}'")
        return cls(points=data["points"],
                   statistic=None if data["statistic"] is None else float(data["statistic"]),
                   replicates=[_denum(r) for r in data["replicates"]],
                   p_value=None if data["p_value"] is None else float(data["p_value"]),
                   channel=data.get("channel", ""), seed=int(meta["seed"]),
                   config=data.get("config", {}), config_hash=meta["config_hash"],
                   runtime_s=float(meta["runtime_s"]), dropped=data.get("dropped", []),
                   n_invalid=int(data.get("n_invalid", 0)))


def write_report(report: TestReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, allow_nan=False)
        fh.write("\n")


def read_report(path) -> TestReport:
    """Load a report written by :func:`write_report`.

    Raises
    ------
    ReportParseError
        Malformed JSON (with line and column) or a missing field.
    """
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ReportParseError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") \
            from exc
    if not isinstance(data, dict):
        raise ReportParseError(f"{path}: top level must be an object")
    return TestReport.from_dict(data)


def write_residual_field(report: TestReport, path) -> int:
    """CSV ``point_id,level_i,level_j,residual,channel``; returns the row count."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["point_id", "level_i", "level_j", "residual", "channel"])
        for rec in report.points:
            res = rec["residual"]
            out.writerow([rec["point_id"], repr(float(rec["level_i"])),
                          repr(float(rec["level_j"])), "" if res is None else repr(float(res)),
                          rec["channel"]])
    return len(report.points)


def all_channel_records(provider, grid: EvaluationGrid, scheme=None, threads=None,
                        precomputed: dict | None = None) -> list:
    """Point records for every channel, grouped by point then channel."""
    per_channel = dict(precomputed or {})
    for ch in ALL_CHANNELS:
        if ch not in per_channel:
            per_channel[ch] = evaluate_residual_field(provider, grid, ch, scheme, threads)
    records = []
    for k in range(len(grid)):
        for ch in ALL_CHANNELS:
            records.append(point_record(per_channel[ch][k]))
    return records


def run_symmetry_test(dataset: SimulatedDataset, design: GridDesign,
                      channel=ChannelMode.STABLE_COMPOSITION, B: int = 199, seed: int = 0,
                      estimator: dict | None = None, scheme: FdScheme | None = None,
                      config: dict | None = None, config_hash: str = "",
                      threads: int | None = None) -> TestReport:
    """Bootstrap test on data, with all channels recorded per point."""
    start = time.perf_counter()
    channel = ChannelMode(channel)
    boot = bootstrap_pvalue(dataset, design, channel, B, seed, estimator, scheme,
                            threads=threads)
    provider = KernelQuantileProvider(dataset, **(estimator or {}))
    records = all_channel_records(provider, boot.grid, scheme, threads,
                                  precomputed={channel: boot.base})
    return TestReport(points=records, statistic=boot.statistic, replicates=boot.replicates,
                      p_value=boot.p_value, channel=channel.value, seed=seed,
                      config=config or {}, config_hash=config_hash,
                      runtime_s=time.perf_counter() - start, dropped=list(boot.grid.dropped),
                      n_invalid=boot.n_invalid)


def run_oracle_check(oracle, design: GridDesign, channel=ChannelMode.FROZEN, seed: int = 0,
                     scheme: FdScheme | None = None, config: dict | None = None,
                     config_hash: str = "", threads: int | None = None) -> TestReport:
    """Residual field of the population oracle under every channel (no bootstrap)."""
    start = time.perf_counter()
    channel = ChannelMode(channel)
    grid = build_grid(oracle, design)
    records = all_channel_records(oracle, grid, scheme, threads)
    values = [r["residual"] for r in records if r["channel"] == channel.value]
    stat = test_statistic([_denum(v) for v in values])
    return TestReport(points=records, statistic=stat, replicates=[], p_value=None,
                      channel=channel.value, seed=seed, config=config or {},
                      config_hash=config_hash, runtime_s=time.perf_counter() - start,
                      dropped=list(grid.dropped))


def lemma_check(oracle, design: GridDesign, channel=ChannelMode.FROZEN,
                scheme: FdScheme | None = None) -> list:
    """Quantile-side expression against the structural conditional expectation.

    Points run over contexts x pairs x levels x levels, each good placed at
    its own marginal quantile, and every price and income coordinate
    ``s = 1..L``.  Returns one record per (point, s) with the absolute
    discrepancy, or the error that prevented the comparison.
    """
    rows = []
    for w in design.contexts:
        for i, j in design.pairs:
            for li in design.levels:
                for lj in design.levels:
                    base = {"w": w.to_dict(), "i": i, "j": j, "level_i": li, "level_j": lj}
                    try:
                        y_i = float(oracle.marginal_quantile(w, i, li))
                        y_j = float(oracle.marginal_quantile(w, j, lj))
                        idx = quantile_indices(oracle, w, i, j, y_i, y_j)
                    except SslabError as exc:
                        rows.append({**base, "s": None, "error": f"{type(exc).__name__}: {exc}"})
                        continue
                    for s in range(1, w.n_goods + 2):
                        row = {**base, "y_i": y_i, "y_j": y_j, "s": s, "error": None}
                        try:
                            rhs = float(lemma1_rhs(oracle, w, s, i, j, idx, channel, scheme))
                            lhs = float(oracle.conditional_expectation_partial(w, s, i, j,
                                                                               y_i, y_j))
                            row.update(lhs=lhs, rhs=rhs, abs_diff=abs(lhs - rhs))
                        except SslabError as exc:
                            row["error"] = f"{type(exc).__name__}: {exc}"
                        rows.append(row)
    return rows


# -- Monte Carlo -------------------------------------------------------------

@dataclass
class StudyCell:
    system: str
    n: int
    channel: str
    statistics: list
    p_values: list
    errors: list

    @property
    def reps(self) -> int:
        return len(self.statistics)

    def _finite(self, values):
        return np.array([v for v in values if v is not None and math.isfinite(v)])

    @property
    def reject_rate(self) -> float:
        p = self._finite(self.p_values)
        return float(np.mean(p <= NOMINAL_LEVEL)) if p.size else math.nan

    @property
    def mean_T(self) -> float:
        t = self._finite(self.statistics)
        return float(t.mean()) if t.size else math.nan

    @property
    def sd_T(self) -> float:
        t = self._finite(self.statistics)
        return float(t.std(ddof=1)) if t.size > 1 else math.nan

    def row(self) -> dict:
        return {"system": self.system, "n": self.n, "channel": self.channel, "reps": self.reps,
                "reject_rate_5pct": self.reject_rate, "mean_T": self.mean_T, "sd_T": self.sd_T}


def monte_carlo_study(systems: Iterable[DemandSystem], sizes: Iterable[int], reps: int,
                      design: Design, grid: GridDesign,
                      channel=ChannelMode.STABLE_COMPOSITION, B: int = 99, seed: int = 0,
                      estimator: dict | None = None, scheme: FdScheme | None = None,
                      labels: Sequence[str] | None = None,
                      threads: int | None = None) -> list:
    """Rejection frequencies and statistic moments per (system, n).

    Repetition ``r`` uses dataset seed ``seed + r`` and the same bootstrap
    seed for every system, so cells are paired by repetition.  Failures
    are recorded per repetition.
    """
    if reps < 1:
        raise ArgumentError("a Monte Carlo study needs at least one repetition "
                            "(reps=0 would give an empty table)")
    systems = list(systems)
    labels = list(labels) if labels is not None else [s.name for s in systems]
    channel = ChannelMode(channel)
    cells = []
    for system, label in zip(systems, labels):
        for n in sizes:
            def one(r, system=system, n=n):
                data = simulate_cross_section(system, design, n, seed + r)
                try:
                    res = bootstrap_pvalue(data, grid, channel, B, seed + r, estimator,
                                           scheme, threads=1)
                except SslabError as exc:
                    return math.nan, math.nan, f"{type(exc).__name__}: {exc}"
                return res.statistic, res.p_value, None

            out = _rng.parallel_map(one, range(reps), threads)
            cells.append(StudyCell(label, int(n), channel.value, [o[0] for o in out],
                                   [o[1] for o in out], [o[2] for o in out]))
    return cells


MC_COLUMNS = ("system", "n", "channel", "reps", "reject_rate_5pct", "mean_T", "sd_T")


def write_study_table(cells, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=MC_COLUMNS)
        out.writeheader()
        for cell in cells:
            row = cell.row()
            out.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
