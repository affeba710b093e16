"""Central finite differences with optional Richardson extrapolation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .errors import ArgumentError


@dataclass(frozen=True)
class FdScheme:
    """Step rule for a central difference.

    Attributes
    ----------
    h : float
        Base step.  With ``relative=True`` the step actually used is
        ``h * max(1, |coordinate|)``.
    richardson : bool
        Combine the steps ``h`` and ``h/2`` to cancel the second-order error.
    relative : bool
        Scale the step by the magnitude of the coordinate.
    """

    h: float = 1e-4
    richardson: bool = True
    relative: bool = True

    def __post_init__(self):
        if not (self.h > 0) or not np.isfinite(self.h):
            raise ArgumentError(f"FdScheme step must be positive, got {self.h!r}")

    def step_at(self, value: float) -> float:
        if self.relative:
            return self.h * max(1.0, abs(float(value)))
        return self.h

    def to_dict(self) -> dict:
        return {"h": self.h, "richardson": self.richardson, "relative": self.relative}

    @classmethod
    def from_dict(cls, data: dict) -> "FdScheme":
        return cls(h=float(data.get("h", 1e-4)),
                   richardson=bool(data.get("richardson", True)),
                   relative=bool(data.get("relative", True)))


DEFAULT_SCHEME = FdScheme()


def _coordinate_value(point: Any, coordinate: Any) -> float:
    if coordinate is None:
        return float(point)
    if hasattr(point, "coordinate"):
        return point.coordinate(coordinate)
    return float(np.asarray(point, dtype=float)[coordinate])


def _displace(point: Any, coordinate: Any, delta: float) -> Any:
    if coordinate is None:
        return float(point) + delta
    if hasattr(point, "shifted"):
        return point.shifted(coordinate, delta)
    moved = np.array(point, dtype=float)
    moved[coordinate] += delta
    return moved


def _central(func: Callable, point: Any, coordinate: Any, h: float):
    up = func(_displace(point, coordinate, h))
    down = func(_displace(point, coordinate, -h))
    return (np.asarray(up, dtype=float) - np.asarray(down, dtype=float)) / (2.0 * h)


def fd_partial(func: Callable, point: Any, coordinate: Any = None,
               scheme: FdScheme = DEFAULT_SCHEME, return_error: bool = False):
    """Partial derivative of ``func`` at ``point`` along ``coordinate``.

    ``point`` may be a scalar (``coordinate=None``), an array (integer
    ``coordinate``) or any object exposing ``shifted(coordinate, delta)`` and
    ``coordinate(name)``, such as :class:`sslab.dgp.ContextPoint`.  The
    function may return a scalar or an array; arrays are differentiated
    elementwise.

    With ``return_error=True`` a pair ``(derivative, error_estimate)`` is
    returned, the error being the Richardson correction ``|D(h/2) - D(h)|/3``
    (zero when Richardson is off).
    """
    h = scheme.step_at(_coordinate_value(point, coordinate))
    coarse = _central(func, point, coordinate, h)
    if scheme.richardson:
        fine = _central(func, point, coordinate, h / 2.0)
        value = (4.0 * fine - coarse) / 3.0
        error = np.abs(fine - coarse) / 3.0
    else:
        value = coarse
        error = np.zeros_like(coarse)
    if np.ndim(value) == 0:
        value, error = float(value), float(error)
    if return_error:
        return value, error
    return value
