"""Grid-cell classing and the positive-match radius test on UTM coordinates.

All points are assumed to lie in a single UTM zone, so distances are plain
Euclidean distances in meters.
"""
from __future__ import annotations

import math
from typing import NamedTuple

from .errors import ParameterError

DEFAULT_CELL_SIZE = 10.0
DEFAULT_RADIUS = 25.0


class UtmPoint(NamedTuple):
    east: float
    north: float


class CellId(NamedTuple):
    e_i: int
    n_j: int


def grid_cell(p: UtmPoint, M: float = DEFAULT_CELL_SIZE) -> CellId:
    """Return the (floor(east/M), floor(north/M)) cell containing ``p``.

    Uses mathematical floor, so -0.1 with M=10 lands in cell -1.
    """
    if not M > 0:
        raise ParameterError(f"cell size must be positive, got {M}")
    return CellId(math.floor(p[0] / M), math.floor(p[1] / M))


def distance_m(a: UtmPoint, b: UtmPoint) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def is_positive(query: UtmPoint, ref: UtmPoint, radius: float = DEFAULT_RADIUS) -> bool:
    """True iff ``ref`` lies within ``radius`` meters of ``query`` (inclusive)."""
    if not radius > 0:
        raise ParameterError(f"radius must be positive, got {radius}")
    return distance_m(query, ref) <= radius
