"""Dyadic Cartesian grids over a box and quantization onto them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class OutOfBounds(ValueError):
    pass


@dataclass(frozen=True)
class GridLevel:
    """Grid of level ``level`` over ``[lower, upper]``: ``2**level`` cells per axis.

    Nodes are ``lower + (upper - lower) * z / 2**level`` for ``z = 0..2**level``,
    so the box vertices are always grid nodes.
    """

    level: int
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if self.level < 0:
            raise ValueError("grid level must be nonnegative")
        if len(lo) != len(hi) or not all(a < b for a, b in zip(lo, hi)):
            raise ValueError("need lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dimension(self):
        return len(self.lower)

    @property
    def subdivisions(self):
        return 2**self.level

    def refined(self):
        return GridLevel(self.level + 1, self.lower, self.upper)

    def node_count(self):
        return (self.subdivisions + 1) ** self.dimension

    def indices(self, x):
        """Integer node indices of ``x``, which must already lie on the grid."""
        a, b = np.array(self.lower), np.array(self.upper)
        z = (np.asarray(x, dtype=float) - a) / (b - a) * self.subdivisions
        r = np.rint(z)
        if np.any(np.abs(z - r) > 1e-9):
            raise ValueError(f"{np.asarray(x).tolist()} is not a level-{self.level} node")
        return tuple(int(v) for v in r)

    def node(self, indices):
        a, b = np.array(self.lower), np.array(self.upper)
        z = np.asarray(indices, dtype=float)
        out = a + (b - a) * (z / self.subdivisions)
        # keep the upper face exact
        top = np.asarray(indices) == self.subdivisions
        out[top] = b[top]
        return out


def quantize(grid, x):
    """Nearest level-``grid.level`` node to ``x``.

    Ties are rounded away from the lower bound.  Coordinates on a bound stay
    on that bound.
    """
    x = np.asarray(x, dtype=float)
    a, b = np.array(grid.lower), np.array(grid.upper)
    if x.shape != a.shape:
        raise ValueError("point has the wrong dimension")
    if np.any(x < a) or np.any(x > b):
        raise OutOfBounds(f"{x.tolist()} is outside the box")
    n = grid.subdivisions
    z = np.floor((x - a) / (b - a) * n + 0.5)
    z = np.clip(z, 0, n).astype(np.int64)
    return grid.node(z)


def max_quantization_error(grid):
    """``|b - a| / (2 * 2**level)``: the largest distance to the nearest node."""
    diag = np.linalg.norm(np.array(grid.upper) - np.array(grid.lower))
    return float(diag / (2 * grid.subdivisions))
