"""n-dimensional Delaunay triangulation and the remoteness function.

The triangulation is built by incremental insertion with cavity
retriangulation (Bowyer-Watson).  Points outside the current hull are handled
by treating every hull facet as a simplex with a vertex at infinity; such a
"ghost" conflicts with a new point when the point lies strictly beyond the
facet, or on the facet's hyperplane and inside the adjacent circumsphere.

Orientation and in-sphere decisions use a floating point filter backed by an
exact rational evaluation whenever the filter is inconclusive.  Exact ties
(cospherical points, which are common on a Cartesian grid) are resolved by
treating "on the sphere" as "not in conflict"; this keeps the cavity
star-shaped, and the resulting choice among equivalent triangulations is
immaterial for the remoteness function, which is continuous across facets.
"""
from __future__ import annotations

from fractions import Fraction

import numpy as np

MAX_DIMENSION = 6
BARYCENTRIC_TOL = 1e-9
_FILTER_REL = 1e-10


class GeometryError(Exception):
    """Base class for triangulation failures."""


class DegeneratePointSet(GeometryError):
    pass


class DuplicatePoint(GeometryError):
    pass


class DegenerateSimplex(GeometryError):
    pass


class OutsideHull(GeometryError):
    pass


class UnsupportedDimension(GeometryError, ValueError):
    pass


# ---------------------------------------------------------------------------
# exact predicates


def _exact_det(rows):
    """Determinant of a square matrix of Fractions by Gaussian elimination."""
    a = [list(r) for r in rows]
    n = len(a)
    det = Fraction(1)
    for col in range(n):
        piv = next((r for r in range(col, n) if a[r][col] != 0), None)
        if piv is None:
            return Fraction(0)
        if piv != col:
            a[col], a[piv] = a[piv], a[col]
            det = -det
        pv = a[col][col]
        det *= pv
        for r in range(col + 1, n):
            f = a[r][col]
            if f:
                f = f / pv
                row_r, row_c = a[r], a[col]
                for c in range(col + 1, n):
                    row_r[c] -= f * row_c[c]
    return det


def _sign(x):
    return (x > 0) - (x < 0)


def _exact_orient(vertices):
    v = [[Fraction(float(c)) for c in row] for row in vertices]
    v0 = v[0]
    return _sign(_exact_det([[a - b for a, b in zip(row, v0)] for row in v[1:]]))


def _exact_lift(vertices, p):
    pf = [Fraction(float(c)) for c in p]
    rows = []
    for row in vertices:
        d = [Fraction(float(c)) - q for c, q in zip(row, pf)]
        rows.append(d + [sum(x * x for x in d)])
    return _sign(_exact_det(rows))


def _filtered_signs(mats, exact_fn, args):
    """Signs of det(mats) with an exact fallback for near-zero values.

    ``exact_fn(*args[i])`` must return the exact sign for entry ``i``.
    """
    if len(mats) == 0:
        return np.zeros(0, dtype=int)
    det = np.linalg.det(mats)
    bound = np.prod(np.linalg.norm(mats, axis=-1), axis=-1)
    signs = np.sign(det).astype(int)
    unsure = np.flatnonzero(~(np.abs(det) > _FILTER_REL * bound))
    for i in unsure:
        signs[i] = exact_fn(*args(i))
    return signs


def _lift_constant(n):
    # Sign of the lifted determinant for a point strictly inside a positively
    # oriented simplex; depends only on the dimension.
    verts = np.vstack([np.zeros(n), np.eye(n)])
    p = np.full(n, 1.0 / (n + 1))
    d = verts - p
    m = np.hstack([d, (d * d).sum(axis=1, keepdims=True)])
    return int(np.sign(np.linalg.det(m)))


_LIFT_SIGN = {n: _lift_constant(n) for n in range(1, MAX_DIMENSION + 1)}


def orientation(vertices):
    """Sign of the signed volume of a simplex given as ``n+1`` rows."""
    v = np.asarray(vertices, dtype=float)
    m = (v[1:] - v[0])[None]
    return int(_filtered_signs(m, _exact_orient, lambda i: (v,))[0])


def insphere(vertices, p):
    """+1 if ``p`` is strictly inside the circumsphere, 0 if on it, -1 outside."""
    v = np.asarray(vertices, dtype=float)
    p = np.asarray(p, dtype=float)
    n = v.shape[1]
    o = orientation(v)
    if o == 0:
        raise DegenerateSimplex("simplex has zero volume")
    d = v - p
    m = np.hstack([d, (d * d).sum(axis=1, keepdims=True)])[None]
    s = _filtered_signs(m, _exact_lift, lambda i: (v, p))[0]
    return int(s * o * _LIFT_SIGN[n])


# ---------------------------------------------------------------------------
# circumspheres


def _circumspheres(verts):
    """Batched circumcenters and squared radii for an (S, n+1, n) array."""
    v0 = verts[:, 0, :]
    e = verts[:, 1:, :] - v0[:, None, :]
    rhs = 0.5 * (e * e).sum(axis=2)
    off = np.linalg.solve(e, rhs[..., None])[..., 0]
    centers = v0 + off
    r2 = (off * off).sum(axis=1)
    return centers, r2, off


def circumsphere(vertices):
    """Circumcenter and circumradius of a simplex.

    Parameters
    ----------
    vertices : array_like, shape (n+1, n)

    Returns
    -------
    center : ndarray, shape (n,)
    radius : float

    Raises
    ------
    DegenerateSimplex
        If the vertices are affinely dependent.
    """
    v = np.asarray(vertices, dtype=float)
    if v.ndim != 2 or v.shape[0] != v.shape[1] + 1:
        raise ValueError("expected n+1 vertices in n dimensions")
    e = v[1:] - v[0]
    scale = max(np.abs(e).max(), 1e-300)
    if orientation(v) == 0 or np.linalg.cond(e / scale) > 1e14:
        raise DegenerateSimplex("vertices are affinely dependent")
    c, r2, _ = _circumspheres(v[None])
    return c[0], float(np.sqrt(r2[0]))


# ---------------------------------------------------------------------------


class Triangulation:
    """Delaunay triangulation of a finite point set.

    Attributes
    ----------
    points : ndarray, shape (P, n)
    simplices : ndarray of int, shape (S, n+1)
        Vertex indices, each row positively oriented.
    circumcenters : ndarray, shape (S, n)
    circumradii2 : ndarray, shape (S,)
        Squared circumradii.
    anchors, offsets : ndarray, shape (S, n)
        First vertex ``v0`` of each simplex and ``Z - v0``.  Remoteness is
        evaluated as ``d . (2 (Z - v0) - d)`` with ``d = x - v0``, which avoids
        cancelling two large squares on flat simplices.
    """

    def __init__(self, dimension):
        if not 1 <= dimension <= MAX_DIMENSION:
            raise UnsupportedDimension(
                f"dimension must be between 1 and {MAX_DIMENSION}, got {dimension}"
            )
        self.dimension = dimension
        self.points = np.empty((0, dimension))
        self.simplices = np.empty((0, dimension + 1), dtype=np.int64)
        self.circumcenters = np.empty((0, dimension))
        self.circumradii2 = np.empty(0)
        self.anchors = np.empty((0, dimension))
        self.offsets = np.empty((0, dimension))
        self._facets = {}
        self._inverse = None

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2:
            raise ValueError("points must be a 2-d array")
        n = pts.shape[1]
        tri = cls(n)
        if len(pts) < n + 1:
            raise DegeneratePointSet(f"need at least {n + 1} points, got {len(pts)}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        _check_duplicates(pts)
        first = _initial_simplex(pts)
        order = first + [i for i in range(len(pts)) if i not in set(first)]
        # Vertex indices refer to the caller's ordering, so stage every point.
        tri.points = pts.copy()
        verts = list(first)
        if orientation(pts[verts]) < 0:
            verts[0], verts[1] = verts[1], verts[0]
        tri._set_simplices(np.array([verts], dtype=np.int64))
        for i in order[n + 1:]:
            tri._insert_index(i)
        return tri

    @classmethod
    def restore(cls, points, simplices):
        """Rebuild from a stored vertex set and simplex list without re-triangulating."""
        pts = np.asarray(points, dtype=float)
        tri = cls(pts.shape[1])
        tri.points = pts.copy()
        tri._set_simplices(np.asarray(simplices, dtype=np.int64).reshape(-1, pts.shape[1] + 1))
        return tri

    def copy(self):
        other = Triangulation(self.dimension)
        other.points = self.points.copy()
        other.simplices = self.simplices.copy()
        other.circumcenters = self.circumcenters.copy()
        other.circumradii2 = self.circumradii2.copy()
        other.anchors = self.anchors.copy()
        other.offsets = self.offsets.copy()
        other._facets = {k: list(v) for k, v in self._facets.items()}
        return other

    def insert(self, p):
        """Insert ``p`` in place and return its vertex index."""
        p = np.asarray(p, dtype=float).reshape(-1)
        if p.shape[0] != self.dimension:
            raise ValueError("point has the wrong dimension")
        if not np.all(np.isfinite(p)):
            raise ValueError("point must be finite")
        d2 = ((self.points - p) ** 2).sum(axis=1)
        if d2.size and d2.min() <= _dup_tol(self.points, p) ** 2:
            raise DuplicatePoint(f"point {p.tolist()} is already in the triangulation")
        self.points = np.vstack([self.points, p])
        idx = len(self.points) - 1
        try:
            self._insert_index(idx)
        except Exception:
            self.points = self.points[:-1]
            raise
        return idx

    def _insert_index(self, idx):
        p = self.points[idx]
        n = self.dimension
        conflict = self._conflicts(p)

        hull = [(f, o[0][0], o[0][1]) for f, o in self._facets.items() if len(o) == 1]
        ghost = {}
        if hull:
            sides = self._sides([(s, k) for _, s, k in hull], p)
            for (f, s, _), side in zip(hull, sides):
                ghost[f] = side < 0 or (side == 0 and conflict[s])

        new = []
        for s in np.flatnonzero(conflict):
            row = self.simplices[s]
            for k in range(n + 1):
                f = _facet_key(row, k)
                owners = self._facets[f]
                if len(owners) == 1:
                    make = not ghost[f]
                else:
                    other = owners[0][0] if owners[0][0] != s else owners[1][0]
                    make = not conflict[other]
                if make:
                    verts = row.copy()
                    verts[k] = idx
                    new.append(verts)
        for f, s, k in hull:
            if ghost[f] and not conflict[s]:
                verts = self.simplices[s].copy()
                verts[k] = idx
                # p sits on the far side of the facet: flip orientation
                verts[[0, 1]] = verts[[1, 0]]
                new.append(verts)
        if not new:
            raise GeometryError(f"point {p.tolist()} produced an empty cavity")
        new = np.array(new, dtype=np.int64)
        signs = self._orientations(new)
        if np.any(signs <= 0):
            raise GeometryError("cavity retriangulation produced an inverted simplex")
        keep = self.simplices[~conflict]
        self._set_simplices(np.vstack([keep, new]))

    def _set_simplices(self, simplices):
        self.simplices = simplices
        verts = self.points[simplices]
        self.circumcenters, self.circumradii2, self.offsets = _circumspheres(verts)
        self.anchors = verts[:, 0, :].copy()
        facets = {}
        for s, row in enumerate(simplices):
            for k in range(self.dimension + 1):
                facets.setdefault(_facet_key(row, k), []).append((s, k))
        self._facets = facets
        self._inverse = None

    # -- predicates over many simplices --------------------------------------

    def _conflicts(self, p):
        """Strict in-circumsphere test of ``p`` against every simplex."""
        verts = self.points[self.simplices]
        d = verts - p
        lift = np.concatenate([d, (d * d).sum(axis=2, keepdims=True)], axis=2)
        signs = _filtered_signs(lift, _exact_lift, lambda i: (verts[i], p))
        return signs * _LIFT_SIGN[self.dimension] > 0

    def _sides(self, pairs, p):
        """Orientation after swapping vertex ``k`` of simplex ``s`` for ``p``."""
        verts = self.points[self.simplices[[s for s, _ in pairs]]].copy()
        verts[np.arange(len(pairs)), [k for _, k in pairs]] = p
        m = verts[:, 1:, :] - verts[:, :1, :]
        return _filtered_signs(m, _exact_orient, lambda i: (verts[i],))

    def _orientations(self, simplices):
        verts = self.points[simplices]
        m = verts[:, 1:, :] - verts[:, :1, :]
        return _filtered_signs(m, _exact_orient, lambda i: (verts[i],))

    # -- queries -------------------------------------------------------------

    @property
    def circumradii(self):
        return np.sqrt(self.circumradii2)

    def hull_facets(self):
        """Facets (as sorted vertex tuples) belonging to a single simplex."""
        return sorted(f for f, o in self._facets.items() if len(o) == 1)

    def neighbors(self, s):
        """Indices of simplices sharing a facet with simplex ``s``."""
        out = []
        row = self.simplices[s]
        for k in range(self.dimension + 1):
            for t, _ in self._facets[_facet_key(row, k)]:
                if t != s:
                    out.append(t)
        return out

    def _barycentric_parts(self, x):
        # lam[..., i, s] for i = 1..n; one matmul covers every simplex
        if self._inverse is None:
            verts = self.points[self.simplices]
            m = np.transpose(verts[:, 1:, :] - verts[:, :1, :], (0, 2, 1))
            inv = np.linalg.inv(m)
            ns, n = inv.shape[:2]
            self._inverse = (inv.transpose(2, 1, 0).reshape(n, n * ns),
                             np.einsum("sij,sj->is", inv, verts[:, 0, :]))
        lin, shift = self._inverse
        x = np.asarray(x, dtype=float)
        return (x @ lin).reshape(x.shape[:-1] + shift.shape) - shift

    def barycentric(self, x):
        """Barycentric coordinates of ``x`` in every simplex.

        Shape (S, n+1) for a single point, (m, S, n+1) for an (m, n) array.
        """
        lam = np.swapaxes(self._barycentric_parts(x), -1, -2)
        return np.concatenate([1.0 - lam.sum(axis=-1, keepdims=True), lam], axis=-1)

    def locate(self, x, tol=BARYCENTRIC_TOL):
        """Index of a simplex containing ``x`` (an array of indices for many points)."""
        lam = self._barycentric_parts(x)
        total = lam[..., 0, :].copy()
        worst = lam[..., 0, :].copy()
        for i in range(1, self.dimension):
            total += lam[..., i, :]
            np.minimum(worst, lam[..., i, :], out=worst)
        np.minimum(worst, 1.0 - total, out=worst)
        s = np.argmax(worst, axis=-1)
        bad = np.take_along_axis(worst, s[..., None], axis=-1)[..., 0] < -tol
        if np.any(bad):
            where = np.atleast_2d(np.asarray(x))[np.atleast_1d(bad)][0]
            raise OutsideHull(f"point {where.tolist()} is outside the hull")
        return int(s) if np.ndim(s) == 0 else s

    def local_remoteness(self, x):
        """``R_i^2 - |x - Z_i|^2`` for every simplex ``i``; shape (S,) or (m, S)."""
        d = np.asarray(x, dtype=float)[..., None, :] - self.anchors
        return (d * (2.0 * self.offsets - d)).sum(axis=-1)

    def remoteness(self, x):
        """Remoteness on the containing simplex; accepts one point or an (m, n) array."""
        s = self.locate(x)
        d = np.asarray(x, dtype=float) - self.anchors[s]
        e = (d * (2.0 * self.offsets[s] - d)).sum(axis=-1)
        return float(e) if np.ndim(e) == 0 else e

    def max_remoteness(self, xs):
        """Remoteness at many points via the max over local functions.

        Valid only inside the hull, where it equals :meth:`remoteness`.
        """
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        d = xs[:, None, :] - self.anchors[None]
        return (d * (2.0 * self.offsets[None] - d)).sum(axis=2).max(axis=1)

    def canonical(self):
        """Simplex set as a sorted list of sorted vertex tuples."""
        return sorted(tuple(sorted(int(v) for v in row)) for row in self.simplices)


def _facet_key(row, k):
    return tuple(sorted(int(v) for i, v in enumerate(row) if i != k))


def _dup_tol(points, p=None):
    extent = np.ptp(points, axis=0).max() if len(points) > 1 else 1.0
    return 1e-12 * max(1.0, float(extent))


def _check_duplicates(pts):
    tol = _dup_tol(pts)
    for i in range(len(pts) - 1):
        if np.abs(pts[i + 1:] - pts[i]).max(axis=1).min() <= tol:
            raise DuplicatePoint("point set contains duplicates")


def _initial_simplex(pts):
    """Greedy choice of ``n+1`` affinely independent points (lowest indices on ties)."""
    n = pts.shape[1]
    chosen = [0]
    scale = max(np.ptp(pts, axis=0).max(), 1e-300)
    for _ in range(n):
        base = pts[chosen[0]]
        basis = pts[chosen[1:]] - base
        d = pts - base
        if len(basis):
            q, _ = np.linalg.qr(basis.T)
            d = d - (d @ q) @ q.T
        dist = np.linalg.norm(d, axis=1)
        dist[chosen] = -1.0
        best = int(np.argmax(dist))
        if dist[best] <= 1e-12 * scale:
            raise DegeneratePointSet("points are not full-dimensional")
        chosen.append(best)
    if orientation(pts[chosen]) == 0:
        raise DegeneratePointSet("points are not full-dimensional")
    return chosen


# ---------------------------------------------------------------------------
# functional interface


def build_triangulation(points, dimension=None):
    """Delaunay triangulation of ``points``.

    Raises
    ------
    DegeneratePointSet
        Fewer than ``n+1`` points or no full-dimensional subset.
    DuplicatePoint
        Two points coincide within tolerance.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if dimension is not None and pts.shape[1] != dimension:
        raise ValueError(f"points have dimension {pts.shape[1]}, expected {dimension}")
    return Triangulation.build(pts)


def incremental_insert(tri, p):
    """Return a new triangulation with ``p`` inserted; ``tri`` is unchanged."""
    out = tri.copy()
    out.insert(p)
    return out


def locate_simplex(tri, x):
    return tri.locate(x)


def remoteness(tri, x):
    """Piecewise quadratic ``e(x) = R_i^2 - |x - Z_i|^2`` on the containing simplex."""
    return tri.remoteness(x)
