import math

import numpy as np
import pytest
from scipy.spatial import Delaunay

from alphadogs.geometry import (
    DegeneratePointSet,
    DegenerateSimplex,
    DuplicatePoint,
    OutsideHull,
    Triangulation,
    UnsupportedDimension,
    build_triangulation,
    circumsphere,
    incremental_insert,
    locate_simplex,
    remoteness,
)


def random_set(rng, n, m):
    corners = np.array(np.meshgrid(*[[0.0, 1.0]] * n)).reshape(n, -1).T
    return np.vstack([corners, rng.random((m, n))])


def simplex_volume(verts):
    n = verts.shape[1]
    return abs(np.linalg.det(verts[1:] - verts[0])) / math.factorial(n)


def test_unit_square():
    tri = build_triangulation([[0, 0], [1, 0], [0, 1], [1, 1]])
    assert len(tri.simplices) == 2
    np.testing.assert_allclose(tri.circumradii, [math.sqrt(2) / 2] * 2)


def test_1d_segments():
    tri = build_triangulation([[0.0], [0.5], [1.0]])
    segs = sorted(tuple(sorted(tri.points[s].ravel())) for s in tri.simplices)
    assert segs == [(0.0, 0.5), (0.5, 1.0)]


def test_circumsphere_examples():
    c, r = circumsphere(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_allclose(c, [0.5, 0.5])
    assert r == pytest.approx(math.sqrt(2) / 2)
    c, r = circumsphere(np.array([[0.0], [1.0]]))
    assert c[0] == pytest.approx(0.5) and r == pytest.approx(0.5)


def test_circumsphere_random_3d():
    rng = np.random.default_rng(3)
    for _ in range(100):
        v = rng.random((4, 3))
        c, r = circumsphere(v)
        d = np.linalg.norm(v - c, axis=1)
        np.testing.assert_allclose(d, r, rtol=1e-10)


def test_circumsphere_degenerate():
    with pytest.raises(DegenerateSimplex):
        circumsphere(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))


def test_build_errors():
    with pytest.raises(DegeneratePointSet):
        build_triangulation([[0, 0], [1, 1], [2, 2], [3, 3]])
    with pytest.raises(DegeneratePointSet):
        build_triangulation([[0, 0], [1, 0]])
    with pytest.raises(DuplicatePoint):
        build_triangulation([[0, 0], [1, 0], [0, 1], [1, 0]])
    with pytest.raises(UnsupportedDimension):
        Triangulation(7)


def test_insert_center_of_square():
    tri = build_triangulation([[0, 0], [1, 0], [0, 1], [1, 1]])
    out = incremental_insert(tri, [0.5, 0.5])
    assert len(tri.simplices) == 2  # original untouched
    assert len(out.simplices) == 4
    assert all(4 in row for row in out.simplices)
    assert out.canonical() == build_triangulation(out.points).canonical()


def test_insert_duplicate():
    tri = build_triangulation([[0, 0], [1, 0], [0, 1], [1, 1]])
    with pytest.raises(DuplicatePoint):
        tri.insert([1.0, 0.0])


@pytest.mark.parametrize("n", [2, 3, 4])
def test_matches_qhull(n):
    rng = np.random.default_rng(10 + n)
    for _ in range(15):
        # general position only: box corners are cospherical and ambiguous
        pts = rng.random((int(rng.integers(n + 2, 25)), n))
        ours = build_triangulation(pts).canonical()
        ref = sorted(tuple(sorted(int(v) for v in s)) for s in Delaunay(pts).simplices)
        assert ours == ref


def test_empty_circumsphere_3d():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pts = rng.random((int(rng.integers(10, 31)), 3))
        tri = build_triangulation(pts)
        d2 = ((pts[None] - tri.circumcenters[:, None]) ** 2).sum(axis=2)
        margin = d2 - tri.circumradii2[:, None]
        assert margin.min() > -1e-9 * tri.circumradii2.max()


def test_incremental_equals_batch_2d():
    rng = np.random.default_rng(8)
    pts = random_set(rng, 2, 100)
    tri = build_triangulation(pts[:4])
    for p in pts[4:]:
        tri.insert(p)
    assert tri.canonical() == build_triangulation(pts).canonical()


@pytest.mark.parametrize("n", [2, 3, 4])
def test_grid_points_cover_box(n):
    # cospherical grid configurations: any valid tie-break must tile the box
    g = np.array(np.meshgrid(*[np.linspace(0, 1, 3)] * n)).reshape(n, -1).T
    tri = build_triangulation(g)
    vol = sum(simplex_volume(g[s]) for s in tri.simplices)
    assert vol == pytest.approx(1.0)
    corners = np.all((g == 0) | (g == 1), axis=1)
    inc = build_triangulation(g[corners])
    for p in g[~corners]:
        inc.insert(p)
    vol = sum(simplex_volume(inc.points[s]) for s in inc.simplices)
    assert vol == pytest.approx(1.0)


def test_locate_barycenter_and_facet():
    rng = np.random.default_rng(2)
    tri = build_triangulation(random_set(rng, 2, 12))
    for s, row in enumerate(tri.simplices):
        assert locate_simplex(tri, tri.points[row].mean(axis=0)) == s
    # shared facet midpoint: either neighbor is acceptable, e agrees
    row = tri.simplices[0]
    mid = tri.points[row[:2]].mean(axis=0)
    s = locate_simplex(tri, mid)
    assert set(row[:2]) <= set(tri.simplices[s])


def test_locate_random_containment():
    rng = np.random.default_rng(4)
    for _ in range(20):
        tri = build_triangulation(random_set(rng, 2, 15))
        for x in rng.random((50, 2)):
            s = locate_simplex(tri, x)
            v = tri.points[tri.simplices[s]]
            lam = np.linalg.solve(np.vstack([v.T, np.ones(3)]), np.append(x, 1.0))
            assert lam.min() >= -1e-9


def test_locate_outside():
    tri = build_triangulation([[0, 0], [1, 0], [0, 1]])
    with pytest.raises(OutsideHull):
        locate_simplex(tri, [1.0, 1.0])


def test_remoteness_1d_example():
    tri = build_triangulation([[0.0], [1.0]])
    assert remoteness(tri, [0.25]) == pytest.approx(0.1875)


def test_remoteness_zero_at_vertices():
    rng = np.random.default_rng(6)
    tri = build_triangulation(random_set(rng, 3, 10))
    for p in tri.points:
        assert abs(remoteness(tri, p)) < 1e-12


def test_remoteness_is_max_of_local():
    rng = np.random.default_rng(7)
    tri = build_triangulation(random_set(rng, 2, 20))
    for x in rng.random((300, 2)):
        assert remoteness(tri, x) == pytest.approx(tri.local_remoteness(x).max(), abs=1e-12)


def test_restore_roundtrip():
    rng = np.random.default_rng(9)
    tri = build_triangulation(random_set(rng, 2, 10))
    back = Triangulation.restore(tri.points, tri.simplices)
    np.testing.assert_array_equal(back.simplices, tri.simplices)
    np.testing.assert_array_equal(back.circumcenters, tri.circumcenters)
    back.insert([0.123, 0.456])
    tri.insert([0.123, 0.456])
    assert back.canonical() == tri.canonical()
