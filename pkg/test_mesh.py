import math
import os
import sys

import numpy as np
import pandas as pd
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), "src"))

from domain import Station
from errors import DegenerateGeometry, PointOutsideMesh
from mesh import Mesh, assemble_fem, build_mesh, export_mesh, grid_mesh, project


def _unit_triangle():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return Mesh(nodes, np.array([[0, 1, 2]]), frozenset({0, 1, 2}))


def _stations(n, seed=0, size=100.0):
    xy = np.random.default_rng(seed).uniform(0.0, size, size=(n, 2))
    return [Station(f"S{k}", float(x), float(y)) for k, (x, y) in enumerate(xy)]


# -----------------------
# FEM assembly
# -----------------------

def test_unit_triangle_matrices():
    fem = assemble_fem(_unit_triangle())
    np.testing.assert_allclose(fem.mass_lumped.toarray(), np.eye(3) / 6.0, atol=1e-15)
    expected = 0.5 * np.array([[2.0, -1.0, -1.0], [-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
    np.testing.assert_allclose(fem.stiffness.toarray(), expected, atol=1e-15)


def test_fem_identities_on_built_mesh():
    mesh = build_mesh(_stations(25, seed=4), buffer_fraction=0.2, max_edge=15.0)
    fem = assemble_fem(mesh)
    G = fem.stiffness.toarray()
    np.testing.assert_allclose(G.sum(axis=1), 0.0, atol=1e-10)
    np.testing.assert_allclose(G, G.T, atol=1e-12)
    assert fem.mass_diagonal.sum() == pytest.approx(np.abs(mesh.areas).sum(), rel=1e-12)
    assert np.all(fem.mass_diagonal > 0)


def test_stiffness_of_x_squared_is_a_discrete_laplacian():
    mesh = grid_mesh(0.0, 1.0, 0.0, 1.0, 20, 20)
    fem = assemble_fem(mesh)
    f = mesh.nodes[:, 0] ** 2
    Gf = fem.stiffness @ f
    interior = np.array([k for k in range(mesh.m) if k not in mesh.boundary_nodes])
    np.testing.assert_allclose(Gf[interior], -2.0 * fem.mass_diagonal[interior], rtol=0.05)


# -----------------------
# Mesh construction
# -----------------------

def test_build_mesh_contains_stations_and_respects_max_edge():
    stations = _stations(20, seed=1)
    mesh = build_mesh(stations, buffer_fraction=0.2, max_edge=20.0)
    for s in stations:
        assert np.min(np.hypot(mesh.nodes[:, 0] - s.x, mesh.nodes[:, 1] - s.y)) < 1e-9
    assert mesh.max_edge_length <= 20.0 * (1 + 1e-6)
    assert np.all(np.abs(mesh.areas) > 0)
    assert len(mesh.boundary_nodes) >= 8


def test_build_mesh_rejects_degenerate_layouts():
    with pytest.raises(DegenerateGeometry):
        build_mesh([Station("A", 0.0, 0.0), Station("B", 1.0, 1.0)])
    with pytest.raises(DegenerateGeometry):
        build_mesh([Station(str(k), float(k), 2.0 * k) for k in range(5)])


def test_duplicate_station_locations_share_a_node():
    stations = _stations(10, seed=2) + [Station("dup", 50.0, 50.0), Station("dup2", 50.0, 50.0)]
    mesh = build_mesh(stations, max_edge=30.0)
    at = np.hypot(mesh.nodes[:, 0] - 50.0, mesh.nodes[:, 1] - 50.0) < 1e-9
    assert at.sum() == 1


def test_grid_mesh_counts():
    mesh = grid_mesh(0.0, 2.0, 0.0, 3.0, 2, 3)
    assert mesh.m == 12
    assert len(mesh.triangles) == 12
    assert len(mesh.boundary_nodes) == 10
    np.testing.assert_allclose(np.abs(mesh.areas).sum(), 6.0)


def test_three_stations_make_one_triangle():
    stations = [Station("A", 0.0, 0.0), Station("B", 4.0, 0.0), Station("C", 1.0, 3.0)]
    mesh = build_mesh(stations, buffer_fraction=0.0, max_edge=math.inf)
    assert mesh.m == 3
    assert len(mesh.triangles) == 1


def test_unit_square_split_is_delaunay():
    stations = [Station(k, x, y) for k, (x, y) in zip("ABCD", [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)])]
    mesh = build_mesh(stations, buffer_fraction=0.0, max_edge=math.inf)
    assert mesh.m == 4
    assert len(mesh.triangles) == 2
    for tri in mesh.triangles:
        a, b, c = mesh.nodes[tri]
        d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
        ux = ((a @ a) * (b[1] - c[1]) + (b @ b) * (c[1] - a[1]) + (c @ c) * (a[1] - b[1])) / d
        uy = ((a @ a) * (c[0] - b[0]) + (b @ b) * (a[0] - c[0]) + (c @ c) * (b[0] - a[0])) / d
        radius = np.hypot(*(a - (ux, uy)))
        others = np.delete(mesh.nodes, tri, axis=0)
        assert np.all(np.hypot(others[:, 0] - ux, others[:, 1] - uy) >= radius - 1e-12)


def test_longer_edges_never_add_nodes():
    stations = _stations(20, seed=6)
    counts = [build_mesh(stations, 0.2, max_edge).m for max_edge in (6.0, 12.0, 24.0, 48.0, math.inf)]
    assert counts == sorted(counts, reverse=True)
    assert counts[0] > counts[-1]


def test_default_mesh_is_capped():
    stations = _stations(100, seed=7)
    assert build_mesh(stations).m <= 600
    small = build_mesh(stations, max_nodes=250)
    assert 100 <= small.m <= 250
    assert build_mesh(stations, max_edge=100.0 / 40.0).m > 600


# -----------------------
# Projection
# -----------------------

def test_projection_rows_are_barycentric():
    stations = _stations(15, seed=3)
    mesh = build_mesh(stations, max_edge=25.0)
    rng = np.random.default_rng(9)
    xy = np.array([(s.x, s.y) for s in stations])
    # convex combinations of stations lie inside the mesh
    pts = np.array([rng.dirichlet(np.ones(3)) @ xy[rng.choice(15, 3, replace=False)] for _ in range(40)])
    proj = project(mesh, pts)
    A = proj.A.toarray()
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(A >= 0)
    assert np.all((A > 0).sum(axis=1) <= 3)
    np.testing.assert_allclose(A @ mesh.nodes, pts, atol=1e-9)


def test_point_on_node_gets_single_unit_weight():
    mesh = grid_mesh(0.0, 4.0, 0.0, 4.0, 4, 4)
    A = project(mesh, [(1.0, 1.0)]).A
    assert A.nnz == 1
    node = A.indices[0]
    np.testing.assert_allclose(mesh.nodes[node], [1.0, 1.0])
    assert A.data[0] == pytest.approx(1.0)


def test_outside_points():
    mesh = grid_mesh(0.0, 1.0, 0.0, 1.0, 2, 2)
    with pytest.raises(PointOutsideMesh) as info:
        project(mesh, [(0.5, 0.5), (2.0, 2.0)])
    assert info.value.index == 1
    proj = project(mesh, [(0.5, 0.5), (2.0, 2.0)], allow_outside=True)
    assert list(proj.inside) == [True, False]
    assert proj.A[1].nnz == 0


def test_export_mesh(tmp_path):
    mesh = grid_mesh(0.0, 1.0, 0.0, 1.0, 1, 1)
    nodes_path, tri_path = export_mesh(mesh, str(tmp_path))
    nodes = pd.read_csv(nodes_path)
    tris = pd.read_csv(tri_path)
    assert list(nodes.columns) == ["node", "x", "y", "boundary"]
    assert len(nodes) == 4 and nodes["boundary"].all()
    assert list(tris.columns) == ["triangle", "i", "j", "k"]
    assert len(tris) == 2
