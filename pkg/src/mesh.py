"""Triangulation of the study domain, P1 finite-element matrices and the point projector."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
import logging
import math
import os
from typing import FrozenSet, Iterable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.spatial import ConvexHull, Delaunay
from scipy.spatial.distance import pdist
from shapely.geometry import MultiPoint

from domain import Station
from errors import DegenerateGeometry, PointOutsideMesh


logger = logging.getLogger(__name__)

# barycentric slack when deciding containment
INSIDE_TOLERANCE = 1e-9
# weights below this are dropped from projector rows
WEIGHT_FLOOR = 1e-12
# refinement stops here even if edges are still too long
MAX_REFINE_ROUNDS = 60
# default meshes are coarsened to at most this many nodes
DEFAULT_MAX_NODES = 600
MAX_COARSEN_ROUNDS = 8


@dataclass(frozen=True, eq=False)
class Mesh:
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_nodes: FrozenSet[int]

    @property
    def m(self) -> int:
        return int(self.nodes.shape[0])

    @cached_property
    def areas(self) -> np.ndarray:
        return _signed_areas(self.nodes, self.triangles)

    @cached_property
    def edges(self) -> np.ndarray:
        return _unique_edges(self.triangles)

    @property
    def max_edge_length(self) -> float:
        e = self.edges
        return float(np.max(np.linalg.norm(self.nodes[e[:, 0]] - self.nodes[e[:, 1]], axis=1)))

    @property
    def diameter(self) -> float:
        return _diameter(self.nodes)


@dataclass(frozen=True, eq=False)
class FemMatrices:
    mass_lumped: sparse.csc_matrix
    stiffness: sparse.csc_matrix

    @property
    def mass_diagonal(self) -> np.ndarray:
        return self.mass_lumped.diagonal()


@dataclass(frozen=True, eq=False)
class Projector:
    A: sparse.csr_matrix
    inside: np.ndarray

    @property
    def n_points(self) -> int:
        return int(self.A.shape[0])


# -----------------------
# Mesh construction
# -----------------------

def build_mesh(
    stations: Sequence[Station],
    buffer_fraction: float = 0.2,
    max_edge: Optional[float] = None,
    max_nodes: int = DEFAULT_MAX_NODES,
) -> Mesh:
    """Delaunay mesh of the stations plus a buffer ring, refined by longest-edge bisection.

    ``max_edge`` defaults to a fortieth of the station-domain diameter, coarsened
    until the mesh has at most ``max_nodes`` nodes (stations always stay nodes).
    An explicit ``max_edge`` is used as given; pass ``math.inf`` to skip refinement.
    """
    if buffer_fraction < 0:
        raise ValueError(f"buffer_fraction must be >= 0, got {buffer_fraction}")
    points = np.unique(np.array([(s.x, s.y) for s in stations], dtype=float).reshape(-1, 2), axis=0)
    _check_geometry(points)
    diameter = _diameter(points)

    if max_edge is not None:
        if not max_edge > 0:
            raise ValueError(f"max_edge must be positive, got {max_edge}")
        nodes, triangles = _refined(points, buffer_fraction * diameter, max_edge)
    else:
        if max_nodes < 3:
            raise ValueError(f"max_nodes must be >= 3, got {max_nodes}")
        max_edge = diameter / 40.0
        for _ in range(MAX_COARSEN_ROUNDS):
            nodes, triangles = _refined(points, buffer_fraction * diameter, max_edge)
            if len(nodes) <= max_nodes or max_edge >= diameter:
                break
            # node count scales with 1 / max_edge²
            max_edge = min(diameter, max_edge * 1.05 * math.sqrt(len(nodes) / max_nodes))
        if len(nodes) > max_nodes:
            logger.warning("Mesh has %d nodes, above the %d-node cap", len(nodes), max_nodes)

    nodes, triangles = _compact(nodes, triangles)
    mesh = Mesh(nodes, triangles, frozenset(_boundary_nodes(triangles)))
    logger.info(
        "Built mesh: %d nodes, %d triangles, %d boundary nodes (max edge %.3g km)",
        mesh.m, len(triangles), len(mesh.boundary_nodes), mesh.max_edge_length,
    )
    return mesh


def _refined(points: np.ndarray, buffer: float, max_edge: float) -> Tuple[np.ndarray, np.ndarray]:
    nodes = points
    if buffer > 0:
        nodes = np.vstack([points, _buffer_ring(points, buffer, max_edge)])
    triangles = _triangulate(nodes)
    for _ in range(MAX_REFINE_ROUNDS):
        midpoints = _long_edge_midpoints(nodes, triangles, max_edge)
        if midpoints.size == 0:
            break
        nodes = np.vstack([nodes, midpoints])
        triangles = _triangulate(nodes)
    else:
        logger.warning("Mesh refinement stopped after %d rounds", MAX_REFINE_ROUNDS)
    return nodes, triangles


def grid_mesh(x0: float, x1: float, y0: float, y1: float, nx: int, ny: int) -> Mesh:
    """Structured mesh: an nx × ny grid of cells, each split into two right triangles."""
    if nx < 1 or ny < 1 or not (x1 > x0 and y1 > y0):
        raise DegenerateGeometry("grid mesh needs a non-empty box and at least one cell per axis")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    nodes = np.column_stack([gx.ravel(), gy.ravel()])

    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    triangles = np.vstack([np.column_stack([a, b, d]), np.column_stack([b, c, d])])
    return Mesh(nodes, triangles, frozenset(_boundary_nodes(triangles)))


def _check_geometry(points: np.ndarray) -> None:
    if len(points) < 3:
        raise DegenerateGeometry(f"need at least 3 distinct station locations, got {len(points)}")
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[1] <= 1e-12 * max(s[0], 1.0):
        raise DegenerateGeometry("station locations are collinear")


def _diameter(points: np.ndarray) -> float:
    if len(points) > 3:
        points = points[ConvexHull(points).vertices]
    return float(np.max(pdist(points)))


def _buffer_ring(points: np.ndarray, distance: float, spacing: float) -> np.ndarray:
    ring = MultiPoint([tuple(p) for p in points]).convex_hull.buffer(distance).exterior
    count = max(8, int(math.ceil(ring.length / spacing)))
    steps = np.arange(count) * (ring.length / count)
    return np.array([ring.interpolate(float(t)).coords[0] for t in steps], dtype=float)


def _triangulate(nodes: np.ndarray) -> np.ndarray:
    tri = Delaunay(nodes)
    triangles = np.sort(tri.simplices, axis=1)
    # hull slivers whose vertices are collinear in the original coordinates
    area = np.abs(_signed_areas(nodes, triangles))
    scale = np.ptp(nodes, axis=0).max() ** 2
    return triangles[area > 1e-12 * scale]


def _long_edge_midpoints(nodes: np.ndarray, triangles: np.ndarray, max_edge: float) -> np.ndarray:
    pairs = np.stack([triangles[:, [1, 2]], triangles[:, [2, 0]], triangles[:, [0, 1]]], axis=1)
    lengths = np.linalg.norm(nodes[pairs[..., 0]] - nodes[pairs[..., 1]], axis=2)
    longest = np.argmax(lengths, axis=1)
    too_long = lengths[np.arange(len(triangles)), longest] > max_edge * (1 + 1e-9)
    if not too_long.any():
        return np.zeros((0, 2))
    edges = np.sort(pairs[too_long, longest[too_long]], axis=1)
    edges = np.unique(edges, axis=0)
    return 0.5 * (nodes[edges[:, 0]] + nodes[edges[:, 1]])


def _compact(nodes: np.ndarray, triangles: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    used = np.unique(triangles)
    if used.size == len(nodes):
        return nodes, triangles
    remap = np.full(len(nodes), -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    logger.debug("Dropping %d nodes not referenced by any triangle", len(nodes) - used.size)
    return nodes[used], remap[triangles]


def _signed_areas(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0, p1, p2 = (nodes[triangles[:, k]] for k in range(3))
    u, v = p1 - p0, p2 - p0
    return 0.5 * (u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])


def _unique_edges(triangles: np.ndarray) -> np.ndarray:
    e = np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    return np.unique(np.sort(e, axis=1), axis=0)


def _boundary_nodes(triangles: np.ndarray) -> Iterable[int]:
    e = np.sort(np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]), axis=1)
    edges, counts = np.unique(e, axis=0, return_counts=True)
    return (int(k) for k in np.unique(edges[counts == 1]))


# -----------------------
# FEM assembly
# -----------------------

def assemble_fem(mesh: Mesh) -> FemMatrices:
    """Lumped mass C̃ and stiffness G for continuous piecewise-linear elements."""
    nodes, tri = mesh.nodes, mesh.triangles
    area = np.abs(mesh.areas)
    p = [nodes[tri[:, k]] for k in range(3)]
    # edge opposite each local vertex; ∇φ_a is that edge rotated, over 2|T|
    opposite = [p[2] - p[1], p[0] - p[2], p[1] - p[0]]

    rows, cols, vals = [], [], []
    for a in range(3):
        for b in range(3):
            rows.append(tri[:, a])
            cols.append(tri[:, b])
            vals.append(np.einsum("ij,ij->i", opposite[a], opposite[b]) / (4.0 * area))
    m = mesh.m
    G = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)
    ).tocsc()
    G.sum_duplicates()

    mass = np.bincount(tri.ravel(), weights=np.repeat(area / 3.0, 3), minlength=m)
    return FemMatrices(sparse.diags(mass, format="csc"), G)


# -----------------------
# Projection
# -----------------------

def project(mesh: Mesh, points: Sequence[Tuple[float, float]], allow_outside: bool = False) -> Projector:
    """Barycentric weights of each point in its containing triangle.

    Point location is brute force, O(points × triangles), processed in chunks;
    on shared edges the lowest triangle index wins. Points outside every triangle
    raise ``PointOutsideMesh`` unless ``allow_outside``, which leaves their row empty.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    nodes, tri = mesh.nodes, mesh.triangles
    v0 = nodes[tri[:, 0]]
    T = np.stack([nodes[tri[:, 1]] - v0, nodes[tri[:, 2]] - v0], axis=2)
    Tinv = np.linalg.inv(T)

    n = len(pts)
    owner = np.full(n, -1, dtype=np.int64)
    weights = np.zeros((n, 3))
    chunk = max(1, 2_000_000 // max(len(tri), 1))
    for start in range(0, n, chunk):
        block = pts[start:start + chunk]
        rel = block[:, None, :] - v0[None, :, :]
        lam12 = np.einsum("tij,ptj->pti", Tinv, rel)
        lam = np.concatenate([1.0 - lam12.sum(axis=2, keepdims=True), lam12], axis=2)
        inside = np.all(lam >= -INSIDE_TOLERANCE, axis=2)
        hit = inside.any(axis=1)
        first = np.argmax(inside, axis=1)
        rows = np.flatnonzero(hit)
        owner[start + rows] = first[rows]
        weights[start + rows] = lam[rows, first[rows]]

    inside = owner >= 0
    if not allow_outside and not inside.all():
        k = int(np.flatnonzero(~inside)[0])
        raise PointOutsideMesh(k, tuple(pts[k]))

    w = np.clip(weights[inside], 0.0, 1.0)
    w[w < WEIGHT_FLOOR] = 0.0
    w /= w.sum(axis=1, keepdims=True)
    rows = np.repeat(np.flatnonzero(inside), 3)
    cols = tri[owner[inside]].ravel()
    A = sparse.csr_matrix((w.ravel(), (rows, cols)), shape=(n, mesh.m))
    A.eliminate_zeros()
    return Projector(A, inside)


# -----------------------
# Export
# -----------------------

def export_mesh(mesh: Mesh, directory: str) -> Tuple[str, str]:
    os.makedirs(directory, exist_ok=True)
    nodes_path = os.path.join(directory, "nodes.csv")
    tri_path = os.path.join(directory, "triangles.csv")
    boundary = np.zeros(mesh.m, dtype=bool)
    boundary[list(mesh.boundary_nodes)] = True
    pd.DataFrame(
        {"node": np.arange(mesh.m), "x": mesh.nodes[:, 0], "y": mesh.nodes[:, 1], "boundary": boundary}
    ).to_csv(nodes_path, index=False)
    pd.DataFrame(
        {"triangle": np.arange(len(mesh.triangles)), "i": mesh.triangles[:, 0],
         "j": mesh.triangles[:, 1], "k": mesh.triangles[:, 2]}
    ).to_csv(tri_path, index=False)
    return nodes_path, tri_path
