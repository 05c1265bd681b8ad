"""Structured triangulations of the unit square and coarse partitions.

Meshes split every grid square by its SW-NE diagonal.  Vertices are
numbered lexicographically (index ``j*(n+1) + i`` for lattice point
``(i/n, j/n)``) and every cell is oriented counterclockwise, so all
Jacobians are positive by construction.  Mesh objects are immutable
after construction and safe to share between concurrent runs.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Uniform SW-NE triangulation of [0,1]^2 with n subdivisions per side.

    Attributes
    ----------
    n : int
        Subdivisions per side; the mesh size is h = 1/n.
    vertices : (nv, 2) float array
        Lattice coordinates, lexicographic ordering.
    cells : (nc, 3) int array
        Vertex index triples, counterclockwise.  The two triangles of grid
        square (i, j) are cells 2*(j*n+i) (below the diagonal) and
        2*(j*n+i)+1 (above).
    edges : (ne, 2) int array
        Unique vertex pairs, each sorted ascending.
    cell_edges : (nc, 3) int array
        Edge index opposite each local vertex.
    boundary_vertex_flags, boundary_edge_flags : bool arrays
        Entities lying on the boundary of the unit square.
    """

    n: int
    vertices: np.ndarray
    cells: np.ndarray
    edges: np.ndarray
    cell_edges: np.ndarray
    boundary_vertex_flags: np.ndarray
    boundary_edge_flags: np.ndarray
    h: float

    def __post_init__(self):
        for name in (
            "vertices",
            "cells",
            "edges",
            "cell_edges",
            "boundary_vertex_flags",
            "boundary_edge_flags",
        ):
            getattr(self, name).setflags(write=False)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    def signed_areas(self) -> np.ndarray:
        """Signed area of every cell (h^2/2 for these meshes)."""
        p = self.vertices[self.cells]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_midpoints(self) -> np.ndarray:
        return 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])

    def cell_centroids(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)


@dataclass(frozen=True, eq=False)
class CoarsePartition:
    """Coarse SW-NE triangulation aligned with a fine mesh (H = ratio * h)."""

    fine: TriMesh
    coarse_mesh: TriMesh
    ratio: int
    fine_to_coarse: np.ndarray = field(repr=False)  # (nc_fine,) int

    def __post_init__(self):
        self.fine_to_coarse.setflags(write=False)

    @property
    def H(self) -> float:
        return self.coarse_mesh.h

    @property
    def num_coarse_cells(self) -> int:
        return self.coarse_mesh.num_cells


def build_uniform_mesh(n: int) -> TriMesh:
    """Triangulate [0,1]^2 with n x n grid squares split along SW-NE diagonals."""
    if n < 1:
        raise ValueError(f"subdivision count must be >= 1, got {n}")

    side = np.arange(n + 1) / n
    X, Y = np.meshgrid(side, side, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    i = i.ravel()
    j = j.ravel()
    sw = j * (n + 1) + i
    se = sw + 1
    nw = sw + (n + 1)
    ne = nw + 1
    # Below-diagonal triangle (sw, se, ne) and above-diagonal (sw, ne, nw),
    # both counterclockwise; interleaved so square (i, j) owns a cell pair.
    cells = np.empty((2 * n * n, 3), dtype=np.int64)
    cells[0::2] = np.column_stack([sw, se, ne])
    cells[1::2] = np.column_stack([sw, ne, nw])

    local = cells[:, [[1, 2], [2, 0], [0, 1]]]  # (nc, 3, 2), edge opposite vertex k
    sorted_pairs = np.sort(local.reshape(-1, 2), axis=1)
    edges, inverse = np.unique(sorted_pairs, axis=0, return_inverse=True)
    cell_edges = inverse.reshape(-1, 3)
    edge_use_count = np.bincount(inverse, minlength=len(edges))
    boundary_edge_flags = edge_use_count == 1

    iv, jv = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    iv = iv.ravel()
    jv = jv.ravel()
    boundary_vertex_flags = (iv == 0) | (iv == n) | (jv == 0) | (jv == n)

    return TriMesh(
        n=n,
        vertices=vertices,
        cells=cells,
        edges=edges,
        cell_edges=cell_edges,
        boundary_vertex_flags=boundary_vertex_flags,
        boundary_edge_flags=boundary_edge_flags,
        h=1.0 / n,
    )


def build_coarse_partition(fine: TriMesh, ratio: int) -> CoarsePartition:
    """Build the coarse mesh with n/ratio subdivisions and the cell containment map.

    Every coarse triangle contains exactly ratio^2 fine triangles because both
    levels use the same SW-NE splitting; the map is computed from fine-cell
    centroids, which is exact for aligned meshes.
    """
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    if fine.n % ratio != 0:
        raise ValueError(f"ratio {ratio} does not divide the fine subdivision count {fine.n}")

    nc = fine.n // ratio
    coarse = build_uniform_mesh(nc)

    centroids = fine.cell_centroids()
    ci = np.minimum((centroids[:, 0] * nc).astype(np.int64), nc - 1)
    cj = np.minimum((centroids[:, 1] * nc).astype(np.int64), nc - 1)
    xloc = centroids[:, 0] * nc - ci
    yloc = centroids[:, 1] * nc - cj
    below = xloc > yloc  # below the SW-NE diagonal of the coarse square
    fine_to_coarse = 2 * (cj * nc + ci) + np.where(below, 0, 1)

    return CoarsePartition(
        fine=fine, coarse_mesh=coarse, ratio=ratio, fine_to_coarse=fine_to_coarse
    )


def write_mesh(mesh: TriMesh, path) -> None:
    """Write a mesh as plain text.

    Format: one header line "NV NC", then NV lines "x y" (17 significant
    digits), then NC lines "v0 v1 v2" with 0-based vertex indices.
    """
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"{mesh.num_vertices} {mesh.num_cells}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g}\n")
        for a, b, c in mesh.cells:
            fh.write(f"{a} {b} {c}\n")


def read_mesh_arrays(path):
    """Read back the plain-text format of :func:`write_mesh`.

    Returns (vertices, cells); round-trip support for external tooling only,
    solver meshes are always built structurally.
    """
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        nv, nc = int(header[0]), int(header[1])
        vertices = np.array(
            [[float(t) for t in fh.readline().split()] for _ in range(nv)]
        )
        cells = np.array(
            [[int(t) for t in fh.readline().split()] for _ in range(nc)], dtype=np.int64
        )
    return vertices, cells
