"""Coarse-mesh observation operators and the nudging matrix.

Two observers are provided: per-coarse-cell averaging (the L2 projection
onto piecewise constants over the coarse triangles, an interpolant for
non-smooth functions) and the coarse Lagrange interpolant that reads
nodal values at coarse vertices.  Both are linear maps from fine P2
velocity coefficients to coarse observation coefficients; the penalty
bilinear form beta * (obs(u), obs(v)) is realized as beta * P' M_H P.

Observers are immutable after construction; observation of analytic
fields is pure and reentrant.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem_assembly import (
    DEGREE_BILINEAR,
    DEGREE_ERROR,
    MixedSpace,
    build_mixed_space,
    assemble_pressure_mass,
    quad_data,
)
from .mesh import CoarsePartition


@dataclass(frozen=True, eq=False)
class CoarseObserver:
    """Linear observation operator from a fine velocity to coarse data.

    ``P`` maps the 2*n_nodes fine coefficients to 2*n_obs observation values
    (x block first); ``M_H`` is the coarse mass matrix that turns observation
    vectors into the L2 inner product of the observed fields.
    """

    kind: str
    partition: CoarsePartition
    space: MixedSpace
    P: sp.csr_matrix
    M_H: sp.csr_matrix
    n_obs: int

    def observe(self, coeffs: np.ndarray) -> np.ndarray:
        return self.P @ coeffs


@dataclass(frozen=True, eq=False)
class NudgingMatrixSpec:
    """Strength and observation operator of the nudging penalty."""

    beta: float
    observer: CoarseObserver

    def __post_init__(self):
        if self.beta < 0.0:
            raise ValueError(f"nudging coefficient must be nonnegative, got {self.beta}")


def _check_alignment(partition: CoarsePartition, space: MixedSpace) -> None:
    if partition.fine is not space.mesh:
        raise ValueError("coarse partition is not aligned with the space's mesh")


def _component_block(P_scalar: sp.spmatrix, n_nodes: int) -> sp.csr_matrix:
    """Apply a scalar observation map to both velocity components."""
    P = sp.block_diag([P_scalar, P_scalar], format="csr")
    P.sort_indices()
    return P


def build_cell_average_observer(
    partition: CoarsePartition, space: MixedSpace
) -> CoarseObserver:
    """Observer returning the mean of each velocity component per coarse cell.

    Rows of P integrate the fine P2 basis over the fine cells contained in a
    coarse cell (exact quadrature) and divide by the coarse cell area, so
    constant fields are observed exactly and the operator is the L2
    projection onto coarse piecewise constants.
    """
    _check_alignment(partition, space)
    qd = quad_data(space, DEGREE_BILINEAR)
    cell_ints = np.einsum("cq,qi->ci", qd.wdet, qd.vals)  # (nc_fine, 6)

    n_obs = partition.num_coarse_cells
    rows = np.repeat(partition.fine_to_coarse, 6)
    cols = space.cell_nodes.ravel()
    P_scalar = sp.coo_matrix(
        (cell_ints.ravel(), (rows, cols)), shape=(n_obs, space.n_nodes)
    ).tocsr()
    areas = np.abs(partition.coarse_mesh.signed_areas())
    P_scalar = sp.diags(1.0 / areas) @ P_scalar

    M_H = sp.block_diag([sp.diags(areas), sp.diags(areas)], format="csr")
    return CoarseObserver(
        kind="cell_average",
        partition=partition,
        space=space,
        P=_component_block(P_scalar, space.n_nodes),
        M_H=M_H,
        n_obs=n_obs,
    )


def build_coarse_lagrange_observer(
    partition: CoarsePartition, space: MixedSpace
) -> CoarseObserver:
    """Observer reading nodal values at coarse vertices (Lagrange interpolant).

    Coarse vertices are a subset of the fine vertices whenever the coarse
    ratio divides the fine subdivision count, so observation is exact nodal
    sampling of the fine P2 function.
    """
    _check_alignment(partition, space)
    coarse = partition.coarse_mesh
    nf = space.mesh.n
    r = partition.ratio

    iv, jv = np.meshgrid(np.arange(coarse.n + 1), np.arange(coarse.n + 1), indexing="xy")
    fine_vertex = (jv.ravel() * r) * (nf + 1) + iv.ravel() * r
    n_obs = coarse.num_vertices
    P_scalar = sp.coo_matrix(
        (np.ones(n_obs), (np.arange(n_obs), fine_vertex)),
        shape=(n_obs, space.n_nodes),
    ).tocsr()

    coarse_space = build_mixed_space(coarse)
    M_H_scalar = assemble_pressure_mass(coarse_space)
    M_H = sp.block_diag([M_H_scalar, M_H_scalar], format="csr")
    return CoarseObserver(
        kind="coarse_lagrange",
        partition=partition,
        space=space,
        P=_component_block(P_scalar, space.n_nodes),
        M_H=M_H,
        n_obs=n_obs,
    )


def assemble_nudging_matrix(spec: NudgingMatrixSpec) -> sp.csr_matrix:
    """B = beta * P' M_H P, symmetric positive semidefinite."""
    obs = spec.observer
    if spec.beta == 0.0:
        return sp.csr_matrix((obs.space.n_vel, obs.space.n_vel))
    B = (spec.beta * (obs.P.T @ obs.M_H @ obs.P)).tocsr()
    B.sort_indices()
    return B


def observe_exact(observer: CoarseObserver, field, t: float) -> np.ndarray:
    """Observation vector of an analytic velocity field at time t.

    Cell averaging integrates the exact field with the error-norm quadrature
    over the fine cells of each coarse cell; Lagrange observation evaluates
    at the coarse vertices.  Either way the measurements are error-free
    samples of the analytic field, not of a discrete solve.
    """
    if observer.kind == "coarse_lagrange":
        verts = observer.partition.coarse_mesh.vertices
        u1, u2 = field(verts[:, 0], verts[:, 1], t)
        return np.concatenate(
            [np.broadcast_to(u1, len(verts)), np.broadcast_to(u2, len(verts))]
        )

    qd = quad_data(observer.space, DEGREE_ERROR)
    u1, u2 = field(qd.points[..., 0], qd.points[..., 1], t)
    cell_int1 = np.sum(qd.wdet * u1, axis=1)
    cell_int2 = np.sum(qd.wdet * u2, axis=1)
    part = observer.partition
    n_obs = observer.n_obs
    sums1 = np.bincount(part.fine_to_coarse, weights=cell_int1, minlength=n_obs)
    sums2 = np.bincount(part.fine_to_coarse, weights=cell_int2, minlength=n_obs)
    areas = np.abs(part.coarse_mesh.signed_areas())
    return np.concatenate([sums1 / areas, sums2 / areas])


def nudging_load(spec: NudgingMatrixSpec, observation: np.ndarray) -> np.ndarray:
    """Right-hand-side contribution beta * P' M_H obs of a given observation."""
    obs = spec.observer
    return spec.beta * (obs.P.T @ (obs.M_H @ observation))
