"""P2/P1 mixed finite element spaces and operator assembly.

Velocity uses continuous piecewise quadratics per component, pressure
continuous piecewise linears.  Scalar velocity nodes are the mesh
vertices followed by the edge midpoints; the global dof of (node, comp)
is ``comp * n_nodes + node``, so coefficient vectors are component
blocked.  All assembled operators are scipy CSR matrices and immutable
by convention once returned.

Assembly is vectorized over cells (einsum on cached basis/geometry
data); results agree with a dense per-cell quadrature loop up to
floating-point reassociation.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateReferenceError
from .mesh import TriMesh
from .quadrature import QuadratureRule, triangle_rule

#: quadrature degrees used for the different integrands
DEGREE_BILINEAR = 4  # products of two P2 functions / gradients
DEGREE_CONVECTION = 6  # P2 * grad(P2) * P2
DEGREE_ERROR = 8  # trigonometric error densities and load vectors


def p2_values(xy: np.ndarray) -> np.ndarray:
    """P2 basis values at reference points, shape (npts, 6).

    Local ordering: three vertex functions, then the midpoint function of
    the edge opposite each vertex.
    """
    x, y = xy[:, 0], xy[:, 1]
    l0 = 1.0 - x - y
    l1 = x
    l2 = y
    return np.column_stack(
        [
            l0 * (2.0 * l0 - 1.0),
            l1 * (2.0 * l1 - 1.0),
            l2 * (2.0 * l2 - 1.0),
            4.0 * l1 * l2,
            4.0 * l2 * l0,
            4.0 * l0 * l1,
        ]
    )


def p2_reference_gradients(xy: np.ndarray) -> np.ndarray:
    """Gradients of the P2 basis w.r.t. reference coordinates, (npts, 6, 2)."""
    x, y = xy[:, 0], xy[:, 1]
    l0 = 1.0 - x - y
    l1 = x
    l2 = y
    g = np.empty((len(x), 6, 2))
    d0 = 4.0 * l0 - 1.0
    g[:, 0, 0] = -d0
    g[:, 0, 1] = -d0
    g[:, 1, 0] = 4.0 * l1 - 1.0
    g[:, 1, 1] = 0.0
    g[:, 2, 0] = 0.0
    g[:, 2, 1] = 4.0 * l2 - 1.0
    g[:, 3, 0] = 4.0 * l2
    g[:, 3, 1] = 4.0 * l1
    g[:, 4, 0] = -4.0 * l2
    g[:, 4, 1] = 4.0 * (l0 - l2)
    g[:, 5, 0] = 4.0 * (l0 - l1)
    g[:, 5, 1] = -4.0 * l1
    return g


def p1_values(xy: np.ndarray) -> np.ndarray:
    x, y = xy[:, 0], xy[:, 1]
    return np.column_stack([1.0 - x - y, x, y])


P1_REFERENCE_GRADIENTS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class MixedSpace:
    """Degree-of-freedom maps for the P2/P1 pair on a triangulation.

    ``cell_nodes`` lists the six scalar velocity nodes of each cell
    (vertices then opposite-edge midpoints); pressure reuses the mesh
    vertex numbering directly.
    """

    mesh: TriMesh
    n_nodes: int
    node_coords: np.ndarray  # (n_nodes, 2), vertices then edge midpoints
    cell_nodes: np.ndarray  # (nc, 6)
    dirichlet_nodes: np.ndarray  # scalar node indices on the boundary
    dirichlet_mask: np.ndarray  # (n_vel,) bool

    def __post_init__(self):
        for name in ("node_coords", "cell_nodes", "dirichlet_nodes", "dirichlet_mask"):
            getattr(self, name).setflags(write=False)

    @property
    def n_vel(self) -> int:
        return 2 * self.n_nodes

    @property
    def n_pres(self) -> int:
        return self.mesh.num_vertices

    def velocity_dof(self, node: int, comp: int) -> int:
        return comp * self.n_nodes + node

    def pressure_dof(self, vertex: int) -> int:
        return vertex

    def velocity_components(self, coeffs: np.ndarray):
        """Split a velocity coefficient vector into (x, y) nodal arrays."""
        return coeffs[: self.n_nodes], coeffs[self.n_nodes :]


def build_mixed_space(mesh: TriMesh) -> MixedSpace:
    n_nodes = mesh.num_vertices + mesh.num_edges
    node_coords = np.vstack([mesh.vertices, mesh.edge_midpoints()])
    cell_nodes = np.hstack([mesh.cells, mesh.num_vertices + mesh.cell_edges])

    dirichlet_nodes = np.concatenate(
        [
            np.flatnonzero(mesh.boundary_vertex_flags),
            mesh.num_vertices + np.flatnonzero(mesh.boundary_edge_flags),
        ]
    )
    dirichlet_mask = np.zeros(2 * n_nodes, dtype=bool)
    dirichlet_mask[dirichlet_nodes] = True
    dirichlet_mask[n_nodes + dirichlet_nodes] = True

    return MixedSpace(
        mesh=mesh,
        n_nodes=n_nodes,
        node_coords=node_coords,
        cell_nodes=cell_nodes,
        dirichlet_nodes=dirichlet_nodes,
        dirichlet_mask=dirichlet_mask,
    )


@dataclass(frozen=True, eq=False)
class QuadData:
    """Basis values and geometry at the quadrature points of every cell."""

    rule: QuadratureRule
    points: np.ndarray  # (nc, nq, 2) physical coordinates
    wdet: np.ndarray  # (nc, nq) quadrature weight * |det J|
    vals: np.ndarray  # (nq, 6) P2 values (affine map: same on every cell)
    grads: np.ndarray  # (nc, nq, 6, 2) physical P2 gradients
    pvals: np.ndarray  # (nq, 3) P1 values


@lru_cache(maxsize=None)
def quad_data(space: MixedSpace, degree: int) -> QuadData:
    """Cached per-(space, degree) quadrature tables."""
    return build_quad_tables(space, triangle_rule(degree))


@lru_cache(maxsize=None)
def build_quad_tables(space: MixedSpace, rule: QuadratureRule) -> QuadData:
    """Geometry and basis evaluations of a space at the points of a rule."""
    mesh = space.mesh
    verts = mesh.vertices[mesh.cells]  # (nc, 3, 2)
    jac = np.stack([verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0]], axis=-1)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    inv_t = (
        np.stack(
            [
                np.stack([jac[:, 1, 1], -jac[:, 1, 0]], axis=-1),
                np.stack([-jac[:, 0, 1], jac[:, 0, 0]], axis=-1),
            ],
            axis=1,
        )
        / det[:, None, None]
    )

    xy = rule.xy
    points = verts[:, None, 0, :] + np.einsum("cde,qe->cqd", jac, xy)
    wdet = np.abs(det)[:, None] * rule.weights[None, :]
    ref_grads = p2_reference_gradients(xy)
    grads = np.einsum("cde,qie->cqid", inv_t, ref_grads)
    return QuadData(
        rule=rule,
        points=points,
        wdet=wdet,
        vals=p2_values(xy),
        grads=grads,
        pvals=p1_values(xy),
    )


def _scatter_velocity_blocks(space: MixedSpace, local_blocks) -> sp.csr_matrix:
    """Assemble per-cell 6x6 blocks into the global n_vel x n_vel matrix.

    ``local_blocks`` maps (test_comp, trial_comp) -> (nc, 6, 6) array.
    """
    nodes = space.cell_nodes
    nc = nodes.shape[0]
    rows_base = np.repeat(nodes, 6, axis=1).ravel()
    cols_base = np.tile(nodes, (1, 6)).ravel()
    rows, cols, data = [], [], []
    for (ct, cd), block in local_blocks.items():
        rows.append(rows_base + ct * space.n_nodes)
        cols.append(cols_base + cd * space.n_nodes)
        data.append(block.reshape(nc, 36).ravel())
    mat = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(space.n_vel, space.n_vel),
    ).tocsr()
    mat.sort_indices()
    return mat


def assemble_velocity_mass(space: MixedSpace) -> sp.csr_matrix:
    qd = quad_data(space, DEGREE_BILINEAR)
    local = np.einsum("cq,qi,qj->cij", qd.wdet, qd.vals, qd.vals)
    return _scatter_velocity_blocks(space, {(0, 0): local, (1, 1): local})


def assemble_stiffness(space: MixedSpace) -> sp.csr_matrix:
    """Vector Laplacian (grad u, grad v), unscaled by viscosity."""
    qd = quad_data(space, DEGREE_BILINEAR)
    local = np.einsum("cq,cqid,cqjd->cij", qd.wdet, qd.grads, qd.grads)
    return _scatter_velocity_blocks(space, {(0, 0): local, (1, 1): local})


def assemble_grad_div(space: MixedSpace) -> sp.csr_matrix:
    """(div u, div v), unscaled by the stabilization coefficient."""
    qd = quad_data(space, DEGREE_BILINEAR)
    blocks = {}
    for ct in (0, 1):
        for cd in (0, 1):
            blocks[(ct, cd)] = np.einsum(
                "cq,cqi,cqj->cij", qd.wdet, qd.grads[..., ct], qd.grads[..., cd]
            )
    return _scatter_velocity_blocks(space, blocks)


def assemble_divergence(space: MixedSpace) -> sp.csr_matrix:
    """Pressure-velocity coupling D with D[q, v] = (psi_q, div phi_v)."""
    qd = quad_data(space, DEGREE_BILINEAR)
    nodes = space.cell_nodes
    cells = space.mesh.cells
    nc = nodes.shape[0]
    rows_base = np.repeat(cells, 6, axis=1).ravel()
    rows, cols, data = [], [], []
    for comp in (0, 1):
        local = np.einsum("cq,qk,cqj->ckj", qd.wdet, qd.pvals, qd.grads[..., comp])
        rows.append(rows_base)
        cols.append(np.tile(nodes, (1, 3)).ravel() + comp * space.n_nodes)
        data.append(local.reshape(nc, 18).ravel())
    mat = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(space.n_pres, space.n_vel),
    ).tocsr()
    mat.sort_indices()
    return mat


def assemble_convection(space: MixedSpace, w: np.ndarray) -> sp.csr_matrix:
    """Skew-symmetrized convection with the transporting field frozen at w.

    Realizes N[i, j] = ((w . grad) phi_j, phi_i) + 1/2 ((div w) phi_j, phi_i);
    acting componentwise, so the matrix has identical x-x and y-y blocks and
    v' N(w) v vanishes for any v (up to roundoff) whenever w is admissible.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (space.n_vel,):
        raise ValueError(
            f"velocity coefficient vector has length {w.shape}, expected ({space.n_vel},)"
        )
    qd = quad_data(space, DEGREE_CONVECTION)
    wx, wy = space.velocity_components(w)
    wx_loc = wx[space.cell_nodes]  # (nc, 6)
    wy_loc = wy[space.cell_nodes]
    wx_q = np.einsum("qi,ci->cq", qd.vals, wx_loc)
    wy_q = np.einsum("qi,ci->cq", qd.vals, wy_loc)
    div_q = np.einsum("cqi,ci->cq", qd.grads[..., 0], wx_loc) + np.einsum(
        "cqi,ci->cq", qd.grads[..., 1], wy_loc
    )
    transported = (
        wx_q[..., None] * qd.grads[..., 0]
        + wy_q[..., None] * qd.grads[..., 1]
        + 0.5 * div_q[..., None] * qd.vals[None, :, :]
    )  # (nc, nq, 6) action on trial function j
    local = np.einsum("cq,cqj,qi->cij", qd.wdet, transported, qd.vals)
    return _scatter_velocity_blocks(space, {(0, 0): local, (1, 1): local})


def assemble_pressure_mass(space: MixedSpace) -> sp.csr_matrix:
    qd = quad_data(space, DEGREE_BILINEAR)
    cells = space.mesh.cells
    nc = cells.shape[0]
    local = np.einsum("cq,qk,ql->ckl", qd.wdet, qd.pvals, qd.pvals)
    rows = np.repeat(cells, 3, axis=1).ravel()
    cols = np.tile(cells, (1, 3)).ravel()
    mat = sp.coo_matrix(
        (local.reshape(nc, 9).ravel(), (rows, cols)),
        shape=(space.n_pres, space.n_pres),
    ).tocsr()
    mat.sort_indices()
    return mat


def assemble_pressure_stiffness(space: MixedSpace) -> sp.csr_matrix:
    """P1 Neumann Laplacian, used by the iterative solver's preconditioner."""
    mesh = space.mesh
    verts = mesh.vertices[mesh.cells]
    jac = np.stack([verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0]], axis=-1)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    inv_t = (
        np.stack(
            [
                np.stack([jac[:, 1, 1], -jac[:, 1, 0]], axis=-1),
                np.stack([-jac[:, 0, 1], jac[:, 0, 0]], axis=-1),
            ],
            axis=1,
        )
        / det[:, None, None]
    )
    grads = np.einsum("cde,ie->cid", inv_t, P1_REFERENCE_GRADIENTS)
    local = 0.5 * np.abs(det)[:, None, None] * np.einsum("cid,cjd->cij", grads, grads)
    cells = mesh.cells
    rows = np.repeat(cells, 3, axis=1).ravel()
    cols = np.tile(cells, (1, 3)).ravel()
    mat = sp.coo_matrix(
        (local.reshape(-1), (rows, cols)), shape=(space.n_pres, space.n_pres)
    ).tocsr()
    mat.sort_indices()
    return mat


def pressure_integral_vector(space: MixedSpace) -> np.ndarray:
    """Vector g with g[q] = integral of the q-th pressure basis function.

    ``g @ p`` is the mean of the P1 field p over the unit square, which makes
    g the zero-mean gauge row of the saddle-point systems.
    """
    areas = np.abs(space.mesh.signed_areas())
    g = np.zeros(space.n_pres)
    np.add.at(g, space.mesh.cells.ravel(), np.repeat(areas / 3.0, 3))
    return g


@dataclass(frozen=True, eq=False)
class OperatorSet:
    """Assembled constant matrices for one (mesh, physics) configuration.

    Viscosity and the grad-div coefficient are stored as scalars and applied
    at system-build time, so one assembly serves parameter sweeps that share
    the mesh.  The nudging matrix B already includes its strength beta.
    """

    space: MixedSpace
    M: sp.csr_matrix
    A: sp.csr_matrix
    D: sp.csr_matrix
    G: sp.csr_matrix
    B: sp.csr_matrix
    nu: float
    mu: float
    gauge: np.ndarray  # pressure integral vector
    M_p: sp.csr_matrix


def assemble_constant_operators(
    mesh: TriMesh, space: MixedSpace, nu: float, mu: float, nudge=None
) -> OperatorSet:
    """Assemble every matrix that does not change during a run.

    ``nudge`` is a NudgingMatrixSpec (observer module); when absent the
    nudging matrix is zero.
    """
    if space.mesh is not mesh:
        raise ValueError("space was built for a different mesh")
    if nu <= 0.0:
        raise ValueError(f"viscosity must be positive, got {nu}")
    if mu < 0.0:
        raise ValueError(f"grad-div coefficient must be nonnegative, got {mu}")

    if nudge is None:
        B = sp.csr_matrix((space.n_vel, space.n_vel))
    else:
        from .observer import assemble_nudging_matrix

        B = assemble_nudging_matrix(nudge)

    return OperatorSet(
        space=space,
        M=assemble_velocity_mass(space),
        A=assemble_stiffness(space),
        D=assemble_divergence(space),
        G=assemble_grad_div(space),
        B=B,
        nu=nu,
        mu=mu,
        gauge=pressure_integral_vector(space),
        M_p=assemble_pressure_mass(space),
    )


def assemble_load(space: MixedSpace, f, t: float, degree: int = DEGREE_ERROR) -> np.ndarray:
    """Load vector (f(., t), phi_i) for a vectorized forcing callable.

    ``f(x, y, t)`` must accept arrays and return the two force components.
    """
    qd = quad_data(space, degree)
    f1, f2 = f(qd.points[..., 0], qd.points[..., 1], t)
    load = np.zeros(space.n_vel)
    idx = space.cell_nodes.ravel()
    np.add.at(load, idx, np.einsum("cq,qi->ci", qd.wdet * f1, qd.vals).ravel())
    np.add.at(
        load,
        space.n_nodes + idx,
        np.einsum("cq,qi->ci", qd.wdet * f2, qd.vals).ravel(),
    )
    return load


def velocity_at_quad(space: MixedSpace, coeffs: np.ndarray, qd: QuadData) -> np.ndarray:
    """Velocity values at all quadrature points, shape (nc, nq, 2)."""
    ux, uy = space.velocity_components(coeffs)
    out = np.empty(qd.points.shape)
    out[..., 0] = np.einsum("qi,ci->cq", qd.vals, ux[space.cell_nodes])
    out[..., 1] = np.einsum("qi,ci->cq", qd.vals, uy[space.cell_nodes])
    return out


def velocity_gradients_at_quad(
    space: MixedSpace, coeffs: np.ndarray, qd: QuadData
) -> np.ndarray:
    """Velocity gradient tensors at quadrature points, (nc, nq, 2, 2).

    Entry [..., a, b] is the derivative of component a along direction b.
    """
    ux, uy = space.velocity_components(coeffs)
    out = np.empty(qd.points.shape[:2] + (2, 2))
    out[..., 0, :] = np.einsum("cqid,ci->cqd", qd.grads, ux[space.cell_nodes])
    out[..., 1, :] = np.einsum("cqid,ci->cqd", qd.grads, uy[space.cell_nodes])
    return out


def exact_velocity_norm(space: MixedSpace, field, t: float, degree: int = DEGREE_ERROR) -> float:
    qd = quad_data(space, degree)
    u1, u2 = field(qd.points[..., 0], qd.points[..., 1], t)
    return float(np.sqrt(np.sum(qd.wdet * (u1 * u1 + u2 * u2))))


def l2_error_against_analytic(
    space: MixedSpace,
    coeffs: np.ndarray,
    field,
    t: float,
    degree: int = DEGREE_ERROR,
    relative: bool = False,
) -> float:
    """L2 distance between a discrete velocity and an analytic field at time t.

    With ``relative=True`` the error is divided by the L2 norm of the analytic
    field; a zero reference norm raises :class:`DegenerateReferenceError`.
    """
    qd = quad_data(space, degree)
    u1, u2 = field(qd.points[..., 0], qd.points[..., 1], t)
    uh = velocity_at_quad(space, coeffs, qd)
    d1 = uh[..., 0] - u1
    d2 = uh[..., 1] - u2
    err = float(np.sqrt(np.sum(qd.wdet * (d1 * d1 + d2 * d2))))
    if not relative:
        return err
    ref = float(np.sqrt(np.sum(qd.wdet * (u1 * u1 + u2 * u2))))
    if ref == 0.0:
        raise DegenerateReferenceError("reference field has zero L2 norm")
    return err / ref


def interpolate_velocity(space: MixedSpace, field, t: float) -> np.ndarray:
    """Nodal P2 interpolant of an analytic velocity field."""
    x, y = space.node_coords[:, 0], space.node_coords[:, 1]
    u1, u2 = field(x, y, t)
    return np.concatenate([np.broadcast_to(u1, x.shape), np.broadcast_to(u2, x.shape)])


def interpolate_pressure(space: MixedSpace, field, t: float, demean: bool = True) -> np.ndarray:
    """Nodal P1 interpolant of an analytic pressure, shifted to zero mean."""
    verts = space.mesh.vertices
    p = np.asarray(field(verts[:, 0], verts[:, 1], t), dtype=float)
    p = np.broadcast_to(p, (space.n_pres,)).copy()
    if demean:
        p -= pressure_integral_vector(space) @ p  # domain has unit area
    return p


def dump_matrix_coo(mat, path) -> None:
    """Write a sparse matrix in "row col value" text triplets (debug aid)."""
    coo = sp.coo_matrix(mat)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {v:.17g}\n")
