"""Linear static elasticity on hex-8 meshes (N-mm-MPa units)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NonConvergence, SingularSystem
from .geometry import (
    MeshModel,
    _shape_functions,
    element_jacobians,
    gauss_points_2x2x2,
    match_faces,
)
from .materials import Material

logger = logging.getLogger(__name__)

SOLVERS = ("cg", "direct")


@dataclass(frozen=True)
class SimSetting:
    """Load case: pressure on the load-anchored faces, clamp on the fixed-anchored ones.

    Positive pressure pushes along the inward normal; a negative value is a
    tensile traction. An empty ``fixed_anchor_label`` means nothing is clamped.
    """

    pressure: float
    load_anchor_label: str = "load"
    fixed_anchor_label: str | None = "fixed"
    mesh_resolution: int = 2
    solver_tol: float = 1e-8
    solver: str = "direct"

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if not math.isfinite(self.pressure):
            raise ValueError("pressure must be finite")
        if not 0 < self.solver_tol <= 1e-4:
            raise ValueError("solver_tol must lie in (0, 1e-4]")
        if isinstance(self.mesh_resolution, bool) or int(self.mesh_resolution) != self.mesh_resolution or self.mesh_resolution < 1:
            raise ValueError("mesh_resolution must be a positive integer")

    def to_dict(self) -> dict:
        return {
            "pressure": self.pressure,
            "load_anchor_label": self.load_anchor_label,
            "fixed_anchor_label": self.fixed_anchor_label,
            "mesh_resolution": self.mesh_resolution,
            "solver_tol": self.solver_tol,
            "solver": self.solver,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimSetting":
        return cls(
            pressure=float(d["pressure"]),
            load_anchor_label=d.get("load_anchor_label", "load"),
            fixed_anchor_label=d.get("fixed_anchor_label", "fixed"),
            mesh_resolution=int(d.get("mesh_resolution", 2)),
            solver_tol=float(d.get("solver_tol", 1e-8)),
            solver=d.get("solver", "direct"),
        )


@dataclass
class FemField:
    nodal_displacements: np.ndarray  # (N, 3) mm
    element_stresses: np.ndarray  # (E, 6) MPa: xx, yy, zz, xy, yz, zx
    fixed_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    applied_force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    iterations: int = 0
    residual: float = 0.0
    log: list[str] = field(default_factory=list)


def elasticity_matrix(E: float, nu: float) -> np.ndarray:
    """Isotropic Hooke matrix for engineering shear strains."""
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    D = np.zeros((6, 6))
    D[:3, :3] = lam
    D[[0, 1, 2], [0, 1, 2]] = lam + 2 * mu
    D[[3, 4, 5], [3, 4, 5]] = mu
    return D


def strain_displacement(nodes: np.ndarray, elements: np.ndarray, point):
    """B matrices (E, 6, 24) and Jacobian determinants at one natural point."""
    _, dN = _shape_functions(*point)
    J = element_jacobians(nodes, elements, point)
    det = np.linalg.det(J)
    invJ = np.linalg.inv(J)
    # dN/dX_i = sum_j (J^-1)_{ji} dN/dxi_j
    dX = np.einsum("eji,ja->eia", invJ, dN)
    B = np.zeros((len(elements), 6, 24))
    B[:, 0, 0::3] = dX[:, 0]
    B[:, 1, 1::3] = dX[:, 1]
    B[:, 2, 2::3] = dX[:, 2]
    B[:, 3, 0::3] = dX[:, 1]
    B[:, 3, 1::3] = dX[:, 0]
    B[:, 4, 1::3] = dX[:, 2]
    B[:, 4, 2::3] = dX[:, 1]
    B[:, 5, 0::3] = dX[:, 2]
    B[:, 5, 2::3] = dX[:, 0]
    return B, det


def element_stiffness(nodes: np.ndarray, elements: np.ndarray, D: np.ndarray) -> np.ndarray:
    """(E, 24, 24) stiffness matrices, full 2x2x2 Gauss integration."""
    Ke = np.zeros((len(elements), 24, 24))
    for gp in gauss_points_2x2x2():
        B, det = strain_displacement(nodes, elements, gp)
        Ke += np.matmul(B.transpose(0, 2, 1), np.matmul(D, B)) * det[:, None, None]
    return Ke


def element_dofs(elements: np.ndarray) -> np.ndarray:
    return (3 * elements[:, :, None] + np.arange(3)).reshape(len(elements), 24)


def _congruent_classes(nodes: np.ndarray, elements: np.ndarray):
    """Group elements whose corner offsets agree to 1e-12 of the mesh size."""
    X = nodes[elements]
    rel = X - X[:, :1]
    scale = float(np.ptp(nodes, axis=0).max()) or 1.0
    keys = np.round(rel.reshape(len(elements), -1) / (1e-12 * scale)).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    return first, inverse.reshape(-1)


def assemble_stiffness(mesh: MeshModel, material: Material) -> sp.csr_matrix:
    D = elasticity_matrix(material.E, material.nu)
    # structured grids repeat a handful of element shapes; Ke is translation invariant
    first, inverse = _congruent_classes(mesh.nodes, mesh.elements)
    Ke = element_stiffness(mesh.nodes, mesh.elements[first], D)[inverse]
    dofs = element_dofs(mesh.elements)
    rows = np.repeat(dofs, 24, axis=1).ravel()
    cols = np.tile(dofs, (1, 24)).ravel()
    n = 3 * mesh.n_nodes
    return sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))


def pressure_loads(mesh: MeshModel, groups, pressure: float) -> np.ndarray:
    """Consistent nodal forces of a pressure acting on the given face groups."""
    f = np.zeros(3 * mesh.n_nodes)
    mask = np.isin(mesh.facet_group, list(groups))
    quads = mesh.facets[mask]
    if not len(quads):
        return f
    X = mesh.nodes[quads]  # (F, 4, 3)
    g = 1.0 / math.sqrt(3.0)
    s_c = np.array([-1.0, 1.0, 1.0, -1.0])
    t_c = np.array([-1.0, -1.0, 1.0, 1.0])
    for s in (-g, g):
        for t in (-g, g):
            N = 0.25 * (1 + s_c * s) * (1 + t_c * t)
            dNs = 0.25 * s_c * (1 + t_c * t)
            dNt = 0.25 * t_c * (1 + s_c * s)
            xs = np.einsum("a,fai->fi", dNs, X)
            xt = np.einsum("a,fai->fi", dNt, X)
            traction = -pressure * np.cross(xs, xt)  # (F, 3), includes dA
            contrib = N[None, :, None] * traction[:, None, :]  # (F, 4, 3)
            np.add.at(f, (3 * quads[:, :, None] + np.arange(3)).ravel(), contrib.ravel())
    return f


def _dot(a: np.ndarray, b: np.ndarray) -> float:
    # pairwise summation, independent of BLAS threading
    return float(np.add.reduce(a * b))


def pcg(A, b: np.ndarray, tol: float, maxiter: int, x0: np.ndarray | None = None):
    """Jacobi-preconditioned conjugate gradients.

    Stops when ||b - A x|| / ||b|| <= tol, verified on the true residual.
    Returns (x, iterations, relative residual).
    """
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise SingularSystem("stiffness has a non-positive diagonal entry")
    minv = 1.0 / diag
    bnorm = math.sqrt(_dot(b, b))
    x = np.zeros_like(b) if x0 is None else x0.astype(float).copy()
    if bnorm == 0.0:
        return np.zeros_like(b), 0, 0.0
    r = b - A @ x
    it = 0
    while True:
        z = minv * r
        p = z.copy()
        rz = _dot(r, z)
        while it < maxiter:
            it += 1
            Ap = A @ p
            pAp = _dot(p, Ap)
            if not pAp > 0:
                raise SingularSystem("stiffness is not positive definite (rigid-body mode?)")
            alpha = rz / pAp
            x += alpha * p
            r -= alpha * Ap
            if math.sqrt(_dot(r, r)) <= tol * bnorm:
                break
            z = minv * r
            rz_new = _dot(r, z)
            p *= rz_new / rz
            p += z
            rz = rz_new
        r = b - A @ x
        res = math.sqrt(_dot(r, r)) / bnorm
        if res <= tol:
            return x, it, res
        if it >= maxiter:
            raise NonConvergence(f"CG stopped at {it} iterations with relative residual {res:.3e}")


def direct_solve(A, b: np.ndarray, tol: float):
    """Sparse LU with a symmetric minimum-degree ordering, then CG polishing
    if round-off leaves the residual above ``tol``."""
    bnorm = math.sqrt(_dot(b, b))
    if bnorm == 0.0:
        return np.zeros_like(b), 0, 0.0
    try:
        lu = spla.splu(
            sp.csc_matrix(A),
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as exc:  # exactly singular factor
        raise SingularSystem(f"stiffness is singular: {exc}") from None
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise SingularSystem("stiffness is singular (non-finite solution)")
    r = b - A @ x
    res = math.sqrt(_dot(r, r)) / bnorm
    if res <= tol:
        return x, 1, res
    x, it, res = pcg(A, b, tol, iteration_cap(len(b)), x0=x)
    return x, it + 1, res


def iteration_cap(n_unknowns: int) -> int:
    return max(1000, math.ceil(20 * math.sqrt(n_unknowns)))


def centroid_stresses(mesh: MeshModel, material: Material, u: np.ndarray) -> np.ndarray:
    D = elasticity_matrix(material.E, material.nu)
    B, _ = strain_displacement(mesh.nodes, mesh.elements, (0.0, 0.0, 0.0))
    ue = u.reshape(-1)[element_dofs(mesh.elements)]  # (E, 24)
    strain = np.einsum("eij,ej->ei", B, ue)
    return strain @ D.T


def solve_system(
    mesh: MeshModel,
    material: Material,
    forces: np.ndarray,
    prescribed: dict[int, float],
    tol: float = 1e-8,
    K: sp.csr_matrix | None = None,
    solver: str = "cg",
):
    """Solve K u = f with prescribed values on some dofs.

    ``prescribed`` maps global dof index to its displacement. Returns
    (u as (N, 3), iterations, residual).
    """
    if not prescribed:
        raise SingularSystem("no constrained degrees of freedom; rigid-body modes remain")
    if K is None:
        K = assemble_stiffness(mesh, material)
    n = K.shape[0]
    fixed = np.fromiter(sorted(prescribed), dtype=np.int64)
    values = np.array([prescribed[d] for d in fixed])
    free_mask = np.ones(n, dtype=bool)
    free_mask[fixed] = False
    free = np.flatnonzero(free_mask)
    u = np.zeros(n)
    u[fixed] = values
    if len(free):
        Kff = K[free][:, free]
        rhs = forces[free] - K[free][:, fixed] @ values
        if solver == "direct":
            x, it, res = direct_solve(Kff, rhs, tol)
        else:
            x, it, res = pcg(Kff, rhs, tol, iteration_cap(len(free)))
        u[free] = x
    else:
        it, res = 0, 0.0
    return u.reshape(-1, 3), it, res


def solve_linear_static(
    mesh: MeshModel,
    material: Material,
    setting: SimSetting,
    eps: float | None = None,
) -> FemField:
    """Clamp the fixed-anchored faces, load the load-anchored faces, solve."""
    load_groups = match_faces(mesh, mesh.anchor(setting.load_anchor_label).point, eps)
    if setting.fixed_anchor_label:
        fixed_groups = match_faces(mesh, mesh.anchor(setting.fixed_anchor_label).point, eps)
    else:
        fixed_groups = set()
    fixed_nodes = mesh.group_nodes(fixed_groups) if fixed_groups else np.zeros(0, dtype=np.int64)
    if not len(fixed_nodes):
        raise SingularSystem("no fixed faces selected; rigid-body modes remain")
    f = pressure_loads(mesh, load_groups, setting.pressure)
    prescribed = {int(3 * nd + c): 0.0 for nd in fixed_nodes for c in range(3)}
    u, it, res = solve_system(mesh, material, f, prescribed, setting.solver_tol, solver=setting.solver)
    stresses = centroid_stresses(mesh, material, u)
    log = [
        f"dofs={3 * mesh.n_nodes} free={3 * mesh.n_nodes - len(prescribed)}",
        f"iterations={it}",
        f"residual={res:.3e}",
    ]
    logger.debug("solve %s: %s", mesh.category, "; ".join(log))
    return FemField(
        nodal_displacements=u,
        element_stresses=stresses,
        fixed_nodes=fixed_nodes,
        applied_force=f.reshape(-1, 3).sum(axis=0),
        iterations=it,
        residual=res,
        log=log,
    )


RESULT_SCHEMA = "cadloop-result v1"


def write_results(fld: FemField, path: str | Path) -> Path:
    """Plain-text dump: ``displacements N`` (id ux uy uz) then
    ``stresses E`` (id sxx syy szz txy tyz tzx), then the solver log."""
    path = Path(path)
    lines = [RESULT_SCHEMA, f"displacements {len(fld.nodal_displacements)}"]
    lines += [f"{i} {a!r} {b!r} {c!r}" for i, (a, b, c) in enumerate(fld.nodal_displacements.tolist())]
    lines.append(f"stresses {len(fld.element_stresses)}")
    lines += [f"{i} " + " ".join(repr(v) for v in row) for i, row in enumerate(fld.element_stresses.tolist())]
    lines.append(f"log {len(fld.log)}")
    lines += fld.log
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_results(path: str | Path) -> FemField:
    it = iter(Path(path).read_text(encoding="utf-8").splitlines())
    if next(it) != RESULT_SCHEMA:
        raise ValueError("not a cadloop result file")
    n = int(next(it).split()[1])
    u = np.array([[float(v) for v in next(it).split()[1:]] for _ in range(n)]).reshape(-1, 3)
    m = int(next(it).split()[1])
    s = np.array([[float(v) for v in next(it).split()[1:]] for _ in range(m)]).reshape(-1, 6)
    k = int(next(it).split()[1])
    log = [next(it) for _ in range(k)]
    return FemField(nodal_displacements=u, element_stresses=s, log=log)
