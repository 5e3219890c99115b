"""Weak-form equilibrium systems ``A theta = b`` for segment-wise feature models.

With single-point quadrature the virtual work of feature ``k`` in element
``e`` at node ``a`` and direction ``i`` is ``V_e * dQ_k/dF_iJ * G_aJ``.  Summing
these into the column block of the element's segment gives, for every nodal
dof, one row of the linear system.  Interior dofs must balance (rhs 0).  For
the loaded edges the rows of all edge nodes are summed per direction and
matched to the measured reaction force.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg

from .constitutive import DEFAULT_LIBRARY
from .errors import (
    ConfigurationError,
    ElementInversionError,
    FormatError,
    InvalidArgumentError,
    SingularSystemError,
)

__all__ = [
    "BoundaryForces",
    "EquilibriumSystem",
    "element_gradients",
    "deformation_gradients",
    "element_kinematics",
    "nodal_feature_forces",
    "assemble_free_rows",
    "assemble_fixed_rows",
    "combine",
    "assemble_system",
    "subsample",
    "ols_solve",
    "read_forces",
    "write_forces",
]

FREE, FIXED = 0, 1


@dataclass(frozen=True, eq=False)
class BoundaryForces:
    """Aggregate reaction force per boundary set, shape ``(n_b, 3)`` in N."""

    names: tuple
    R: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float, copy=True).reshape(len(self.names), 3)
        if not np.all(np.isfinite(R)):
            raise InvalidArgumentError("boundary forces must be finite")
        R.setflags(write=False)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "R", R)

    def __getitem__(self, name):
        return self.R[self.names.index(name)]

    @property
    def max_abs(self):
        return float(np.max(np.abs(self.R))) if self.R.size else 0.0


def write_forces(forces, path):
    lines = [" ".join([n] + [repr(float(v)) for v in r]) for n, r in zip(forces.names, forces.R)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_forces(path):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"force file {path} not found")
    names, rows = [], []
    for ln in path.read_text(encoding="utf-8").splitlines():
        if not ln.strip():
            continue
        parts = ln.split()
        if len(parts) != 4:
            raise FormatError(f"{path}: expected 'name Rx Ry Rz', got {ln!r}")
        try:
            rows.append([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        names.append(parts[0])
    return BoundaryForces(tuple(names), np.array(rows).reshape(-1, 3))


@dataclass(frozen=True, eq=False)
class EquilibriumSystem:
    """Stacked linear system with per-row provenance.

    ``row_kind`` is 0 for a free (interior) dof row and 1 for a boundary
    force row.  Free rows carry ``row_node``/``row_dir``; fixed rows carry
    ``row_boundary``/``row_dir``.  Column ``s * n_f + k`` is feature ``k``
    of segment ``s + 1``.
    """

    A: np.ndarray
    b: np.ndarray
    row_kind: np.ndarray
    row_node: np.ndarray
    row_dir: np.ndarray
    row_boundary: np.ndarray
    n_f: int
    n_c: int
    lambda_r: float = 1.0
    boundary_names: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n_rows = self.A.shape[0]
        for name in ("b", "row_kind", "row_node", "row_dir", "row_boundary"):
            if len(getattr(self, name)) != n_rows:
                raise InvalidArgumentError(f"{name} length does not match the row count")
        if self.A.shape[1] != self.n_f * self.n_c:
            raise InvalidArgumentError("column count must equal n_f * n_c")

    @property
    def n_rows(self):
        return self.A.shape[0]

    @property
    def n_cols(self):
        return self.A.shape[1]

    @property
    def free_mask(self):
        return self.row_kind == FREE

    @property
    def fixed_mask(self):
        return self.row_kind == FIXED

    def take(self, rows):
        rows = np.asarray(rows)
        return replace(
            self,
            A=self.A[rows],
            b=self.b[rows],
            row_kind=self.row_kind[rows],
            row_node=self.row_node[rows],
            row_dir=self.row_dir[rows],
            row_boundary=self.row_boundary[rows],
            meta=dict(self.meta),
        )

    def column_block(self, segment):
        s = segment - 1
        return slice(s * self.n_f, (s + 1) * self.n_f)


def element_gradients(mesh):
    """Shape-function gradients at the wedge centroid and element volumes.

    Returns
    -------
    G : (n_el, 6, 3) array
    volume : (n_el,) array
    """
    p = mesh.nodes[mesh.elements[:, :3], :2]
    area = mesh.triangle_areas
    t = mesh.nodes[mesh.elements[:, 3], 2] - mesh.nodes[mesh.elements[:, 0], 2]
    # gradient of barycentric coordinate k: rotated opposite edge / (2 area)
    gL = np.empty((len(p), 3, 2))
    for k in range(3):
        e = p[:, (k + 2) % 3] - p[:, (k + 1) % 3]
        gL[:, k, 0] = -e[:, 1]
        gL[:, k, 1] = e[:, 0]
    gL /= (2.0 * area)[:, None, None]
    G = np.empty((len(p), 6, 3))
    G[:, :3, :2] = 0.5 * gL
    G[:, 3:, :2] = 0.5 * gL
    G[:, :3, 2] = -1.0 / (3.0 * t)[:, None]
    G[:, 3:, 2] = 1.0 / (3.0 * t)[:, None]
    return G, area * t


def deformation_gradients(mesh, u, G=None, check=True):
    """Centroid deformation gradients ``(n_el, 3, 3)`` for nodal displacements ``u``."""
    if G is None:
        G = element_gradients(mesh)[0]
    ue = np.asarray(u, dtype=float)[mesh.elements]
    F = np.eye(3) + np.einsum("eai,eaj->eij", ue, G)
    if check:
        J = np.linalg.det(F)
        bad = np.flatnonzero(~(J > 0))
        if bad.size:
            raise ElementInversionError(bad[0], J[bad[0]])
    return F


def element_kinematics(mesh, field, element):
    """``(F, G, volume)`` of one element for the displacement field."""
    field.check_mesh(mesh)
    G, vol = element_gradients(mesh)
    ue = field.values[mesh.elements[element]]
    F = np.eye(3) + ue.T @ G[element]
    J = np.linalg.det(F)
    if not J > 0:
        raise ElementInversionError(element, J)
    return F, G[element], float(vol[element])


def nodal_feature_forces(mesh, u, segmap, library=DEFAULT_LIBRARY):
    """Per-node virtual-work contributions, shape ``(n_n, 3, n_c * n_f)``."""
    u = np.asarray(u.values if hasattr(u, "values") else u, dtype=float)
    if u.shape != (mesh.n_nodes, 3):
        raise InvalidArgumentError("displacement array does not match the mesh")
    seg = segmap.element_segment
    if len(seg) != mesh.n_elements:
        raise InvalidArgumentError("segment map does not match the mesh")
    n_f, n_c = library.n_f, segmap.n_c
    G, vol = element_gradients(mesh)
    F = deformation_gradients(mesh, u, G)
    D = library.derivatives(F)  # (n_el, n_f, 3, 3)
    contrib = vol[:, None, None, None] * np.einsum("ekij,eaj->eaik", D, G)  # (n_el, 6, 3, n_f)
    H = np.zeros((mesh.n_nodes, 3, n_c, n_f))
    np.add.at(H, (mesh.elements, slice(None), (seg - 1)[:, None]), contrib)
    return H.reshape(mesh.n_nodes, 3, n_c * n_f)


def assemble_free_rows(mesh, field, segmap, library=DEFAULT_LIBRARY, H=None):
    """Rows of every dof of every node outside the boundary sets (rhs 0)."""
    if H is None:
        H = nodal_feature_forces(mesh, field, segmap, library)
    nodes = mesh.interior_nodes
    A = H[nodes].reshape(-1, H.shape[2])
    n = len(A)
    return EquilibriumSystem(
        A=A,
        b=np.zeros(n),
        row_kind=np.full(n, FREE, dtype=np.int8),
        row_node=np.repeat(nodes, 3),
        row_dir=np.tile(np.arange(3), len(nodes)),
        row_boundary=np.full(n, -1),
        n_f=library.n_f,
        n_c=segmap.n_c,
    )


def assemble_fixed_rows(mesh, field, segmap, forces, library=DEFAULT_LIBRARY, H=None):
    """One row per boundary set and direction, matched to the reaction force."""
    if tuple(forces.names) != tuple(mesh.boundary_sets):
        raise ConfigurationError(
            f"force names {forces.names} do not match boundary sets {tuple(mesh.boundary_sets)}"
        )
    if H is None:
        H = nodal_feature_forces(mesh, field, segmap, library)
    rows, rhs = [], []
    for k, (name, ids) in enumerate(mesh.boundary_sets.items()):
        if len(ids) == 0:
            raise ConfigurationError(f"boundary set {name!r} is empty")
        rows.append(H[ids].sum(axis=0))
        rhs.append(forces.R[k])
    A = np.concatenate(rows)
    n_b = len(rows)
    return EquilibriumSystem(
        A=A,
        b=np.concatenate(rhs),
        row_kind=np.full(3 * n_b, FIXED, dtype=np.int8),
        row_node=np.full(3 * n_b, -1),
        row_dir=np.tile(np.arange(3), n_b),
        row_boundary=np.repeat(np.arange(n_b), 3),
        n_f=library.n_f,
        n_c=segmap.n_c,
        boundary_names=tuple(mesh.boundary_sets),
    )


def combine(free, fixed, lambda_r=None):
    """Stack ``[A_free; lambda_r A_fix]`` and ``[0; lambda_r R]``.

    The default weight balances the Frobenius norms of both blocks.
    """
    if free.n_cols != fixed.n_cols:
        raise InvalidArgumentError("free and fixed blocks have different widths")
    if lambda_r is None:
        nf, nx = np.linalg.norm(free.A), np.linalg.norm(fixed.A)
        lambda_r = nf / nx if nx > 0 and nf > 0 else 1.0
    lambda_r = float(lambda_r)
    if lambda_r < 0:
        raise InvalidArgumentError("lambda_r must be nonnegative")
    return EquilibriumSystem(
        A=np.vstack([free.A, lambda_r * fixed.A]),
        b=np.concatenate([free.b, lambda_r * fixed.b]),
        row_kind=np.concatenate([free.row_kind, fixed.row_kind]),
        row_node=np.concatenate([free.row_node, fixed.row_node]),
        row_dir=np.concatenate([free.row_dir, fixed.row_dir]),
        row_boundary=np.concatenate([free.row_boundary, fixed.row_boundary]),
        n_f=free.n_f,
        n_c=free.n_c,
        lambda_r=lambda_r,
        boundary_names=fixed.boundary_names,
    )


def assemble_system(mesh, field, segmap, forces, library=DEFAULT_LIBRARY, lambda_r=None):
    """Free rows, fixed rows and weighting in one call."""
    H = nodal_feature_forces(mesh, field, segmap, library)
    free = assemble_free_rows(mesh, field, segmap, library, H=H)
    fixed = assemble_fixed_rows(mesh, field, segmap, forces, library, H=H)
    return combine(free, fixed, lambda_r)


def ols_solve(system, rcond=1e-12):
    """Unconstrained least-squares coefficients via SVD-based ``lstsq``.

    Columns are scaled to unit norm before the rank test so that features
    of very different magnitude are not mistaken for a rank deficiency.

    Raises
    ------
    SingularSystemError
        If the scaled system is rank deficient, or if all force rows carry
        zero weight so the coefficient scale is undetermined.
    """
    A, b = np.asarray(system.A, dtype=float), np.asarray(system.b, dtype=float)
    n_rows, n_cols = A.shape
    if n_rows < n_cols:
        raise SingularSystemError(n_rows, n_cols, f"{n_rows} rows cannot determine {n_cols} coefficients")
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms == 0):
        rank = int(np.count_nonzero(norms))
        raise SingularSystemError(rank, n_cols, f"{n_cols - rank} all-zero column(s); rank {rank} < {n_cols}")
    x, _, rank, sv = scipy.linalg.lstsq(A / norms, b, cond=rcond, lapack_driver="gelsd")
    if rank < n_cols:
        raise SingularSystemError(rank, n_cols)
    fixed = system.fixed_mask if hasattr(system, "fixed_mask") else None
    if fixed is not None and fixed.any() and not np.any(A[fixed]) and not np.any(b):
        raise SingularSystemError(0, n_cols, "force rows carry zero weight; coefficient scale is undetermined")
    return x / norms


def _take_count(n, frac):
    return max(1, int(np.floor(frac * n))) if n else 0


def node_segment_groups(mesh, element_segment, nodes):
    """For each node, the sorted tuple of segment ids of the elements around it."""
    ne = mesh.node_elements
    out = []
    for a in nodes:
        els = ne.indices[ne.indptr[a]:ne.indptr[a + 1]]
        out.append(tuple(sorted(set(int(s) for s in element_segment[els]))))
    return out


def subsample(system, segmentation, mesh, frac_free, frac_flag=0.20, rng_seed=0, f_res_het=None):
    """Keep a random fraction of free node triples plus the best flagged nodes.

    Free nodes that are not flagged are drawn uniformly without
    replacement.  Flagged nodes are grouped by the set of segments that
    meet at them and, within each group, those with the smallest
    heterogeneous residual norm are kept.  All boundary-force rows are
    kept.  Counts are ``max(1, floor(frac * n))``.

    Parameters
    ----------
    f_res_het : (n_n,) array, optional
        In-plane residual norm of the heterogeneous OLS fit; computed from
        ``system`` when omitted.
    """
    for name, frac in (("frac_free", frac_free), ("frac_flag", frac_flag)):
        if not 0 < frac <= 1:
            raise ConfigurationError(f"{name} must lie in (0, 1], got {frac}")
    free_rows = np.flatnonzero(system.free_mask)
    row_nodes = system.row_node[free_rows]
    nodes = np.unique(row_nodes)
    flagged = np.intersect1d(nodes, np.asarray(sorted(segmentation.flagged_nodes), dtype=np.int64))
    unflagged = np.setdiff1d(nodes, flagged)

    rng = np.random.default_rng(rng_seed)
    keep_free = np.sort(rng.choice(unflagged, size=_take_count(len(unflagged), frac_free), replace=False)) \
        if len(unflagged) else np.zeros(0, dtype=np.int64)

    keep_flag = []
    if len(flagged):
        if f_res_het is None:
            theta = ols_solve(system)
            r = system.A[free_rows] @ theta - system.b[free_rows]
            f_res_het = np.zeros(mesh.n_nodes)
            xy = system.row_dir[free_rows] < 2
            np.add.at(f_res_het, row_nodes[xy], r[xy] ** 2)
            f_res_het = np.sqrt(f_res_het)
        f_res_het = np.asarray(f_res_het, dtype=float)
        groups = {}
        for a, key in zip(flagged, node_segment_groups(mesh, segmentation.element_segment, flagged)):
            groups.setdefault(key, []).append(a)
        for key in sorted(groups):
            members = np.array(groups[key])
            order = np.lexsort((members, f_res_het[members]))
            keep_flag.extend(members[order[:_take_count(len(members), frac_flag)]])
    keep_nodes = np.union1d(keep_free, np.array(keep_flag, dtype=np.int64))
    if keep_nodes.size == 0:
        raise ConfigurationError("sub-sampling selected no free rows")
    rows = np.concatenate([free_rows[np.isin(row_nodes, keep_nodes)], np.flatnonzero(system.fixed_mask)])
    out = system.take(rows)
    for s in range(1, out.n_c + 1):
        if not np.any(out.A[:, out.column_block(s)]):
            raise ConfigurationError(
                f"segment {s} has no nonzero entries after sub-sampling; increase frac_free"
            )
    out.meta.update(kept_free_nodes=keep_free, kept_flagged_nodes=np.array(keep_flag, dtype=np.int64))
    return out
