"""Synthetic full-field data: forward hyperelastic solve, noise, KRR denoising.

The forward problem uses exactly the discretization of :mod:`plateid.assembly`
(one centroid point per wedge) so that, without noise, the inverse system is
satisfied by the true coefficients up to the Newton tolerance.
"""

from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial.distance import cdist

from .assembly import BoundaryForces, deformation_gradients, element_gradients
from .constitutive import DEFAULT_LIBRARY, plane_stress_thickness_stretch
from .errors import (
    ElementInversionError,
    InvalidArgumentError,
    NonConvergenceError,
    NonPhysicalDeformationError,
    RootBracketError,
)
from .mesh import DisplacementField

__all__ = [
    "LoadProgram",
    "NoiseSpec",
    "ForwardResult",
    "forward_solve",
    "internal_forces",
    "add_noise",
    "estimate_noise_std",
    "denoise_krr",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LoadProgram:
    lambda_x: float = 1.6
    lambda_y: float = 2.2
    n_steps: int = 6

    def __post_init__(self):
        if self.lambda_x <= 0 or self.lambda_y <= 0:
            raise InvalidArgumentError("final stretches must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InvalidArgumentError("n_steps must be a positive integer")

    def stretches(self, s):
        return 1.0 + s * (self.lambda_x - 1.0), 1.0 + s * (self.lambda_y - 1.0)


@dataclass(frozen=True)
class NoiseSpec:
    sigma_u: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_u >= 0:
            raise InvalidArgumentError("sigma_u must be nonnegative")


@dataclass
class ForwardResult:
    field: DisplacementField
    forces: BoundaryForces
    step_energies: list = field(default_factory=list)
    step_loads: list = field(default_factory=list)
    newton_iterations: list = field(default_factory=list)
    residual_norm: float = 0.0
    tolerance: float = 0.0


def _element_params(segmap, params, n_f):
    if isinstance(params, dict):
        table = np.zeros((segmap.n_c, n_f))
        for s in range(1, segmap.n_c + 1):
            if s not in params:
                raise InvalidArgumentError(f"no material parameters for segment {s}")
            table[s - 1] = params[s]
    else:
        table = np.asarray(params, dtype=float).reshape(segmap.n_c, n_f)
    if np.any(table < 0):
        raise InvalidArgumentError("material parameters must be nonnegative")
    return table, table[segmap.element_segment - 1]


def _piola(F, theta_e, library):
    return np.einsum("ekij,ek->eij", library.derivatives(F), theta_e)


def internal_forces(mesh, u, theta_e, library=DEFAULT_LIBRARY, G=None, vol=None):
    """Nodal internal force ``(n_n, 3)`` for per-element coefficients ``theta_e``."""
    if G is None:
        G, vol = element_gradients(mesh)
    F = deformation_gradients(mesh, u, G)
    P = _piola(F, theta_e, library)
    fe = vol[:, None, None] * np.einsum("eij,eaj->eai", P, G)
    f = np.zeros((mesh.n_nodes, 3))
    np.add.at(f, mesh.elements, fe)
    return f


def _tangent(mesh, u, theta_e, library, G, vol, h=1e-6):
    """Global stiffness from central differences of P with respect to F."""
    F = deformation_gradients(mesh, u, G)
    n_el = len(F)
    dP = np.empty((n_el, 3, 3, 3, 3))
    for k in range(3):
        for L in range(3):
            Fp = F.copy()
            Fm = F.copy()
            Fp[:, k, L] += h
            Fm[:, k, L] -= h
            dP[:, :, :, k, L] = (_piola(Fp, theta_e, library) - _piola(Fm, theta_e, library)) / (2 * h)
    # Ke[(a,i),(b,k)] = V sum_JL dP[iJkL] G[aJ] G[bL]
    Ke = vol[:, None, None, None, None] * np.einsum("eiJkL,eaJ,ebL->eaibk", dP, G, G, optimize=True)
    Ke = Ke.reshape(n_el, 18, 18)
    Ke = 0.5 * (Ke + Ke.transpose(0, 2, 1))
    dofs = (3 * mesh.elements[:, :, None] + np.arange(3)).reshape(n_el, 18)
    rows = np.repeat(dofs, 18, axis=1).ravel()
    cols = np.tile(dofs, (1, 18)).ravel()
    n = 3 * mesh.n_nodes
    return sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))


def _total_energy(mesh, u, theta_e, library, G, vol):
    F = deformation_gradients(mesh, u, G)
    return float(np.sum(vol * np.einsum("ek,ek->e", library.values(F), theta_e)))


def _mirror_map(mesh):
    """Mirror-symmetric parametrization of the nodal displacements.

    A flat plate of through-thickness uniform material under in-plane
    loading deforms symmetrically about its midplane: both faces share the
    in-plane displacement and move by opposite amounts in z.  The reduced
    unknowns are ``q = (u_x, u_y, w)`` per bottom node with
    ``u_bottom = (u_x, u_y, -w)`` and ``u_top = (u_x, u_y, w)``.  Imposing
    the symmetry removes the near zero-energy bending modes that a single
    layer of one-point wedges cannot resist.

    Returns ``(bottom, top, T)`` with ``u.ravel() = T @ q.ravel()``.
    """
    tri = mesh.elements[:, :3]
    pair = np.full(mesh.n_nodes, -1, dtype=np.int64)
    pair[tri.ravel()] = mesh.elements[:, 3:].ravel()
    bottom = np.unique(tri)
    top = pair[bottom]
    nb = len(bottom)
    rows, cols, vals = [], [], []
    for nodes, zsign in ((bottom, -1.0), (top, 1.0)):
        for i, sgn in ((0, 1.0), (1, 1.0), (2, zsign)):
            rows.append(3 * nodes + i)
            cols.append(3 * np.arange(nb) + i)
            vals.append(np.full(nb, sgn))
    T = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(3 * mesh.n_nodes, 3 * nb))
    return bottom, top, T


def _colour_classes(tri, n_nodes):
    """Proper 3-colouring of a triangulation by propagation, or ``None``."""
    colour = -np.ones(n_nodes, dtype=np.int64)
    node_tris = [[] for _ in range(n_nodes)]
    for e, t in enumerate(tri):
        for a in t:
            node_tris[a].append(e)
    colour[tri[0]] = (0, 1, 2)
    seen = np.zeros(len(tri), dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        e = queue.popleft()
        for a in tri[e]:
            for f in node_tris[a]:
                if seen[f]:
                    continue
                c = colour[tri[f]]
                known = c[c >= 0]
                if len(known) < 2:
                    continue
                if len(known) == 2:
                    c[c < 0] = 3 - known.sum()
                    colour[tri[f]] = c
                if sorted(colour[tri[f]]) != [0, 1, 2]:
                    return None
                seen[f] = True
                queue.append(f)
    return colour if seen.all() else None


def _hourglass_projector(mesh, bottom):
    """Removes the thickness modes that leave every centroid ``F`` unchanged.

    With one centroid point per wedge, a half thickness change ``w`` that is
    constant on each class of a proper 3-colouring of the triangulation and
    sums to zero over every triangle is invisible to the element kinematics.
    The returned function moves the three class means of ``w`` to their
    common mean; forces and energy are unaffected.
    """
    local = -np.ones(mesh.n_nodes, dtype=np.int64)
    local[bottom] = np.arange(len(bottom))
    colour = _colour_classes(local[mesh.elements[:, :3]], len(bottom))
    if colour is None:
        return lambda q: q

    def project(q):
        m = np.array([q[colour == k, 2].mean() for k in range(3)])
        q = q.copy()
        q[:, 2] -= (m - m.mean())[colour]
        return q

    return project


def forward_solve(
    mesh,
    segmap,
    params,
    load=LoadProgram(),
    library=DEFAULT_LIBRARY,
    tol_factor=1e-9,
    max_iter=40,
    max_bisections=6,
    reg=1e-10,
):
    """Quasi-static displacement-controlled Newton solve.

    Edge nodes follow ``x = diag(lx(s), ly(s)) X`` in plane, ``s`` running
    over ``n_steps`` equal increments.  The solution is sought among
    displacements symmetric about the midplane (see :func:`_mirror_map`),
    which also fixes the rigid z translation.

    Returns
    -------
    ForwardResult
        Final displacement field, reaction force per boundary set and
        per-step diagnostics.
    """
    table, theta_e = _element_params(segmap, params, library.n_f)
    G, vol = element_gradients(mesh)
    theta6 = table[:, -1]
    if np.any(theta6 <= 0):
        raise InvalidArgumentError("volumetric coefficient must be positive in every segment")
    tol = tol_factor * float(np.mean(theta6)) * float(np.mean(vol))

    bottom, top, T = _mirror_map(mesh)
    Tt = T.T.tocsr()
    project = _hourglass_projector(mesh, bottom)
    on_edge = np.isin(bottom, mesh.boundary_nodes)
    fixed = np.zeros((len(bottom), 3), dtype=bool)
    fixed[on_edge, :2] = True
    free = ~fixed.ravel()
    Xb = mesh.nodes[bottom]
    half_t = 0.5 * (mesh.nodes[top, 2] - Xb[:, 2])

    def expand(q):
        return (T @ q.ravel()).reshape(-1, 3)

    def reduced_residual(q):
        return Tt @ internal_forces(mesh, expand(q), theta_e, library, G, vol).ravel()

    # homogeneous plane-stress state of the volume-averaged material as a predictor
    theta_avg = np.average(theta_e, axis=0, weights=vol)

    def affine_guess(s):
        lxs, lys = load.stretches(s)
        try:
            lzs = plane_stress_thickness_stretch(lxs, lys, theta_avg, library)
        except RootBracketError:
            lzs = 1.0 / np.sqrt(lxs * lys)
        return np.column_stack([(lxs - 1.0) * Xb[:, 0], (lys - 1.0) * Xb[:, 1], (lzs - 1.0) * half_t])

    def newton(q0, s):
        q = q0.copy()
        lxs, lys = load.stretches(s)
        q[on_edge, 0] = (lxs - 1.0) * Xb[on_edge, 0]
        q[on_edge, 1] = (lys - 1.0) * Xb[on_edge, 1]
        r = reduced_residual(q)
        rn = np.max(np.abs(r[free]))
        for it in range(max_iter):
            if rn < tol:
                return q, it, rn
            K = (Tt @ _tangent(mesh, expand(q), theta_e, library, G, vol) @ T)[free][:, free]
            d = K.diagonal()
            K = K + sp.diags(np.full(K.shape[0], reg * float(np.mean(np.abs(d)))))
            dq = spla.spsolve(K.tocsc(), -r[free])
            if not np.all(np.isfinite(dq)):
                raise NonConvergenceError("linear solve produced non-finite increments")
            merit0 = np.dot(r[free], r[free])
            step = 1.0
            for _ in range(30):
                trial = q.ravel().copy()
                trial[free] += step * dq
                trial = trial.reshape(-1, 3)
                try:
                    rt = reduced_residual(trial)
                except NonPhysicalDeformationError:
                    step *= 0.5
                    continue
                if np.dot(rt[free], rt[free]) < merit0 or step < 1e-3:
                    break
                step *= 0.5
            else:
                raise NonConvergenceError("line search failed to find an admissible step")
            q, r = project(trial), rt
            rn = np.max(np.abs(r[free]))
        if rn < tol:
            return q, max_iter, rn
        raise NonConvergenceError(f"Newton stalled at |r|_inf = {rn:.3e} (tol {tol:.3e}) at load {s:.4f}")

    q_hist = [np.zeros((len(bottom), 3))]
    s_hist = [0.0]
    energies, loads, iters = [], [], []
    targets = list(np.linspace(0.0, 1.0, load.n_steps + 1)[1:])
    depth = 0
    while targets:
        s = targets[0]
        if len(q_hist) >= 2:
            w = (s - s_hist[-1]) / (s_hist[-1] - s_hist[-2])
            q0 = q_hist[-1] + w * (q_hist[-1] - q_hist[-2])
        else:
            q0 = affine_guess(s)
        try:
            deformation_gradients(mesh, expand(q0), G)
        except ElementInversionError:
            q0 = q_hist[-1].copy()
        try:
            q, it, rn = newton(q0, s)
        except (NonConvergenceError, NonPhysicalDeformationError, ElementInversionError) as exc:
            if depth >= max_bisections:
                raise NonConvergenceError(f"load step to s={s:.4f} failed after bisection: {exc}") from exc
            depth += 1
            targets.insert(0, 0.5 * (s_hist[-1] + s))
            log.info("bisecting load step to %.5f", targets[0])
            continue
        depth = max(depth - 1, 0)
        targets.pop(0)
        q_hist.append(q)
        s_hist.append(s)
        energies.append(_total_energy(mesh, expand(q), theta_e, library, G, vol))
        loads.append(s)
        iters.append(it)
        q_hist = q_hist[-2:]
        s_hist = s_hist[-2:]

    u = expand(q_hist[-1])
    f = internal_forces(mesh, u, theta_e, library, G, vol)
    R = np.array([f[ids].sum(axis=0) for ids in mesh.boundary_sets.values()])
    forces = BoundaryForces(tuple(mesh.boundary_sets), R)
    interior = np.ones(mesh.n_nodes, dtype=bool)
    interior[mesh.boundary_nodes] = False
    free_full = np.column_stack([interior, interior, np.ones(mesh.n_nodes, dtype=bool)])
    res = float(np.max(np.abs(f[free_full]))) if free_full.any() else 0.0
    return ForwardResult(
        field=DisplacementField(u, mesh.fingerprint),
        forces=forces,
        step_energies=energies,
        step_loads=loads,
        newton_iterations=iters,
        residual_norm=res,
        tolerance=tol,
    )


def add_noise(field, noise):
    """Add iid Gaussian noise of standard deviation ``noise.sigma_u`` to every dof."""
    if noise.sigma_u == 0:
        return DisplacementField(field.values.copy(), field.mesh_id)
    rng = np.random.default_rng(noise.seed)
    return DisplacementField(field.values + rng.normal(0.0, noise.sigma_u, field.values.shape), field.mesh_id)


# ---------------------------------------------------------------------------
# kernel ridge regression denoising

def _affine_basis(xy):
    return np.column_stack([np.ones(len(xy)), xy])


def estimate_noise_std(mesh, values):
    """Robust per-component noise level from through-thickness node pairs.

    A plate loaded in its own plane deforms as a membrane: both faces carry
    the same in-plane displacement and opposite z displacements.  For each
    bottom/top node pair, ``u_top - u_bottom`` (in-plane) and
    ``u_top + u_bottom`` (z) therefore hold only noise, with variance
    ``2 sigma^2`` for iid noise.  The median absolute deviation of these
    combinations is insensitive to the interface kinks and thickness
    oscillations that contaminate spatial-difference estimates.  Bending
    would leak into the estimate, so a calibrated noise level should be
    preferred when one is available.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.n_nodes, 3):
        raise InvalidArgumentError("values must have shape (n_nodes, 3)")
    pair = np.full(mesh.n_nodes, -1, dtype=np.int64)
    pair[mesh.elements[:, :3].ravel()] = mesh.elements[:, 3:].ravel()
    bottom = np.flatnonzero(pair >= 0)
    top = pair[bottom]
    comb = values[top] - values[bottom] * np.array([1.0, 1.0, -1.0])
    mad = np.median(np.abs(comb - np.median(comb, axis=0)), axis=0)
    return 1.4826 * mad / np.sqrt(2.0)


def denoise_krr(
    field_noisy,
    mesh,
    bandwidth_grid=None,
    ridge_grid=None,
    n_random_trials=40,
    seed=0,
    noise_std=None,
    return_choice=False,
):
    """Smooth each displacement component with RBF kernel ridge regression.

    The two faces of the plate are treated separately and an affine trend is
    removed before fitting.  A random subset of the (bandwidth, ridge) grid
    is scored by Stein's unbiased estimate of the mean squared error,

        SURE = |(I - S) y|^2 / n - sigma^2 + 2 sigma^2 tr(S) / n,
        S = K (K + alpha I)^-1,

    and the best pair is kept unless the raw data, whose risk is
    ``sigma^2``, score lower; that component is then returned unchanged.

    Parameters
    ----------
    noise_std : float or array of 3, optional
        Displacement noise level per component.  Estimated with
        :func:`estimate_noise_std` when omitted.

    Returns
    -------
    DisplacementField, or ``(DisplacementField, choice)`` with ``choice``
    mapping ``(face, component)`` to the selected ``(bandwidth, ridge)`` or
    ``None`` for an unchanged component.
    """
    field_noisy.check_mesh(mesh)
    if mesh.n_nodes < 10:
        raise InvalidArgumentError("denoising needs at least 10 nodes")
    L = mesh.extent
    if bandwidth_grid is None:
        bandwidth_grid = L * np.array([0.01, 0.015, 0.02, 0.03, 0.05, 0.08, 0.12, 0.2])
    if ridge_grid is None:
        ridge_grid = np.logspace(-4, 1, 6)
    pairs = [(float(h), float(a)) for h in bandwidth_grid for a in ridge_grid]
    if min(p[0] for p in pairs) <= 0 or min(p[1] for p in pairs) <= 0:
        raise InvalidArgumentError("bandwidths and ridges must be positive")
    rng = np.random.default_rng(seed)
    if n_random_trials < len(pairs):
        pick = np.sort(rng.choice(len(pairs), size=n_random_trials, replace=False))
        pairs = [pairs[i] for i in pick]
    by_h = {}
    for h, a in pairs:
        by_h.setdefault(h, []).append(a)

    if noise_std is None:
        noise_std = estimate_noise_std(mesh, field_noisy.values)
    sig2 = np.broadcast_to(np.asarray(noise_std, dtype=float), (3,)) ** 2
    if np.any(sig2 < 0) or not np.all(np.isfinite(sig2)):
        raise InvalidArgumentError("noise_std must be finite and nonnegative")

    out = field_noisy.values.copy()
    chosen = {}
    for face in (0, 1):
        ids = np.flatnonzero(mesh.face_of_node == face)
        xy = mesh.nodes[ids, :2]
        B = _affine_basis(xy)
        Y = field_noisy.values[ids]
        coef, *_ = np.linalg.lstsq(B, Y, rcond=None)
        trend = B @ coef
        R = Y - trend
        n = len(ids)
        # raw data: S = I on the detrended part
        best = [(float(sig2[c]), None, None) for c in range(3)]
        d2 = cdist(xy, xy, "sqeuclidean")
        for h in sorted(by_h):
            lam, V = np.linalg.eigh(np.exp(-d2 / (2.0 * h * h)))
            lam = np.clip(lam, 0.0, None)
            floor = 1e-12 * lam.max()
            proj = V.T @ R
            for a in by_h[h]:
                if a < floor:
                    warnings.warn("ridge below numerical floor; raising it", RuntimeWarning, stacklevel=2)
                    a = floor
                keep = lam / (lam + a)
                resid2 = np.sum(((1.0 - keep)[:, None] * proj) ** 2, axis=0) / n
                risk = resid2 - sig2 + 2.0 * sig2 * (np.sum(keep) + B.shape[1]) / n
                for c in range(3):
                    if risk[c] < best[c][0]:
                        best[c] = (float(risk[c]), (h, a), (V, keep))
        for c in range(3):
            _, pair, basis = best[c]
            chosen[(face, c)] = pair
            if pair is not None:
                V, keep = basis
                out[ids, c] = trend[:, c] + V @ (keep * (V.T @ R[:, c]))
    result = DisplacementField(out, field_noisy.mesh_id)
    return (result, chosen) if return_choice else result
