"""Single-element-thick wedge meshes of thin plates.

A :class:`WedgeMesh` stores one layer of 6-node prisms.  Each element lists
its bottom triangle (counter-clockwise seen from +z) followed by the top
triangle directly above it.  Heterogeneity patterns are expressed as
:class:`SegmentMap` objects and nodal displacements as
:class:`DisplacementField` objects.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import FormatError, InterpolationError, InvalidArgumentError

__all__ = [
    "WedgeMesh",
    "SegmentMap",
    "DisplacementField",
    "generate_plate_mesh",
    "generate_pattern",
    "interpolate_to_mesh",
    "recover_transverse",
    "read_mesh",
    "write_mesh",
    "read_displacements",
    "write_displacements",
    "read_segment_map",
    "write_segment_map",
    "PATTERNS",
]

_GEOM_TOL = 1e-9


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class WedgeMesh:
    """Immutable one-layer wedge mesh.

    Parameters
    ----------
    nodes : (n_n, 3) array
        Reference coordinates in mm.
    elements : (n_el, 6) int array
        Bottom triangle then top triangle, counter-clockwise in plane.
    boundary_sets : dict
        Named node-index arrays, one per loaded edge.  Corner nodes appear
        in both adjacent sets.
    """

    nodes: np.ndarray
    elements: np.ndarray
    boundary_sets: dict = field(default_factory=dict)

    def __post_init__(self):
        nodes = _readonly(self.nodes, float)
        elements = _readonly(self.elements, np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 3:
            raise InvalidArgumentError("nodes must have shape (n, 3)")
        if elements.ndim != 2 or elements.shape[1] != 6:
            raise InvalidArgumentError("elements must have shape (n_el, 6)")
        bsets = {str(k): _readonly(np.sort(v), np.int64) for k, v in self.boundary_sets.items()}
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "boundary_sets", bsets)
        self._validate()

    def _validate(self):
        n_n = len(self.nodes)
        el = self.elements
        if el.size and (el.min() < 0 or el.max() >= n_n):
            raise InvalidArgumentError("element references a node index out of range")
        srt = np.sort(el, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            raise InvalidArgumentError("element references a node twice")
        bot = self.nodes[el[:, :3]]
        top = self.nodes[el[:, 3:]]
        if not np.allclose(bot[..., :2], top[..., :2], atol=_GEOM_TOL * max(1.0, self.extent)):
            raise InvalidArgumentError("top and bottom triangles are not vertically aligned")
        dz = top[..., 2] - bot[..., 2]
        if np.any(dz <= 0) or np.ptp(dz) > _GEOM_TOL * max(1.0, self.extent):
            raise InvalidArgumentError("wedges must have a uniform positive thickness")
        if np.any(self.triangle_areas <= 0):
            bad = int(np.argmin(self.triangle_areas))
            raise InvalidArgumentError(f"element {bad} has non-positive in-plane area")
        for name, ids in self.boundary_sets.items():
            if ids.size and (ids.min() < 0 or ids.max() >= n_n):
                raise InvalidArgumentError(f"boundary set {name!r} references an unknown node")

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_elements(self):
        return len(self.elements)

    @property
    def extent(self):
        return float(np.ptp(self.nodes[:, :2], axis=0).max()) if len(self.nodes) else 0.0

    @cached_property
    def thickness(self):
        el = self.elements
        return float(np.mean(self.nodes[el[:, 3:], 2] - self.nodes[el[:, :3], 2]))

    @cached_property
    def triangle_areas(self):
        p = self.nodes[self.elements[:, :3], :2]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def centroids(self):
        """In-plane centroids of the element triangles, shape (n_el, 2)."""
        return self.nodes[self.elements[:, :3], :2].mean(axis=1)

    @cached_property
    def incidence(self):
        """Sparse (n_el, n_n) element-node incidence matrix."""
        n_el = self.n_elements
        rows = np.repeat(np.arange(n_el), 6)
        data = np.ones(6 * n_el, dtype=np.int32)
        return sp.csr_matrix((data, (rows, self.elements.ravel())), shape=(n_el, self.n_nodes))

    @cached_property
    def neighbor_map(self):
        """Sparse symmetric element adjacency: elements sharing at least one node."""
        inc = self.incidence
        adj = (inc @ inc.T).tocsr()
        adj.setdiag(0)
        adj.eliminate_zeros()
        adj.data[:] = 1
        return adj

    def neighbors(self, element):
        adj = self.neighbor_map
        return adj.indices[adj.indptr[element]:adj.indptr[element + 1]]

    @cached_property
    def node_elements(self):
        """CSR (n_n, n_el) node-to-element incidence."""
        return self.incidence.T.tocsr()

    @cached_property
    def boundary_nodes(self):
        """Sorted union of all boundary sets."""
        if not self.boundary_sets:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(list(self.boundary_sets.values())))

    @cached_property
    def interior_nodes(self):
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    @cached_property
    def fingerprint(self):
        h = hashlib.sha1()
        h.update(np.ascontiguousarray(self.nodes).tobytes())
        h.update(np.ascontiguousarray(self.elements).tobytes())
        return h.hexdigest()[:16]

    @cached_property
    def face_of_node(self):
        """0 for bottom-face nodes, 1 for top-face nodes."""
        face = np.full(self.n_nodes, -1, dtype=np.int8)
        face[self.elements[:, :3].ravel()] = 0
        face[self.elements[:, 3:].ravel()] = 1
        return face

    @cached_property
    def edges(self):
        """Unique in-face edges as an (n_edges, 2) array (both faces)."""
        tri = np.concatenate([self.elements[:, :3], self.elements[:, 3:]])
        e = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class SegmentMap:
    """Element to segment assignment with contiguous ids ``1..n_c``."""

    element_segment: np.ndarray

    def __post_init__(self):
        seg = _readonly(self.element_segment, np.int64)
        if seg.ndim != 1:
            raise InvalidArgumentError("element_segment must be one-dimensional")
        if seg.size:
            ids = np.unique(seg)
            if ids[0] != 1 or not np.array_equal(ids, np.arange(1, len(ids) + 1)):
                raise InvalidArgumentError("segment ids must be contiguous from 1")
        object.__setattr__(self, "element_segment", seg)

    @property
    def n_c(self):
        return int(self.element_segment.max()) if self.element_segment.size else 0

    def elements_of(self, segment):
        return np.flatnonzero(self.element_segment == segment)

    @classmethod
    def from_labels(cls, labels):
        """Relabel arbitrary integer labels to ``1..n_c`` by order of first appearance."""
        labels = np.asarray(labels)
        _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
        order = np.argsort(np.argsort(first))
        return cls(order[inverse] + 1)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    values: np.ndarray
    mesh_id: str = ""

    def __post_init__(self):
        vals = _readonly(self.values, float)
        if vals.ndim != 2 or vals.shape[1] != 3:
            raise InvalidArgumentError("displacement values must have shape (n_n, 3)")
        if not np.all(np.isfinite(vals)):
            raise InvalidArgumentError("displacement values must be finite")
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, mesh):
        return cls(np.zeros((mesh.n_nodes, 3)), mesh.fingerprint)

    def check_mesh(self, mesh):
        if self.values.shape[0] != mesh.n_nodes:
            raise InvalidArgumentError(
                f"field has {self.values.shape[0]} nodes, mesh has {mesh.n_nodes}"
            )


def generate_plate_mesh(side_length, thickness, n_divisions):
    """Structured square plate of ``2 * n_divisions**2`` wedges.

    Cell diagonals alternate in a checkerboard so that no direction is
    preferred.  Bottom-face nodes come first, numbered row by row, followed
    by the top face in the same order.
    """
    if side_length <= 0 or thickness <= 0:
        raise InvalidArgumentError("side_length and thickness must be positive")
    n = int(n_divisions)
    if n != n_divisions or n < 2:
        raise InvalidArgumentError("n_divisions must be an integer >= 2")

    x = np.linspace(0.0, side_length, n + 1)
    xx, yy = np.meshgrid(x, x)
    n_face = (n + 1) ** 2
    bottom = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(n_face)])
    top = bottom.copy()
    top[:, 2] = thickness
    nodes = np.vstack([bottom, top])

    j, i = np.divmod(np.arange(n * n), n)
    a = j * (n + 1) + i
    b = a + 1
    c = a + n + 2
    d = a + n + 1
    even = (i + j) % 2 == 0
    t1 = np.where(even[:, None], np.column_stack([a, b, c]), np.column_stack([a, b, d]))
    t2 = np.where(even[:, None], np.column_stack([a, c, d]), np.column_stack([b, c, d]))
    tri = np.empty((2 * n * n, 3), dtype=np.int64)
    tri[0::2] = t1
    tri[1::2] = t2
    elements = np.hstack([tri, tri + n_face])

    face_idx = np.arange(n_face)
    fi, fj = face_idx % (n + 1), face_idx // (n + 1)

    def both(mask):
        ids = face_idx[mask]
        return np.concatenate([ids, ids + n_face])

    boundary_sets = {
        "x0": both(fi == 0),
        "x1": both(fi == n),
        "y0": both(fj == 0),
        "y1": both(fj == n),
    }
    return WedgeMesh(nodes, elements, boundary_sets)


# ---------------------------------------------------------------------------
# heterogeneity patterns

def _cross(c, L):
    # inclusion: arms of half-width 0.1 L reaching 0.3 L from the plate centre
    dx = np.abs(c[:, 0] - 0.5 * L)
    dy = np.abs(c[:, 1] - 0.5 * L)
    w, a = 0.1 * L, 0.3 * L
    inside = ((dx <= w) & (dy <= a)) | ((dy <= w) & (dx <= a))
    return np.where(inside, 2, 1)


def _split3(c, L):
    # three sectors around a junction at the middle of the y=0 edge; the 45 and
    # 135 degree rays follow cell diagonals when n_divisions is a multiple of 4
    ang = np.arctan2(c[:, 1], c[:, 0] - 0.5 * L)
    return np.where(ang > 0.75 * np.pi, 1, np.where(ang > 0.25 * np.pi, 2, 3))


def _multi_inclusion(c, L):
    x, y = c[:, 0] / L, c[:, 1] / L
    seg = np.ones(len(c), dtype=np.int64)
    # rotated ellipse
    phi = np.deg2rad(30.0)
    u = (x - 0.28) * np.cos(phi) + (y - 0.70) * np.sin(phi)
    v = -(x - 0.28) * np.sin(phi) + (y - 0.70) * np.cos(phi)
    seg[(u / 0.15) ** 2 + (v / 0.09) ** 2 <= 1.0] = 2
    # diamond
    seg[np.abs(x - 0.70) + np.abs(y - 0.70) <= 0.15] = 3
    # flat rectangle
    seg[(np.abs(x - 0.50) <= 0.20) & (np.abs(y - 0.25) <= 0.075)] = 4
    return seg


PATTERNS = {
    "cross": _cross,
    "split3": _split3,
    "multi_inclusion": _multi_inclusion,
    "homogeneous": lambda c, L: np.ones(len(c), dtype=np.int64),
}


def generate_pattern(mesh, pattern):
    """Classify elements by in-plane centroid against an analytic pattern.

    ``pattern`` is one of the names in :data:`PATTERNS` or ``"from_file:<path>"``
    / a :class:`pathlib.Path` pointing to an element-to-segment listing.
    """
    if isinstance(pattern, Path) or str(pattern).startswith("from_file:"):
        path = Path(str(pattern).split("from_file:", 1)[-1]) if not isinstance(pattern, Path) else pattern
        return read_segment_map(path, n_elements=mesh.n_elements)
    try:
        fn = PATTERNS[pattern]
    except KeyError:
        raise InvalidArgumentError(f"unknown pattern {pattern!r}; choose from {sorted(PATTERNS)}") from None
    lo = mesh.nodes[:, :2].min(axis=0)
    try:
        return SegmentMap(fn(mesh.centroids - lo, mesh.extent))
    except InvalidArgumentError:
        raise InvalidArgumentError(f"mesh is too coarse to resolve every region of {pattern!r}") from None


# ---------------------------------------------------------------------------
# non-native mesh interpolation

def _barycentric(p, tri):
    """Barycentric coordinates of points ``p`` (k,2) in triangles ``tri`` (k,3,2)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    v0, v1, v2 = b - a, c - a, p - a
    den = v0[:, 0] * v1[:, 1] - v1[:, 0] * v0[:, 1]
    l1 = (v2[:, 0] * v1[:, 1] - v1[:, 0] * v2[:, 1]) / den
    l2 = (v0[:, 0] * v2[:, 1] - v2[:, 0] * v0[:, 1]) / den
    return np.column_stack([1.0 - l1 - l2, l1, l2])


def _closest_on_segment(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return a + t * ab


def _closest_on_triangle(p, tri):
    cands = [_closest_on_segment(p, tri[i], tri[(i + 1) % 3]) for i in range(3)]
    d = [np.linalg.norm(p - q) for q in cands]
    k = int(np.argmin(d))
    return cands[k], d[k]


def interpolate_to_mesh(source, field, target, snap_tol=None, n_candidates=12):
    """Barycentric interpolation of a nodal field onto another wedge mesh.

    Target nodes are matched to the source face (bottom or top) at the same
    height, located in a source triangle of that face and interpolated with
    the linear triangle shape functions.  Nodes that fall outside the source
    by no more than ``snap_tol`` (default ``1e-6`` times the plate extent)
    are projected onto the nearest triangle.
    """
    field.check_mesh(source)
    if abs(source.thickness - target.thickness) > 1e-9 * max(1.0, source.thickness):
        raise InvalidArgumentError("source and target meshes must share the plate thickness")
    if source.n_nodes == target.n_nodes and np.array_equal(source.nodes, target.nodes):
        return DisplacementField(field.values.copy(), target.fingerprint)
    if snap_tol is None:
        snap_tol = 1e-6 * max(1.0, source.extent)

    out = np.empty((target.n_nodes, 3))
    done = np.zeros(target.n_nodes, dtype=bool)
    z_src = source.nodes[:, 2]
    for face in (0, 1):
        tri = source.elements[:, 3 * face:3 * face + 3]
        z_face = z_src[tri[0, 0]]
        tmask = np.abs(target.nodes[:, 2] - z_face) <= 1e-6 * max(1.0, source.thickness)
        tids = np.flatnonzero(tmask)
        if tids.size == 0:
            continue
        pts = target.nodes[tids, :2]
        tri_xy = source.nodes[tri, :2]
        tree = cKDTree(tri_xy.mean(axis=1))
        k = min(n_candidates, len(tri))
        _, cand = tree.query(pts, k=k)
        cand = np.atleast_2d(cand)
        if cand.shape[0] != len(pts):
            cand = cand.T
        found = np.full(len(pts), -1)
        bary = np.zeros((len(pts), 3))
        eps = 1e-12
        for col in range(cand.shape[1]):
            todo = np.flatnonzero(found < 0)
            if todo.size == 0:
                break
            ti = cand[todo, col]
            lam = _barycentric(pts[todo], tri_xy[ti])
            ok = np.all(lam >= -eps, axis=1)
            found[todo[ok]] = ti[ok]
            bary[todo[ok]] = lam[ok]
        for q in np.flatnonzero(found < 0):
            best = (np.inf, None, None)
            for ti in cand[q]:
                cp, d = _closest_on_triangle(pts[q], tri_xy[ti])
                if d < best[0]:
                    best = (d, ti, cp)
            d, ti, cp = best
            if d > snap_tol:
                raise InterpolationError(tids[q], d)
            found[q] = ti
            bary[q] = _barycentric(cp[None, :], tri_xy[ti][None])[0]
        # snap to exact vertices so coincident nodes reproduce values bit-for-bit
        near_vertex = bary.max(axis=1) > 1.0 - 1e-12
        if np.any(near_vertex):
            onehot = np.zeros_like(bary[near_vertex])
            onehot[np.arange(onehot.shape[0]), bary[near_vertex].argmax(axis=1)] = 1.0
            bary[near_vertex] = onehot
        vals = field.values[tri[found]]
        out[tids] = np.einsum("nk,nki->ni", bary, vals)
        done[tids] = True
    if not done.all():
        raise InterpolationError(np.flatnonzero(~done)[0], np.inf)
    return DisplacementField(out, target.fingerprint)


def recover_transverse(mesh, field):
    """Replace nodal z displacements by patch averages of element face means.

    With one centroid point per wedge, a z displacement pattern that
    alternates over the colour classes of the triangulation barely changes
    any element mean, so a forward solution may carry large node-to-node
    oscillations in z that hold no stress information.  A non-matching mesh
    samples those oscillations at other points and turns them into spurious
    thickness strain.  Averaging, on each face, the element means of z over
    the elements around every node (area weighted) removes the pattern while
    keeping the element-level thickness field.  In-plane components are
    returned unchanged.
    """
    field.check_mesh(mesh)
    u = field.values.copy()
    area = mesh.triangle_areas
    for face in (0, 1):
        loc = mesh.elements[:, 3 * face:3 * face + 3]
        emean = field.values[loc, 2].mean(axis=1)
        num = np.zeros(mesh.n_nodes)
        den = np.zeros(mesh.n_nodes)
        np.add.at(num, loc.ravel(), np.repeat(area * emean, 3))
        np.add.at(den, loc.ravel(), np.repeat(area, 3))
        ids = np.unique(loc)
        u[ids, 2] = num[ids] / den[ids]
    return DisplacementField(u, field.mesh_id)


# ---------------------------------------------------------------------------
# plain-text file formats

def _fmt(x):
    return repr(float(x))


def write_mesh(mesh, path):
    lines = [f"nodes {mesh.n_nodes} elements {mesh.n_elements} boundaries {len(mesh.boundary_sets)}"]
    lines += [" ".join(_fmt(v) for v in row) for row in mesh.nodes]
    lines += [" ".join(str(int(v)) for v in row) for row in mesh.elements]
    for name, ids in mesh.boundary_sets.items():
        lines.append(" ".join([name, str(len(ids))] + [str(int(i)) for i in ids]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_mesh(path):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"mesh file {path} not found")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    try:
        head = lines[0].split()
        if head[0::2] != ["nodes", "elements", "boundaries"]:
            raise ValueError("bad header")
        n_n, n_el, n_b = (int(v) for v in head[1::2])
        body = lines[1:]
        if len(body) != n_n + n_el + n_b:
            raise ValueError(f"expected {n_n + n_el + n_b} body lines, found {len(body)}")
        nodes = np.array([[float(v) for v in ln.split()] for ln in body[:n_n]]).reshape(n_n, 3)
        elements = np.array([[int(v) for v in ln.split()] for ln in body[n_n:n_n + n_el]]).reshape(n_el, 6)
        bsets = {}
        for ln in body[n_n + n_el:]:
            parts = ln.split()
            k = int(parts[1])
            ids = [int(v) for v in parts[2:]]
            if len(ids) != k:
                raise ValueError(f"boundary {parts[0]} declares {k} nodes, lists {len(ids)}")
            bsets[parts[0]] = np.array(ids, dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return WedgeMesh(nodes, elements, bsets)


def write_displacements(field, path):
    Path(path).write_text(
        "".join(" ".join(_fmt(v) for v in row) + "\n" for row in field.values), encoding="utf-8"
    )


def read_displacements(path, mesh=None):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"displacement file {path} not found")
    try:
        vals = np.loadtxt(path, dtype=float, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if vals.shape[1] != 3 or (mesh is not None and vals.shape[0] != mesh.n_nodes):
        raise FormatError(f"{path}: expected one 'ux uy uz' row per node")
    return DisplacementField(vals, mesh.fingerprint if mesh is not None else "")


def write_segment_map(segmap, path):
    Path(path).write_text("".join(f"{int(s)}\n" for s in segmap.element_segment), encoding="utf-8")


def read_segment_map(path, n_elements=None):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"segment map file {path} not found")
    try:
        seg = np.loadtxt(path, dtype=np.int64, ndmin=1)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if seg.ndim != 1:
        raise FormatError(f"{path}: expected one integer per line")
    if n_elements is not None and len(seg) != n_elements:
        raise FormatError(f"{path}: {len(seg)} rows for a mesh of {n_elements} elements")
    try:
        return SegmentMap(seg)
    except InvalidArgumentError as exc:
        raise FormatError(f"{path}: {exc}") from exc
