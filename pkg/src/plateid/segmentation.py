"""Residual-force segmentation of a plate into material regions.

A single two-term neo-Hookean model is fitted to the whole plate.  Where the
plate is actually heterogeneous the fitted model cannot balance the interior
nodes, and the out-of-balance force concentrates along material interfaces.
Nodes whose in-plane residual exceeds a multiple of its standard deviation
are flagged, and regions are grown from random seeds, stopping at flagged
nodes.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .assembly import assemble_system, ols_solve
from .constitutive import DEFAULT_LIBRARY
from .errors import FormatError, InvalidArgumentError, SegmentationError, UndefinedRatioError
from .mesh import SegmentMap

__all__ = [
    "NH2_FEATURES",
    "ResidualField",
    "SegmentationResult",
    "residual_forces",
    "flag_nodes",
    "grow_segments",
    "noise_diagnostics",
    "misassignment_fraction",
    "write_segmentation",
    "read_segmentation",
    "write_flagged",
    "read_flagged",
    "write_diagnostics",
]

# (I1t-3) and (J-1)^2 in the default library
NH2_FEATURES = (0, 5)


@dataclass(frozen=True, eq=False)
class ResidualField:
    """Out-of-balance nodal forces of the homogenized fit at the free nodes."""

    nodes: np.ndarray
    forces: np.ndarray
    theta: np.ndarray

    @property
    def f_res(self):
        return np.hypot(self.forces[:, 0], self.forces[:, 1])

    @property
    def mu(self):
        return float(np.mean(self.f_res))

    @property
    def sigma(self):
        return float(np.std(self.f_res))

    def full(self, n_nodes):
        """``f_res`` scattered to all nodes (zero at boundary nodes)."""
        out = np.zeros(n_nodes)
        out[self.nodes] = self.f_res
        return out


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    flagged_nodes: np.ndarray
    segments: list
    unassigned: np.ndarray
    element_segment: np.ndarray
    lambda_threshold: float = float("nan")

    @property
    def n_segments(self):
        return len(self.segments)

    def to_segment_map(self):
        return SegmentMap(self.element_segment)


def residual_forces(mesh, field, forces, lambda_r=None, library=DEFAULT_LIBRARY, features=NH2_FEATURES):
    """Residual nodal forces of a one-segment model built from ``features``."""
    lib0 = library.subset(features)
    one = SegmentMap(np.ones(mesh.n_elements, dtype=np.int64))
    system = assemble_system(mesh, field, one, forces, lib0, lambda_r)
    if not np.any(system.A) and not np.any(system.b):
        # undeformed and unloaded: every coefficient balances, residual is zero
        theta = np.zeros(system.n_cols)
    else:
        theta = ols_solve(system)
    free = system.free_mask
    r = system.A[free] @ theta - system.b[free]
    nodes = system.row_node[free].reshape(-1, 3)[:, 0]
    return ResidualField(nodes=nodes, forces=r.reshape(-1, 3), theta=theta)


def flag_nodes(res, lam):
    """Free nodes with ``f_res > lam * sigma``, sorted."""
    if not lam > 0:
        raise InvalidArgumentError("lambda must be positive")
    return np.sort(res.nodes[res.f_res > lam * res.sigma])


def grow_segments(mesh, flagged, rng_seed=0, min_segment_size=1):
    """Seeded island growth over the node-sharing element graph.

    Seeds are drawn among unassigned elements that touch no flagged node.
    Growth proceeds breadth first; elements that touch a flagged node join
    the current segment but do not propagate it; elements whose nodes are
    all flagged are never absorbed.  Elements never reached are
    attached afterwards to the adjacent segment with which they share most
    unflagged nodes (then most neighbor elements, then lowest id).

    Segments smaller than ``min_segment_size`` elements are dissolved into
    their neighbors in the same way.
    """
    flagged = np.unique(np.asarray(list(flagged), dtype=np.int64))
    is_flag = np.zeros(mesh.n_nodes, dtype=bool)
    is_flag[flagged] = True
    touch_flag = is_flag[mesh.elements].any(axis=1)
    all_flag = is_flag[mesh.elements].all(axis=1)
    if np.all(touch_flag):
        raise SegmentationError("every element touches a flagged node; raise the flagging threshold lambda")

    adj = mesh.neighbor_map
    label = np.zeros(mesh.n_elements, dtype=np.int64)
    rng = np.random.default_rng(rng_seed)
    segments = []
    while True:
        candidates = np.flatnonzero((label == 0) & ~touch_flag)
        if candidates.size == 0:
            break
        seed = int(rng.choice(candidates))
        sid = len(segments) + 1
        label[seed] = sid
        members = [seed]
        queue = deque([seed])
        while queue:
            e = queue.popleft()
            for nb in adj.indices[adj.indptr[e]:adj.indptr[e + 1]]:
                if label[nb] == 0 and not all_flag[nb]:
                    label[nb] = sid
                    members.append(nb)
                    if not touch_flag[nb]:
                        queue.append(nb)
        segments.append(np.sort(np.array(members)))
    unassigned = np.flatnonzero(label == 0)

    final = label.copy()
    if min_segment_size > 1:
        sizes = np.bincount(final, minlength=len(segments) + 1)
        small = [s for s in range(1, len(segments) + 1) if sizes[s] < min_segment_size]
        if len(small) < len(segments):
            final[np.isin(final, small)] = 0
    _attach_orphans(mesh, final, is_flag)
    # relabel by first element so ids do not depend on the seed order
    _, first = np.unique(final, return_index=True)
    order = np.argsort(first)
    remap = np.zeros(final.max() + 1, dtype=np.int64)
    remap[np.unique(final)[order]] = np.arange(1, len(order) + 1)
    return SegmentationResult(
        flagged_nodes=flagged,
        segments=segments,
        unassigned=unassigned,
        element_segment=remap[final],
    )


def _attach_orphans(mesh, label, is_flag):
    """Best-first attachment: each pass settles only the most strongly tied orphans."""
    adj = mesh.neighbor_map
    els = mesh.elements
    while True:
        orphans = np.flatnonzero(label == 0)
        if orphans.size == 0:
            return
        best = {}
        for e in orphans:
            nbs = adj.indices[adj.indptr[e]:adj.indptr[e + 1]]
            nbs = nbs[label[nbs] > 0]
            if nbs.size == 0:
                continue
            own = set(els[e][~is_flag[els[e]]])
            score = {}
            for nb in nbs:
                shared = len(own.intersection(els[nb]))
                sc = score.setdefault(int(label[nb]), [0, 0])
                sc[0] = max(sc[0], shared)
                sc[1] += 1
            # most shared unflagged nodes, then most neighbors, then lowest id
            seg = min(score, key=lambda k: (-score[k][0], -score[k][1], k))
            best[e] = (score[seg][0], score[seg][1], seg)
        if not best:
            raise SegmentationError("isolated elements cannot be attached to any segment")
        top = max(v[:2] for v in best.values())
        for e, (sh, cnt, seg) in best.items():
            if (sh, cnt) == top:
                label[e] = seg


def noise_diagnostics(res, forces, tol_ratio=1e-5):
    """``(mu/sigma, sigma/R_max, nominally_homogeneous)`` of the residual field."""
    r_max = forces.max_abs if hasattr(forces, "max_abs") else float(np.max(np.abs(forces)))
    if r_max == 0:
        raise UndefinedRatioError("all boundary forces are zero; sigma/R_max is undefined")
    mu, sigma = res.mu, res.sigma
    if sigma == 0:
        return 0.0, 0.0, mu == 0
    r1, r2 = mu / sigma, sigma / r_max
    return r1, r2, bool(r2 <= tol_ratio and r1 >= 1.0)


def misassignment_fraction(true_labels, pred_labels):
    """Fraction of elements outside the best one-to-one matching of segment ids."""
    t = np.asarray(true_labels)
    p = np.asarray(pred_labels)
    if t.shape != p.shape:
        raise InvalidArgumentError("label arrays differ in length")
    tu, ti = np.unique(t, return_inverse=True)
    pu, pi = np.unique(p, return_inverse=True)
    conf = np.zeros((len(tu), len(pu)), dtype=np.int64)
    np.add.at(conf, (ti, pi), 1)
    r, c = linear_sum_assignment(-conf)
    return 1.0 - conf[r, c].sum() / len(t)


def write_segmentation(result, path):
    Path(path).write_text(
        "".join(f"{e} {int(s)}\n" for e, s in enumerate(result.element_segment)), encoding="utf-8"
    )


def read_segmentation(path, n_elements=None):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"segmentation file {path} not found")
    try:
        data = np.loadtxt(path, dtype=np.int64, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if data.shape[1] != 2 or not np.array_equal(data[:, 0], np.arange(len(data))):
        raise FormatError(f"{path}: expected 'element_id segment_id' rows in element order")
    if n_elements is not None and len(data) != n_elements:
        raise FormatError(f"{path}: {len(data)} rows for {n_elements} elements")
    return SegmentMap(data[:, 1])


def write_flagged(nodes, path):
    Path(path).write_text("".join(f"{int(a)}\n" for a in nodes), encoding="utf-8")


def read_flagged(path):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"flagged-node file {path} not found")
    text = path.read_text(encoding="utf-8").split()
    try:
        return np.array([int(v) for v in text], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_diagnostics(diag, path):
    Path(path).write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n", encoding="utf-8")
