"""Energy-path checks of identified models and OLS versus Bayes reports.

Six homogeneous in-plane deformation paths are embedded in 3D with
``F33 = 1`` and the strain energy of the true and identified models is
compared along each of them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .assembly import ols_solve
from .constitutive import DEFAULT_LIBRARY
from .errors import InvalidArgumentError, NonPhysicalDeformationError, UndefinedRatioError

__all__ = [
    "PATH_KINDS",
    "DeformationPath",
    "EnergyBand",
    "energy_along_path",
    "r_squared",
    "compare_ols_bayes",
    "write_energy_csv",
    "write_comparison",
]

PATH_KINDS = ("UT", "UC", "SS", "BT", "BC", "PS")


def _in_plane(kind, g):
    one = np.ones_like(g)
    zero = np.zeros_like(g)
    if kind == "UT":
        return 1.0 + g, zero, zero, one
    if kind == "UC":
        return 1.0 / (1.0 + g), zero, zero, one
    if kind == "SS":
        return one, g, zero, one
    if kind == "BT":
        return 1.0 + g, zero, zero, 1.0 + g
    if kind == "BC":
        return 1.0 / (1.0 + g), zero, zero, 1.0 / (1.0 + g)
    if kind == "PS":
        return 1.0 + g, zero, zero, 1.0 / (1.0 + g)
    raise InvalidArgumentError(f"unknown path kind {kind!r}; choose from {PATH_KINDS}")


@dataclass(frozen=True, eq=False)
class DeformationPath:
    """One of the canonical paths, sampled on ``gamma`` in [0, 1]."""

    kind: str
    gamma: np.ndarray = None

    def __post_init__(self):
        if self.kind not in PATH_KINDS:
            raise InvalidArgumentError(f"unknown path kind {self.kind!r}; choose from {PATH_KINDS}")
        g = np.linspace(0.0, 1.0, 101) if self.gamma is None else np.asarray(self.gamma, dtype=float)
        if g.ndim != 1 or g.size < 1:
            raise InvalidArgumentError("gamma must be a non-empty 1D grid")
        if np.any(np.diff(g) <= 0):
            raise InvalidArgumentError("gamma must be strictly increasing")
        if g[0] < 0 or g[-1] > 1:
            raise InvalidArgumentError("gamma must lie in [0, 1]")
        object.__setattr__(self, "gamma", g)

    def deformation_gradients(self):
        """``(n_gamma, 3, 3)`` stack with the 2x2 path block and ``F33 = 1``."""
        f11, f12, f21, f22 = _in_plane(self.kind, self.gamma)
        F = np.zeros((self.gamma.size, 3, 3))
        F[:, 0, 0], F[:, 0, 1], F[:, 1, 0], F[:, 1, 1] = f11, f12, f21, f22
        F[:, 2, 2] = 1.0
        if np.any(np.linalg.det(F) <= 0):
            raise NonPhysicalDeformationError(f"path {self.kind} has det(F) <= 0 on its grid")
        return F


@dataclass(frozen=True, eq=False)
class EnergyBand:
    """Energy along a path: median and 2.5/97.5 percentiles over draws."""

    gamma: np.ndarray
    median: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def energy_along_path(path, theta, library=DEFAULT_LIBRARY):
    """Strain energy density along ``path`` for one or many coefficient vectors.

    Parameters
    ----------
    theta : (n_f,) or (n_draws, n_f) array
        Nonnegative coefficients; a single vector gives a zero-width band.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if theta.shape[1] != library.n_f:
        raise InvalidArgumentError(f"theta must have {library.n_f} columns")
    if np.any(theta < 0):
        raise InvalidArgumentError("coefficients must be nonnegative")
    Q = library.values(path.deformation_gradients())
    W = theta @ Q.T
    lo, med, hi = np.percentile(W, [2.5, 50.0, 97.5], axis=0)
    return EnergyBand(path.gamma, med, lo, hi)


def r_squared(true_w, pred_w):
    """Coefficient of determination ``1 - SS_res / SS_tot``."""
    t = np.asarray(true_w, dtype=float)
    p = np.asarray(pred_w, dtype=float)
    if t.shape != p.shape or t.ndim != 1 or t.size < 2:
        raise InvalidArgumentError("series must be 1D with equal length >= 2")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0:
        raise UndefinedRatioError("R^2 is undefined for a constant true series")
    return 1.0 - float(np.sum((t - p) ** 2)) / ss_tot


def compare_ols_bayes(system, ensemble, rcond=1e-12):
    """OLS against posterior summaries on the same system.

    Returns a dict with, per segment, the signed OLS coefficients, posterior
    mean, standard deviation and inclusion frequency, and the indices of
    negative OLS coefficients.
    """
    theta_ols = ols_solve(system, rcond=rcond)
    n_f = ensemble.n_f
    if theta_ols.size != ensemble.theta.shape[-1]:
        raise InvalidArgumentError("system and ensemble have different numbers of coefficients")
    out = {"n_f": n_f, "segments": []}
    for s in range(1, theta_ols.size // n_f + 1):
        mean, std, inc = ensemble.segment(s)
        ols = theta_ols[(s - 1) * n_f:s * n_f]
        out["segments"].append({
            "segment": s,
            "ols": [float(v) for v in ols],
            "bayes_mean": [float(v) for v in mean],
            "bayes_std": [float(v) for v in std],
            "inclusion": [float(v) for v in inc],
            "ols_negative": [int(k) for k in np.flatnonzero(ols < 0)],
            "bayes_negative": [int(k) for k in np.flatnonzero(mean < 0)],
        })
    out["ols_sign_violation"] = any(seg["ols_negative"] for seg in out["segments"])
    return out


def write_energy_csv(rows, path):
    """``rows`` are ``(path_kind, EnergyBand, true_W)`` triples."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=" ", lineterminator="\n")
        w.writerow(["path", "gamma", "W_true", "W_med", "W_lo", "W_hi"])
        for kind, band, wt in rows:
            for k in range(band.gamma.size):
                w.writerow([kind] + [repr(float(v)) for v in
                                     (band.gamma[k], wt[k], band.median[k], band.lo[k], band.hi[k])])


def write_comparison(report, path):
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
