"""Invariant-based hyperelastic feature library.

Every feature is a monomial ``a**p * b**q * c**m`` in the shifted isochoric
invariants ``a = I1t - 3``, ``b = I2t - 3`` and the volume change
``c = J - 1``.  The strain energy is linear in the coefficients,
``W = Q(F) @ theta``, and so is the first Piola-Kirchhoff stress.

All functions accept a single 3x3 matrix or a stack of shape ``(..., 3, 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .errors import FormatError, InvalidArgumentError, NonPhysicalDeformationError, RootBracketError

__all__ = [
    "InvariantTriple",
    "FeatureLibrary",
    "DEFAULT_LIBRARY",
    "MATERIALS",
    "invariants",
    "features",
    "strain_energy",
    "piola_feature_derivatives",
    "piola_stress",
    "plane_stress_thickness_stretch",
    "read_material_params",
    "write_material_params",
]


@dataclass(frozen=True)
class InvariantTriple:
    I1: np.ndarray
    I2: np.ndarray
    I3: np.ndarray
    I1t: np.ndarray
    I2t: np.ndarray
    J: np.ndarray


def _as_F(F):
    F = np.asarray(F, dtype=float)
    if F.shape[-2:] != (3, 3):
        raise InvalidArgumentError(f"deformation gradient must be 3x3, got shape {F.shape}")
    return F


def _kinematics(F):
    """Invariants and their F-derivatives for a stack of deformation gradients."""
    F = _as_F(F)
    J = np.linalg.det(F)
    if np.any(~(J > 0)):
        raise NonPhysicalDeformationError(f"det(F) must be positive, got {np.min(J):.3e}")
    C = np.swapaxes(F, -1, -2) @ F
    I1 = np.trace(C, axis1=-2, axis2=-1)
    trC2 = np.einsum("...ij,...ji->...", C, C)
    I2 = 0.5 * (I1 ** 2 - trC2)
    Finv_T = np.swapaxes(np.linalg.inv(F), -1, -2)
    j23 = J ** (-2.0 / 3.0)
    j43 = j23 * j23
    I1t = j23 * I1
    I2t = j43 * I2
    dI1 = 2.0 * F
    dI2 = 2.0 * (I1[..., None, None] * F - F @ C)
    dI1t = j23[..., None, None] * dI1 - (2.0 / 3.0) * I1t[..., None, None] * Finv_T
    dI2t = j43[..., None, None] * dI2 - (4.0 / 3.0) * I2t[..., None, None] * Finv_T
    dJ = J[..., None, None] * Finv_T
    inv = InvariantTriple(I1, I2, J * J, I1t, I2t, J)
    return inv, dI1t, dI2t, dJ


def invariants(F):
    """Return ``(I1, I2, I3, I1t, I2t, J)`` of ``C = F^T F``.

    Raises
    ------
    NonPhysicalDeformationError
        If ``det(F) <= 0``.
    """
    return _kinematics(F)[0]


def _pow(x, n):
    return np.ones_like(x) if n == 0 else x ** n


class FeatureLibrary:
    """Ordered list of monomial energy features.

    Parameters
    ----------
    terms : sequence of (p, q, m)
        Exponents of ``(I1t - 3)``, ``(I2t - 3)`` and ``(J - 1)``.
    """

    def __init__(self, terms, names=None):
        terms = [tuple(int(e) for e in t) for t in terms]
        for t in terms:
            if len(t) != 3 or min(t) < 0 or sum(t) == 0:
                raise InvalidArgumentError(f"invalid feature exponents {t}")
        self.terms = tuple(terms)
        self.names = tuple(names) if names is not None else tuple(self._name(t) for t in terms)

    @staticmethod
    def _name(t):
        parts = []
        for sym, e in zip(("(I1t-3)", "(I2t-3)", "(J-1)"), t):
            if e:
                parts.append(sym if e == 1 else f"{sym}^{e}")
        return "*".join(parts)

    @classmethod
    def mooney_rivlin(cls, N, M):
        """Generalized Mooney-Rivlin set: ``a^i b^j`` with ``1 <= i + j <= N`` and ``(J-1)^(2k)``, ``k <= M``."""
        if N < 1 or M < 1:
            raise InvalidArgumentError("N and M must be >= 1")
        terms = [(i, s - i, 0) for s in range(1, N + 1) for i in range(s, -1, -1)]
        terms += [(0, 0, 2 * k) for k in range(1, M + 1)]
        return cls(terms)

    @property
    def n_f(self):
        return len(self.terms)

    def __len__(self):
        return self.n_f

    def __repr__(self):
        return f"FeatureLibrary({list(self.terms)})"

    def subset(self, indices):
        return FeatureLibrary([self.terms[i] for i in indices], [self.names[i] for i in indices])

    def values(self, F):
        """Feature vector ``Q(F)`` with shape ``(..., n_f)``."""
        inv = invariants(F)
        a, b, c = inv.I1t - 3.0, inv.I2t - 3.0, inv.J - 1.0
        return np.stack([_pow(a, p) * _pow(b, q) * _pow(c, m) for p, q, m in self.terms], axis=-1)

    def derivatives(self, F):
        """``dQ_k/dF`` with shape ``(..., n_f, 3, 3)``."""
        inv, dA, dB, dJ = _kinematics(F)
        a, b, c = inv.I1t - 3.0, inv.I2t - 3.0, inv.J - 1.0
        out = []
        for p, q, m in self.terms:
            d = np.zeros(np.shape(a) + (3, 3))
            if p:
                d = d + (p * _pow(a, p - 1) * _pow(b, q) * _pow(c, m))[..., None, None] * dA
            if q:
                d = d + (q * _pow(a, p) * _pow(b, q - 1) * _pow(c, m))[..., None, None] * dB
            if m:
                d = d + (m * _pow(a, p) * _pow(b, q) * _pow(c, m - 1))[..., None, None] * dJ
            out.append(d)
        return np.stack(out, axis=-3)

    def energy(self, F, theta):
        return self.values(F) @ np.asarray(theta, dtype=float)

    def piola(self, F, theta):
        return np.einsum("...kij,k->...ij", self.derivatives(F), np.asarray(theta, dtype=float))


# order: (I1t-3), (I2t-3), (I1t-3)^2, (I1t-3)(I2t-3), (I1t-3)^3, (J-1)^2
DEFAULT_LIBRARY = FeatureLibrary([(1, 0, 0), (0, 1, 0), (2, 0, 0), (1, 1, 0), (3, 0, 0), (0, 0, 2)])

# reference models used for synthetic data, coefficients in MPa
MATERIALS = {
    "NH2_a": np.array([1.80, 0.0, 0.0, 0.0, 0.0, 6.00]),
    "NH2_b": np.array([5.40, 0.0, 0.0, 0.0, 0.0, 15.00]),
    "NH2_c": np.array([6.00, 0.0, 0.0, 0.0, 0.0, 32.00]),
    "ISH": np.array([4.00, 0.50, 0.30, 0.0, 0.0, 21.00]),
    "HW": np.array([1.00, 0.15, 0.0, 0.02, 0.0, 10.00]),
}


def features(F, library=DEFAULT_LIBRARY):
    return library.values(F)


def strain_energy(F, theta, library=DEFAULT_LIBRARY):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (library.n_f,):
        raise InvalidArgumentError(f"theta must have {library.n_f} entries")
    if np.any(theta < 0):
        raise InvalidArgumentError("material parameters must be nonnegative")
    return library.energy(F, theta)


def piola_feature_derivatives(F, library=DEFAULT_LIBRARY):
    """Rows ``dQ_k/dF_iJ`` flattened row-major, shape ``(..., n_f, 9)``."""
    d = library.derivatives(F)
    return d.reshape(d.shape[:-2] + (9,))


def piola_stress(F, theta, library=DEFAULT_LIBRARY):
    return library.piola(F, theta)


def plane_stress_thickness_stretch(lx, ly, theta, library=DEFAULT_LIBRARY, bracket=(0.05, 20.0)):
    """Thickness stretch ``lz`` with ``P33(diag(lx, ly, lz)) = 0``."""
    if lx <= 0 or ly <= 0:
        raise InvalidArgumentError("stretches must be positive")
    theta = np.asarray(theta, dtype=float)
    scale = max(float(np.max(np.abs(theta))), 1e-300)

    def p33(lz):
        return library.piola(np.diag([lx, ly, lz]), theta)[2, 2] / scale

    lo, hi = bracket
    flo, fhi = p33(lo), p33(hi)
    if flo == 0.0:
        return lo
    if np.sign(flo) == np.sign(fhi):
        raise RootBracketError(f"P33 does not change sign on [{lo}, {hi}] for lx={lx}, ly={ly}")
    lz = brentq(p33, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    if abs(p33(lz)) > 1e-10:
        raise RootBracketError(f"thickness stretch residual {p33(lz):.3e} above tolerance")
    return lz


def write_material_params(params, path):
    """``params`` maps segment id to a coefficient vector."""
    lines = [" ".join([str(int(k))] + [repr(float(v)) for v in np.asarray(th)]) for k, th in sorted(params.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_material_params(path, n_f=DEFAULT_LIBRARY.n_f):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"material parameter file {path} not found")
    out = {}
    for ln in path.read_text(encoding="utf-8").splitlines():
        if not ln.strip():
            continue
        parts = ln.split()
        try:
            seg, vals = int(parts[0]), np.array([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        if len(vals) != n_f:
            raise FormatError(f"{path}: segment {seg} has {len(vals)} coefficients, expected {n_f}")
        out[seg] = vals
    return out
