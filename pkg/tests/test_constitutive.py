import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from plateid.constitutive import (
    DEFAULT_LIBRARY,
    MATERIALS,
    FeatureLibrary,
    features,
    invariants,
    piola_feature_derivatives,
    piola_stress,
    plane_stress_thickness_stretch,
    read_material_params,
    strain_energy,
    write_material_params,
)
from plateid.errors import FormatError, InvalidArgumentError, NonPhysicalDeformationError


def random_F(rng, lo=0.5, hi=2.5):
    """Deformation gradient with singular values in ``[lo, hi]``."""
    U = Rotation.random(random_state=rng).as_matrix()
    V = Rotation.random(random_state=rng).as_matrix()
    return U @ np.diag(rng.uniform(lo, hi, 3)) @ V.T


def fd_derivatives(F, lib, h=1e-6):
    out = np.zeros((lib.n_f, 3, 3))
    for i in range(3):
        for j in range(3):
            E = np.zeros((3, 3))
            E[i, j] = h
            out[:, i, j] = (lib.values(F + E) - lib.values(F - E)) / (2 * h)
    return out


def test_invariants_identity():
    inv = invariants(np.eye(3))
    assert [float(v) for v in (inv.I1, inv.I2, inv.I3, inv.J, inv.I1t, inv.I2t)] == [3, 3, 1, 1, 3, 3]


def test_invariants_uniaxial_stretch():
    # C = diag(4, 1, 1): I1 = 6, I2 = 4 + 4 + 1 = 9, I3 = 4
    inv = invariants(np.diag([2.0, 1.0, 1.0]))
    assert inv.I1 == pytest.approx(6.0)
    assert inv.I2 == pytest.approx(9.0)
    assert inv.I3 == pytest.approx(4.0)
    assert inv.J == pytest.approx(2.0)
    assert inv.I1t == pytest.approx(6.0 * 2.0 ** (-2 / 3), rel=1e-14)
    assert inv.I2t == pytest.approx(9.0 * 2.0 ** (-4 / 3), rel=1e-14)


def test_invariants_reject_reflection():
    with pytest.raises(NonPhysicalDeformationError):
        invariants(np.diag([-1.0, 1.0, 1.0]))


def test_energy_zero_at_identity():
    for theta in MATERIALS.values():
        assert strain_energy(np.eye(3), theta) == 0.0


def test_energy_nh2_b():
    F = np.array([[1.3, 0.2, 0.0], [0.1, 0.9, 0.05], [0.0, 0.0, 1.1]])
    J = np.linalg.det(F)
    I1t = J ** (-2 / 3) * np.trace(F.T @ F)
    expected = 5.40 * (I1t - 3) + 15.00 * (J - 1) ** 2
    assert strain_energy(F, MATERIALS["NH2_b"]) == pytest.approx(expected, rel=1e-13)


def test_energy_hw_brute_force():
    # independent evaluation from principal stretches (1.3, 1, 1)
    lam = np.array([1.3, 1.0, 1.0])
    J = lam.prod()
    lb = lam * J ** (-1 / 3)
    a = (lb ** 2).sum() - 3
    b = (lb[0] * lb[1]) ** 2 + (lb[1] * lb[2]) ** 2 + (lb[0] * lb[2]) ** 2 - 3
    expected = 1.00 * a + 0.15 * b + 0.02 * a * b + 10.00 * (J - 1) ** 2
    assert strain_energy(np.diag(lam), MATERIALS["HW"]) == pytest.approx(expected, rel=1e-13)


def test_energy_rejects_negative_theta():
    with pytest.raises(InvalidArgumentError):
        strain_energy(np.eye(3), [-1, 0, 0, 0, 0, 1])


def test_derivatives_zero_at_identity():
    assert np.all(piola_feature_derivatives(np.eye(3)) == 0)


def test_derivatives_match_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        F = random_F(rng)
        ana = DEFAULT_LIBRARY.derivatives(F)
        num = fd_derivatives(F, DEFAULT_LIBRARY)
        scale = np.maximum(np.abs(ana).max(axis=(1, 2), keepdims=True), 1e-12)
        worst = max(worst, float(np.max(np.abs(ana - num) / scale)))
    assert worst < 1e-6


def test_volumetric_derivative_dilatation():
    lam = 1.2
    d = DEFAULT_LIBRARY.derivatives(lam * np.eye(3))[5]
    expected = 2 * (lam ** 3 - 1) * lam ** 3 * np.eye(3) / lam
    np.testing.assert_allclose(d, expected, rtol=1e-13, atol=1e-14)


def test_flattened_layout_row_major():
    F = random_F(np.random.default_rng(1))
    np.testing.assert_array_equal(piola_feature_derivatives(F)[2], DEFAULT_LIBRARY.derivatives(F)[2].ravel())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_objectivity_and_isotropy(seed):
    rng = np.random.default_rng(seed)
    F = random_F(rng)
    R = Rotation.random(random_state=rng).as_matrix()
    q = features(F)
    np.testing.assert_allclose(features(R @ F), q, rtol=1e-11, atol=1e-12)
    np.testing.assert_allclose(features(F @ R), q, rtol=1e-11, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_stress_is_energy_gradient(seed):
    rng = np.random.default_rng(seed)
    F = random_F(rng, 0.7, 1.5)
    theta = rng.uniform(0, 3, 6)
    dF = rng.normal(size=(3, 3)) * 1e-6
    dW = strain_energy(F + dF, theta) - strain_energy(F - dF, theta)
    assert dW == pytest.approx(2 * np.sum(piola_stress(F, theta) * dF), rel=1e-5, abs=1e-14)


def test_thickness_stretch_reference():
    assert plane_stress_thickness_stretch(1.0, 1.0, MATERIALS["NH2_a"]) == pytest.approx(1.0, abs=1e-12)


def test_thickness_stretch_residual():
    theta = MATERIALS["NH2_a"]
    lz = plane_stress_thickness_stretch(1.6, 2.2, theta)
    assert abs(piola_stress(np.diag([1.6, 2.2, lz]), theta)[2, 2]) < 1e-10 * theta.max()


def test_thickness_stretch_incompressible_limit():
    theta = np.array([1.8, 0, 0, 0, 0, 1e6])
    lz = plane_stress_thickness_stretch(1.6, 2.2, theta)
    assert lz == pytest.approx(1 / (1.6 * 2.2), rel=0.01)


def test_mooney_rivlin_library():
    lib = FeatureLibrary.mooney_rivlin(2, 1)
    assert lib.terms == ((1, 0, 0), (0, 1, 0), (2, 0, 0), (1, 1, 0), (0, 2, 0), (0, 0, 2))


def test_material_file_round_trip(tmp_path):
    params = {1: MATERIALS["NH2_a"], 2: MATERIALS["HW"]}
    write_material_params(params, tmp_path / "m.txt")
    back = read_material_params(tmp_path / "m.txt")
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
    (tmp_path / "bad.txt").write_text("1 1.0 2.0\n")
    with pytest.raises(FormatError):
        read_material_params(tmp_path / "bad.txt")
