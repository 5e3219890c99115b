import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plateid.assembly import (
    BoundaryForces,
    assemble_fixed_rows,
    assemble_free_rows,
    assemble_system,
    combine,
    element_gradients,
    element_kinematics,
    nodal_feature_forces,
    ols_solve,
    read_forces,
    subsample,
    write_forces,
)
from plateid.constitutive import MATERIALS
from plateid.errors import ConfigurationError, ElementInversionError, FormatError, SingularSystemError
from plateid.mesh import DisplacementField, SegmentMap, generate_pattern, generate_plate_mesh
from plateid.segmentation import SegmentationResult


def zero_forces(mesh):
    return BoundaryForces(tuple(mesh.boundary_sets), np.zeros((len(mesh.boundary_sets), 3)))


def fake_segmentation(mesh, segmap, flagged=()):
    return SegmentationResult(np.asarray(flagged, dtype=np.int64), [], np.zeros(0, dtype=np.int64),
                              segmap.element_segment)


def test_kinematics_reference():
    m = generate_plate_mesh(50, 1, 4)
    F, G, vol = element_kinematics(m, DisplacementField.zeros(m), 5)
    np.testing.assert_array_equal(F, np.eye(3))
    assert vol == pytest.approx(m.triangle_areas[5] * 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kinematics_affine_exact(seed):
    m = generate_plate_mesh(50, 1, 5)
    rng = np.random.default_rng(seed)
    M = np.eye(3) + rng.normal(scale=0.2, size=(3, 3))
    if np.linalg.det(M) <= 0:
        return
    f = DisplacementField(m.nodes @ (M - np.eye(3)).T)
    for e in range(0, m.n_elements, 7):
        np.testing.assert_allclose(element_kinematics(m, f, e)[0], M, atol=1e-12)


def test_gradient_partition_of_unity():
    m = generate_plate_mesh(50, 1, 6)
    G, _ = element_gradients(m)
    assert np.abs(G.sum(axis=1)).max() < 1e-12


def test_inverted_element_named():
    m = generate_plate_mesh(50, 1, 2)
    u = np.zeros((m.n_nodes, 3))
    u[m.elements[3, 3:], 2] = -5.0
    with pytest.raises(ElementInversionError) as exc:
        element_kinematics(m, DisplacementField(u), 3)
    assert exc.value.element == 3


def test_rigid_translation_gives_zero_rows():
    m = generate_plate_mesh(50, 1, 4)
    f = DisplacementField(np.tile([0.3, -1.0, 2.0], (m.n_nodes, 1)))
    free = assemble_free_rows(m, f, generate_pattern(m, "cross"))
    # F = I up to the round-off in sum_a G_a
    assert np.max(np.abs(free.A)) < 1e-12 and np.all(free.b == 0)


def test_zero_deformation_fixed_rows():
    m = generate_plate_mesh(50, 1, 4)
    fixed = assemble_fixed_rows(m, DisplacementField.zeros(m), generate_pattern(m, "cross"), zero_forces(m))
    assert fixed.n_rows == 12
    assert np.all(fixed.A == 0) and np.all(fixed.b == 0)


def test_zero_padding(small_cross):
    s = small_cross
    free = assemble_free_rows(s.mesh, s.field, s.segmap)
    seg = s.segmap.element_segment
    ne = s.mesh.node_elements
    for r in range(0, free.n_rows, 3):
        a = free.row_node[r]
        touching = set(seg[ne.indices[ne.indptr[a]:ne.indptr[a + 1]]])
        for blk in (1, 2):
            if blk not in touching:
                assert np.all(free.A[r:r + 3, free.column_block(blk)] == 0)
    assert np.all(free.b == 0)


def test_equilibrium_consistency(small_cross, small_homogeneous):
    for s in (small_cross, small_homogeneous):
        system = assemble_system(s.mesh, s.field, s.segmap, s.forces, lambda_r=1.0)
        r = system.A @ s.theta_true - system.b
        assert np.max(np.abs(r)) <= 10 * s.result.tolerance


def test_global_force_balance(small_cross):
    s = small_cross
    H = nodal_feature_forces(s.mesh, s.field, s.segmap)
    f = H @ s.theta_true
    corners = [a for a in s.mesh.boundary_nodes
               if sum(a in ids for ids in s.mesh.boundary_sets.values()) == 2]
    net = s.forces.R.sum(axis=0) - f[corners].sum(axis=0)
    assert np.max(np.abs(net)) <= 10 * s.result.tolerance


def test_combine_weighting(small_cross):
    s = small_cross
    free = assemble_free_rows(s.mesh, s.field, s.segmap)
    fixed = assemble_fixed_rows(s.mesh, s.field, s.segmap, s.forces)
    plain = combine(free, fixed, 1.0)
    np.testing.assert_array_equal(plain.A, np.vstack([free.A, fixed.A]))
    default = combine(free, fixed)
    assert np.linalg.norm(default.A[default.fixed_mask]) == pytest.approx(np.linalg.norm(free.A), rel=1e-12)
    with pytest.raises(SingularSystemError):
        ols_solve(combine(free, fixed, 0.0))


def test_ols_hand_example():
    class S:
        A = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        b = np.array([1.0, 2.0, 3.0])

    np.testing.assert_allclose(ols_solve(S), [1.0, 2.0], atol=1e-14)


def test_ols_orthonormal_and_normal_equations():
    rng = np.random.default_rng(0)
    Q, _ = np.linalg.qr(rng.normal(size=(5, 5)))

    class S:
        A = Q
        b = rng.normal(size=5)

    np.testing.assert_allclose(ols_solve(S), Q.T @ S.b, atol=1e-12)
    A = rng.normal(size=(40, 6))

    class T:
        b = rng.normal(size=40)

    T.A = A
    np.testing.assert_allclose(ols_solve(T), np.linalg.solve(A.T @ A, A.T @ T.b), rtol=1e-10)


def test_ols_rank_deficient():
    class S:
        A = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
        b = np.ones(3)

    with pytest.raises(SingularSystemError):
        ols_solve(S)


def test_native_round_trip(small_cross):
    s = small_cross
    theta = ols_solve(assemble_system(s.mesh, s.field, s.segmap, s.forces))
    np.testing.assert_allclose(theta[[0, 5, 6, 11]], s.theta_true[[0, 5, 6, 11]], rtol=1e-6)
    assert np.max(np.abs(theta - s.theta_true)) < 1e-6 * np.max(s.theta_true)


def test_subsample_identity(small_cross):
    s = small_cross
    system = assemble_system(s.mesh, s.field, s.segmap, s.forces)
    out = subsample(system, fake_segmentation(s.mesh, s.segmap), s.mesh, 1.0, 1.0)
    np.testing.assert_array_equal(out.A, system.A)


def test_subsample_counts_and_determinism():
    m = generate_plate_mesh(50, 1, 20)
    seg = SegmentMap(np.ones(m.n_elements, dtype=np.int64))
    rng = np.random.default_rng(0)
    u = DisplacementField(rng.normal(scale=0.01, size=(m.n_nodes, 3)))
    system = assemble_system(m, u, seg, zero_forces(m), lambda_r=1.0)
    n_free = len(m.interior_nodes)
    a = subsample(system, fake_segmentation(m, seg), m, 0.02, rng_seed=3)
    b = subsample(system, fake_segmentation(m, seg), m, 0.02, rng_seed=3)
    assert a.free_mask.sum() == 3 * int(np.floor(0.02 * n_free))
    assert a.fixed_mask.sum() == 12
    np.testing.assert_array_equal(a.row_node, b.row_node)


def test_subsample_flagged_smallest_residual():
    m = generate_plate_mesh(50, 1, 6)
    seg = SegmentMap(np.ones(m.n_elements, dtype=np.int64))
    u = DisplacementField(np.random.default_rng(0).normal(scale=0.01, size=(m.n_nodes, 3)))
    system = assemble_system(m, u, seg, zero_forces(m), lambda_r=1.0)
    flagged = m.interior_nodes[:5]
    res = np.zeros(m.n_nodes)
    res[flagged] = [5, 1, 3, 2, 4]
    out = subsample(system, fake_segmentation(m, seg, flagged), m, 0.02, 0.2, f_res_het=res)
    np.testing.assert_array_equal(out.meta["kept_flagged_nodes"], [flagged[1]])


def test_subsample_empty_block_error():
    m = generate_plate_mesh(50, 1, 10)
    labels = np.ones(m.n_elements, dtype=np.int64)
    centre = int(np.argmin(np.linalg.norm(m.centroids - 25.0, axis=1)))
    labels[centre] = 2  # one element away from the edges: only its own node rows see segment 2
    seg = SegmentMap(labels)
    u = DisplacementField(np.random.default_rng(0).normal(scale=0.01, size=(m.n_nodes, 3)))
    system = assemble_system(m, u, seg, zero_forces(m), lambda_r=1.0)
    inner = m.elements[centre]
    raised = 0
    for seed in range(10):
        try:
            out = subsample(system, fake_segmentation(m, seg), m, 0.02, rng_seed=seed)
        except ConfigurationError as exc:
            assert "segment 2" in str(exc)
            raised += 1
        else:
            assert np.isin(inner, out.meta["kept_free_nodes"]).any()
    assert raised > 0


def test_subsample_fraction_range():
    m = generate_plate_mesh(50, 1, 4)
    seg = SegmentMap(np.ones(m.n_elements, dtype=np.int64))
    system = assemble_system(m, DisplacementField.zeros(m), seg, zero_forces(m), lambda_r=1.0)
    with pytest.raises(ConfigurationError):
        subsample(system, fake_segmentation(m, seg), m, 1.5)


def test_force_file_round_trip(tmp_path):
    f = BoundaryForces(("x0", "x1"), [[1.0, 2.0, 3.0], [-1.0, 0.5, 1e-9]])
    write_forces(f, tmp_path / "f.txt")
    back = read_forces(tmp_path / "f.txt")
    assert back.names == f.names
    np.testing.assert_array_equal(back.R, f.R)
    (tmp_path / "bad.txt").write_text("x0 1 2\n")
    with pytest.raises(FormatError):
        read_forces(tmp_path / "bad.txt")
