import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse.csgraph import connected_components

from plateid.errors import FormatError, InvalidArgumentError
from plateid.mesh import (
    PATTERNS,
    DisplacementField,
    SegmentMap,
    WedgeMesh,
    generate_pattern,
    generate_plate_mesh,
    interpolate_to_mesh,
    read_displacements,
    read_mesh,
    read_segment_map,
    recover_transverse,
    write_displacements,
    write_mesh,
    write_segment_map,
)
from plateid.synthdata import _colour_classes


def test_small_mesh_counts():
    m = generate_plate_mesh(50, 1, 4)
    assert m.n_elements == 32
    assert m.n_nodes == 50
    assert np.sum(m.face_of_node == 0) == 25


def test_full_scale_mesh_counts():
    assert generate_plate_mesh(50, 1, 72).n_elements == 10368


@pytest.mark.parametrize("args", [(50, 1, 1), (50, 1, 2.5), (0, 1, 4), (50, -1, 4)])
def test_invalid_mesh_arguments(args):
    with pytest.raises(InvalidArgumentError):
        generate_plate_mesh(*args)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 24))
def test_mesh_invariants(n):
    m = generate_plate_mesh(50.0, 1.0, n)
    el = m.elements
    assert np.all(np.sort(el, axis=1)[:, 1:] != np.sort(el, axis=1)[:, :-1])
    np.testing.assert_allclose(m.nodes[el[:, 3:], :2], m.nodes[el[:, :3], :2])
    np.testing.assert_allclose(m.nodes[el[:, 3:], 2] - m.nodes[el[:, :3], 2], 1.0)
    assert np.all(m.triangle_areas > 0)
    assert m.triangle_areas.sum() == pytest.approx(2500.0)
    adj = m.neighbor_map
    assert (adj != adj.T).nnz == 0
    assert np.all(np.diff(adj.indptr) >= 3)
    # boundary sets overlap only at the four corners
    sets = list(m.boundary_sets.values())
    shared = set()
    for i in range(4):
        for j in range(i + 1, 4):
            shared |= set(np.intersect1d(sets[i], sets[j]).tolist())
    xy = m.nodes[sorted(shared), :2]
    assert len(shared) == 8
    assert np.all(np.isin(xy, [0.0, 50.0]))


def test_mesh_rejects_misaligned_wedge():
    m = generate_plate_mesh(10, 1, 2)
    nodes = m.nodes.copy()
    nodes[m.elements[0, 3], 0] += 0.1
    with pytest.raises(InvalidArgumentError):
        WedgeMesh(nodes, m.elements, m.boundary_sets)


def test_cross_pattern_definition():
    m = generate_plate_mesh(50, 1, 20)
    seg = generate_pattern(m, "cross").element_segment
    c = m.centroids
    dx, dy = np.abs(c[:, 0] - 25), np.abs(c[:, 1] - 25)
    inside = ((dx <= 5) & (dy <= 15)) | ((dy <= 5) & (dx <= 15))
    np.testing.assert_array_equal(seg, np.where(inside, 2, 1))


def test_split3_meets_at_one_boundary_point():
    m = generate_plate_mesh(50, 1, 72)
    seg = generate_pattern(m, "split3").element_segment
    assert set(np.unique(seg)) == {1, 2, 3}
    # nodes touched by all three segments
    ne = m.node_elements
    triple = [a for a in range(m.n_nodes) if len(set(seg[ne.indices[ne.indptr[a]:ne.indptr[a + 1]]])) == 3]
    xy = np.unique(m.nodes[triple, :2], axis=0)
    np.testing.assert_allclose(xy, [[25.0, 0.0]])
    # every segment is connected
    adj = m.neighbor_map
    for s in (1, 2, 3):
        ids = np.flatnonzero(seg == s)
        assert connected_components(adj[ids][:, ids])[0] == 1


@pytest.mark.parametrize("name", sorted(PATTERNS))
def test_pattern_deterministic(name):
    m = generate_plate_mesh(50, 1, 16)
    np.testing.assert_array_equal(generate_pattern(m, name).element_segment,
                                  generate_pattern(m, name).element_segment)


def test_pattern_from_file(tmp_path):
    m = generate_plate_mesh(50, 1, 4)
    labels = np.arange(m.n_elements) % 3 + 1
    write_segment_map(SegmentMap(labels), tmp_path / "seg.txt")
    np.testing.assert_array_equal(generate_pattern(m, f"from_file:{tmp_path / 'seg.txt'}").element_segment, labels)
    (tmp_path / "short.txt").write_text("1\n2\n")
    with pytest.raises(FormatError):
        generate_pattern(m, f"from_file:{tmp_path / 'short.txt'}")


def test_unknown_pattern():
    with pytest.raises(InvalidArgumentError):
        generate_pattern(generate_plate_mesh(50, 1, 4), "spiral")


def test_segment_map_from_labels():
    np.testing.assert_array_equal(SegmentMap.from_labels([7, 7, 3, 9, 3]).element_segment, [1, 1, 2, 3, 2])
    with pytest.raises(InvalidArgumentError):
        SegmentMap([1, 3])


def test_interpolate_identity():
    m = generate_plate_mesh(50, 1, 6)
    f = DisplacementField(np.random.default_rng(0).normal(size=(m.n_nodes, 3)))
    np.testing.assert_array_equal(interpolate_to_mesh(m, f, m).values, f.values)


@settings(max_examples=15, deadline=None)
@given(st.integers(3, 12), st.integers(3, 12), st.integers(0, 2**31 - 1))
def test_interpolate_reproduces_affine(n_src, n_tgt, seed):
    src = generate_plate_mesh(50, 1, n_src)
    tgt = generate_plate_mesh(50, 1, n_tgt)
    rng = np.random.default_rng(seed)
    M = rng.normal(scale=0.3, size=(3, 3))
    c = rng.normal(size=3)
    f = DisplacementField(src.nodes @ M.T + c)
    out = interpolate_to_mesh(src, f, tgt)
    exact = tgt.nodes @ M.T + c
    assert np.max(np.abs(out.values - exact)) <= 1e-12 * max(1.0, np.abs(exact).max())


def test_interpolate_full_scale_non_native():
    src = generate_plate_mesh(50, 1, 100)
    tgt = generate_plate_mesh(50, 1, 99)
    assert tgt.n_elements == 19602
    f = DisplacementField(src.nodes * [0.6, 1.2, -0.3])
    out = interpolate_to_mesh(src, f, tgt)
    np.testing.assert_allclose(out.values, tgt.nodes * [0.6, 1.2, -0.3], atol=1e-12)


def test_interpolate_thickness_mismatch():
    with pytest.raises(InvalidArgumentError):
        interpolate_to_mesh(generate_plate_mesh(50, 1, 4), DisplacementField(np.zeros((50, 3))),
                            generate_plate_mesh(50, 2, 4))


def test_recover_transverse_removes_colour_pattern():
    m = generate_plate_mesh(50, 1, 8)
    u = np.zeros((m.n_nodes, 3))
    u[:, :2] = np.random.default_rng(0).normal(size=(m.n_nodes, 2))
    u[:, 2] = 0.25
    for face in (0, 1):
        tri = m.elements[:, 3 * face:3 * face + 3]
        colour = _colour_classes(tri, m.n_nodes)
        ids = np.unique(tri)
        u[ids, 2] += np.array([1.0, -0.4, -0.6])[colour[ids]]
    out = recover_transverse(m, DisplacementField(u))
    np.testing.assert_array_equal(out.values[:, :2], u[:, :2])
    np.testing.assert_allclose(out.values[:, 2], 0.25, atol=1e-14)


def test_file_round_trips(tmp_path):
    m = generate_plate_mesh(50, 1, 5)
    write_mesh(m, tmp_path / "mesh.txt")
    back = read_mesh(tmp_path / "mesh.txt")
    np.testing.assert_array_equal(back.nodes, m.nodes)
    np.testing.assert_array_equal(back.elements, m.elements)
    assert back.fingerprint == m.fingerprint
    f = DisplacementField(np.random.default_rng(1).normal(size=(m.n_nodes, 3)))
    write_displacements(f, tmp_path / "u.txt")
    np.testing.assert_array_equal(read_displacements(tmp_path / "u.txt", m).values, f.values)
    seg = generate_pattern(m, "cross")
    write_segment_map(seg, tmp_path / "s.txt")
    np.testing.assert_array_equal(read_segment_map(tmp_path / "s.txt", m.n_elements).element_segment,
                                  seg.element_segment)


def test_malformed_files(tmp_path):
    (tmp_path / "bad.txt").write_text("nodes 2 elements 0 boundaries 0\n0 0 0\n")
    with pytest.raises(FormatError):
        read_mesh(tmp_path / "bad.txt")
    with pytest.raises(FormatError):
        read_mesh(tmp_path / "missing.txt")
    (tmp_path / "u.txt").write_text("1 2\n3 4\n")
    with pytest.raises(FormatError):
        read_displacements(tmp_path / "u.txt")
