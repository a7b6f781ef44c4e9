import numpy as np
import pytest

from shapecorr.geometry import (AugmentParams, ParseError, Shape, augment,
                                icosphere, load_shape, normalize, save_shape,
                                synth_collection, synth_pair)

TET_OFF = """OFF
4 4 0
0 0 0
1 0 0
0 1 0
0 0 1
3 0 2 1
3 0 1 3
3 0 3 2
3 1 2 3
"""


def unit_square():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    f = np.array([[0, 1, 2], [0, 2, 3]])
    return Shape(v, f, "square")


def test_load_off_tetrahedron(tmp_path):
    p = tmp_path / "tet.off"
    p.write_text(TET_OFF)
    s = load_shape(p)
    assert s.n_vertices == 4
    assert len(s.faces) == 4
    assert s.id == "tet"


def test_load_obj_one_based_indices(tmp_path):
    p = tmp_path / "tri.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 3\nf 1 2 4\nf 1 3 4\nf 2 3 4\n")
    s = load_shape(p)
    assert s.faces.min() == 0
    assert s.faces.max() == 3


def test_load_ply_out_of_range_index(tmp_path):
    p = tmp_path / "bad.ply"
    header = ("ply\nformat ascii 1.0\nelement vertex 10\n"
              "property float x\nproperty float y\nproperty float z\n"
              "element face 1\nproperty list uchar int vertex_indices\n"
              "end_header\n")
    verts = "\n".join(f"{i} 0 0" for i in range(10))
    p.write_text(header + verts + "\n3 0 1 999\n")
    with pytest.raises(ParseError):
        load_shape(p)


def test_load_malformed_off(tmp_path):
    p = tmp_path / "bad.off"
    p.write_text("OFF\n4 4 0\n0 0 0\n")
    with pytest.raises(ParseError):
        load_shape(p)


@pytest.mark.parametrize("fmt", ["off", "obj", "ply"])
def test_save_load_roundtrip(tmp_path, fmt):
    s = normalize(icosphere(1))
    p = tmp_path / f"s.{fmt}"
    save_shape(s, p)
    back = load_shape(p)
    np.testing.assert_allclose(back.vertices, s.vertices, atol=1e-15)
    np.testing.assert_array_equal(back.faces, s.faces)


def test_load_keeps_largest_component(tmp_path):
    # tetrahedron plus a far-away isolated triangle
    p = tmp_path / "two.off"
    p.write_text(
        "OFF\n7 5 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n"
        "10 10 10\n11 10 10\n10 11 10\n"
        "3 0 2 1\n3 0 1 3\n3 0 3 2\n3 1 2 3\n3 4 5 6\n")
    with pytest.warns(UserWarning, match="largest"):
        s = load_shape(p)
    assert s.n_vertices == 4
    assert len(s.faces) == 4


def test_load_drops_degenerate_faces(tmp_path):
    p = tmp_path / "deg.off"
    p.write_text(
        "OFF\n4 5 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n"
        "3 0 2 1\n3 0 1 3\n3 0 3 2\n3 1 2 3\n3 1 1 2\n")
    with pytest.warns(UserWarning, match="degenerate"):
        s = load_shape(p)
    assert len(s.faces) == 4


def test_normalize_unit_area_unchanged():
    s = unit_square()
    out = normalize(s)
    np.testing.assert_allclose(out.vertices, s.vertices, atol=1e-12)


def test_normalize_scales_by_sqrt_area():
    s = unit_square()
    big = Shape(s.vertices * 3.0, s.faces)  # area 9
    out = normalize(big)
    np.testing.assert_allclose(out.vertices, s.vertices, atol=1e-12)


def test_normalize_pointcloud_unit_radius():
    v = np.array([[2, 0, 0], [-2, 0, 0], [0, 1, 0], [0, -1, 0]], float)
    out = normalize(Shape(v, None))
    r = np.linalg.norm(out.vertices, axis=1)
    assert r.max() == pytest.approx(1.0)
    np.testing.assert_allclose(out.vertices.mean(axis=0), 0, atol=1e-15)
    # max centroid distance 2 -> scaled by 0.5
    np.testing.assert_allclose(out.vertices[0], [1, 0, 0], atol=1e-15)


def test_normalize_idempotent():
    s = normalize(icosphere(1))
    again = normalize(s)
    np.testing.assert_allclose(again.vertices, s.vertices, atol=1e-12)


def test_normalize_degenerate_inputs():
    flat = Shape(np.zeros((4, 3)), np.array([[0, 1, 2], [0, 2, 3]]))
    with pytest.raises(ValueError):
        normalize(flat)
    with pytest.raises(ValueError):
        normalize(Shape(np.ones((5, 3)), None))


def test_augment_identity_params():
    s = normalize(icosphere(1))
    out = augment(s, AugmentParams(rotate=False, scale_range=(1, 1),
                                   jitter_std=0.0), seed=3)
    np.testing.assert_array_equal(out.vertices, s.vertices)


def test_augment_scale_bounds_before_jitter():
    s = normalize(icosphere(1))
    params = AugmentParams(rotate=True, scale_range=(0.9, 1.1), jitter_std=0.0)
    for seed in range(5):
        out = augment(s, params, seed)
        ratio = np.linalg.norm(out.vertices, axis=1) / np.linalg.norm(s.vertices, axis=1)
        assert np.all(ratio >= 0.9 - 1e-12)
        assert np.all(ratio <= 1.1 + 1e-12)


def test_augment_deterministic():
    s = normalize(icosphere(1))
    params = AugmentParams(rotate=True, scale_range=(0.9, 1.1), jitter_std=0.01)
    a = augment(s, params, seed=7)
    b = augment(s, params, seed=7)
    np.testing.assert_array_equal(a.vertices, b.vertices)
    c = augment(s, params, seed=8)
    assert not np.array_equal(a.vertices, c.vertices)


def test_augment_params_validation():
    with pytest.raises(ValueError):
        AugmentParams(scale_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        AugmentParams(jitter_std=-1.0)


def test_synth_pair_zero_magnitude_identical():
    a, b, gt = synth_pair("bent_cylinder", 200, 0.0, seed=0)
    np.testing.assert_allclose(a.vertices, b.vertices, atol=1e-12)
    np.testing.assert_array_equal(gt.indices, np.arange(a.n_vertices))


@pytest.mark.parametrize("kind", ["bent_cylinder", "bumpy_sphere", "stretched_grid"])
def test_synth_pair_valid(kind):
    a, b, gt = synth_pair(kind, 200, 0.3, seed=1)
    assert a.n_vertices == b.n_vertices >= 50
    np.testing.assert_array_equal(a.faces, b.faces)
    assert a.surface_area() == pytest.approx(1.0)
    assert b.surface_area() == pytest.approx(1.0)


def test_synth_pair_near_isometry_bound():
    # magnitude 0.3 keeps every edge-length change within 15%
    a, b, _ = synth_pair("bent_cylinder", 300, 0.3, seed=0)
    e = a.edges()
    la = np.linalg.norm(a.vertices[e[:, 0]] - a.vertices[e[:, 1]], axis=1)
    lb = np.linalg.norm(b.vertices[e[:, 0]] - b.vertices[e[:, 1]], axis=1)
    assert np.abs(lb / la - 1).max() <= 0.15


def test_synth_pair_deterministic():
    a1, b1, _ = synth_pair("bumpy_sphere", 200, 0.3, seed=5)
    a2, b2, _ = synth_pair("bumpy_sphere", 200, 0.3, seed=5)
    np.testing.assert_array_equal(a1.vertices, a2.vertices)
    np.testing.assert_array_equal(b1.vertices, b2.vertices)


def test_synth_pair_unsupported_kind():
    with pytest.raises(ValueError):
        synth_pair("torus", 200, 0.1, seed=0)
    with pytest.raises(ValueError):
        synth_pair("bent_cylinder", 10, 0.1, seed=0)


def test_synth_collection_shared_connectivity():
    shapes = synth_collection("bent_cylinder", 4, 200, 0.4, seed=2)
    assert len(shapes) == 4
    for s in shapes[1:]:
        np.testing.assert_array_equal(s.faces, shapes[0].faces)
    ids = {s.id for s in shapes}
    assert len(ids) == 4


def test_shape_validation():
    with pytest.raises(ValueError):
        Shape(np.zeros((3, 3)))  # too few vertices
    with pytest.raises(ValueError):
        Shape(np.zeros((5, 3)), np.array([[0, 1, 9]]))  # index out of range
