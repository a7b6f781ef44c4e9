import numpy as np
import pytest

from shapecorr.maps import (FunctionalMap, PointMap, identity_map, load_fmap,
                            load_point_map, save_fmap, save_point_map)


def test_hard_map_validation():
    with pytest.raises(ValueError):
        PointMap("a", "b", 3, indices=np.array([0, 1, 3]))
    with pytest.raises(ValueError):
        PointMap("a", "b", 3)  # neither hard nor soft
    with pytest.raises(ValueError):
        PointMap("a", "b", 3, indices=np.array([0]), soft=np.eye(3))


def test_soft_map_validation():
    with pytest.raises(ValueError):
        PointMap("a", "b", 2, soft=np.array([[0.5, 0.4], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        PointMap("a", "b", 2, soft=np.array([[1.5, -0.5], [0.5, 0.5]]))
    m = PointMap("a", "b", 2, soft=np.full((3, 2), 0.5))
    assert not m.is_hard
    assert m.n_from == 3


def test_hardened_argmax_lowest_index():
    soft = np.array([[0.5, 0.5, 0.0], [0.2, 0.3, 0.5]])
    m = PointMap("a", "b", 3, soft=soft).hardened()
    np.testing.assert_array_equal(m.indices, [0, 2])


def test_as_matrix_one_hot():
    m = PointMap("a", "b", 3, indices=np.array([2, 0]))
    pi = m.as_matrix()
    np.testing.assert_array_equal(pi, [[0, 0, 1], [1, 0, 0]])


def test_compose():
    f = PointMap("a", "b", 3, indices=np.array([1, 2, 0]))
    g = PointMap("b", "c", 3, indices=np.array([2, 0, 1]))
    h = f.compose(g)
    assert h.from_id == "a" and h.to_id == "c"
    np.testing.assert_array_equal(h.indices, [0, 1, 2])
    with pytest.raises(ValueError):
        g.compose(f.compose(g))  # direction mismatch a!=c


def test_point_map_file_roundtrip(tmp_path):
    m = PointMap("src", "dst", 7, indices=np.array([6, 0, 3, 3, 2]))
    p = tmp_path / "map.txt"
    save_point_map(m, p)
    back = load_point_map(p)
    assert (back.from_id, back.to_id, back.n_to) == ("src", "dst", 7)
    np.testing.assert_array_equal(back.indices, m.indices)


def test_fmap_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    fm = FunctionalMap(rng.standard_normal((5, 5)), "a", "b")
    p = tmp_path / "C.txt"
    save_fmap(fm, p)
    back = load_fmap(p)
    np.testing.assert_array_equal(back.C, fm.C)  # .17g is exact for float64
    assert back.direction == "a->b"


def test_fmap_validation():
    with pytest.raises(ValueError):
        FunctionalMap(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        FunctionalMap(np.array([[np.nan, 0], [0, 1]]))


def test_identity_map():
    m = identity_map(5, "x", "y")
    np.testing.assert_array_equal(m.indices, np.arange(5))
    assert m.direction == "x->y"
