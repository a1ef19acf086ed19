import numpy as np
import pytest

from nodecorr.exceptions import GraphMismatchError, InsufficientPointsError
from nodecorr.graph import (
    DilatedKnnGraph,
    PointCloud,
    build_dilated_knn,
    dilated_select,
    gather_all,
    gather_neighbors,
    knn_sorted,
)
from nodecorr.verify import PermutationMatrix, brute_force_knn, permute_cloud, tie_free_cloud

SQUARE = PointCloud(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float))


def test_square_corners_tiebreak_by_index():
    assert knn_sorted(SQUARE, 0, 2).tolist() == [1, 2]
    assert brute_force_knn(SQUARE, 2, 1).neighbors[0].tolist() == [1, 2]


def test_collinear_points():
    cloud = PointCloud(np.array([[x, 0, 0] for x in range(4)], dtype=float))
    assert knn_sorted(cloud, 0, 3).tolist() == [1, 2, 3]


def test_knn_insufficient_points():
    with pytest.raises(InsufficientPointsError):
        knn_sorted(SQUARE, 0, 4)
    with pytest.raises(InsufficientPointsError):
        build_dilated_knn(SQUARE, 2, 2)


def test_knn_sorted_matches_full_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 129))
        cloud = PointCloud(rng.normal(size=(n, 3)))
        i = int(rng.integers(n))
        count = int(rng.integers(1, n))
        d = [(float(np.sum((cloud.positions[j] - cloud.positions[i]) ** 2)), j)
             for j in range(n) if j != i]
        expected = [j for _, j in sorted(d)[:count]]
        assert knn_sorted(cloud, i, count).tolist() == expected


def test_dilated_select_examples():
    assert dilated_select([7, 3, 9, 1, 5, 2], 3, 2).tolist() == [3, 1, 2]
    assert dilated_select([4, 5, 6, 7], 3, 1).tolist() == [4, 5, 6]
    with pytest.raises(InsufficientPointsError):
        dilated_select([1, 2, 3], 2, 2)


def test_dilated_select_matches_rank_arithmetic():
    rng = np.random.default_rng(1)
    for _ in range(100):
        k, d = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        seq = rng.permutation(k * d + int(rng.integers(0, 5)))
        expected = [int(seq[r * d - 1]) for r in range(1, k + 1)]
        assert dilated_select(seq, k, d).tolist() == expected


def test_graph_matches_brute_force_on_random_and_lattice_clouds():
    rng = np.random.default_rng(2)
    for trial in range(60):
        k, d = int(rng.integers(1, 9)), int(rng.integers(1, 4))
        n = int(rng.integers(k * d + 1, 97))
        pos = rng.integers(0, 3, (n, 3)).astype(float) if trial % 3 == 0 else rng.normal(size=(n, 3))
        cloud = PointCloud(pos)
        assert np.array_equal(build_dilated_knn(cloud, k, d).neighbors,
                              brute_force_knn(cloud, k, d).neighbors)


def test_d1_equals_plain_knn_and_rows_are_valid():
    rng = np.random.default_rng(3)
    cloud = PointCloud(rng.normal(size=(40, 3)))
    g = build_dilated_knn(cloud, 6, 1)
    for i in range(40):
        assert g.neighbors[i].tolist() == knn_sorted(cloud, i, 6).tolist()
    g = build_dilated_knn(cloud, 6, 3)
    for i, row in enumerate(g.neighbors):
        assert i not in row
        assert len(set(row.tolist())) == 6
        assert row.min() >= 0 and row.max() < 40


def test_construction_is_permutation_equivariant_without_ties():
    rng = np.random.default_rng(4)
    for _ in range(10):
        cloud = tie_free_cloud(30, rng)
        p = PermutationMatrix.random(30, rng)
        g = build_dilated_knn(cloud, 4, 2).neighbors
        gp = build_dilated_knn(permute_cloud(p, cloud), 4, 2).neighbors
        # node perm[i] of the permuted cloud is node i of the original
        assert np.array_equal(gp[p.perm], p.perm[g])


def test_gather_examples():
    nodes = np.arange(12.0).reshape(4, 3)
    g = DilatedKnnGraph(3, 1, np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]]))
    assert np.array_equal(gather_neighbors(nodes, g, 0), nodes[[1, 2, 3]])
    same = DilatedKnnGraph(3, 1, np.full((4, 3), 2))
    assert np.array_equal(gather_neighbors(nodes, same, 1), np.tile(nodes[2], (3, 1)))
    stack = gather_all(nodes, g)
    for i in range(4):
        for k in range(3):
            for c in range(3):
                assert stack[i, k, c] == nodes[g.neighbors[i, k], c]


def test_gather_rejects_mismatched_graph():
    nodes = np.zeros((3, 2))
    with pytest.raises(GraphMismatchError):
        gather_neighbors(nodes, DilatedKnnGraph(1, 1, np.array([[1], [0], [5]])), 0)
    with pytest.raises(GraphMismatchError):
        gather_neighbors(nodes, DilatedKnnGraph(1, 1, np.array([[1], [0]])), 0)


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), labels=np.array([0, -1]))
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    c = PointCloud(np.zeros((2, 3)), np.ones((2, 3)), np.array([0, 1]))
    assert c.features().shape == (2, 6)
