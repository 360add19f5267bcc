import numpy as np

from lightforge.rng import hash_u64, uniform


def test_same_keys_same_values():
    a = uniform(7, 1, np.arange(100), 3)
    b = uniform(7, 1, np.arange(100), 3)
    assert np.array_equal(a, b)


def test_different_keys_decorrelate():
    a = uniform(7, 1, np.arange(100), 3)
    b = uniform(7, 1, np.arange(100), 4)
    c = uniform(8, 1, np.arange(100), 3)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_uniform_range_and_moments():
    u = uniform(0, np.arange(200_000))
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.005
    assert abs(u.var() - 1.0 / 12.0) < 0.005


def test_broadcasting_matches_pointwise():
    rows = np.arange(5)[:, None]
    cols = np.arange(7)[None, :]
    grid = uniform(3, rows, cols)
    assert grid.shape == (5, 7)
    for i in range(5):
        for j in range(7):
            assert grid[i, j] == uniform(3, i, j)


def test_hash_is_stable_across_dtypes():
    assert hash_u64(1, 2, 3) == hash_u64(np.uint64(1), np.int64(2), 3)


def test_order_of_keys_matters():
    assert hash_u64(0, 1, 2) != hash_u64(0, 2, 1)
