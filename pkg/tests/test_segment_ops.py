import numpy as np
import pytest

from sparsedet.errors import ContractViolationError
from sparsedet.segment_ops import (
    NONE_ID,
    broadcast_backward,
    dynamic_broadcast,
    dynamic_pool,
    group_sizes,
    pool_backward,
)

from oracles import broadcast_oracle, central_fd, pool_oracle


def rand_instance(rng, n_max=1000, m_max=50, c_max=16, with_none=True):
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    c = int(rng.integers(1, c_max + 1))
    lo = NONE_ID if with_none else 0
    ids = rng.integers(lo, m, size=n)
    f = rng.standard_normal((n, c))
    return f, ids, m


def test_pool_max_two_groups():
    f = np.array([[1.0], [3.0], [5.0]])
    i = np.array([0, 0, 1])
    assert np.array_equal(dynamic_pool(f, i, 2, "max"), [[3.0], [5.0]])


def test_pool_avg_two_groups():
    f = np.array([[1.0], [3.0], [5.0]])
    i = np.array([0, 0, 1])
    assert np.array_equal(dynamic_pool(f, i, 2, "avg"), [[2.0], [5.0]])


def test_pool_matches_loop_oracle():
    rng = np.random.default_rng(7)
    for _ in range(25):
        f, ids, m = rand_instance(rng, n_max=50 * 4, m_max=7, c_max=4)
        for reduce in ("max", "sum", "avg"):
            got = dynamic_pool(f, ids, m, reduce)
            want = pool_oracle(f, ids, m, reduce)
            if reduce == "max":
                assert np.array_equal(got, want)
            else:
                np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_empty_group_is_zero():
    f = np.array([[4.0, -2.0]])
    out = dynamic_pool(f, np.array([2]), 4, "max")
    assert np.array_equal(out[[0, 1, 3]], np.zeros((3, 2)))
    assert np.array_equal(out[2], f[0])


def test_none_rows_contribute_nothing():
    f = np.array([[1.0], [100.0], [3.0]])
    ids = np.array([0, NONE_ID, 0])
    assert dynamic_pool(f, ids, 1, "max")[0, 0] == 3.0
    assert dynamic_pool(f, ids, 1, "sum")[0, 0] == 4.0


def test_broadcast_trivial():
    g = np.array([[2.0], [5.0]])
    assert np.array_equal(dynamic_broadcast(g, np.array([0, 0, 1])), [[2.0], [2.0], [5.0]])
    g1 = np.array([[7.0]])
    assert np.array_equal(dynamic_broadcast(g1, np.array([0, 0, 0])), [[7.0]] * 3)


def test_broadcast_matches_oracle_and_zeroes_none():
    rng = np.random.default_rng(3)
    for _ in range(10):
        _, ids, m = rand_instance(rng, n_max=200, m_max=9, c_max=5)
        g = rng.standard_normal((m, 5))
        got = dynamic_broadcast(g[:, :5], ids)
        assert np.array_equal(got, broadcast_oracle(g[:, :5], ids))
        assert np.all(got[ids == NONE_ID] == 0.0)


def test_permutation_equivariance():
    rng = np.random.default_rng(11)
    f, ids, m = rand_instance(rng, n_max=300, m_max=10, c_max=6)
    perm = rng.permutation(f.shape[0])
    for reduce in ("max", "sum", "avg"):
        a = dynamic_pool(f, ids, m, reduce)
        b = dynamic_pool(f[perm], ids[perm], m, reduce)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_roundtrip_constant_within_group():
    rng = np.random.default_rng(5)
    _, ids, m = rand_instance(rng, n_max=100, m_max=6, c_max=3)
    g = rng.standard_normal((m, 3))
    f = dynamic_broadcast(g, ids)
    back = dynamic_broadcast(dynamic_pool(f, ids, m, "avg"), ids)
    valid = ids != NONE_ID
    np.testing.assert_allclose(back[valid], f[valid], rtol=0, atol=1e-12)


def test_backward_avg_equal_split():
    f = np.zeros((2, 1))
    grad = pool_backward(f, np.array([0, 0]), 1, "avg", np.array([[6.0]]))
    assert np.array_equal(grad, [[3.0], [3.0]])


def test_backward_max_argmax_routing():
    f = np.array([[1.0], [3.0]])
    grad = pool_backward(f, np.array([0, 0]), 1, "max", np.array([[2.0]]))
    assert np.array_equal(grad, [[0.0], [2.0]])


def test_backward_max_tie_routes_to_first_row():
    f = np.array([[3.0], [3.0], [3.0]])
    grad = pool_backward(f, np.array([0, 0, 0]), 1, "max", np.array([[1.0]]))
    assert np.array_equal(grad, [[1.0], [0.0], [0.0]])


@pytest.mark.parametrize("reduce", ["max", "sum", "avg"])
def test_backward_matches_finite_differences(reduce):
    rng = np.random.default_rng(17)
    f = rng.standard_normal((12, 3))
    ids = rng.integers(NONE_ID, 4, size=12)
    u = rng.standard_normal((4, 3))

    def scalar(x):
        return float(np.sum(dynamic_pool(x, ids, 4, reduce) * u))

    fd = central_fd(scalar, f.copy())
    an = pool_backward(f, ids, 4, reduce, u)
    np.testing.assert_allclose(an, fd, rtol=1e-5, atol=1e-8)


def test_adjoint_identity_linear_reductions():
    # <pool(f), u> == <f, pool_backward(u)> holds exactly for sum/avg
    rng = np.random.default_rng(23)
    f, ids, m = rand_instance(rng, n_max=120, m_max=8, c_max=4)
    u = rng.standard_normal((m, f.shape[1]))
    for reduce in ("sum", "avg"):
        lhs = float(np.sum(dynamic_pool(f, ids, m, reduce) * u))
        rhs = float(np.sum(f * pool_backward(f, ids, m, reduce, u)))
        assert abs(lhs - rhs) < 1e-10


def test_broadcast_backward_is_segment_sum():
    rng = np.random.default_rng(29)
    _, ids, m = rand_instance(rng, n_max=80, m_max=6, c_max=2)
    u = rng.standard_normal((ids.shape[0], 2))
    got = broadcast_backward(u, ids, m)
    np.testing.assert_allclose(got, pool_oracle(u, ids, m, "sum"), atol=1e-12)


def test_group_sizes():
    sizes = group_sizes(np.array([0, 0, 2, NONE_ID]), 3)
    assert np.array_equal(sizes, [2, 0, 1])


def test_contract_violations():
    f = np.zeros((3, 2))
    with pytest.raises(ContractViolationError):
        dynamic_pool(f, np.array([0, 0]), 1, "max")  # length mismatch
    with pytest.raises(ContractViolationError):
        dynamic_pool(f, np.array([0, 0, 5]), 2, "max")  # id out of range
    with pytest.raises(ContractViolationError):
        dynamic_pool(f, np.array([0, 0, 0]), 1, "median")  # unknown reduction
    with pytest.raises(ContractViolationError):
        dynamic_broadcast(np.zeros((2, 2)), np.array([0, 2]))
    with pytest.raises(ContractViolationError):
        pool_backward(f, np.array([0, 0, 0]), 1, "sum", np.zeros((2, 2)))
