import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from splatlm import dual as dl
from splatlm.dual import Dual

val = st.floats(0.2, 3.0)
EPS = 1e-6


def central(f, x):
    return (f(x + EPS) - f(x - EPS)) / (2 * EPS)


def check(f_dual, f_plain, x):
    out = f_dual(Dual(x, 1.0))
    assert np.isclose(out.real, f_plain(x), rtol=1e-14)
    assert np.isclose(out.prime, central(f_plain, x), rtol=1e-6, atol=1e-8)


@given(val, val)
def test_binary_ops(x, c):
    check(lambda d: d + c, lambda t: t + c, x)
    check(lambda d: c + d, lambda t: c + t, x)
    check(lambda d: d - c, lambda t: t - c, x)
    check(lambda d: c - d, lambda t: c - t, x)
    check(lambda d: d * c, lambda t: t * c, x)
    check(lambda d: c * d, lambda t: c * t, x)
    check(lambda d: d / c, lambda t: t / c, x)
    check(lambda d: c / d, lambda t: c / t, x)


@given(val)
def test_dual_dual_ops(x):
    check(lambda d: d * d, lambda t: t * t, x)
    check(lambda d: d / (d + 1.0), lambda t: t / (t + 1.0), x)
    check(lambda d: (d + 2.0) * (d - 0.5), lambda t: (t + 2.0) * (t - 0.5), x)
    check(lambda d: -d, lambda t: -t, x)


@given(val)
def test_elementary_functions(x):
    check(dl.exp, np.exp, x)
    check(dl.log, np.log, x)
    check(dl.sqrt, np.sqrt, x)
    check(lambda d: d**2, lambda t: t**2, x)
    check(lambda d: d**3, lambda t: t**3, x)
    check(lambda d: d**-1.5, lambda t: t**-1.5, x)


def test_product_rule():
    a, b = Dual(2.0, 3.0), Dual(5.0, 7.0)
    assert (a * b).prime == 2.0 * 7.0 + 3.0 * 5.0


def test_array_duals_and_ndarray_operands():
    x = np.array([0.5, 1.0, 2.0])
    d = Dual(x, np.ones(3))
    out = np.array([2.0, 3.0, 4.0]) * d
    assert isinstance(out, Dual)
    assert np.array_equal(out.prime, [2.0, 3.0, 4.0])
    out = np.float64(2.0) - d
    assert isinstance(out, Dual)
    assert np.array_equal(out.prime, -np.ones(3))


def test_where_and_stack():
    d = Dual(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
    w = dl.where(np.array([True, False]), d, 0.0)
    assert np.array_equal(w.real, [1.0, 0.0])
    assert np.array_equal(w.prime, [3.0, 0.0])
    s = dl.stack([d, np.array([5.0, 6.0])])
    assert s.real.shape == (2, 2)
    assert np.array_equal(s.prime[:, 1], [0.0, 0.0])


def test_scalar_prime_broadcasts():
    d = Dual(np.ones(4), 0.0)
    assert dl.tangent(d).shape == (4,)
    assert dl.tangent(np.ones(3)).tolist() == [0.0, 0.0, 0.0]
