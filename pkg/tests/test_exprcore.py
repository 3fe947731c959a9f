import math

import numpy as np
import pytest

from netlyap import exprcore as ex

from conftest import point_in_box, random_box, random_expr


def test_eval_scalar_examples():
    x = ex.var(0)
    assert ex.eval_scalar(ex.sin(x), [0.0]) == 0.0
    assert ex.eval_scalar(ex.tanh(x) * x, [0.0]) == 0.0
    got = ex.eval_scalar(ex.square(x) + ex.cos(x), [1.0])
    assert got == pytest.approx(1.0 + math.cos(1.0), rel=1e-15)


def test_eval_scalar_batched_matches_loop():
    rng = np.random.default_rng(0)
    e = random_expr(rng, 3, depth=4)
    pts = rng.uniform(-2, 2, size=(50, 3))
    batched = ex.eval_scalar(e, pts)
    single = np.array([ex.eval_scalar(e, p) for p in pts])
    assert np.allclose(batched, single, rtol=0, atol=0)


def test_division_by_zero_raises():
    e = ex.Div(ex.var(0), ex.var(1))
    with pytest.raises(ex.DivisionByZero):
        ex.eval_scalar(e, [1.0, 0.0])
    with pytest.raises(ex.DivisionByZero):
        ex.eval_interval(e, [ex.Interval(0, 1), ex.Interval(-1, 1)])
    with pytest.raises(ex.DivisionByZero):
        ex.eval_dual(e, np.array([1.0, 0.0]))


def test_eval_interval_examples():
    x = ex.var(0)
    sq = ex.eval_interval(ex.square(x), [ex.Interval(-1, 2)])
    assert sq.lo == pytest.approx(0.0, abs=1e-15)
    assert sq.hi == pytest.approx(4.0, rel=1e-12)
    sn = ex.eval_interval(ex.sin(x), [ex.Interval(0, math.pi)])
    assert sn.hi == pytest.approx(1.0, abs=1e-15)
    assert sn.lo == pytest.approx(0.0, abs=1e-12)
    # x*x - x over [0,1]: true range [-0.25, 0]; naive product arithmetic
    # gives [-1, 1], so assert enclosure rather than tightness
    rng = ex.eval_interval(ex.Mul(x, x) - x, [ex.Interval(0, 1)])
    assert rng.lo <= -0.25 and rng.hi >= 0.0


def test_interval_soundness_property():
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        n = int(rng.integers(1, 4))
        e = random_expr(rng, n, depth=3)
        box = random_box(rng, n)
        p = point_in_box(rng, box)
        enc = ex.eval_interval_boxes(e, box)
        val = ex.eval_scalar(e, p)
        assert enc[0] <= val <= enc[1]


def test_point_box_width_collapses():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(1, 4))
        e = random_expr(rng, n, depth=3)
        p = rng.uniform(-2, 2, size=n)
        box = np.stack([p, p], axis=-1)
        enc = ex.eval_interval_boxes(e, box)
        scale = max(1.0, abs(enc[0]), abs(enc[1]))
        assert (enc[1] - enc[0]) / scale < 1e-12


def test_eval_dual_examples():
    x, y = ex.var(0), ex.var(1)
    d = ex.eval_dual(ex.tanh(x), [0.0])
    assert d.value == 0.0 and d.partials[0] == pytest.approx(1.0)
    d = ex.eval_dual(ex.square(x), [3.0])
    assert d.value == 9.0 and d.partials[0] == pytest.approx(6.0)
    e = ex.sin(x) * ex.cos(y)
    d = ex.eval_dual(e, [0.3, 0.7])
    h = 1e-5
    fd = []
    for i in range(2):
        lo = np.array([0.3, 0.7]); lo[i] -= h
        hi = np.array([0.3, 0.7]); hi[i] += h
        fd.append((ex.eval_scalar(e, hi) - ex.eval_scalar(e, lo)) / (2 * h))
    assert np.allclose(d.partials, fd, rtol=1e-6)


def test_gradient_matches_finite_differences_property():
    rng = np.random.default_rng(3)
    h = 1e-5
    for _ in range(1000):
        n = int(rng.integers(1, 4))
        e = random_expr(rng, n, depth=3)
        p = rng.uniform(-1.5, 1.5, size=n)
        d = ex.eval_dual(e, p)
        fd = np.empty(n)
        for i in range(n):
            lo, hi = p.copy(), p.copy()
            lo[i] -= h
            hi[i] += h
            fd[i] = (ex.eval_scalar(e, hi) - ex.eval_scalar(e, lo)) / (2 * h)
        scale = max(1.0, np.max(np.abs(fd)))
        assert np.max(np.abs(d.partials - fd)) / scale < 1e-5


def test_subst_rebuilds_and_preserves_untouched():
    x, y = ex.var(0), ex.var(1)
    e = ex.sin(x) + ex.square(y)
    out = ex.subst(e, {0: ex.const(0.25)})
    assert ex.eval_scalar(out, [99.0, 2.0]) == pytest.approx(math.sin(0.25) + 4.0)
    same = ex.subst(e, {7: ex.const(1.0)})
    assert same is e


def test_vars_used_and_max_index():
    e = ex.sin(ex.var(2)) * ex.var(0)
    assert ex.vars_used(e) == frozenset((0, 2))
    assert ex.max_var_index(e) == 2
    assert ex.max_var_index(ex.const(3.0)) == -1


def test_trig_domain_asserted():
    e = ex.sin(ex.var(0))
    with pytest.raises(ValueError):
        ex.eval_interval(e, [ex.Interval(0.0, 11.0 * math.pi)])


def test_empty_interval_sentinel():
    a = ex.Interval(0, 1)
    b = ex.Interval(2, 3)
    inter = a.intersect(b)
    assert inter.is_empty
    assert not inter.contains(2.5)
    assert inter is ex.EMPTY_INTERVAL
    with pytest.raises(ValueError):
        ex.Interval(2.0, 1.0)


def test_operator_overloads_and_dot():
    x = ex.var(0)
    e = 2.0 * x + 1.0 - x / 2.0
    assert ex.eval_scalar(e, [4.0]) == pytest.approx(2 * 4 + 1 - 2)
    zero = ex.dot([0.0, 0.0], [x, x])
    assert isinstance(zero, ex.Constant)
    s = ex.sum_squares([x, ex.const(3.0)])
    assert ex.eval_scalar(s, [2.0]) == pytest.approx(13.0)
