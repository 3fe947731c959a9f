"""Symbolic scalar expressions with scalar, interval, and forward-mode dual evaluation.

Expressions are immutable trees (sharing subtrees freely, so a graph in
practice) over dense variable indices.  Three evaluators walk the graph with
per-call memoization:

* ``eval_scalar``   -- plain floating point, vectorized over a batch of points;
* ``eval_interval`` -- sound enclosures with one-ulp outward rounding per
  operation, vectorized over a batch of boxes;
* ``eval_dual``     -- forward-mode value + gradient.

``Square`` is a dedicated node so self-products get the exact interval image;
``Sin``/``Cos`` enclosures enumerate the critical points k*pi/2 inside the
argument range (arguments must stay within +-10*pi).
"""

from __future__ import annotations

import math

import numpy as np

SIN_COS_ARG_LIMIT = 10.0 * math.pi


class DivisionByZero(ZeroDivisionError):
    """A Div denominator was zero (scalar/dual) or its interval contained zero."""


def _widen(lo, hi):
    # one-ulp outward rounding after every interval operation
    return np.nextafter(lo, -np.inf), np.nextafter(hi, np.inf)


def _col(v):
    # lift a batched value (B,) to (B,1) so it broadcasts against partials (B,n)
    return v[..., None] if isinstance(v, np.ndarray) and v.ndim > 0 else v


class Expr:
    """Base class for expression nodes. Immutable; safe for concurrent reads."""

    __slots__ = ()

    def __add__(self, other):
        return Add(self, as_expr(other))

    def __radd__(self, other):
        return Add(as_expr(other), self)

    def __sub__(self, other):
        return Sub(self, as_expr(other))

    def __rsub__(self, other):
        return Sub(as_expr(other), self)

    def __mul__(self, other):
        return Mul(self, as_expr(other))

    def __rmul__(self, other):
        return Mul(as_expr(other), self)

    def __truediv__(self, other):
        return Div(self, as_expr(other))

    def __rtruediv__(self, other):
        return Div(as_expr(other), self)

    def __neg__(self):
        return Neg(self)


class Constant(Expr):
    __slots__ = ("value",)

    def __init__(self, value: float):
        object.__setattr__(self, "value", float(value))

    def __setattr__(self, *a):
        raise AttributeError("Expr nodes are immutable")

    def __repr__(self):
        return f"Constant({self.value!r})"

    def _scalar(self, ev, pt):
        return self.value

    def _interval(self, ev, box):
        v = self.value
        shape = box.shape[:-2]
        return np.broadcast_to(v, shape), np.broadcast_to(v, shape)

    def _dual(self, ev, pt):
        return self.value, 0.0


class Var(Expr):
    __slots__ = ("index",)

    def __init__(self, index: int):
        if index < 0:
            raise ValueError("variable index must be nonnegative")
        object.__setattr__(self, "index", int(index))

    def __setattr__(self, *a):
        raise AttributeError("Expr nodes are immutable")

    def __repr__(self):
        return f"Var({self.index})"

    def _scalar(self, ev, pt):
        return pt[..., self.index]

    def _interval(self, ev, box):
        return box[..., self.index, 0], box[..., self.index, 1]

    def _dual(self, ev, pt):
        n = pt.shape[-1]
        parts = np.zeros(n)
        parts[self.index] = 1.0
        return pt[..., self.index], parts


class _Binary(Expr):
    __slots__ = ("a", "b")

    def __init__(self, a: Expr, b: Expr):
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    def __setattr__(self, *a):
        raise AttributeError("Expr nodes are immutable")

    def __repr__(self):
        return f"{type(self).__name__}({self.a!r}, {self.b!r})"


class _Unary(Expr):
    __slots__ = ("a",)

    def __init__(self, a: Expr):
        object.__setattr__(self, "a", a)

    def __setattr__(self, *a):
        raise AttributeError("Expr nodes are immutable")

    def __repr__(self):
        return f"{type(self).__name__}({self.a!r})"


class Add(_Binary):
    __slots__ = ()

    def _scalar(self, ev, pt):
        return ev(self.a) + ev(self.b)

    def _interval(self, ev, box):
        alo, ahi = ev(self.a)
        blo, bhi = ev(self.b)
        return _widen(alo + blo, ahi + bhi)

    def _dual(self, ev, pt):
        va, pa = ev(self.a)
        vb, pb = ev(self.b)
        return va + vb, pa + pb


class Sub(_Binary):
    __slots__ = ()

    def _scalar(self, ev, pt):
        return ev(self.a) - ev(self.b)

    def _interval(self, ev, box):
        alo, ahi = ev(self.a)
        blo, bhi = ev(self.b)
        return _widen(alo - bhi, ahi - blo)

    def _dual(self, ev, pt):
        va, pa = ev(self.a)
        vb, pb = ev(self.b)
        return va - vb, pa - pb


class Mul(_Binary):
    __slots__ = ()

    def _scalar(self, ev, pt):
        return ev(self.a) * ev(self.b)

    def _interval(self, ev, box):
        alo, ahi = ev(self.a)
        blo, bhi = ev(self.b)
        p1, p2, p3, p4 = alo * blo, alo * bhi, ahi * blo, ahi * bhi
        lo = np.minimum(np.minimum(p1, p2), np.minimum(p3, p4))
        hi = np.maximum(np.maximum(p1, p2), np.maximum(p3, p4))
        return _widen(lo, hi)

    def _dual(self, ev, pt):
        va, pa = ev(self.a)
        vb, pb = ev(self.b)
        return va * vb, _col(va) * pb + _col(vb) * pa


class Div(_Binary):
    __slots__ = ()

    def _scalar(self, ev, pt):
        va, vb = ev(self.a), ev(self.b)
        if np.any(vb == 0.0):
            raise DivisionByZero("division by zero in scalar evaluation")
        return va / vb

    def _interval(self, ev, box):
        alo, ahi = ev(self.a)
        blo, bhi = ev(self.b)
        if np.any((blo <= 0.0) & (bhi >= 0.0)):
            raise DivisionByZero("denominator interval contains zero")
        p1, p2, p3, p4 = alo / blo, alo / bhi, ahi / blo, ahi / bhi
        lo = np.minimum(np.minimum(p1, p2), np.minimum(p3, p4))
        hi = np.maximum(np.maximum(p1, p2), np.maximum(p3, p4))
        return _widen(lo, hi)

    def _dual(self, ev, pt):
        va, pa = ev(self.a)
        vb, pb = ev(self.b)
        if np.any(vb == 0.0):
            raise DivisionByZero("division by zero in dual evaluation")
        val = va / vb
        return val, (pa - _col(val) * pb) / _col(vb)


class Neg(_Unary):
    __slots__ = ()

    def _scalar(self, ev, pt):
        return -ev(self.a)

    def _interval(self, ev, box):
        lo, hi = ev(self.a)
        return -hi, -lo

    def _dual(self, ev, pt):
        v, p = ev(self.a)
        return -v, -p


class Square(_Unary):
    __slots__ = ()

    def _scalar(self, ev, pt):
        v = ev(self.a)
        return v * v

    def _interval(self, ev, box):
        lo, hi = ev(self.a)
        amax = np.maximum(np.abs(lo), np.abs(hi))
        amin = np.minimum(np.abs(lo), np.abs(hi))
        straddles = (lo <= 0.0) & (hi >= 0.0)
        out_lo = np.where(straddles, 0.0, amin * amin)
        out_hi = amax * amax
        lo2, hi2 = _widen(out_lo, out_hi)
        return np.maximum(lo2, 0.0), hi2

    def _dual(self, ev, pt):
        v, p = ev(self.a)
        return v * v, 2.0 * _col(v) * p


def _check_trig_domain(lo, hi):
    if np.any(np.abs(lo) > SIN_COS_ARG_LIMIT) or np.any(np.abs(hi) > SIN_COS_ARG_LIMIT):
        raise ValueError("sin/cos interval argument outside +-10*pi")


def _crit_inside(lo, hi, offset):
    # is some offset + 2*k*pi inside [lo, hi]?
    two_pi = 2.0 * math.pi
    return np.floor((hi - offset) / two_pi) >= np.ceil((lo - offset) / two_pi)


class Sin(_Unary):
    __slots__ = ()

    def _scalar(self, ev, pt):
        return np.sin(ev(self.a))

    def _interval(self, ev, box):
        lo, hi = ev(self.a)
        _check_trig_domain(lo, hi)
        slo, shi = np.sin(lo), np.sin(hi)
        out_lo = np.minimum(slo, shi)
        out_hi = np.maximum(slo, shi)
        out_hi = np.where(_crit_inside(lo, hi, 0.5 * math.pi), 1.0, out_hi)
        out_lo = np.where(_crit_inside(lo, hi, -0.5 * math.pi), -1.0, out_lo)
        lo2, hi2 = _widen(out_lo, out_hi)
        return np.maximum(lo2, -1.0), np.minimum(hi2, 1.0)

    def _dual(self, ev, pt):
        v, p = ev(self.a)
        return np.sin(v), _col(np.cos(v)) * p


class Cos(_Unary):
    __slots__ = ()

    def _scalar(self, ev, pt):
        return np.cos(ev(self.a))

    def _interval(self, ev, box):
        lo, hi = ev(self.a)
        _check_trig_domain(lo, hi)
        clo, chi = np.cos(lo), np.cos(hi)
        out_lo = np.minimum(clo, chi)
        out_hi = np.maximum(clo, chi)
        out_hi = np.where(_crit_inside(lo, hi, 0.0), 1.0, out_hi)
        out_lo = np.where(_crit_inside(lo, hi, math.pi), -1.0, out_lo)
        lo2, hi2 = _widen(out_lo, out_hi)
        return np.maximum(lo2, -1.0), np.minimum(hi2, 1.0)

    def _dual(self, ev, pt):
        v, p = ev(self.a)
        return np.cos(v), _col(-np.sin(v)) * p


class Tanh(_Unary):
    __slots__ = ()

    def _scalar(self, ev, pt):
        return np.tanh(ev(self.a))

    def _interval(self, ev, box):
        lo, hi = ev(self.a)
        lo2, hi2 = _widen(np.tanh(lo), np.tanh(hi))
        return np.maximum(lo2, -1.0), np.minimum(hi2, 1.0)

    def _dual(self, ev, pt):
        v, p = ev(self.a)
        t = np.tanh(v)
        return t, _col(1.0 - t * t) * p


def as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    return Constant(x)


def const(value: float) -> Constant:
    return Constant(value)


def var(index: int) -> Var:
    return Var(index)


def sin(e) -> Sin:
    return Sin(as_expr(e))


def cos(e) -> Cos:
    return Cos(as_expr(e))


def tanh(e) -> Tanh:
    return Tanh(as_expr(e))


def square(e) -> Square:
    return Square(as_expr(e))


def dot(coeffs, exprs) -> Expr:
    """Sum of coeff*expr terms, skipping exact-zero coefficients."""
    acc = None
    for c, e in zip(coeffs, exprs):
        c = float(c)
        if c == 0.0:
            continue
        term = e if c == 1.0 else Mul(Constant(c), e)
        acc = term if acc is None else Add(acc, term)
    return Constant(0.0) if acc is None else acc


def sum_squares(exprs) -> Expr:
    acc = None
    for e in exprs:
        term = Square(e)
        acc = term if acc is None else Add(acc, term)
    return Constant(0.0) if acc is None else acc


def _walk(e: Expr, visit, cache):
    r = cache.get(id(e))
    if r is None:
        r = visit(e)
        cache[id(e)] = r
    return r


def max_var_index(e: Expr) -> int:
    """Largest variable index used, or -1 for constant expressions."""
    cache: dict[int, int] = {}

    def visit(node):
        if isinstance(node, Var):
            return node.index
        if isinstance(node, Constant):
            return -1
        if isinstance(node, _Binary):
            return max(_walk(node.a, visit, cache), _walk(node.b, visit, cache))
        return _walk(node.a, visit, cache)

    return _walk(e, visit, cache)


def vars_used(e: Expr) -> frozenset[int]:
    cache: dict[int, frozenset] = {}

    def visit(node):
        if isinstance(node, Var):
            return frozenset((node.index,))
        if isinstance(node, Constant):
            return frozenset()
        if isinstance(node, _Binary):
            return _walk(node.a, visit, cache) | _walk(node.b, visit, cache)
        return _walk(node.a, visit, cache)

    return _walk(e, visit, cache)


def subst(e: Expr, mapping: dict[int, Expr]) -> Expr:
    """Rebuild e with Var(i) replaced by mapping[i]; unmapped vars are kept."""
    cache: dict[int, Expr] = {}

    def visit(node):
        if isinstance(node, Var):
            return mapping.get(node.index, node)
        if isinstance(node, Constant):
            return node
        if isinstance(node, _Binary):
            a = _walk(node.a, visit, cache)
            b = _walk(node.b, visit, cache)
            if a is node.a and b is node.b:
                return node
            return type(node)(a, b)
        a = _walk(node.a, visit, cache)
        return node if a is node.a else type(node)(a)

    return _walk(e, visit, cache)


def count_nodes(e: Expr) -> int:
    seen: set[int] = set()
    stack = [e]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if isinstance(node, _Binary):
            stack.extend((node.a, node.b))
        elif isinstance(node, _Unary):
            stack.append(node.a)
    return len(seen)


class Interval:
    """Closed real interval [lo, hi]; the empty interval is a shared sentinel."""

    __slots__ = ("lo", "hi")

    def __init__(self, lo: float, hi: float):
        lo, hi = float(lo), float(hi)
        if lo > hi:
            raise ValueError(f"invalid interval [{lo}, {hi}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def __setattr__(self, *a):
        raise AttributeError("Interval is immutable")

    @property
    def is_empty(self) -> bool:
        return False

    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi

    def intersect(self, other: "Interval") -> "Interval":
        if self.is_empty or other.is_empty:
            return EMPTY_INTERVAL
        lo = max(self.lo, other.lo)
        hi = min(self.hi, other.hi)
        return EMPTY_INTERVAL if lo > hi else Interval(lo, hi)

    def __eq__(self, other):
        return (
            isinstance(other, Interval)
            and not other.is_empty
            and self.lo == other.lo
            and self.hi == other.hi
        )

    def __hash__(self):
        return hash((self.lo, self.hi))

    def __repr__(self):
        return f"Interval({self.lo!r}, {self.hi!r})"


class _EmptyInterval(Interval):
    __slots__ = ()

    def __init__(self):
        object.__setattr__(self, "lo", math.nan)
        object.__setattr__(self, "hi", math.nan)

    @property
    def is_empty(self) -> bool:
        return True

    def width(self) -> float:
        return 0.0

    def contains(self, x: float) -> bool:
        return False

    def __eq__(self, other):
        return isinstance(other, _EmptyInterval)

    def __hash__(self):
        return hash("empty-interval")

    def __repr__(self):
        return "Interval.EMPTY"


EMPTY_INTERVAL = _EmptyInterval()


class DualVec:
    """Value plus gradient with respect to all expression variables."""

    __slots__ = ("value", "partials")

    def __init__(self, value: float, partials: np.ndarray):
        self.value = float(value)
        self.partials = np.asarray(partials, dtype=float)

    def __repr__(self):
        return f"DualVec({self.value!r}, {self.partials!r})"


def _run(e: Expr, method: str, arg):
    cache = {}

    def ev(node):
        r = cache.get(id(node))
        if r is None:
            r = getattr(node, method)(ev, arg)
            cache[id(node)] = r
        return r

    return ev(e)


def eval_scalar(e: Expr, point) -> float | np.ndarray:
    """Evaluate at a point (n,) -> float, or a batch (B, n) -> (B,)."""
    pt = np.asarray(point, dtype=float)
    if pt.ndim == 0:
        pt = pt[None]
    need = max_var_index(e)
    if pt.shape[-1] < need + 1:
        raise ValueError(f"point has {pt.shape[-1]} coords, expression uses index {need}")
    out = _run(e, "_scalar", pt)
    if pt.ndim == 1:
        return float(out)
    return np.array(np.broadcast_to(out, pt.shape[:-1]), dtype=float)


def eval_interval_boxes(e: Expr, boxes: np.ndarray) -> np.ndarray:
    """Enclosures over a batch of boxes (B, n, 2) -> (B, 2) [lo, hi] columns."""
    boxes = np.asarray(boxes, dtype=float)
    lo, hi = _run(e, "_interval", boxes)
    out = np.empty(boxes.shape[:-2] + (2,))
    out[..., 0] = lo
    out[..., 1] = hi
    return out


def eval_interval(e: Expr, box) -> Interval:
    """Sound enclosure of e over a box given as a sequence of Interval (or (n,2))."""
    if len(box) > 0 and isinstance(box[0], Interval):
        if any(b.is_empty for b in box):
            return EMPTY_INTERVAL
        arr = np.array([[b.lo, b.hi] for b in box], dtype=float)
    else:
        arr = np.asarray(box, dtype=float)
    need = max_var_index(e)
    if arr.shape[0] < need + 1:
        raise ValueError(f"box covers {arr.shape[0]} vars, expression uses index {need}")
    res = eval_interval_boxes(e, arr)
    return Interval(res[0], res[1])


def eval_dual(e: Expr, point) -> DualVec:
    """Forward-mode evaluation: value and gradient w.r.t. all point coordinates."""
    pt = np.asarray(point, dtype=float)
    if pt.ndim != 1:
        raise ValueError("eval_dual expects a single point")
    need = max_var_index(e)
    if pt.shape[0] < need + 1:
        raise ValueError(f"point has {pt.shape[0]} coords, expression uses index {need}")
    val, parts = _run(e, "_dual", pt)
    parts = np.broadcast_to(np.asarray(parts, dtype=float), pt.shape)
    return DualVec(float(val), np.array(parts))


def eval_dual_batch(e: Expr, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched duals: (B, n) points -> values (B,), partials (B, n)."""
    pts = np.asarray(points, dtype=float)
    val, parts = _run(e, "_dual", pts)
    vals = np.array(np.broadcast_to(val, pts.shape[:-1]), dtype=float)
    parts = np.array(np.broadcast_to(parts, pts.shape), dtype=float)
    return vals, parts
