"""Counterexample search for dissipativity certificates by interval branch
and bound, with delta-sat semantics.

The search decides the first-order condition "V > 0 and grad V . f - r < 0
on the annulus" soundly: a `verified` outcome means interval enclosures
excluded every violation over the whole region.  A counterexample is either
provable (the violation holds on an entire box inside the annulus) or a
delta-weakened witness: a box thinner than delta on which the violation could
not be excluded, whose center is returned and may be spurious within delta.

Boxes are processed in deterministic first-in-first-out order with the
interval evaluations vectorized over whole batches of boxes; bisection splits
the widest dimension relative to the initial box, ties to the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import exprcore as ex
from .models import SubsystemModel
from .storage_nn import StorageNet, SupplyRate, compile_exprs, supply_rate_expr

NONPOSITIVE_V = "nonpositive_V"
NONNEGATIVE_RESIDUAL = "nonnegative_residual"

_CHUNK = 16384


class BudgetExhausted(RuntimeError):
    """The box budget ran out before the search could decide the formula."""

    def __init__(self, boxes_processed: int):
        super().__init__(f"undecided after {boxes_processed} boxes")
        self.boxes_processed = boxes_processed


@dataclass(frozen=True)
class VerifDomain:
    """Annulus bounds on |x|^2 (and |u|^2) plus the per-coordinate search box.

    The input annulus defaults to the state annulus; the boxes default to
    [-sqrt(eps_u), sqrt(eps_u)] per coordinate unless explicit bounds are
    given as (d, 2) arrays.
    """

    eps_l: float
    eps_u: float
    eps_l_u: float | None = None
    eps_u_u: float | None = None
    x_bounds: np.ndarray | None = None
    u_bounds: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.eps_l < self.eps_u:
            raise ValueError("need 0 < eps_l < eps_u")
        if (self.eps_l_u is None) != (self.eps_u_u is None):
            raise ValueError("give both input-annulus bounds or neither")
        if self.eps_l_u is not None and not 0.0 < self.eps_l_u < self.eps_u_u:
            raise ValueError("need 0 < eps_l_u < eps_u_u")
        for label in ("x_bounds", "u_bounds"):
            val = getattr(self, label)
            if val is not None:
                object.__setattr__(self, label, np.asarray(val, dtype=float))

    @property
    def input_bounds(self) -> tuple[float, float]:
        if self.eps_l_u is None:
            return self.eps_l, self.eps_u
        return self.eps_l_u, self.eps_u_u

    def x_box(self, d_x: int) -> np.ndarray:
        if self.x_bounds is not None:
            return np.asarray(self.x_bounds, dtype=float).reshape(d_x, 2)
        r = np.sqrt(self.eps_u)
        return np.tile([-r, r], (d_x, 1))

    def u_box(self, d_u: int) -> np.ndarray:
        if self.u_bounds is not None:
            return np.asarray(self.u_bounds, dtype=float).reshape(d_u, 2)
        r = np.sqrt(self.input_bounds[1])
        return np.tile([-r, r], (d_u, 1))


@dataclass(frozen=True)
class FalsifyResult:
    """Outcome of a falsification run.

    verified=True means no violation exists anywhere in the region; otherwise
    point/condition/width describe the (possibly delta-spurious) witness.
    """

    verified: bool
    point: np.ndarray | None = None
    condition: str | None = None
    width: float | None = None
    boxes_processed: int = 0

    def split_point(self, model: SubsystemModel) -> tuple[np.ndarray, np.ndarray]:
        return self.point[: model.d_x], self.point[model.d_x : model.d_x + model.d_u]


def falsify_region(constraints, violations, box, delta: float, max_boxes: int) -> FalsifyResult:
    """Generic branch-and-bound core.

    constraints: [(expr, lo, hi)] region conjuncts; a box is pruned when the
        enclosure of expr misses [lo, hi], and lies inside the region when the
        enclosure is contained in it.
    violations: [(expr, sense, tag)] with sense 'le0' (violation: expr <= 0)
        or 'ge0' (violation: expr >= 0), checked in order.
    """
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    box = np.asarray(box, dtype=float)
    d = box.shape[0]
    init_width = np.maximum(box[:, 1] - box[:, 0], 1e-300)
    # bisection only needs to touch variables that can still decide some
    # violation; splitting the others cannot change those enclosures
    viol_vars = []
    for expr, _sense, _tag in violations:
        mask = np.zeros(d, dtype=bool)
        for idx in ex.vars_used(expr):
            if idx < d:
                mask[idx] = True
        viol_vars.append(mask)
    pending: list[np.ndarray] = [box[None]]
    processed = 0

    while pending:
        boxes = pending.pop(0)
        if boxes.shape[0] > _CHUNK:
            pending.insert(0, boxes[_CHUNK:])
            boxes = boxes[:_CHUNK]
        nb = boxes.shape[0]
        processed += nb
        if processed > max_boxes:
            raise BudgetExhausted(processed)

        outside = np.zeros(nb, dtype=bool)
        inside = np.ones(nb, dtype=bool)
        for expr, lo, hi in constraints:
            enc = ex.eval_interval_boxes(expr, boxes)
            outside |= (enc[:, 1] < lo) | (enc[:, 0] > hi)
            inside &= (enc[:, 0] >= lo) & (enc[:, 1] <= hi)

        excluded = np.ones(nb, dtype=bool)
        provable = []
        possible = []
        for expr, sense, _tag in violations:
            enc = ex.eval_interval_boxes(expr, boxes)
            if sense == "le0":
                ruled_out = enc[:, 0] > 0.0
                provable.append(enc[:, 1] <= 0.0)
            else:
                ruled_out = enc[:, 1] < 0.0
                provable.append(enc[:, 0] >= 0.0)
            excluded &= ruled_out
            possible.append(~ruled_out)

        alive = ~(outside | excluded)
        widths = (boxes[:, :, 1] - boxes[:, :, 0]).max(axis=1)

        proof_any = np.zeros(nb, dtype=bool)
        for pv in provable:
            proof_any |= pv
        proof_hit = alive & inside & proof_any
        if np.any(proof_hit):
            idx = int(np.argmax(proof_hit))
            for pv, (expr, sense, tag) in zip(provable, violations):
                if pv[idx]:
                    center = 0.5 * (boxes[idx, :, 0] + boxes[idx, :, 1])
                    return FalsifyResult(False, center, tag, float(widths[idx]), processed)

        small = alive & (widths < delta)
        if np.any(small):
            idx = int(np.argmax(small))
            tag = None
            for (expr, sense, vt) in violations:
                enc = ex.eval_interval_boxes(expr, boxes[idx : idx + 1])
                if sense == "le0" and enc[0, 0] <= 0.0:
                    tag = vt
                    break
                if sense == "ge0" and enc[0, 1] >= 0.0:
                    tag = vt
                    break
            center = 0.5 * (boxes[idx, :, 0] + boxes[idx, :, 1])
            return FalsifyResult(False, center, tag, float(widths[idx]), processed)

        sel = boxes[alive]
        if sel.shape[0]:
            relevant = np.zeros((nb, d), dtype=bool)
            for pv, mask in zip(possible, viol_vars):
                relevant |= pv[:, None] & mask[None, :]
            relevant = relevant[alive]
            side = sel[:, :, 1] - sel[:, :, 0]
            scaled = side / init_width
            # refine decision-relevant dimensions first; once they are below
            # delta fall back to the widest remaining dimension so boxes still
            # reach the delta-sat threshold
            prefer = relevant & (side >= delta)
            scaled = scaled + np.where(prefer, 1e6, 0.0)
            dims = np.argmax(scaled, axis=1)
            mids = 0.5 * (sel[np.arange(len(sel)), dims, 0] + sel[np.arange(len(sel)), dims, 1])
            lower = sel.copy()
            upper = sel.copy()
            lower[np.arange(len(sel)), dims, 1] = mids
            upper[np.arange(len(sel)), dims, 0] = mids
            children = np.stack([lower, upper], axis=1).reshape(-1, sel.shape[1], 2)
            pending.append(children)

    return FalsifyResult(True, boxes_processed=processed)


def certificate_conditions(net: StorageNet, model: SubsystemModel, rate: SupplyRate):
    """The (V, residual) expressions over box variables (x..., u...)."""
    if not model.h_depends_only_on_x():
        raise ValueError("falsification requires outputs that depend on state only")
    v_expr, grad_exprs = compile_exprs(net)
    y_exprs = list(model.h)
    k = np.atleast_2d(net.k)
    v_exprs = [ex.dot(k[row], y_exprs) for row in range(k.shape[0])]
    mapping = {j: v_exprs[l] for l, j in enumerate(model.v_vars())}
    f_closed = [ex.subst(fe, mapping) for fe in model.f]
    lie = None
    for ge, fe in zip(grad_exprs, f_closed):
        term = ex.Mul(ge, fe)
        lie = term if lie is None else ex.Add(lie, term)
    u_exprs = [ex.var(j) for j in model.u_vars()]
    r_expr = supply_rate_expr(rate, u_exprs, v_exprs, y_exprs)
    resid_expr = ex.Sub(lie, r_expr)
    return v_expr, resid_expr


def falsify(net: StorageNet, model: SubsystemModel, rate: SupplyRate,
            dom: VerifDomain, delta: float = 1e-3,
            max_boxes: int = 2_000_000) -> FalsifyResult:
    """Search the annulus for a dissipativity violation of the certificate.

    verified=True is sound: no point in the region satisfies V <= 0 or
    grad V . f - r >= 0.  The input annulus conjunct applies only when the
    model has a primary input.
    """
    v_expr, resid_expr = certificate_conditions(net, model, rate)
    x_norm = ex.sum_squares([ex.var(i) for i in range(model.d_x)])
    constraints = [(x_norm, dom.eps_l, dom.eps_u)]
    box_rows = [dom.x_box(model.d_x)]
    if model.d_u > 0:
        u_norm = ex.sum_squares([ex.var(j) for j in model.u_vars()])
        lo_u, hi_u = dom.input_bounds
        constraints.append((u_norm, lo_u, hi_u))
        box_rows.append(dom.u_box(model.d_u))
    box = np.vstack(box_rows)
    violations = [
        (v_expr, "le0", NONPOSITIVE_V),
        (resid_expr, "ge0", NONNEGATIVE_RESIDUAL),
    ]
    return falsify_region(constraints, violations, box, delta, max_boxes)
