"""Microgrid network models in deviation coordinates.

Subsystem dynamics are droop-control laws built as expression trees over the
local variable layout (state vars first, then primary inputs, then the
secondary input).  The network couples subsystems through AC power flow at
the points of common coupling; the primary coupling is used either linearized
(the Jacobian M at the set-point) or in full nonlinear form (for Lie
derivatives and simulation).

All models place the equilibrium at the origin: the set-point injections are
baked into the coupling, and the shipped line data fits the diagonal
self-injections so the published set-points are an exact equilibrium.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import exprcore as ex


class DimensionMismatch(ValueError):
    pass


class InvalidParams(ValueError):
    pass


class ConfigError(ValueError):
    pass


KIND_ANGLE = "angle-droop"
KIND_FULL = "voltage-angle-droop"
KIND_QUAD = "quadratic-voltage-droop"
KINDS = (KIND_ANGLE, KIND_FULL, KIND_QUAD)


@dataclass(frozen=True)
class MicrogridParams:
    """Per-microgrid droop constants and reference set-points.

    Angles in radians, everything else per-unit.  Only the fields used by a
    given droop law are validated by its builder.
    """

    j_delta: float = 1.0
    d_delta: float = 1.0
    j_e: float = 1.0
    d_e: float = 1.0
    delta_star: float = 0.0
    e_star: float = 1.0
    p_star: float = 0.0
    q_star: float = 0.0


@dataclass(frozen=True)
class AdmittanceData:
    """Line admittance magnitudes/angles plus diagonal self-injections.

    y[i, k] / gamma[i, k] describe the (i, k) off-diagonal admittance entry;
    the diagonals of y are unused (self-injection is carried by g_diag and
    b_diag instead).
    """

    y: np.ndarray
    gamma: np.ndarray
    g_diag: np.ndarray
    b_diag: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        gamma = np.asarray(self.gamma, dtype=float)
        g = np.asarray(self.g_diag, dtype=float)
        b = np.asarray(self.b_diag, dtype=float)
        n = y.shape[0]
        if y.shape != (n, n) or gamma.shape != (n, n):
            raise DimensionMismatch("Y and gamma must be square with matching shapes")
        if g.shape != (n,) or b.shape != (n,):
            raise DimensionMismatch("diagonal injection vectors must have length n")
        if not np.allclose(y, y.T, atol=1e-12):
            raise InvalidParams("admittance magnitude matrix must be symmetric")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "g_diag", g)
        object.__setattr__(self, "b_diag", b)

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class SubsystemModel:
    """One subsystem: dx/dt = f(x, u, v), y = h(x, u, v), equilibrium at 0.

    Expression variables are indexed locally: x in [0, d_x), u in
    [d_x, d_x + d_u), v in [d_x + d_u, d_x + d_u + d_v).
    """

    d_x: int
    d_u: int
    d_v: int
    d_y: int
    f: tuple
    h: tuple
    name: str = ""

    def __post_init__(self):
        if len(self.f) != self.d_x:
            raise DimensionMismatch("f must have one expression per state")
        if len(self.h) != self.d_y:
            raise DimensionMismatch("h must have one expression per output")
        zero = np.zeros(self.n_local_vars)
        for e in tuple(self.f) + tuple(self.h):
            if abs(ex.eval_scalar(e, zero)) > 1e-12:
                raise InvalidParams("model does not have an equilibrium at the origin")

    @property
    def n_local_vars(self) -> int:
        return self.d_x + self.d_u + self.d_v

    def x_vars(self) -> range:
        return range(0, self.d_x)

    def u_vars(self) -> range:
        return range(self.d_x, self.d_x + self.d_u)

    def v_vars(self) -> range:
        return range(self.d_x + self.d_u, self.n_local_vars)

    def eval_f(self, x, u, v) -> np.ndarray:
        """Batched dynamics evaluation; inputs (..., d_*) -> (..., d_x)."""
        pts = np.concatenate(
            [np.atleast_1d(np.asarray(a, dtype=float)) for a in (x, u, v) if np.size(a) or True],
            axis=-1,
        )
        cols = [ex.eval_scalar(e, pts) for e in self.f]
        return np.stack(cols, axis=-1)

    def eval_h(self, x, u=None, v=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        u = np.zeros(shape + (self.d_u,)) if u is None else np.asarray(u, dtype=float)
        v = np.zeros(shape + (self.d_v,)) if v is None else np.asarray(v, dtype=float)
        pts = np.concatenate([x, u, v], axis=-1)
        return np.stack([ex.eval_scalar(e, pts) for e in self.h], axis=-1)

    def h_depends_only_on_x(self) -> bool:
        allowed = set(self.x_vars())
        return all(set(ex.vars_used(e)) <= allowed for e in self.h)


@dataclass(frozen=True)
class NetworkSpec:
    """The interconnected system: subsystem models plus primary coupling."""

    subsystems: tuple
    m: np.ndarray
    kind: str
    adm: AdmittanceData | None = None
    params: tuple = ()
    name: str = ""

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        du = sum(s.d_u for s in self.subsystems)
        dy = sum(s.d_y for s in self.subsystems)
        if m.shape != (du, dy):
            raise DimensionMismatch(f"M must be {(du, dy)}, got {m.shape}")
        if self.adm is not None and self.adm.n != len(self.subsystems):
            raise DimensionMismatch("admittance node count must match subsystem count")
        if self.params and len(self.params) != len(self.subsystems):
            raise DimensionMismatch("one parameter set per subsystem required")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "subsystems", tuple(self.subsystems))
        object.__setattr__(self, "params", tuple(self.params))

    @property
    def n(self) -> int:
        return len(self.subsystems)

    @property
    def d_x_total(self) -> int:
        return sum(s.d_x for s in self.subsystems)

    def x_offsets(self) -> list[int]:
        offs, acc = [], 0
        for s in self.subsystems:
            offs.append(acc)
            acc += s.d_x
        return offs

    def split_state(self, x: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(x, dtype=float)
        out, acc = [], 0
        for s in self.subsystems:
            out.append(x[..., acc : acc + s.d_x])
            acc += s.d_x
        return out


def power_flow(e, delta, adm: AdmittanceData) -> tuple[np.ndarray, np.ndarray]:
    """Active/reactive injections at each node for voltages e and angles delta.

    Vectorized over leading batch dimensions; e and delta have shape (..., n).
    """
    e = np.asarray(e, dtype=float)
    delta = np.asarray(delta, dtype=float)
    n = adm.n
    if e.shape[-1] != n or delta.shape[-1] != n:
        raise DimensionMismatch(f"expected {n} nodes, got {e.shape[-1]}/{delta.shape[-1]}")
    dik = delta[..., :, None] - delta[..., None, :]
    ang = dik - adm.gamma
    off = adm.y * (1.0 - np.eye(n))
    ee = e[..., :, None] * e[..., None, :]
    p = np.sum(ee * off * np.cos(ang), axis=-1) + e * e * adm.g_diag
    q = np.sum(ee * off * np.sin(ang), axis=-1) - e * e * adm.b_diag
    return p, q


def fit_injection_diagonals(y, gamma, e_star, delta_star, p_star, q_star):
    """Diagonal G/B injections making the set-points an exact power-flow equilibrium."""
    y = np.asarray(y, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    e = np.asarray(e_star, dtype=float)
    d = np.asarray(delta_star, dtype=float)
    n = y.shape[0]
    off = y * (1.0 - np.eye(n))
    ang = (d[:, None] - d[None, :]) - gamma
    line_p = np.sum(e[:, None] * e[None, :] * off * np.cos(ang), axis=1)
    line_q = np.sum(e[:, None] * e[None, :] * off * np.sin(ang), axis=1)
    g_diag = (np.asarray(p_star, dtype=float) - line_p) / (e * e)
    b_diag = (line_q - np.asarray(q_star, dtype=float)) / (e * e)
    return g_diag, b_diag


def _check_positive(value, label):
    if not value > 0.0:
        raise InvalidParams(f"{label} must be positive, got {value}")


def build_angle_droop(params: MicrogridParams) -> SubsystemModel:
    """Angle-only droop under time-scale separation: J dd/dt = -D*d - dP + v."""
    _check_positive(params.j_delta, "j_delta")
    _check_positive(params.d_delta, "d_delta")
    x, u, v = ex.var(0), ex.var(1), ex.var(2)
    f = (ex.const(-params.d_delta) * x - u + v) / ex.const(params.j_delta)
    return SubsystemModel(d_x=1, d_u=1, d_v=1, d_y=1, f=(f,), h=(x,))


def build_full_droop(params: MicrogridParams) -> SubsystemModel:
    """Conventional voltage and angle droop; the secondary input acts on the angle row."""
    _check_positive(params.j_delta, "j_delta")
    _check_positive(params.d_delta, "d_delta")
    _check_positive(params.j_e, "j_e")
    _check_positive(params.d_e, "d_e")
    xd, xe = ex.var(0), ex.var(1)
    up, uq = ex.var(2), ex.var(3)
    v = ex.var(4)
    f_delta = (ex.const(-params.d_delta) * xd - up + v) / ex.const(params.j_delta)
    f_e = (ex.const(-params.d_e) * xe - uq) / ex.const(params.j_e)
    return SubsystemModel(d_x=2, d_u=2, d_v=1, d_y=2, f=(f_delta, f_e), h=(xd, xe))


def build_quadratic_droop(params: MicrogridParams) -> SubsystemModel:
    """Quadratic voltage droop: J dE/dt = -D*dE*(dE + E*) - dQ + v."""
    _check_positive(params.j_e, "j_e")
    _check_positive(params.d_e, "d_e")
    x, u, v = ex.var(0), ex.var(1), ex.var(2)
    droop = ex.const(-params.d_e) * (ex.square(x) + ex.const(params.e_star) * x)
    f = (droop - u + v) / ex.const(params.j_e)
    return SubsystemModel(d_x=1, d_u=1, d_v=1, d_y=1, f=(f,), h=(x,))


_BUILDERS = {
    KIND_ANGLE: build_angle_droop,
    KIND_FULL: build_full_droop,
    KIND_QUAD: build_quadratic_droop,
}


def coupling_jacobian(adm: AdmittanceData, setpoints, kind: str) -> np.ndarray:
    """Analytic Jacobian of the power-flow deviations at the set-point.

    Rows/columns follow the subsystem stacking of the given kind: dP/d(delta)
    for angle droop, dQ/d(E) for quadratic droop, and the interleaved
    (dP_i, dQ_i) x (delta_k, E_k) blocks for full droop.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown model kind {kind!r}")
    n = adm.n
    if len(setpoints) != n:
        raise DimensionMismatch("one set-point per node required")
    e = np.array([p.e_star for p in setpoints])
    d = np.array([p.delta_star for p in setpoints])
    off = adm.y * (1.0 - np.eye(n))
    ang = (d[:, None] - d[None, :]) - adm.gamma
    ee = e[:, None] * e[None, :]

    dp_dd = ee * off * np.sin(ang)            # dP_i/ddelta_k for k != i
    np.fill_diagonal(dp_dd, -np.sum(dp_dd, axis=1))
    dq_dd = -ee * off * np.cos(ang)           # dQ_i/ddelta_k for k != i
    np.fill_diagonal(dq_dd, -np.sum(dq_dd, axis=1))
    dp_de = e[:, None] * off * np.cos(ang)    # dP_i/dE_k for k != i
    np.fill_diagonal(dp_de, np.sum(off * np.cos(ang) * e[None, :], axis=1) + 2.0 * e * adm.g_diag)
    dq_de = e[:, None] * off * np.sin(ang)    # dQ_i/dE_k for k != i
    np.fill_diagonal(dq_de, np.sum(off * np.sin(ang) * e[None, :], axis=1) - 2.0 * e * adm.b_diag)

    if kind == KIND_ANGLE:
        return dp_dd
    if kind == KIND_QUAD:
        return dq_de
    m = np.zeros((2 * n, 2 * n))
    m[0::2, 0::2] = dp_dd
    m[0::2, 1::2] = dp_de
    m[1::2, 0::2] = dq_dd
    m[1::2, 1::2] = dq_de
    return m


def coupling_exprs(adm: AdmittanceData, setpoints, kind: str) -> list[ex.Expr]:
    """Nonlinear primary inputs u(x) as expressions over the network state.

    Returns the stacked deviation injections (dP and/or dQ per the kind) with
    the set-point values subtracted, so u(0) = 0.
    """
    n = adm.n
    e_star = np.array([p.e_star for p in setpoints])
    d_star = np.array([p.delta_star for p in setpoints])
    p_star = np.array([p.p_star for p in setpoints])
    q_star = np.array([p.q_star for p in setpoints])
    off = adm.y * (1.0 - np.eye(n))

    if kind == KIND_ANGLE:
        delta_e = [ex.const(v) for v in e_star]
        delta_v = [ex.var(i) for i in range(n)]
        e_expr = delta_e
        volt_is_var = False
    elif kind == KIND_QUAD:
        e_expr = [ex.const(e_star[i]) + ex.var(i) for i in range(n)]
        delta_v = [ex.const(0.0) for _ in range(n)]
        volt_is_var = True
    else:
        e_expr = [ex.const(e_star[i]) + ex.var(2 * i + 1) for i in range(n)]
        delta_v = [ex.var(2 * i) for i in range(n)]
        volt_is_var = True

    def line_terms(i, trig):
        terms = None
        for k in range(n):
            if k == i or off[i, k] == 0.0:
                continue
            phase = d_star[i] - d_star[k] - adm.gamma[i, k]
            angle = delta_v[i] - delta_v[k] + ex.const(phase)
            term = ex.Mul(ex.const(off[i, k]), trig(angle))
            term = ex.Mul(term, ex.Mul(e_expr[i], e_expr[k]))
            terms = term if terms is None else ex.Add(terms, term)
        return ex.const(0.0) if terms is None else terms

    def self_sq(i):
        return ex.square(e_expr[i]) if volt_is_var else ex.const(e_star[i] * e_star[i])

    out: list[ex.Expr] = []
    for i in range(n):
        p_i = ex.Add(line_terms(i, ex.cos), ex.Mul(ex.const(adm.g_diag[i]), self_sq(i)))
        q_i = ex.Sub(line_terms(i, ex.sin), ex.Mul(ex.const(adm.b_diag[i]), self_sq(i)))
        if kind == KIND_ANGLE:
            out.append(ex.Sub(p_i, ex.const(p_star[i])))
        elif kind == KIND_QUAD:
            out.append(ex.Sub(q_i, ex.const(q_star[i])))
        else:
            out.append(ex.Sub(p_i, ex.const(p_star[i])))
            out.append(ex.Sub(q_i, ex.const(q_star[i])))
    return out


def _network_output_exprs(net: NetworkSpec) -> list[ex.Expr]:
    ys: list[ex.Expr] = []
    for off, sub in zip(net.x_offsets(), net.subsystems):
        if not sub.h_depends_only_on_x():
            raise InvalidParams("closed-loop assembly requires outputs that depend on state only")
        mapping = {j: ex.var(off + j) for j in sub.x_vars()}
        ys.extend(ex.subst(e, mapping) for e in sub.h)
    return ys


def _substitute_closed_loop(net: NetworkSpec, gains, u_exprs) -> list[ex.Expr]:
    gains = [np.atleast_2d(np.asarray(k, dtype=float)) for k in gains]
    ys = _network_output_exprs(net)
    out: list[ex.Expr] = []
    u_off = 0
    y_off = 0
    for off, sub, k in zip(net.x_offsets(), net.subsystems, gains):
        if k.shape != (sub.d_v, sub.d_y):
            raise DimensionMismatch(
                f"gain must be {(sub.d_v, sub.d_y)}, got {k.shape}")
        y_i = ys[y_off : y_off + sub.d_y]
        mapping = {j: ex.var(off + j) for j in sub.x_vars()}
        for l, j in enumerate(sub.u_vars()):
            mapping[j] = u_exprs[u_off + l]
        for l, j in enumerate(sub.v_vars()):
            mapping[j] = ex.dot(k[l], y_i)
        out.extend(ex.subst(e, mapping) for e in sub.f)
        u_off += sub.d_u
        y_off += sub.d_y
    return out


def assemble_closed_loop(net: NetworkSpec, gains) -> list[ex.Expr]:
    """Substitute u = M h(x) and v_i = K_i h_i(x_i): xdot = F(x) as expressions.

    The coupling is the linearized Jacobian map; the subsystem dynamics keep
    their full nonlinearity.
    """
    ys = _network_output_exprs(net)
    u_exprs = [ex.dot(row, ys) for row in net.m]
    return _substitute_closed_loop(net, gains, u_exprs)


def assemble_closed_loop_nonlinear(net: NetworkSpec, gains) -> list[ex.Expr]:
    """Closed loop with the un-linearized power-flow coupling u = g(x)."""
    if net.adm is None:
        raise InvalidParams("network has no admittance data for nonlinear coupling")
    u_exprs = coupling_exprs(net.adm, net.params, net.kind)
    return _substitute_closed_loop(net, gains, u_exprs)


def closed_loop_field(net: NetworkSpec, gains, coupling: str = "nonlinear"):
    """Fast numpy evaluator of the closed-loop vector field F(x), batched.

    Equivalent to evaluating the assembled expressions (tested against them);
    used on hot paths (simulation, RoA grids).
    """
    gains = [np.atleast_2d(np.asarray(k, dtype=float)) for k in gains]
    kind = net.kind
    pr = net.params
    if coupling not in ("nonlinear", "linear"):
        raise ValueError("coupling must be 'nonlinear' or 'linear'")
    if coupling == "nonlinear" and net.adm is None:
        raise InvalidParams("network has no admittance data for nonlinear coupling")

    if kind == KIND_ANGLE:
        j = np.array([p.j_delta for p in pr])
        d = np.array([p.d_delta for p in pr])
        e_star = np.array([p.e_star for p in pr])
        d_star = np.array([p.delta_star for p in pr])
        p_star = np.array([p.p_star for p in pr])
        kvec = np.array([k[0, 0] for k in gains])

        def field(x):
            x = np.asarray(x, dtype=float)
            if coupling == "nonlinear":
                p, _ = power_flow(e_star + 0.0 * x, d_star + x, net.adm)
                u = p - p_star
            else:
                u = x @ net.m.T
            return (-d * x - u + kvec * x) / j

        return field

    if kind == KIND_QUAD:
        j = np.array([p.j_e for p in pr])
        d = np.array([p.d_e for p in pr])
        e_star = np.array([p.e_star for p in pr])
        d_star = np.array([p.delta_star for p in pr])
        q_star = np.array([p.q_star for p in pr])
        kvec = np.array([k[0, 0] for k in gains])

        def field(x):
            x = np.asarray(x, dtype=float)
            if coupling == "nonlinear":
                _, q = power_flow(e_star + x, d_star + 0.0 * x, net.adm)
                u = q - q_star
            else:
                u = x @ net.m.T
            return (-d * x * (x + e_star) - u + kvec * x) / j

        return field

    j_d = np.array([p.j_delta for p in pr])
    d_d = np.array([p.d_delta for p in pr])
    j_e = np.array([p.j_e for p in pr])
    d_e = np.array([p.d_e for p in pr])
    e_star = np.array([p.e_star for p in pr])
    d_star = np.array([p.delta_star for p in pr])
    p_star = np.array([p.p_star for p in pr])
    q_star = np.array([p.q_star for p in pr])
    kmat = np.stack([k[0] for k in gains])  # (n, 2): v_i = k_i . (ddelta_i, dE_i)

    def field(x):
        x = np.asarray(x, dtype=float)
        xd = x[..., 0::2]
        xe = x[..., 1::2]
        if coupling == "nonlinear":
            p, q = power_flow(e_star + xe, d_star + xd, net.adm)
            up, uq = p - p_star, q - q_star
        else:
            u = x @ net.m.T
            up, uq = u[..., 0::2], u[..., 1::2]
        v = xd * kmat[:, 0] + xe * kmat[:, 1]
        fd = (-d_d * xd - up + v) / j_d
        fe = (-d_e * xe - uq) / j_e
        out = np.empty_like(x)
        out[..., 0::2] = fd
        out[..., 1::2] = fe
        return out

    return field


def monolithic_model(net: NetworkSpec) -> SubsystemModel:
    """The whole network as a single subsystem for centralized baselines.

    The primary coupling is internalized (nonlinear power flow), leaving no
    primary input; the stacked secondary channels remain exposed.
    """
    d_x = net.d_x_total
    d_v = sum(s.d_v for s in net.subsystems)
    u_exprs = coupling_exprs(net.adm, net.params, net.kind) if net.adm is not None else [
        ex.dot(row, [ex.var(i) for i in range(d_x)]) for row in net.m
    ]
    f_out: list[ex.Expr] = []
    u_off = 0
    v_off = 0
    for off, sub in zip(net.x_offsets(), net.subsystems):
        mapping = {jj: ex.var(off + jj) for jj in sub.x_vars()}
        for l, jj in enumerate(sub.u_vars()):
            mapping[jj] = u_exprs[u_off + l]
        for l, jj in enumerate(sub.v_vars()):
            mapping[jj] = ex.var(d_x + v_off + l)
        f_out.extend(ex.subst(e, mapping) for e in sub.f)
        u_off += sub.d_u
        v_off += sub.d_v
    h = tuple(ex.var(i) for i in range(d_x))
    return SubsystemModel(d_x=d_x, d_u=0, d_v=d_v, d_y=d_x, f=tuple(f_out), h=h,
                          name=f"{net.name or 'network'}-monolithic")


def input_inertias(net: NetworkSpec) -> list[np.ndarray]:
    """Per-subsystem time constants aligned with the primary-input rows.

    Used to weight initial supply rates so the implied storage gradients stay
    order one across subsystems with very different inertia.
    """
    out = []
    for p in net.params:
        if net.kind == KIND_ANGLE:
            out.append(np.array([p.j_delta]))
        elif net.kind == KIND_QUAD:
            out.append(np.array([p.j_e]))
        else:
            out.append(np.array([p.j_delta, p.j_e]))
    return out


def secondary_gain_mask(net: NetworkSpec) -> np.ndarray:
    """Block-diagonal mask for a centralized secondary gain: v_i sees only y_i."""
    d_v = sum(s.d_v for s in net.subsystems)
    d_x = net.d_x_total
    mask = np.zeros((d_v, d_x), dtype=bool)
    v_off = 0
    for off, sub in zip(net.x_offsets(), net.subsystems):
        mask[v_off : v_off + sub.d_v, off : off + sub.d_x] = True
        v_off += sub.d_v
    return mask


def _require(cfg: dict, key: str, where: str):
    if key not in cfg:
        raise ConfigError(f"missing field {key!r} in {where}")
    return cfg[key]


def _params_from_config(entry: dict, kind: str, index: int) -> MicrogridParams:
    where = f"subsystems[{index}]"
    deg = float(entry.get("delta_star_deg", 0.0))
    common = dict(delta_star=math.radians(deg), e_star=float(entry.get("e_star", 1.0)))
    try:
        if kind == KIND_ANGLE:
            return MicrogridParams(
                j_delta=float(_require(entry, "j_delta", where)),
                d_delta=float(_require(entry, "d_delta", where)),
                p_star=float(entry.get("p_star", 0.0)),
                **common,
            )
        if kind == KIND_QUAD:
            return MicrogridParams(
                j_e=float(_require(entry, "j_e", where)),
                d_e=float(_require(entry, "d_e", where)),
                q_star=float(entry.get("q_star", 0.0)),
                **common,
            )
        return MicrogridParams(
            j_delta=float(_require(entry, "j_delta", where)),
            d_delta=float(_require(entry, "d_delta", where)),
            j_e=float(_require(entry, "j_e", where)),
            d_e=float(_require(entry, "d_e", where)),
            p_star=float(entry.get("p_star", 0.0)),
            q_star=float(entry.get("q_star", 0.0)),
            **common,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value in {where}: {exc}") from exc


def load_network(source) -> tuple[NetworkSpec, dict]:
    """Build a NetworkSpec from a config file path or an already-parsed dict.

    Returns the spec plus the raw config (which also carries trainer /
    falsifier / ADMM sections for the pipeline layers).
    """
    if isinstance(source, dict):
        cfg = source
        name = cfg.get("name", "network")
    else:
        try:
            with open(source, "r", encoding="utf-8") as fh:
                cfg = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {source}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config parse error in {source}: line {exc.lineno}: {exc.msg}")
        name = cfg.get("name") or str(source)
    if int(cfg.get("schema_version", 0)) != 1:
        raise ConfigError("unsupported or missing schema_version (expected 1)")
    kind = _require(cfg, "kind", "config")
    if kind not in KINDS:
        raise ConfigError(f"unknown kind {kind!r}; expected one of {KINDS}")
    subs_cfg = _require(cfg, "subsystems", "config")
    params = tuple(_params_from_config(sc, kind, i) for i, sc in enumerate(subs_cfg))
    subsystems = tuple(_BUILDERS[kind](p) for p in params)

    adm_cfg = _require(cfg, "admittance", "config")
    n = len(params)
    y = np.asarray(_require(adm_cfg, "y", "admittance"), dtype=float)
    if "gamma_deg" in adm_cfg:
        gamma = np.radians(np.asarray(adm_cfg["gamma_deg"], dtype=float))
    else:
        gamma = np.asarray(_require(adm_cfg, "gamma", "admittance"), dtype=float)
    if y.shape != (n, n):
        raise ConfigError(f"admittance Y must be {n}x{n}")
    e_star = np.array([p.e_star for p in params])
    d_star = np.array([p.delta_star for p in params])
    p_star = np.array([p.p_star for p in params])
    q_star = np.array([p.q_star for p in params])
    if adm_cfg.get("g_diag") == "fit" or adm_cfg.get("b_diag") == "fit":
        g_diag, b_diag = fit_injection_diagonals(y, gamma, e_star, d_star, p_star, q_star)
        if adm_cfg.get("g_diag") != "fit":
            g_diag = np.asarray(adm_cfg["g_diag"], dtype=float)
        if adm_cfg.get("b_diag") != "fit":
            b_diag = np.asarray(adm_cfg["b_diag"], dtype=float)
    else:
        g_diag = np.asarray(_require(adm_cfg, "g_diag", "admittance"), dtype=float)
        b_diag = np.asarray(_require(adm_cfg, "b_diag", "admittance"), dtype=float)
    adm = AdmittanceData(y=y, gamma=gamma, g_diag=g_diag, b_diag=b_diag)

    p_eq, q_eq = power_flow(e_star, d_star, adm)
    if kind in (KIND_ANGLE, KIND_FULL) and np.max(np.abs(p_eq - p_star)) > 1e-9:
        raise ConfigError("admittance data is inconsistent with the P set-points")
    if kind in (KIND_QUAD, KIND_FULL) and np.max(np.abs(q_eq - q_star)) > 1e-9:
        raise ConfigError("admittance data is inconsistent with the Q set-points")

    if "m_override" in cfg:
        m = np.asarray(cfg["m_override"], dtype=float)
    else:
        m = coupling_jacobian(adm, params, kind)
    net = NetworkSpec(subsystems=subsystems, m=m, kind=kind, adm=adm, params=params, name=name)
    return net, cfg
