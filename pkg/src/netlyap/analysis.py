"""Network-level Lyapunov evaluation, region-of-attraction estimation,
classical and centralized baselines, and time-domain simulation.

Region-of-attraction levels are defined by a deterministic grid scan: c* is
the largest level c such that every checked point of the verification box
with V <= c and |x|^2 >= eps_l has V > 0 and Vdot < 0, and the sublevel set
stays clear of the box boundary.  Lie derivatives always use the assembled
nonlinear closed loop (full power-flow coupling).  An optional slow mode
re-certifies the selected level with the interval falsifier.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import exprcore as ex
from . import linalg as la
from . import models as md
from .falsifier import BudgetExhausted, VerifDomain, falsify_region
from .models import DimensionMismatch, NetworkSpec
from .netcert import NetworkCertificate
from .storage_nn import (StorageNet, SupplyRate, compile_exprs, storage_grad,
                         storage_value)
from .trainer import TrainerConfig, TrainingFailed, learn_storage


class NotHurwitz(RuntimeError):
    pass


class EmptyRegion(RuntimeError):
    pass


class NonFinite(RuntimeError):
    """Simulation blow-up; carries the partial trajectory."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    h: float
    noise_sigma: float = 0.0


@dataclass
class PlaneGrid:
    """A 2-D slice (other coordinates pinned at zero) of V, Vdot, and the RoA."""

    axes: tuple
    xs: np.ndarray
    ys: np.ndarray
    v: np.ndarray
    vdot: np.ndarray
    in_roa: np.ndarray


@dataclass
class RoaEstimate:
    c_star: float
    certified: bool
    boundary_v_min: float
    n_checked: int
    planes: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GridConfig:
    n: int = 21
    max_grid_dims: int = 4
    mc_samples: int = 200_000
    plane_n: int = 101
    planes: tuple = ()
    seed: int = 0
    certify: bool = False
    certify_delta: float = 1e-2
    certify_budget: int = 500_000

    def __post_init__(self):
        object.__setattr__(self, "planes", tuple(tuple(p) for p in self.planes))


@dataclass
class QuadraticCertificate:
    """V(x) = x^T P x with an optional dense linear secondary gain v = K x."""

    p: np.ndarray
    k_dense: np.ndarray | None = None

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return np.sum((x @ self.p) * x, axis=-1)

    def grad(self, x):
        return 2.0 * np.asarray(x, dtype=float) @ self.p


@dataclass
class CentralCertificate:
    """A monolithic neural Lyapunov function for the whole network."""

    net: StorageNet
    net_spec: NetworkSpec

    def gains_per_subsystem(self) -> list[np.ndarray]:
        out = []
        v_off = 0
        x_off = 0
        for sub in self.net_spec.subsystems:
            out.append(self.net.k[v_off : v_off + sub.d_v, x_off : x_off + sub.d_x])
            v_off += sub.d_v
            x_off += sub.d_x
        return out


def network_V(cert: NetworkCertificate, x) -> float | np.ndarray:
    """V(x) = sum of subsystem storage values on the partitioned state."""
    net = cert.net_spec
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.d_x_total:
        raise DimensionMismatch(f"state must have {net.d_x_total} coords")
    parts = net.split_state(x)
    total = sum(storage_value(nn, xi) for nn, xi in zip(cert.nets, parts))
    return total


def network_Vdot(cert: NetworkCertificate, net: NetworkSpec, x) -> float | np.ndarray:
    """Lie derivative along the nonlinear closed loop with v_i = K_i y_i."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.d_x_total:
        raise DimensionMismatch(f"state must have {net.d_x_total} coords")
    f = md.closed_loop_field(net, cert.gains, coupling="nonlinear")(x)
    parts = net.split_state(x)
    fparts = net.split_state(f)
    total = sum(np.sum(storage_grad(nn, xi) * fi, axis=-1)
                for nn, xi, fi in zip(cert.nets, parts, fparts))
    return total


def _value_functions(cert, net: NetworkSpec):
    """(V, Vdot, field) callables for any certificate flavor."""
    if isinstance(cert, NetworkCertificate):
        field_fn = md.closed_loop_field(net, cert.gains, coupling="nonlinear")

        def v_fn(x):
            return network_V(cert, x)

        def vdot_fn(x):
            return network_Vdot(cert, net, x)

        return v_fn, vdot_fn, field_fn
    if isinstance(cert, CentralCertificate):
        field_fn = md.closed_loop_field(net, cert.gains_per_subsystem(), coupling="nonlinear")

        def v_fn(x):
            return storage_value(cert.net, x)

        def vdot_fn(x):
            return np.sum(storage_grad(cert.net, np.atleast_2d(x)) * field_fn(np.atleast_2d(x)),
                          axis=-1)

        return v_fn, vdot_fn, field_fn
    if isinstance(cert, QuadraticCertificate):
        field_fn = _field_with_dense_gain(net, cert.k_dense)

        def v_fn(x):
            return cert.value(x)

        def vdot_fn(x):
            return np.sum(cert.grad(np.atleast_2d(x)) * field_fn(np.atleast_2d(x)), axis=-1)

        return v_fn, vdot_fn, field_fn
    raise TypeError(f"unsupported certificate type {type(cert).__name__}")


def _secondary_input_matrix(net: NetworkSpec) -> np.ndarray:
    """d(F)/d(v) at the origin: constant for the droop models (v enters linearly)."""
    rows = net.d_x_total
    cols = sum(s.d_v for s in net.subsystems)
    b = np.zeros((rows, cols))
    x_off = v_off = 0
    for sub in net.subsystems:
        zero = np.zeros(sub.n_local_vars)
        for r, fe in enumerate(sub.f):
            dual = ex.eval_dual(fe, zero)
            for l, j in enumerate(sub.v_vars()):
                b[x_off + r, v_off + l] = dual.partials[j]
        x_off += sub.d_x
        v_off += sub.d_v
    return b


def _field_with_dense_gain(net: NetworkSpec, k_dense: np.ndarray | None):
    """Closed-loop field with v = K_dense x (K need not be block diagonal)."""
    zero_gains = [np.zeros((s.d_v, s.d_y)) for s in net.subsystems]
    base = md.closed_loop_field(net, zero_gains, coupling="nonlinear")
    if k_dense is None or not np.any(k_dense):
        return base
    b = _secondary_input_matrix(net)
    gain = np.asarray(k_dense, dtype=float)

    def field(x):
        x = np.asarray(x, dtype=float)
        return base(x) + (x @ gain.T) @ b.T

    return field


def linearize_field(net: NetworkSpec, with_secondary: bool = False):
    """Jacobian A = dF/dx at the origin via dual evaluation of the assembled
    nonlinear closed loop (K = 0); optionally also B = dF/dv."""
    zero_gains = [np.zeros((s.d_v, s.d_y)) for s in net.subsystems]
    exprs = md.assemble_closed_loop_nonlinear(net, zero_gains)
    d = net.d_x_total
    a = np.zeros((d, d))
    origin = np.zeros(d)
    for i, e in enumerate(exprs):
        a[i] = ex.eval_dual(e, origin).partials[:d]
    if not with_secondary:
        return a
    return a, _secondary_input_matrix(net)


def _grid_points(box: np.ndarray, cfg: GridConfig, rng: np.random.Generator):
    d = box.shape[0]
    if d <= cfg.max_grid_dims:
        axes = [np.linspace(box[i, 0], box[i, 1], cfg.n) for i in range(d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        on_boundary = np.zeros(pts.shape[0], dtype=bool)
        for i in range(d):
            on_boundary |= (pts[:, i] == box[i, 0]) | (pts[:, i] == box[i, 1])
        return pts, on_boundary
    lo, hi = box[:, 0], box[:, 1]
    pts = rng.uniform(0.0, 1.0, size=(cfg.mc_samples, d)) * (hi - lo) + lo
    n_face = max(1, cfg.mc_samples // (4 * d))
    faces = []
    for i in range(d):
        for side in (0, 1):
            f = rng.uniform(0.0, 1.0, size=(n_face, d)) * (hi - lo) + lo
            f[:, i] = box[i, side]
            faces.append(f)
    boundary = np.vstack(faces)
    all_pts = np.vstack([pts, boundary])
    on_boundary = np.zeros(all_pts.shape[0], dtype=bool)
    on_boundary[pts.shape[0]:] = True
    return all_pts, on_boundary


def _scan_level(v, vdot, norms2, on_boundary, eps_l) -> float:
    """Largest safe level by the sort-and-scan rule; EmptyRegion if none."""
    order = np.argsort(v, kind="stable")
    v_sorted = v[order]
    checked = norms2[order] >= eps_l
    bad = (checked & ((v_sorted <= 0.0) | (vdot[order] >= 0.0))) | on_boundary[order]
    idx = np.nonzero(bad)[0]
    stop = idx[0] if idx.size else v_sorted.size
    if stop == 0:
        raise EmptyRegion("first scanned grid point already violates the conditions")
    c_star = float(v_sorted[stop - 1])
    if not c_star > 0.0:
        raise EmptyRegion("no positive level satisfies the scan conditions")
    return c_star


def _plane_grid(v_fn, vdot_fn, box, plane, c_star, plane_n) -> PlaneGrid:
    i, j = plane
    xs = np.linspace(box[i, 0], box[i, 1], plane_n)
    ys = np.linspace(box[j, 0], box[j, 1], plane_n)
    mx, my = np.meshgrid(xs, ys, indexing="ij")
    pts = np.zeros((plane_n * plane_n, box.shape[0]))
    pts[:, i] = mx.ravel()
    pts[:, j] = my.ravel()
    v = np.asarray(v_fn(pts)).reshape(plane_n, plane_n)
    vd = np.asarray(vdot_fn(pts)).reshape(plane_n, plane_n)
    return PlaneGrid(axes=(i, j), xs=xs, ys=ys, v=v, vdot=vd, in_roa=v <= c_star)


def estimate_roa_functions(v_fn, vdot_fn, box, eps_l: float,
                           grid_cfg: GridConfig = GridConfig()) -> RoaEstimate:
    """Grid-scan level estimation for arbitrary V / Vdot callables."""
    box = np.asarray(box, dtype=float)
    rng = np.random.default_rng([grid_cfg.seed, 17])
    pts, on_boundary = _grid_points(box, grid_cfg, rng)
    v = np.asarray(v_fn(pts))
    vdot = np.asarray(vdot_fn(pts))
    norms2 = np.sum(pts * pts, axis=-1)
    c_star = _scan_level(v, vdot, norms2, on_boundary, eps_l)
    boundary_v_min = float(v[on_boundary].min()) if np.any(on_boundary) else math.inf
    est = RoaEstimate(c_star=c_star, certified=False,
                      boundary_v_min=boundary_v_min, n_checked=int(pts.shape[0]))
    for plane in grid_cfg.planes:
        est.planes[tuple(plane)] = _plane_grid(v_fn, vdot_fn, box, plane, c_star,
                                               grid_cfg.plane_n)
    return est


def estimate_roa(cert, net: NetworkSpec, dom: VerifDomain,
                 grid_cfg: GridConfig = GridConfig()) -> RoaEstimate:
    """Grid-scan estimate of the certified sublevel set {V <= c*}.

    For state dimension above max_grid_dims the dense grid is replaced by a
    seeded uniform sample (plus explicit boundary-face samples); plane slices
    are always dense.
    """
    v_fn, vdot_fn, _ = _value_functions(cert, net)
    est = estimate_roa_functions(v_fn, vdot_fn, dom.x_box(net.d_x_total),
                                 dom.eps_l, grid_cfg)
    if grid_cfg.certify:
        est.certified = _certify_level(cert, net, dom, est.c_star, grid_cfg)
    return est


def _lyapunov_exprs(cert, net: NetworkSpec):
    """(V, Vdot) expression graphs over the network state for certification."""
    d = net.d_x_total
    if isinstance(cert, NetworkCertificate):
        f_exprs = md.assemble_closed_loop_nonlinear(net, cert.gains)
        v_total = None
        vdot_total = None
        for nn, off, sub in zip(cert.nets, net.x_offsets(), net.subsystems):
            v_e, g_es = compile_exprs(nn, offset=off)
            v_total = v_e if v_total is None else ex.Add(v_total, v_e)
            for k, ge in enumerate(g_es):
                term = ex.Mul(ge, f_exprs[off + k])
                vdot_total = term if vdot_total is None else ex.Add(vdot_total, term)
        return v_total, vdot_total
    if isinstance(cert, QuadraticCertificate):
        xs = [ex.var(i) for i in range(d)]
        v_total = None
        for i in range(d):
            for j in range(d):
                c = cert.p[i, j] if i != j else cert.p[i, i]
                if c == 0.0:
                    continue
                term = ex.Mul(ex.const(c), ex.square(xs[i])) if i == j else \
                    ex.Mul(ex.const(c), ex.Mul(xs[i], xs[j]))
                v_total = term if v_total is None else ex.Add(v_total, term)
        gains = [np.zeros((s.d_v, s.d_y)) for s in net.subsystems]
        f_exprs = md.assemble_closed_loop_nonlinear(net, gains)
        grad = [ex.dot(2.0 * cert.p[i], xs) for i in range(d)]
        vdot_total = None
        for ge, fe in zip(grad, f_exprs):
            term = ex.Mul(ge, fe)
            vdot_total = term if vdot_total is None else ex.Add(vdot_total, term)
        return v_total, vdot_total
    raise TypeError("level certification supports network and quadratic certificates")


def _certify_level(cert, net, dom, c_star, grid_cfg: GridConfig) -> bool:
    v_expr, vdot_expr = _lyapunov_exprs(cert, net)
    d = net.d_x_total
    norm_expr = ex.sum_squares([ex.var(i) for i in range(d)])
    constraints = [(norm_expr, dom.eps_l, 1e300), (v_expr, -1e300, c_star)]
    violations = [(v_expr, "le0", "nonpositive_V"), (vdot_expr, "ge0", "nonnegative_vdot")]
    try:
        res = falsify_region(constraints, violations, dom.x_box(d),
                             grid_cfg.certify_delta, grid_cfg.certify_budget)
    except BudgetExhausted:
        return False
    return res.verified


def baseline_ql(net: NetworkSpec, dom: VerifDomain,
                grid_cfg: GridConfig = GridConfig()) -> tuple[np.ndarray, RoaEstimate]:
    """Quadratic Lyapunov baseline: P from the linearization at the origin."""
    a = linearize_field(net)
    if not la.is_hurwitz(a):
        raise NotHurwitz("linearized closed loop is not Hurwitz")
    p = la.solve_lyapunov(a, np.eye(a.shape[0]))
    cert = QuadraticCertificate(p=p)
    return p, estimate_roa(cert, net, dom, grid_cfg)


def baseline_qcl(net: NetworkSpec, dom: VerifDomain,
                 grid_cfg: GridConfig = GridConfig()):
    """Quadratic control Lyapunov baseline: LQR secondary gain, then as QL."""
    a, b = linearize_field(net, with_secondary=True)
    try:
        p_care, k = la.solve_care(a, b, np.eye(a.shape[0]), np.eye(b.shape[1]))
    except la.NoStabilizingInit:
        raise
    a_cl = a - b @ k
    p = la.solve_lyapunov(a_cl, np.eye(a.shape[0]))
    cert = QuadraticCertificate(p=p, k_dense=-k)
    return p, k, estimate_roa(cert, net, dom, grid_cfg)


def central_model_and_mask(net: NetworkSpec):
    mono = md.monolithic_model(net)
    mask = md.secondary_gain_mask(net)
    return mono, mask


def baseline_cnl(net: NetworkSpec, dom: VerifDomain, cfg: TrainerConfig,
                 log=None) -> CentralCertificate:
    """Centralized neural Lyapunov baseline: the whole network as one
    subsystem with zero supply rate (plain Lyapunov conditions)."""
    return _central(net, dom, cfg.with_updates(train_k=False), log)


def baseline_cncl(net: NetworkSpec, dom: VerifDomain, cfg: TrainerConfig,
                  log=None) -> CentralCertificate:
    """Centralized neural control Lyapunov baseline: additionally trains a
    block-diagonal secondary gain."""
    mono, mask = central_model_and_mask(net)
    return _central(net, dom, cfg.with_updates(train_k=True, k_mask=mask), log, mono)


def _central(net, dom, cfg, log, mono=None) -> CentralCertificate:
    if mono is None:
        mono, _ = central_model_and_mask(net)
    rate = SupplyRate.zeros(max(mono.d_u, mono.d_v), mono.d_y)
    try:
        trained = learn_storage(mono, rate, dom, cfg, log=log)
    except TrainingFailed as exc:
        if exc.last_outcome == "budget_exhausted":
            raise BudgetExhausted(0) from exc
        raise
    return CentralCertificate(net=trained, net_spec=net)


def simulate(net: NetworkSpec, gains, x0, t_final: float, h: float,
             noise_sigma: float = 0.0, seed: int = 0,
             coupling: str = "nonlinear") -> Trajectory:
    """Classic RK4 integration of the closed loop; optional additive Gaussian
    state perturbation of std noise_sigma * sqrt(h) after each step."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (net.d_x_total,):
        raise DimensionMismatch(f"x0 must have {net.d_x_total} coords")
    field = md.closed_loop_field(net, gains, coupling)
    return simulate_field(field, x0, t_final, h, noise_sigma, seed)


def simulate_field(field, x0, t_final: float, h: float,
                   noise_sigma: float = 0.0, seed: int = 0) -> Trajectory:
    """RK4 on an arbitrary autonomous vector field callable."""
    if h <= 0.0 or t_final < h:
        raise ValueError("need h > 0 and t_final >= h")
    x0 = np.asarray(x0, dtype=float)
    steps = int(round(t_final / h))
    times = np.arange(steps + 1) * h
    states = np.empty((steps + 1, x0.size))
    states[0] = x0
    rng = np.random.default_rng([seed, 23]) if noise_sigma > 0.0 else None
    x = x0.copy()
    for i in range(steps):
        k1 = field(x)
        k2 = field(x + 0.5 * h * k1)
        k3 = field(x + 0.5 * h * k2)
        k4 = field(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if rng is not None:
            x = x + noise_sigma * math.sqrt(h) * rng.standard_normal(x.size)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e6:
            partial = Trajectory(times[: i + 1], states[: i + 1], h, noise_sigma)
            raise NonFinite(f"trajectory blew up at t={times[i + 1]:.3f}", partial)
        states[i + 1] = x
    return Trajectory(times, states, h, noise_sigma)


def settle_time(traj: Trajectory, tol: float = 0.01) -> float:
    """First time after which the sup-norm of the state stays below tol."""
    sup = np.max(np.abs(traj.states), axis=1)
    future_max = np.maximum.accumulate(sup[::-1])[::-1]
    idx = np.nonzero(future_max < tol)[0]
    return float(traj.times[idx[0]]) if idx.size else math.inf


def post_transient_variance(traj: Trajectory, t_cut: float = 5.0) -> float:
    """Mean per-coordinate variance of the state over t > t_cut."""
    mask = traj.times > t_cut
    if not np.any(mask):
        raise ValueError("trajectory ends before the transient cut")
    seg = traj.states[mask]
    return float(np.mean(np.var(seg, axis=0)))


def roa_area_ratio(est_a: RoaEstimate, est_b: RoaEstimate, plane) -> float:
    """Ratio of projected sublevel areas on a coordinate plane by grid counting."""
    plane = tuple(plane)
    if plane not in est_a.planes or plane not in est_b.planes:
        raise KeyError(f"plane {plane} missing from one of the estimates")
    ga, gb = est_a.planes[plane], est_b.planes[plane]
    count_a = int(np.sum(ga.in_roa))
    count_b = int(np.sum(gb.in_roa))
    if count_a == 0 or count_b == 0:
        raise EmptyRegion("a projected region is empty on this plane")
    cell_a = (ga.xs[1] - ga.xs[0]) * (ga.ys[1] - ga.ys[0])
    cell_b = (gb.xs[1] - gb.xs[0]) * (gb.ys[1] - gb.ys[0])
    return (count_a * cell_a) / (count_b * cell_b)


def write_plane_csv(grid: PlaneGrid, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "V", "Vdot", "in_roa"])
        for i, xv in enumerate(grid.xs):
            for j, yv in enumerate(grid.ys):
                writer.writerow([repr(float(xv)), repr(float(yv)),
                                 repr(float(grid.v[i, j])), repr(float(grid.vdot[i, j])),
                                 int(grid.in_roa[i, j])])


def write_trajectory_csv(traj: Trajectory, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x{i}" for i in range(traj.states.shape[1])])
        for t, row in zip(traj.times, traj.states):
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in row])
