"""Neural storage functions with trainable secondary gains and supply rates.

A storage function candidate is a small tanh MLP mapping a subsystem state to
a scalar, bundled with a linear output-feedback gain K for the secondary
channel.  This module provides

* quadratic supply-rate evaluation (shared blocks for the primary and
  secondary channels, with zero-padding when the channel widths differ),
* batched value / state-gradient / dissipation-residual evaluation,
* the empirical certificate loss and its analytic parameter gradient
  (including dK), derived by backpropagating through the directional
  derivative computation and checked against finite differences in the tests,
* compilation of the value and its state gradient into expression graphs for
  the interval falsifier, and
* a portable text serialization (architecture header + flat parameter list).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import exprcore as ex
from .models import DimensionMismatch, SubsystemModel


class EmptyBatch(ValueError):
    pass


@dataclass(frozen=True)
class SupplyRate:
    """Quadratic supply rate blocks; the same 2x2 block matrix serves the
    (u, y) and (v, y) channels.  r21 is always r12^T."""

    r11: np.ndarray
    r12: np.ndarray
    r22: np.ndarray

    def __post_init__(self):
        r11 = np.atleast_2d(np.asarray(self.r11, dtype=float))
        r12 = np.atleast_2d(np.asarray(self.r12, dtype=float))
        r22 = np.atleast_2d(np.asarray(self.r22, dtype=float))
        if r11.shape[0] != r11.shape[1] or r22.shape[0] != r22.shape[1]:
            raise DimensionMismatch("r11 and r22 must be square")
        if r12.shape != (r11.shape[0], r22.shape[0]):
            raise DimensionMismatch("r12 must be (d_u, d_y)")
        object.__setattr__(self, "r11", 0.5 * (r11 + r11.T))
        object.__setattr__(self, "r12", r12)
        object.__setattr__(self, "r22", 0.5 * (r22 + r22.T))

    @property
    def d_u(self) -> int:
        return self.r11.shape[0]

    @property
    def d_y(self) -> int:
        return self.r22.shape[0]

    @property
    def r21(self) -> np.ndarray:
        return self.r12.T

    def matrix(self) -> np.ndarray:
        top = np.hstack([self.r11, self.r12])
        bot = np.hstack([self.r12.T, self.r22])
        return np.vstack([top, bot])

    @classmethod
    def from_matrix(cls, mat, d_u: int) -> "SupplyRate":
        mat = np.asarray(mat, dtype=float)
        mat = 0.5 * (mat + mat.T)
        return cls(mat[:d_u, :d_u], mat[:d_u, d_u:], mat[d_u:, d_u:])

    @classmethod
    def zeros(cls, d_u: int, d_y: int) -> "SupplyRate":
        return cls(np.zeros((d_u, d_u)), np.zeros((d_u, d_y)), np.zeros((d_y, d_y)))

    def scaled_add(self, a: float, other: "SupplyRate", b: float) -> "SupplyRate":
        return SupplyRate(
            a * self.r11 + b * other.r11,
            a * self.r12 + b * other.r12,
            a * self.r22 + b * other.r22,
        )

    def frobenius_distance(self, other: "SupplyRate") -> float:
        return float(np.linalg.norm(self.matrix() - other.matrix(), "fro"))

    def is_zero(self) -> bool:
        return not (np.any(self.r11) or np.any(self.r12) or np.any(self.r22))


def initial_supply_rate(d_u: int, d_y: int, r12_sign: float = -0.5,
                        r22_eps: float = 0.05, row_scale=None) -> SupplyRate:
    """Passivity-like start: R11 = 0, R12 = sign * S, R22 = -eps * S.

    row_scale optionally weights each channel row (e.g. inverse inertias so
    the implied storage gradients stay order one regardless of the time
    constants); default is the identity weighting.
    """
    if row_scale is None:
        row_scale = np.ones(d_u)
    else:
        row_scale = np.asarray(row_scale, dtype=float).ravel()
        if row_scale.size != d_u:
            raise DimensionMismatch("row_scale must have one entry per input row")
    r12 = r12_sign * np.eye(d_u, d_y) * row_scale[:, None]
    r22_diag = np.ones(d_y)
    r22_diag[:d_u] = row_scale[: min(d_u, d_y)]
    return SupplyRate(
        np.zeros((d_u, d_u)),
        r12,
        -r22_eps * np.diag(r22_diag),
    )


class StorageNet:
    """Tanh MLP storage function plus a trainable secondary gain K (d_v x d_y)."""

    def __init__(self, weights, biases, w_out, b_out, k):
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.w_out = np.asarray(w_out, dtype=float)
        self.b_out = float(b_out)
        self.k = np.atleast_2d(np.asarray(k, dtype=float))
        if len(self.weights) != len(self.biases):
            raise DimensionMismatch("one bias vector per weight matrix required")
        for w, b in zip(self.weights, self.biases):
            if w.shape[0] != b.shape[0]:
                raise DimensionMismatch("bias length must match layer width")
        if self.w_out.shape[0] != self.weights[-1].shape[0]:
            raise DimensionMismatch("output weights must match last hidden width")
        if not all(np.all(np.isfinite(a)) for a in self._arrays()):
            raise ValueError("non-finite storage net parameters")

    def _arrays(self):
        return [*self.weights, *self.biases, self.w_out, np.array([self.b_out]), self.k]

    @property
    def d_x(self) -> int:
        return self.weights[0].shape[1]

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights)

    def copy(self) -> "StorageNet":
        return StorageNet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.w_out.copy(),
            self.b_out,
            self.k.copy(),
        )

    def pack(self) -> np.ndarray:
        """Flatten theta (network parameters, excluding K) in a fixed order."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        parts.append(self.w_out.ravel())
        parts.append(np.array([self.b_out]))
        return np.concatenate(parts)

    def unpack_into(self, theta: np.ndarray) -> None:
        i = 0
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[li] = theta[i : i + w.size].reshape(w.shape)
            i += w.size
            self.biases[li] = theta[i : i + b.size].reshape(b.shape)
            i += b.size
        self.w_out = theta[i : i + self.w_out.size]
        i += self.w_out.size
        self.b_out = float(theta[i])

    def n_theta(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases)) + self.w_out.size + 1


def init_storage_net(d_x: int, d_v: int, d_y: int, hidden=(6, 6),
                     rng: np.random.Generator | None = None) -> StorageNet:
    """Uniform [-0.5, 0.5] / sqrt(fan-in) initialization; K starts at zero."""
    rng = rng or np.random.default_rng(0)
    weights, biases = [], []
    fan_in = d_x
    for width in hidden:
        weights.append(rng.uniform(-0.5, 0.5, size=(width, fan_in)) / np.sqrt(fan_in))
        biases.append(rng.uniform(-0.5, 0.5, size=width) / np.sqrt(fan_in))
        fan_in = width
    w_out = rng.uniform(-0.5, 0.5, size=fan_in) / np.sqrt(fan_in)
    return StorageNet(weights, biases, w_out, 0.0, np.zeros((d_v, d_y)))


def _forward(net: StorageNet, x: np.ndarray):
    acts = [np.asarray(x, dtype=float)]
    for w, b in zip(net.weights, net.biases):
        acts.append(np.tanh(acts[-1] @ w.T + b))
    value = acts[-1] @ net.w_out + net.b_out
    return value, acts


def storage_value(net: StorageNet, x) -> float | np.ndarray:
    """MLP forward pass; accepts a single state (d,) or a batch (N, d)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.d_x:
        raise DimensionMismatch(f"state must have {net.d_x} coords")
    value, _ = _forward(net, x)
    return float(value) if x.ndim == 1 else value


def storage_grad(net: StorageNet, x) -> np.ndarray:
    """Gradient of the storage value with respect to the state, batched."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.d_x:
        raise DimensionMismatch(f"state must have {net.d_x} coords")
    _, acts = _forward(net, x)
    lam = np.broadcast_to(net.w_out, acts[-1].shape).copy()
    for w, a in zip(reversed(net.weights), reversed(acts[1:])):
        lam = (lam * (1.0 - a * a)) @ w
    return lam


def _pad_channel(arr: np.ndarray, width: int, label: str) -> np.ndarray:
    have = arr.shape[-1]
    if have == width:
        return arr
    if have > width:
        raise DimensionMismatch(f"{label} has width {have} > supply-rate block {width}")
    pad = np.zeros(arr.shape[:-1] + (width - have,))
    return np.concatenate([arr, pad], axis=-1)


def supply_rate_eval(rate: SupplyRate, u, v, y) -> float | np.ndarray:
    """r = [u;y]^T blk(R) [u;y] + [v;y]^T blk(R) [v;y], channels padded to d_u."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape[-1] != rate.d_y:
        raise DimensionMismatch(f"output must have {rate.d_y} coords")
    scalar = y.ndim == 1
    u = _pad_channel(u, rate.d_u, "primary input")
    v = _pad_channel(v, rate.d_u, "secondary input")

    def form(w):
        t11 = np.sum((w @ rate.r11) * w, axis=-1)
        t12 = 2.0 * np.sum((w @ rate.r12) * y, axis=-1)
        t22 = np.sum((y @ rate.r22) * y, axis=-1)
        return t11 + t12 + t22

    r = form(u) + form(v)
    return float(r) if scalar else r


def dissipation_residual(net: StorageNet, model: SubsystemModel, rate: SupplyRate,
                         x, u) -> float | np.ndarray:
    """grad V . f - r with v = K h(x); nonpositive means dissipative at the point."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    scalar = x.ndim == 1
    xb = np.atleast_2d(x)
    ub = u.reshape(xb.shape[0], model.d_u)
    y = model.eval_h(xb)
    v = y @ net.k.T
    f = model.eval_f(xb, ub, v)
    g = np.sum(storage_grad(net, xb) * f, axis=-1)
    r = supply_rate_eval(rate, ub, v, y)
    out = g - r
    return float(out[0]) if scalar else out


def loss(net: StorageNet, model: SubsystemModel, rate: SupplyRate, batch,
         margin: float = 0.01) -> float:
    """Certificate loss: V(0)^2 + mean(positivity hinge + residual hinge).

    The positivity hinge uses max(margin*|x|^2 - V(x), 0); margin = 0 recovers
    the plain max(-V, 0) form.
    """
    x, u = batch.x, batch.u
    if x.shape[0] == 0:
        raise EmptyBatch("training batch is empty")
    v0 = storage_value(net, np.zeros(net.d_x))
    vx = storage_value(net, x)
    resid = dissipation_residual(net, model, rate, x, u)
    floor = margin * np.sum(x * x, axis=-1)
    pos = np.maximum(floor - vx, 0.0)
    return float(v0 * v0 + np.mean(pos + np.maximum(resid, 0.0)))


@dataclass
class TrainBatch:
    """Sampled training states and primary inputs (|x| = |u| = N)."""

    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        u = np.asarray(self.u, dtype=float)
        if self.x.shape[0] == 0:
            self.u = u.reshape(0, u.shape[-1] if u.ndim else 0)
        else:
            self.u = u.reshape(self.x.shape[0], -1)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def extended(self, x_new, u_new) -> "TrainBatch":
        x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
        u_new = np.asarray(u_new, dtype=float).reshape(x_new.shape[0], -1)
        return TrainBatch(np.vstack([self.x, x_new]), np.vstack([self.u, u_new]))


def _value_param_grad(net: StorageNet, x: np.ndarray, coeff: np.ndarray, grads: dict):
    """Accumulate d(sum_j coeff_j V(x_j))/dtheta into grads."""
    _, acts = _forward(net, x)
    grads["w_out"] += coeff @ acts[-1]
    grads["b_out"] += float(np.sum(coeff))
    lam = coeff[:, None] * net.w_out
    for li in range(len(net.weights) - 1, -1, -1):
        a = acts[li + 1]
        lz = lam * (1.0 - a * a)
        grads["w"][li] += lz.T @ acts[li]
        grads["b"][li] += lz.sum(axis=0)
        lam = lz @ net.weights[li]


def _lie_param_grad(net: StorageNet, x: np.ndarray, f: np.ndarray,
                    coeff: np.ndarray, grads: dict):
    """Accumulate d(sum_j coeff_j grad V(x_j).f_j)/dtheta into grads.

    The directional derivative g = grad V . f equals the tangent (JVP) pass
    t_l = (1 - a_l^2) * (W_l t_{l-1}), g = w_out . t_L; this backpropagates
    through both the activation and tangent paths jointly.
    """
    _, acts = _forward(net, x)
    tans = [np.asarray(f, dtype=float)]
    for w, a in zip(net.weights, acts[1:]):
        tans.append((1.0 - a * a) * (tans[-1] @ w.T))
    grads["w_out"] += coeff @ tans[-1]

    nl = len(net.weights)
    tau = coeff[:, None] * net.w_out
    gz_next = None
    for li in range(nl - 1, -1, -1):
        a = acts[li + 1]
        d = 1.0 - a * a
        u_pre = tans[li] @ net.weights[li].T
        gu = tau * d
        gz = tau * u_pre * (-2.0 * a * d)
        if gz_next is not None:
            gz += (gz_next @ net.weights[li + 1]) * d
        grads["w"][li] += gu.T @ tans[li] + gz.T @ acts[li]
        grads["b"][li] += gz.sum(axis=0)
        tau = gu @ net.weights[li]
        gz_next = gz
    # tangent path terminates at the constant seed f; activation path at x


def _zero_grads(net: StorageNet) -> dict:
    return {
        "w": [np.zeros_like(w) for w in net.weights],
        "b": [np.zeros_like(b) for b in net.biases],
        "w_out": np.zeros_like(net.w_out),
        "b_out": 0.0,
        "k": np.zeros_like(net.k),
    }


def _flatten_grads(net: StorageNet, grads: dict) -> tuple[np.ndarray, np.ndarray]:
    parts = []
    for gw, gb in zip(grads["w"], grads["b"]):
        parts.append(gw.ravel())
        parts.append(gb.ravel())
    parts.append(grads["w_out"].ravel())
    parts.append(np.array([grads["b_out"]]))
    return np.concatenate(parts), grads["k"]


def loss_and_grad(net: StorageNet, model: SubsystemModel, rate: SupplyRate, batch,
                  margin: float = 0.01) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss value plus its analytic gradient: (loss, d/dtheta flat, d/dK).

    Hinge terms use the active-branch subgradient (strict inequality).
    """
    x, u = batch.x, batch.u
    n = x.shape[0]
    if n == 0:
        raise EmptyBatch("training batch is empty")
    grads = _zero_grads(net)

    # V(0)^2 term
    x0 = np.zeros((1, net.d_x))
    v0 = storage_value(net, x0)[0]
    _value_param_grad(net, x0, np.array([2.0 * v0]), grads)

    # positivity hinge: d/dtheta max(margin |x|^2 - V, 0) = -dV/dtheta when active
    vx = storage_value(net, x)
    floor = margin * np.sum(x * x, axis=-1)
    pos = floor - vx
    pos_active = pos > 0.0
    if np.any(pos_active):
        _value_param_grad(net, x, -pos_active.astype(float) / n, grads)

    # residual hinge
    y = model.eval_h(x)
    v = y @ net.k.T
    f = model.eval_f(x, u, v)
    g = np.sum(storage_grad(net, x) * f, axis=-1)
    r = supply_rate_eval(rate, u, v, y)
    resid = g - r
    act = resid > 0.0
    if np.any(act):
        coeff = act.astype(float) / n
        _lie_param_grad(net, x, f, coeff, grads)

        # dK path: v = y K^T feeds both f and r
        pts = np.concatenate([x, u, v], axis=-1)
        gradv = storage_grad(net, x)
        dg_dv = np.zeros((n, model.d_v))
        for row, fe in enumerate(model.f):
            _, parts = ex.eval_dual_batch(fe, pts)
            dg_dv += gradv[:, row : row + 1] * parts[:, model.d_x + model.d_u :]
        v_pad = _pad_channel(v, rate.d_u, "secondary input")
        dr_dv = 2.0 * (v_pad @ rate.r11 + y @ rate.r12.T)[:, : model.d_v]
        dres_dv = dg_dv - dr_dv
        grads["k"] += (coeff[:, None] * dres_dv).T @ y

    value = float(v0 * v0 + np.mean(np.maximum(pos, 0.0) + np.maximum(resid, 0.0)))
    gt, gk = _flatten_grads(net, grads)
    return value, gt, gk


def loss_grad(net: StorageNet, model: SubsystemModel, rate: SupplyRate, batch,
              margin: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of the loss: (d/dtheta flat, d/dK)."""
    _, gt, gk = loss_and_grad(net, model, rate, batch, margin)
    return gt, gk


def compile_exprs(net: StorageNet, offset: int = 0):
    """Expression graphs of V and grad V over Var(offset)..Var(offset+d_x-1).

    The gradient expressions reuse the activation subgraphs of the value
    expression, so interval evaluation shares work across all of them.
    """
    d = net.d_x
    x_vars = [ex.var(offset + i) for i in range(d)]
    acts = [list(x_vars)]
    gates = []
    for w, b in zip(net.weights, net.biases):
        layer, gate = [], []
        for j in range(w.shape[0]):
            z = ex.dot(w[j], acts[-1])
            if b[j] != 0.0:
                z = ex.Add(z, ex.const(b[j]))
            a = ex.tanh(z)
            layer.append(a)
            gate.append(ex.Sub(ex.const(1.0), ex.square(a)))
        acts.append(layer)
        gates.append(gate)
    v_expr = ex.dot(net.w_out, acts[-1])
    if net.b_out != 0.0:
        v_expr = ex.Add(v_expr, ex.const(net.b_out))

    grad_exprs = []
    for kdim in range(d):
        tans = [[ex.const(1.0 if i == kdim else 0.0) for i in range(d)]]
        for li, w in enumerate(net.weights):
            layer = []
            for j in range(w.shape[0]):
                lin = ex.dot(w[j], tans[-1])
                layer.append(ex.Mul(gates[li][j], lin))
            tans.append(layer)
        grad_exprs.append(ex.dot(net.w_out, tans[-1]))
    return v_expr, grad_exprs


def supply_rate_expr(rate: SupplyRate, u_exprs, v_exprs, y_exprs) -> ex.Expr:
    """The supply rate as an expression over given channel expressions.

    Self-products are emitted as Square nodes so interval evaluation stays
    exact on the diagonal terms.
    """

    def is_zero(e):
        return isinstance(e, ex.Constant) and e.value == 0.0

    def pad(exprs, width):
        exprs = list(exprs)
        if len(exprs) > width:
            raise DimensionMismatch("channel wider than supply-rate block")
        while len(exprs) < width:
            exprs.append(ex.const(0.0))
        return exprs

    u_exprs = pad(u_exprs, rate.d_u)
    v_exprs = pad(v_exprs, rate.d_u)
    y_exprs = list(y_exprs)
    if len(y_exprs) != rate.d_y:
        raise DimensionMismatch("output channel width mismatch")

    terms = []

    def quad_block(mat, left, right, symmetric_pair):
        m = np.asarray(mat)
        for p in range(m.shape[0]):
            for q in range(m.shape[1]):
                c = m[p, q]
                if c == 0.0 or is_zero(left[p]) or is_zero(right[q]):
                    continue
                if symmetric_pair and left[p] is right[q]:
                    terms.append(ex.Mul(ex.const(c), ex.square(left[p])))
                else:
                    terms.append(ex.Mul(ex.const(c), ex.Mul(left[p], right[q])))

    for chan in (u_exprs, v_exprs):
        quad_block(rate.r11, chan, chan, True)
        quad_block(2.0 * rate.r12, chan, y_exprs, False)
        quad_block(rate.r22, y_exprs, y_exprs, True)

    acc = None
    for t in terms:
        acc = t if acc is None else ex.Add(acc, t)
    return ex.const(0.0) if acc is None else acc


def net_to_dict(net: StorageNet) -> dict:
    return {
        "arch": {"d_x": net.d_x, "hidden": list(net.hidden)},
        "params": [float(p) for p in net.pack()],
        "k": [[float(v) for v in row] for row in net.k],
    }


def net_from_dict(data: dict) -> StorageNet:
    arch = data["arch"]
    d_x = int(arch["d_x"])
    hidden = tuple(int(h) for h in arch["hidden"])
    k = np.asarray(data["k"], dtype=float)
    net = init_storage_net(d_x, k.shape[0], k.shape[1], hidden=hidden,
                           rng=np.random.default_rng(0))
    net.unpack_into(np.asarray(data["params"], dtype=float))
    net.k = np.atleast_2d(k)
    return net


def save_net(net: StorageNet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(net_to_dict(net), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_net(path) -> StorageNet:
    with open(path, "r", encoding="utf-8") as fh:
        return net_from_dict(json.load(fh))
