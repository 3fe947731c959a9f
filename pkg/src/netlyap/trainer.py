"""Counterexample-guided training of storage functions and secondary gains.

One learning call alternates full-batch first-order minimization of the
certificate loss with falsification: violations found by cheap random probing
or by the interval falsifier are appended to the batch and training resumes
from the current parameters, until the falsifier verifies the candidate or
the round budget runs out.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import storage_nn as sn
from .falsifier import BudgetExhausted, VerifDomain, falsify
from .models import SubsystemModel
from .storage_nn import StorageNet, SupplyRate, TrainBatch


class TrainingFailed(RuntimeError):
    """No verifiable storage function was found within the round budget."""

    def __init__(self, last_loss: float, rounds: int, last_outcome: str):
        super().__init__(
            f"training failed after {rounds} rounds (last loss {last_loss:.3e}, "
            f"last outcome {last_outcome})")
        self.last_loss = last_loss
        self.rounds = rounds
        self.last_outcome = last_outcome


@dataclass(frozen=True)
class TrainerConfig:
    n_samples: int = 2000
    learning_rate: float = 0.01
    max_epochs: int = 1500
    max_falsify_rounds: int = 12
    seed: int = 0
    margin: float = 0.01
    k_max: float = 10.0
    optimizer: str = "adam"
    hidden: tuple = (6, 6)
    delta: float = 1e-3
    max_boxes: int = 200_000
    presample: int = 4096
    train_k: bool = True
    k_mask: np.ndarray | None = None
    hinge_patience: int = 3
    residual_margin: float = 0.0

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError("optimizer must be 'adam' or 'gd'")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.k_mask is not None:
            object.__setattr__(self, "k_mask", np.asarray(self.k_mask, dtype=bool))

    def with_updates(self, **kw) -> "TrainerConfig":
        return replace(self, **kw)


def _uniform_box(rng: np.random.Generator, box: np.ndarray, n: int) -> np.ndarray:
    lo, hi = box[:, 0], box[:, 1]
    return rng.uniform(0.0, 1.0, size=(n, box.shape[0])) * (hi - lo) + lo


def sample_datasets(model: SubsystemModel, dom: VerifDomain, cfg: TrainerConfig) -> TrainBatch:
    """N iid uniform state/input samples over the verification boxes."""
    rng = np.random.default_rng([cfg.seed, 0])
    x = _uniform_box(rng, dom.x_box(model.d_x), cfg.n_samples)
    if model.d_u > 0:
        u = _uniform_box(rng, dom.u_box(model.d_u), cfg.n_samples)
    else:
        u = np.zeros((cfg.n_samples, 0))
    return TrainBatch(x, u)


class _Adam:
    def __init__(self, size: int, lr: float):
        self.lr = lr
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * grad
        self.v = 0.999 * self.v + 0.001 * grad * grad
        mh = self.m / (1.0 - 0.9 ** self.t)
        vh = self.v / (1.0 - 0.999 ** self.t)
        return -self.lr * mh / (np.sqrt(vh) + 1e-8)


def _sample_violations(net: StorageNet, model: SubsystemModel, rate: SupplyRate,
                       dom: VerifDomain, rng: np.random.Generator,
                       n_probe: int, margin: float, max_keep: int = 32):
    """Random annulus points that genuinely violate the certificate, if any."""
    if n_probe <= 0:
        return None
    x = _uniform_box(rng, dom.x_box(model.d_x), n_probe)
    keep = np.sum(x * x, axis=1) >= dom.eps_l
    if model.d_u > 0:
        u = _uniform_box(rng, dom.u_box(model.d_u), n_probe)
        lo_u, _ = dom.input_bounds
        keep &= np.sum(u * u, axis=1) >= lo_u
    else:
        u = np.zeros((n_probe, 0))
    if not np.any(keep):
        return None
    x, u = x[keep], u[keep]
    vx = sn.storage_value(net, x)
    resid = sn.dissipation_residual(net, model, rate, x, u)
    score = np.maximum(-vx, resid)
    bad = score > 0.0
    if not np.any(bad):
        return None
    order = np.argsort(-score[bad], kind="stable")[:max_keep]
    return x[bad][order], u[bad][order]


def _train_epochs(net: StorageNet, model, rate, batch, cfg, log, trace=None):
    n_theta = net.n_theta()
    opt = _Adam(n_theta + net.k.size, cfg.learning_rate) if cfg.optimizer == "adam" else None
    calm = 0
    cur = sn.loss(net, model, rate, batch, cfg.margin)
    for epoch in range(cfg.max_epochs):
        cur, gt, gk = sn.loss_and_grad(net, model, rate, batch, cfg.margin)
        if trace is not None:
            trace.append(cur)
        v0 = sn.storage_value(net, np.zeros(net.d_x))
        hinge = cur - v0 * v0
        if hinge <= 0.0:
            calm += 1
            if calm >= cfg.hinge_patience:
                break
        else:
            calm = 0
        if not cfg.train_k:
            gk = np.zeros_like(gk)
        elif cfg.k_mask is not None:
            gk = np.where(cfg.k_mask, gk, 0.0)
        flat = np.concatenate([gt, gk.ravel()])
        step = opt.step(flat) if opt is not None else -cfg.learning_rate * flat
        net.unpack_into(net.pack() + step[:n_theta])
        if cfg.train_k:
            k = net.k + step[n_theta:].reshape(net.k.shape)
            if cfg.k_mask is not None:
                k = np.where(cfg.k_mask, k, 0.0)
            net.k = np.clip(k, -cfg.k_max, cfg.k_max)
    return cur


def learn_storage(model: SubsystemModel, rate: SupplyRate, dom: VerifDomain,
                  cfg: TrainerConfig, warm: StorageNet | None = None,
                  log=None) -> StorageNet:
    """Train until the falsifier verifies the candidate, else raise TrainingFailed.

    Counterexamples (from random probing and from the interval falsifier) are
    appended to the batch before each retraining round; rounds retrain from
    the current parameters.
    """
    log = log or (lambda **kw: None)
    batch = sample_datasets(model, dom, cfg)
    if warm is not None:
        net = warm.copy()
    else:
        net = sn.init_storage_net(model.d_x, model.d_v, model.d_y, hidden=cfg.hidden,
                                  rng=np.random.default_rng([cfg.seed, 1]))
    if cfg.k_mask is not None and cfg.k_mask.shape != net.k.shape:
        raise ValueError("k_mask shape must match the gain shape")

    # optimization targets a slightly tightened supply rate so the verified
    # conditions end up satisfied with an interior margin; falsification
    # always checks the rate actually being certified
    if cfg.residual_margin > 0.0:
        rate_train = SupplyRate(rate.r11, rate.r12,
                                rate.r22 - cfg.residual_margin * np.eye(rate.d_y))
    else:
        rate_train = rate

    last_loss = float("nan")
    last_outcome = "untrained"
    n_ce = 0
    for rnd in range(1, cfg.max_falsify_rounds + 1):
        last_loss = _train_epochs(net, model, rate_train, batch, cfg, log)
        probe_rng = np.random.default_rng([cfg.seed, 2, rnd])
        found = _sample_violations(net, model, rate, dom, probe_rng,
                                   cfg.presample, cfg.margin)
        if found is not None:
            batch = batch.extended(*found)
            n_ce += found[0].shape[0]
            last_outcome = "sample_counterexample"
            log(round=rnd, loss=last_loss, counterexamples=n_ce, outcome=last_outcome)
            continue
        try:
            res = falsify(net, model, rate, dom, delta=cfg.delta, max_boxes=cfg.max_boxes)
        except BudgetExhausted as exc:
            last_outcome = "budget_exhausted"
            log(round=rnd, loss=last_loss, counterexamples=n_ce, outcome=last_outcome,
                boxes=exc.boxes_processed)
            continue
        if res.verified:
            log(round=rnd, loss=last_loss, counterexamples=n_ce, outcome="verified")
            return net
        x_ce, u_ce = res.split_point(model)
        batch = batch.extended(x_ce[None], u_ce[None])
        n_ce += 1
        last_outcome = "counterexample"
        log(round=rnd, loss=last_loss, counterexamples=n_ce, outcome=last_outcome,
            condition=res.condition)
    raise TrainingFailed(last_loss, cfg.max_falsify_rounds, last_outcome)
