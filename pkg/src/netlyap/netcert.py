"""Network-level certification: global LMI assembly and checking, the ADMM
consensus over supply rates, and the outer learning loop.

The coordinator alternates (a) per-subsystem storage training against the
current supply rates R_i, (b) projection of R_i + S_i onto the set of supply
rates satisfying the network LMI (the Z update), (c) the consensus update of
S_i, and (d) re-training against the projected targets (the R update, with
backtracking toward the last locally-feasible rates when a target is not
trainable).  The loop stops when sum_i ||R_i - Z_i||_F falls below the
tolerance and the final gains still satisfy the LMI.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import linalg as la
from .falsifier import VerifDomain
from .models import DimensionMismatch, NetworkSpec
from .storage_nn import StorageNet, SupplyRate, load_net, save_net
from .trainer import TrainerConfig, TrainingFailed, learn_storage

BACKTRACK_ALPHAS = (1.0, 0.5, 0.25, 0.125)


class NotConverged(RuntimeError):
    def __init__(self, residual_history):
        super().__init__(f"ADMM did not converge; residuals {residual_history}")
        self.residual_history = list(residual_history)


class Infeasible(RuntimeError):
    """Backtracking hit its smallest step without a trainable supply rate."""


class ProjectionStalled(RuntimeError):
    """The feasibility projection hit its iteration cap above tolerance."""


@dataclass
class AdmmState:
    """Per-subsystem consensus triples plus iteration bookkeeping."""

    r: list
    z: list
    s: list
    iteration: int = 0
    residual_history: list = field(default_factory=list)

    def residual(self) -> float:
        return float(sum(ri.frobenius_distance(zi) for ri, zi in zip(self.r, self.z)))


@dataclass
class NetworkCertificate:
    """A certified compositional Lyapunov function V(x) = sum_i V_i(x_i)."""

    nets: list
    rates: list
    z: list
    s: list
    lmi: np.ndarray
    lmi_lambda_max: float
    eta: float
    iterations: int
    residual_history: list
    net_spec: NetworkSpec | None = None

    @property
    def gains(self) -> list[np.ndarray]:
        return [net.k for net in self.nets]


def pad_gain(k: np.ndarray, d_u: int, d_y: int) -> np.ndarray:
    """Zero-pad a (d_v, d_y) gain to the (d_u, d_y) supply-rate block width."""
    k = np.atleast_2d(np.asarray(k, dtype=float))
    if k.shape[1] != d_y or k.shape[0] > d_u:
        raise DimensionMismatch(f"gain {k.shape} incompatible with block ({d_u}, {d_y})")
    if k.shape[0] == d_u:
        return k
    return np.vstack([k, np.zeros((d_u - k.shape[0], d_y))])


def _block_diag(blocks) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r : r + b.shape[0], c : c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def assemble_global_R(rates) -> np.ndarray:
    """The interleaved super-block matrix: block-diagonals of each R_i block."""
    if not rates:
        raise DimensionMismatch("need at least one supply rate")
    r11 = _block_diag([r.r11 for r in rates])
    r12 = _block_diag([r.r12 for r in rates])
    r21 = _block_diag([r.r21 for r in rates])
    r22 = _block_diag([r.r22 for r in rates])
    return np.block([[r11, r12], [r21, r22]])


def global_lmi(m, k_list, rates) -> np.ndarray:
    """[M; I; K; I]^T diag(R, R) [M; I; K; I] with K = blockdiag of padded gains."""
    m = np.asarray(m, dtype=float)
    d_u = sum(r.d_u for r in rates)
    d_y = sum(r.d_y for r in rates)
    if m.shape != (d_u, d_y):
        raise DimensionMismatch(f"M must be {(d_u, d_y)}, got {m.shape}")
    if len(k_list) != len(rates):
        raise DimensionMismatch("one gain per supply rate required")
    k = _block_diag([pad_gain(kk, r.d_u, r.d_y) for kk, r in zip(k_list, rates)])
    eye = np.eye(d_y)
    q = np.vstack([m, eye, k, eye])
    big_r = assemble_global_R(rates)
    rr = _block_diag([big_r, big_r])
    out = q.T @ rr @ q
    return 0.5 * (out + out.T)


def check_global(m, k_list, rates, tol: float = 1e-8) -> bool:
    """True iff the global LMI matrix is negative semidefinite within tol."""
    w, _ = la.sym_eig(global_lmi(m, k_list, rates))
    return bool(w[0] <= tol)


def _sym_param_basis(dim: int):
    pairs = [(p, q) for p in range(dim) for q in range(p, dim)]
    weights = np.array([1.0 if p == q else 2.0 for p, q in pairs])
    return pairs, weights


def _rates_to_params(rates) -> np.ndarray:
    out = []
    for r in rates:
        mat = r.matrix()
        pairs, _ = _sym_param_basis(mat.shape[0])
        out.extend(mat[p, q] for p, q in pairs)
    return np.array(out)


def _params_to_rates(params: np.ndarray, dims) -> list[SupplyRate]:
    rates = []
    i = 0
    for d_u, d_y in dims:
        dim = d_u + d_y
        pairs, _ = _sym_param_basis(dim)
        mat = np.zeros((dim, dim))
        for (p, q) in pairs:
            mat[p, q] = params[i]
            mat[q, p] = params[i]
            i += 1
        rates.append(SupplyRate.from_matrix(mat, d_u))
    return rates


def z_update(targets, m, k_list, tol_lmi: float = 1e-8,
             max_iter: int = 500) -> list[SupplyRate]:
    """Frobenius projection of the targets onto supply rates satisfying the LMI.

    Solved by consensus splitting on the affine image: alternate a weighted
    least-squares pull-back onto the supply-rate parametrization (normal
    equations) with a projection of the image onto the negative-semidefinite
    cone, plus a final feasibility polish.  Already-feasible targets return
    unchanged.
    """
    w0, _ = la.sym_eig(global_lmi(m, k_list, targets))
    if w0[0] <= tol_lmi:
        return list(targets)

    dims = [(r.d_u, r.d_y) for r in targets]
    weights = np.concatenate([_sym_param_basis(du + dy)[1] for du, dy in dims])
    n_p = weights.size
    t = _rates_to_params(targets)

    basis_cols = []
    for j in range(n_p):
        e = np.zeros(n_p)
        e[j] = 1.0
        lm = global_lmi(m, k_list, _params_to_rates(e, dims))
        basis_cols.append(lm.ravel())
    a_mat = np.stack(basis_cols, axis=1)
    ata = a_mat.T @ a_mat
    ldim = int(np.sqrt(a_mat.shape[0]))

    rho = 1.0
    z = t.copy()
    g = (a_mat @ z).reshape(ldim, ldim)
    y = la.nsd_project(g)
    u = g - y
    system = np.diag(weights) + rho * ata
    for _ in range(max_iter):
        rhs = weights * t + rho * (a_mat.T @ (y - u).ravel())
        z_new = la.linsolve(system, rhs)
        g = (a_mat @ z_new).reshape(ldim, ldim)
        y = la.nsd_project(g + u)
        u = u + g - y
        step = np.max(np.abs(z_new - z))
        z = z_new
        w, _ = la.sym_eig(0.5 * (g + g.T))
        if w[0] <= tol_lmi and step < 1e-10:
            break

    for _ in range(50):
        g = (a_mat @ z).reshape(ldim, ldim)
        g = 0.5 * (g + g.T)
        w, _ = la.sym_eig(g)
        if w[0] <= tol_lmi:
            return _params_to_rates(z, dims)
        shift = la.nsd_project(g) - g
        ridge = ata + 1e-12 * np.eye(n_p)
        z = z + la.linsolve(ridge, a_mat.T @ shift.ravel())
    raise ProjectionStalled(f"projection stalled at lambda_max {w[0]:.3e}")


def s_update(state: AdmmState) -> AdmmState:
    """S_i <- R_i - Z_i + S_i, elementwise over the supply-rate blocks."""
    new_s = [ri.scaled_add(1.0, zi, -1.0).scaled_add(1.0, si, 1.0)
             for ri, zi, si in zip(state.r, state.z, state.s)]
    return AdmmState(r=list(state.r), z=list(state.z), s=new_s,
                     iteration=state.iteration,
                     residual_history=list(state.residual_history))


def r_update(z_i: SupplyRate, s_i: SupplyRate, model, dom: VerifDomain,
             cfg: TrainerConfig, prev_r: SupplyRate, prev_net: StorageNet | None,
             log=None) -> tuple[SupplyRate, StorageNet]:
    """Propose R_i = Z_i - S_i and train; backtrack toward the last feasible
    rates when training cannot verify the target."""
    target = z_i.scaled_add(1.0, s_i, -1.0)
    for alpha in BACKTRACK_ALPHAS:
        cand = target if alpha == 1.0 else target.scaled_add(alpha, prev_r, 1.0 - alpha)
        if prev_net is not None and cand.frobenius_distance(prev_r) == 0.0:
            return prev_r, prev_net
        try:
            net = learn_storage(model, cand, dom, cfg, warm=prev_net, log=log)
            return cand, net
        except TrainingFailed:
            continue
    raise Infeasible("no verifiable supply rate along the backtracking segment")


def _train_many(jobs, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(job) for job in jobs]
        return [f.result() for f in futures]


def subsystem_trainer_config(cfg: TrainerConfig, index: int) -> TrainerConfig:
    """Derive a per-subsystem config with an independent deterministic seed."""
    return cfg.with_updates(seed=cfg.seed * 10007 + index)


def run_algorithm1(net: NetworkSpec, init_r, eta: float, cfg: TrainerConfig,
                   dom: VerifDomain, max_outer: int = 20, tol_lmi: float = 1e-8,
                   threads: int = 1, log=None) -> NetworkCertificate:
    """The full distributed certification loop.

    Terminates when the consensus residual drops to eta and the final gains
    still satisfy the global LMI; raises NotConverged / Infeasible otherwise.
    Subsystem trainings within an iteration are independent (deterministic
    per-subsystem seeds), so threaded and serial runs give identical results.
    """
    if eta <= 0.0:
        raise ValueError("eta must be positive")
    log = log or (lambda **kw: None)
    n = net.n
    subs = net.subsystems
    r = list(init_r)
    if len(r) != n:
        raise DimensionMismatch("one initial supply rate per subsystem required")
    s = [SupplyRate.zeros(ri.d_u, ri.d_y) for ri in r]
    nets: list[StorageNet | None] = [None] * n
    verified = [False] * n
    cfgs = [subsystem_trainer_config(cfg, i) for i in range(n)]
    history: list[float] = []

    for it in range(1, max_outer + 1):
        pending = [i for i in range(n) if not verified[i]]

        def train_job(i):
            def job():
                return learn_storage(subs[i], r[i], dom, cfgs[i], warm=nets[i],
                                     log=_sub_log(log, i))
            return job

        try:
            results = _train_many([train_job(i) for i in pending], threads)
        except TrainingFailed as exc:
            if it == 1:
                raise Infeasible(f"initial supply rates not trainable: {exc}") from exc
            raise
        for i, out in zip(pending, results):
            nets[i] = out
            verified[i] = True

        k_list = [nets[i].k for i in range(n)]
        targets = [r[i].scaled_add(1.0, s[i], 1.0) for i in range(n)]
        z = z_update(targets, net.m, k_list, tol_lmi=tol_lmi)
        s = [r[i].scaled_add(1.0, z[i], -1.0).scaled_add(1.0, s[i], 1.0) for i in range(n)]

        def r_job(i):
            def job():
                return r_update(z[i], s[i], subs[i], dom, cfgs[i], r[i], nets[i],
                                log=_sub_log(log, i))
            return job

        results = _train_many([r_job(i) for i in range(n)], threads)
        for i, (rate_i, net_i) in enumerate(results):
            r[i], nets[i] = rate_i, net_i
            verified[i] = True

        resid = float(sum(r[i].frobenius_distance(z[i]) for i in range(n)))
        history.append(resid)
        k_list = [nets[i].k for i in range(n)]
        lmi = global_lmi(net.m, k_list, r)
        lam_max = float(la.sym_eig(lmi)[0][0])
        log(outer=it, residual=resid, lmi_lambda_max=lam_max)
        if resid <= eta and lam_max <= tol_lmi:
            return NetworkCertificate(
                nets=[nn for nn in nets], rates=r, z=z, s=s, lmi=lmi,
                lmi_lambda_max=lam_max, eta=eta, iterations=it,
                residual_history=history, net_spec=net)
    raise NotConverged(history)


def _sub_log(log, i):
    def inner(**kw):
        log(subsystem=i, **kw)
    return inner


def certify(net: NetworkSpec, dom: VerifDomain, cfg: TrainerConfig,
            init_r=None, eta: float = 1e-6, max_outer: int = 20,
            tol_lmi: float = 1e-8, threads: int = 1, log=None,
            r12_sign: float = -0.5, r22_eps: float = 0.05,
            scale_by_inertia: bool = False) -> NetworkCertificate:
    """Convenience front end to run_algorithm1 with default initial rates."""
    if init_r is None:
        from .models import input_inertias
        from .storage_nn import initial_supply_rate

        scales = [1.0 / j for j in input_inertias(net)] if scale_by_inertia \
            else [None] * net.n
        init_r = [initial_supply_rate(s.d_u, s.d_y, r12_sign, r22_eps, row_scale=sc)
                  for s, sc in zip(net.subsystems, scales)]
    return run_algorithm1(net, init_r, eta, cfg, dom, max_outer=max_outer,
                          tol_lmi=tol_lmi, threads=threads, log=log)


def _rate_to_lists(rate: SupplyRate) -> dict:
    return {
        "r11": [[float(v) for v in row] for row in rate.r11],
        "r12": [[float(v) for v in row] for row in rate.r12],
        "r22": [[float(v) for v in row] for row in rate.r22],
    }


def _rate_from_lists(data: dict) -> SupplyRate:
    return SupplyRate(np.asarray(data["r11"]), np.asarray(data["r12"]),
                      np.asarray(data["r22"]))


def write_bundle(path, manifest: dict, cert: NetworkCertificate | None = None) -> None:
    """Write a certificate bundle directory: manifest, nets, supply rates."""
    os.makedirs(path, exist_ok=True)
    if cert is not None:
        manifest = dict(manifest)
        manifest["certificate"] = {
            "eta": cert.eta,
            "iterations": cert.iterations,
            "residual_history": [float(v) for v in cert.residual_history],
            "lmi_lambda_max": cert.lmi_lambda_max,
            "n_subsystems": len(cert.nets),
        }
        for i, net in enumerate(cert.nets):
            save_net(net, os.path.join(path, f"subsystem_{i:02d}.json"))
        rates = {
            "r": [_rate_to_lists(x) for x in cert.rates],
            "z": [_rate_to_lists(x) for x in cert.z],
            "s": [_rate_to_lists(x) for x in cert.s],
        }
        with open(os.path.join(path, "supply_rates.json"), "w", encoding="utf-8") as fh:
            json.dump(rates, fh, sort_keys=True, indent=1)
            fh.write("\n")
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as fh:
        return json.load(fh)


def read_bundle_nets(path, n: int) -> list[StorageNet]:
    return [load_net(os.path.join(path, f"subsystem_{i:02d}.json")) for i in range(n)]


def read_bundle_rates(path) -> tuple[list, list, list]:
    with open(os.path.join(path, "supply_rates.json"), "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return ([_rate_from_lists(d) for d in data["r"]],
            [_rate_from_lists(d) for d in data["z"]],
            [_rate_from_lists(d) for d in data["s"]])
