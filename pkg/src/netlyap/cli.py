"""Command-line surface: certify / verify / roa / simulate on config files
and certificate bundle directories.

Exit codes: 0 success, 1 usage or config error, 2 method-level negative
result (training failed, budget exhausted, not converged, verification found
a counterexample).  All randomness flows from the config seed; repeated runs
with the same config and seed produce byte-identical bundles and CSVs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import analysis as an
from . import linalg as la
from . import models as md
from . import netcert as nc
from .falsifier import BudgetExhausted, VerifDomain, falsify
from .models import ConfigError
from .netcert import Infeasible, NotConverged
from .storage_nn import initial_supply_rate, load_net, save_net
from .trainer import TrainerConfig, TrainingFailed

MODES = ("dncl", "dnl", "ql", "qcl", "cnl", "cncl")


def _kv(**kw) -> None:
    print(" ".join(f"{k}={v}" for k, v in kw.items()), flush=True)


def _domain_from_config(cfg: dict) -> VerifDomain:
    ver = cfg.get("verification", {})
    try:
        return VerifDomain(
            eps_l=float(ver["eps_l"]),
            eps_u=float(ver["eps_u"]),
            eps_l_u=ver.get("eps_l_u"),
            eps_u_u=ver.get("eps_u_u"),
        )
    except KeyError as exc:
        raise ConfigError(f"verification section missing {exc}")


def _trainer_from_config(cfg: dict, seed: int, central: bool = False) -> TrainerConfig:
    t = dict(cfg.get("trainer", {}))
    if central:
        t.update(cfg.get("central", {}))
    ver = cfg.get("verification", {})
    return TrainerConfig(
        n_samples=int(t.get("n_samples", 2000)),
        learning_rate=float(t.get("learning_rate", 0.01)),
        max_epochs=int(t.get("max_epochs", 1500)),
        max_falsify_rounds=int(t.get("max_falsify_rounds", 12)),
        seed=seed,
        margin=float(t.get("margin", 0.01)),
        k_max=float(t.get("k_max", 10.0)),
        optimizer=t.get("optimizer", "adam"),
        hidden=tuple(t.get("hidden", (6, 6))),
        delta=float(ver.get("delta", 1e-3)),
        max_boxes=int(ver.get("max_boxes", 2_000_000)),
        presample=int(t.get("presample", 4096)),
        residual_margin=float(t.get("residual_margin", 0.0)),
    )


def _grid_from_config(cfg: dict, seed: int) -> an.GridConfig:
    r = cfg.get("roa", {})
    return an.GridConfig(
        n=int(r.get("grid_n", 21)),
        max_grid_dims=int(r.get("max_grid_dims", 4)),
        mc_samples=int(r.get("mc_samples", 200_000)),
        plane_n=int(r.get("plane_n", 101)),
        planes=tuple(tuple(p) for p in r.get("planes", ())),
        seed=seed,
        certify=bool(r.get("certify", False)),
    )


def _load_case(path: str, seed_override: int | None):
    net, cfg = md.load_network(path)
    seed = int(cfg.get("seed", 0)) if seed_override is None else seed_override
    cfg = dict(cfg)
    cfg["seed"] = seed
    return net, cfg, seed


def cmd_certify(args) -> int:
    try:
        net, cfg, seed = _load_case(args.config, args.seed)
    except ConfigError as exc:
        _kv(error="config", detail=str(exc))
        return 1
    mode = args.mode
    if mode not in MODES:
        _kv(error="usage", detail=f"unknown mode {mode}")
        return 1
    dom = _domain_from_config(cfg)
    tcfg = _trainer_from_config(cfg, seed)
    admm = cfg.get("admm", {})
    threads = 1 if args.deterministic else max(1, args.threads)
    manifest = {"schema_version": 1, "mode": mode, "seed": seed, "config": cfg}
    t_start = time.monotonic()

    try:
        if mode in ("dncl", "dnl"):
            if mode == "dnl":
                tcfg = tcfg.with_updates(train_k=False)
            cert = nc.certify(
                net, dom, tcfg,
                eta=float(admm.get("eta", 1e-6)),
                max_outer=int(admm.get("max_outer", 20)),
                tol_lmi=float(admm.get("tol_lmi", 1e-8)),
                r12_sign=float(admm.get("r12_sign", -0.5)),
                r22_eps=float(admm.get("r22_eps", 0.05)),
                scale_by_inertia=bool(admm.get("scale_by_inertia", False)),
                threads=threads,
                log=_kv,
            )
            nc.write_bundle(args.out, manifest, cert)
            _kv(result="certified", iterations=cert.iterations,
                residual=cert.residual_history[-1],
                lmi_lambda_max=cert.lmi_lambda_max,
                wall_seconds=round(time.monotonic() - t_start, 3))
        elif mode == "ql":
            a = an.linearize_field(net)
            if not la.is_hurwitz(a):
                _kv(result="failed", reason="NotHurwitz")
                return 2
            p = la.solve_lyapunov(a, np.eye(a.shape[0]))
            manifest["quadratic"] = {"p": p.tolist()}
            nc.write_bundle(args.out, manifest)
            _kv(result="certified", wall_seconds=round(time.monotonic() - t_start, 3))
        elif mode == "qcl":
            a, b = an.linearize_field(net, with_secondary=True)
            p_care, k = la.solve_care(a, b, np.eye(a.shape[0]), np.eye(b.shape[1]))
            p = la.solve_lyapunov(a - b @ k, np.eye(a.shape[0]))
            manifest["quadratic"] = {"p": p.tolist(), "k_dense": (-k).tolist()}
            nc.write_bundle(args.out, manifest)
            _kv(result="certified", wall_seconds=round(time.monotonic() - t_start, 3))
        else:  # cnl / cncl
            runner = an.baseline_cnl if mode == "cnl" else an.baseline_cncl
            ccfg = _trainer_from_config(cfg, seed, central=True)
            central = runner(net, dom, ccfg, log=_kv)
            nc.write_bundle(args.out, manifest)
            save_net(central.net, os.path.join(args.out, "central.json"))
            _kv(result="certified", wall_seconds=round(time.monotonic() - t_start, 3))
    except BudgetExhausted:
        _kv(result="failed", reason="BudgetExhausted",
            wall_seconds=round(time.monotonic() - t_start, 3))
        return 2
    except TrainingFailed as exc:
        _kv(result="failed", reason="TrainingFailed", rounds=exc.rounds,
            last_loss=exc.last_loss,
            wall_seconds=round(time.monotonic() - t_start, 3))
        return 2
    except (NotConverged, Infeasible) as exc:
        _kv(result="failed", reason=type(exc).__name__,
            wall_seconds=round(time.monotonic() - t_start, 3))
        return 2
    except la.NoStabilizingInit:
        _kv(result="failed", reason="NoStabilizingInit")
        return 2
    return 0


def _read_bundle(path: str):
    try:
        manifest = nc.read_manifest(path)
        net, cfg = md.load_network(manifest["config"])
    except (FileNotFoundError, KeyError, json.JSONDecodeError, ConfigError) as exc:
        raise ConfigError(f"bad bundle {path}: {exc}")
    return manifest, net, cfg


def _certificate_from_bundle(path: str, manifest: dict, net):
    mode = manifest["mode"]
    if mode in ("dncl", "dnl"):
        n = manifest["certificate"]["n_subsystems"]
        nets = nc.read_bundle_nets(path, n)
        rates, z, s = nc.read_bundle_rates(path)
        k_list = [nn.k for nn in nets]
        lmi = nc.global_lmi(net.m, k_list, rates)
        lam = float(la.sym_eig(lmi)[0][0])
        return nc.NetworkCertificate(
            nets=nets, rates=rates, z=z, s=s, lmi=lmi, lmi_lambda_max=lam,
            eta=manifest["certificate"]["eta"],
            iterations=manifest["certificate"]["iterations"],
            residual_history=manifest["certificate"]["residual_history"],
            net_spec=net)
    if mode in ("cnl", "cncl"):
        central = load_net(os.path.join(path, "central.json"))
        return an.CentralCertificate(net=central, net_spec=net)
    if mode in ("ql", "qcl"):
        q = manifest["quadratic"]
        k_dense = np.asarray(q["k_dense"]) if "k_dense" in q else None
        return an.QuadraticCertificate(p=np.asarray(q["p"]), k_dense=k_dense)
    raise ConfigError(f"bundle has unknown mode {mode}")


def cmd_verify(args) -> int:
    try:
        manifest, net, cfg = _read_bundle(args.bundle)
        cert = _certificate_from_bundle(args.bundle, manifest, net)
    except ConfigError as exc:
        _kv(error="bundle", detail=str(exc))
        return 1
    dom = _domain_from_config(cfg)
    ver = cfg.get("verification", {})
    delta = float(ver.get("delta", 1e-3))
    max_boxes = int(ver.get("max_boxes", 2_000_000))
    mode = manifest["mode"]

    if mode in ("ql", "qcl"):
        a = an.linearize_field(net)
        if mode == "qcl":
            _, b = an.linearize_field(net, with_secondary=True)
            a = a + b @ np.asarray(manifest["quadratic"]["k_dense"])
        p = np.asarray(manifest["quadratic"]["p"])
        resid = np.linalg.norm(a.T @ p + p @ a + np.eye(a.shape[0]), "fro")
        ok = la.is_hurwitz(a) and resid < 1e-6
        _kv(result="verified" if ok else "failed", lyapunov_residual=float(resid))
        return 0 if ok else 2

    if mode in ("cnl", "cncl"):
        mono, _ = an.central_model_and_mask(net)
        from .storage_nn import SupplyRate

        rate = SupplyRate.zeros(max(mono.d_u, mono.d_v), mono.d_y)
        try:
            res = falsify(cert.net, mono, rate, dom, delta=delta, max_boxes=max_boxes)
        except BudgetExhausted:
            _kv(result="failed", reason="BudgetExhausted")
            return 2
        if not res.verified:
            _kv(result="failed", reason="CounterexampleFound",
                condition=res.condition, point=",".join(repr(v) for v in res.point))
            return 2
        _kv(result="verified")
        return 0

    for i, (sub, nn, rate) in enumerate(zip(net.subsystems, cert.nets, cert.rates)):
        try:
            res = falsify(nn, sub, rate, dom, delta=delta, max_boxes=max_boxes)
        except BudgetExhausted:
            _kv(result="failed", subsystem=i, reason="BudgetExhausted")
            return 2
        if not res.verified:
            _kv(result="failed", subsystem=i, reason="CounterexampleFound",
                condition=res.condition, point=",".join(repr(v) for v in res.point))
            return 2
        _kv(subsystem=i, falsifier="verified", boxes=res.boxes_processed)
    if not nc.check_global(net.m, [nn.k for nn in cert.nets], cert.rates):
        _kv(result="failed", reason="GlobalLmiViolated")
        return 2
    _kv(result="verified")
    return 0


def cmd_roa(args) -> int:
    try:
        manifest, net, cfg = _read_bundle(args.bundle)
        cert = _certificate_from_bundle(args.bundle, manifest, net)
    except ConfigError as exc:
        _kv(error="bundle", detail=str(exc))
        return 1
    dom = _domain_from_config(cfg)
    grid = _grid_from_config(cfg, int(cfg.get("seed", 0)))
    try:
        est = an.estimate_roa(cert, net, dom, grid)
    except an.EmptyRegion:
        _kv(result="failed", reason="EmptyRegion")
        return 2
    os.makedirs(args.out, exist_ok=True)
    summary = {
        "mode": manifest["mode"],
        "c_star": est.c_star,
        "n_checked": est.n_checked,
        "boundary_v_min": est.boundary_v_min,
        "planes": {},
    }
    for plane, gridp in est.planes.items():
        name = f"roa_plane_{plane[0]}_{plane[1]}.csv"
        an.write_plane_csv(gridp, os.path.join(args.out, name))
        cell = (gridp.xs[1] - gridp.xs[0]) * (gridp.ys[1] - gridp.ys[0])
        summary["planes"][f"{plane[0]},{plane[1]}"] = {
            "csv": name,
            "area": float(np.sum(gridp.in_roa) * cell),
        }
    if args.compare:
        try:
            m2, net2, cfg2 = _read_bundle(args.compare)
            cert2 = _certificate_from_bundle(args.compare, m2, net2)
            est2 = an.estimate_roa(cert2, net2, _domain_from_config(cfg2),
                                   _grid_from_config(cfg2, int(cfg2.get("seed", 0))))
            summary["compare_mode"] = m2["mode"]
            summary["area_ratio"] = {}
            for plane in est.planes:
                ratio = an.roa_area_ratio(est, est2, plane)
                summary["area_ratio"][f"{plane[0]},{plane[1]}"] = ratio
        except (ConfigError, an.EmptyRegion, KeyError) as exc:
            _kv(error="compare", detail=str(exc))
            return 1
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    _kv(result="ok", c_star=est.c_star, out=args.out)
    return 0


def _gains_for_simulation(manifest, net, cert):
    mode = manifest["mode"]
    if mode in ("dncl", "dnl"):
        return cert.gains, None
    if mode in ("cnl", "cncl"):
        return cert.gains_per_subsystem(), None
    if mode == "qcl":
        return None, np.asarray(manifest["quadratic"]["k_dense"])
    return [np.zeros((s.d_v, s.d_y)) for s in net.subsystems], None


def _run_simulation(net, manifest, cert, x0, t_final, h, noise, seed):
    gains, k_dense = _gains_for_simulation(manifest, net, cert)
    if gains is not None:
        return an.simulate(net, gains, x0, t_final, h, noise_sigma=noise, seed=seed)
    field = an._field_with_dense_gain(net, k_dense)
    return an.simulate_field(field, x0, t_final, h, noise_sigma=noise, seed=seed)


def cmd_simulate(args) -> int:
    try:
        manifest, net, cfg = _read_bundle(args.bundle)
        cert = _certificate_from_bundle(args.bundle, manifest, net)
    except ConfigError as exc:
        _kv(error="bundle", detail=str(exc))
        return 1
    sim_cfg = cfg.get("simulate", {})
    t_final = args.t_final if args.t_final is not None else float(sim_cfg.get("t_final", 60.0))
    h = args.h if args.h is not None else float(sim_cfg.get("h", 0.01))
    try:
        x0 = np.array([float(v) for v in args.x0.split(",")])
    except ValueError:
        _kv(error="usage", detail="x0 must be a comma-separated float list")
        return 1
    if x0.size != net.d_x_total:
        _kv(error="usage", detail=f"x0 must have {net.d_x_total} coords, got {x0.size}")
        return 1
    seed = int(cfg.get("seed", 0))
    try:
        traj = _run_simulation(net, manifest, cert, x0, t_final, h, args.noise, seed)
    except an.NonFinite as exc:
        _kv(result="failed", reason="NonFinite", detail=str(exc))
        return 2
    os.makedirs(args.out, exist_ok=True)
    an.write_trajectory_csv(traj, os.path.join(args.out, "trajectory.csv"))
    summary = {
        "mode": manifest["mode"],
        "settle_time": an.settle_time(traj),
        "t_final": t_final,
        "h": h,
        "noise_sigma": args.noise,
    }
    if args.noise > 0.0:
        summary["post_transient_variance"] = an.post_transient_variance(traj)
    _kv(settle_time=summary["settle_time"])
    if args.compare:
        try:
            m2, net2, cfg2 = _read_bundle(args.compare)
            cert2 = _certificate_from_bundle(args.compare, m2, net2)
        except ConfigError as exc:
            _kv(error="compare", detail=str(exc))
            return 1
        traj2 = _run_simulation(net2, m2, cert2, x0, t_final, h, args.noise, seed)
        an.write_trajectory_csv(traj2, os.path.join(args.out, "trajectory_compare.csv"))
        summary["compare_mode"] = m2["mode"]
        summary["compare_settle_time"] = an.settle_time(traj2)
        if args.noise > 0.0:
            summary["compare_post_transient_variance"] = an.post_transient_variance(traj2)
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="netlyap",
                                     description="distributed neural Lyapunov certification")
    sub = parser.add_subparsers(dest="command", required=True)

    p_cert = sub.add_parser("certify", help="run a certification mode on a config")
    p_cert.add_argument("--config", required=True)
    p_cert.add_argument("--mode", default="dncl", choices=MODES)
    p_cert.add_argument("--out", required=True)
    p_cert.add_argument("--seed", type=int, default=None)
    p_cert.add_argument("--threads", type=int, default=4)
    p_cert.add_argument("--deterministic", action="store_true",
                        help="force single-threaded training")
    p_cert.set_defaults(func=cmd_certify)

    p_ver = sub.add_parser("verify", help="re-verify a certificate bundle")
    p_ver.add_argument("--bundle", required=True)
    p_ver.set_defaults(func=cmd_verify)

    p_roa = sub.add_parser("roa", help="export region-of-attraction grids")
    p_roa.add_argument("--bundle", required=True)
    p_roa.add_argument("--out", required=True)
    p_roa.add_argument("--compare", default=None,
                       help="second bundle for area-ratio comparison")
    p_roa.set_defaults(func=cmd_roa)

    p_sim = sub.add_parser("simulate", help="time-domain simulation from a bundle")
    p_sim.add_argument("--bundle", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--x0", required=True, help="comma-separated initial state")
    p_sim.add_argument("--t-final", type=float, default=None, dest="t_final")
    p_sim.add_argument("--h", type=float, default=None)
    p_sim.add_argument("--noise", type=float, default=0.0)
    p_sim.add_argument("--compare", default=None)
    p_sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    return args.func(args)


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
