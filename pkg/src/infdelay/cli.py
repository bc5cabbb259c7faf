"""Command line runner: ``infdelay VERB [--config PATH] [--seed N] [--workers N] [--out DIR]``.

Every run writes summary.json, one CSV per table and manifest.json into the
output directory.  Exit status is 0 when all checks pass, 1 when a check
fails or a solver gives up, and 2 for an invalid configuration.
"""
import argparse
import csv
import datetime
import json
import os
import platform
import sys
import time
from importlib import resources

import numpy as np

from . import __version__
from ._backend import BACKEND
from .config import VERBS, canonical_json, config_hash, load_config, matrix, read_config
from .errors import ConfigInvalid, Error

# ---------------------------------------------------------------- builders


def _history(cfg):
    p = cfg.problem
    lags = [cfg.numerics.theta_max]
    for term in (p.A, p.C):
        if term is not None:
            lags.append(term.measure.build().support_max)
    lags.append(p.control_delay.measure.build().support_max)
    return max(lags)


def build_grid(cfg, history=None):
    from .fading_paths import TimeGrid
    n = cfg.numerics
    return TimeGrid.with_history(n.T, n.dt, _history(cfg) if history is None else history)


def build_init(cfg):
    from .forward_see import InitialData
    p = cfg.problem
    gamma = np.broadcast_to(np.asarray(p.gamma, dtype=float), (p.d,)).copy()
    varphi = None if p.varphi is None else np.broadcast_to(np.asarray(p.varphi, dtype=float), (p.du,)).copy()
    return InitialData(gamma, varphi, cfg.numerics.lam)


def _additive(cfg):
    p = cfg.problem
    b0 = s0 = None
    if p.b0 is not None:
        bv = np.asarray(p.b0, dtype=float).reshape(p.d)

        def b0(t):
            return bv
    if p.s0 is not None:
        sv = np.asarray(p.s0, dtype=float).reshape(p.d, p.m)

        def s0(t):
            return sv
    return b0, s0


def build_coefficients(cfg):
    from .forward_see import LinearDelayCoefficients
    p = cfg.problem
    b0, s0 = _additive(cfg)
    A = p.A.build(p.d, p.d) if p.A is not None else None
    C = p.C.build(p.d * p.m, p.d) if p.C is not None else None
    return LinearDelayCoefficients(p.d, p.m, p.du, A=A, C=C, B=matrix(p.B, (p.d, p.du)),
                                   D=matrix(p.D, (p.d * p.m, p.du)), b0=b0, s0=s0)


def _is_lag_free(term):
    if term is None:
        return True
    meas = term.measure
    k = term.kernel
    return (meas.density is None and all(a.lag == 0 for a in meas.atoms)
            and k.type in ("identity", "matrix") and not k.function)


def _lag_free_matrix(term, rows, cols):
    if term is None:
        return np.zeros((rows, cols))
    base = np.eye(rows) if term.kernel.type == "identity" else np.asarray(term.kernel.value, dtype=float)
    return base.reshape(rows, cols) * sum(a.weight for a in term.measure.atoms)


def build_lq(cfg):
    from .lq import LQSpec
    p = cfg.problem
    b0, s0 = _additive(cfg)
    A = p.A.build(p.d, p.d) if p.A is not None else np.zeros((p.d, p.d))
    C = p.C.build(p.d * p.m, p.d) if p.C is not None else None
    return LQSpec(p.d, p.m, p.du, A=A, B=matrix(p.B, (p.d, p.du), np.zeros((p.d, p.du))), C=C,
                  D=matrix(p.D, (p.d * p.m, p.du)), L=matrix(p.L, (p.d, p.d)),
                  Ltilde=matrix(p.Ltilde, (p.du, p.du)), G=matrix(p.G, (p.d, p.d)), b0=b0, s0=s0)


def riccati_applicable(cfg):
    p = cfg.problem
    cd = p.control_delay
    undelayed = (cd.phi == "one" and cd.measure.density is None
                 and all(a.lag == 0 for a in cd.measure.atoms)
                 and sum(a.weight for a in cd.measure.atoms) == 1.0)
    noise_ok = p.s0 is None or (p.C is None and p.D is None)
    return undelayed and _is_lag_free(p.A) and _is_lag_free(p.C) and p.b0 is None and noise_ok


def _features(cfg):
    from .projection import FeatureMap
    r = cfg.numerics.regression
    return FeatureMap(degree=r.degree), r.ridge


# ---------------------------------------------------------------- verbs


def verb_simulate_forward(cfg, workers):
    from .forward_see import simulate_forward
    from .stats import mean_se
    p, n = cfg.problem, cfg.numerics
    grid = build_grid(cfg)
    ens = simulate_forward(build_coefficients(cfg), build_init(cfg), grid, p.control.build(p.du),
                           p.control_delay.build(), paths=n.paths, seed=cfg.seed, workers=workers)
    Xf = ens.X[:, grid.i0:]
    mean = Xf.mean(axis=0)
    sd = Xf.std(axis=0)
    ts = grid.forward_times
    rows = [[t] + list(mean[k]) + list(sd[k]) for k, t in enumerate(ts)]
    header = ["t"] + [f"mean_x{i}" for i in range(p.d)] + [f"sd_x{i}" for i in range(p.d)]
    ns = min(5, ens.paths)
    sample = [[t] + list(Xf[:ns, k].reshape(-1)) for k, t in enumerate(ts)]
    sheader = ["t"] + [f"path{j}_x{i}" for j in range(ns) for i in range(p.d)]
    term = [mean_se(Xf[:, -1, i]) for i in range(p.d)]
    summary = {"paths": ens.paths, "steps": grid.n_steps, "terminal_mean": [m for m, _ in term],
               "terminal_se": [s for _, s in term]}
    checks = {"finite": bool(np.all(np.isfinite(ens.X)))}
    return summary, {"moments": (header, rows), "sample_paths": (sheader, sample)}, checks


def _terminal(cfg, ens, lead):
    from .iabsee import TerminalData
    t = cfg.problem.terminal
    x = ens.X[:, -1:, :]
    fn = {"identity": lambda v: v, "cos": np.cos, "square": np.square, "zero": np.zeros_like}[t.function]
    xi = t.scale * fn(x) + t.shift
    return TerminalData(np.repeat(xi, lead + 1, axis=1), beta=cfg.numerics.beta)


def verb_solve_iabsee(cfg, workers):
    from .forward_see import simulate_forward
    from .iabsee import LinearAnticipatedGenerator, backward_residual, solve_iabsee
    from .stats import mean_se
    p, n = cfg.problem, cfg.numerics
    gc = p.generator
    gen = LinearAnticipatedGenerator([t.build(p.d, p.d) for t in gc.y_terms],
                                     [t.build(p.d * p.m, p.d) for t in gc.z_terms],
                                     None if gc.forcing is None else np.asarray(gc.forcing, dtype=float))
    grid = build_grid(cfg)
    ens = simulate_forward(build_coefficients(cfg), build_init(cfg), grid, p.control.build(p.du),
                           p.control_delay.build(), paths=n.paths, seed=cfg.seed, workers=workers)
    gen.prepare(grid, p.d, p.m)
    terminal = _terminal(cfg, ens, int(gen.max_lead))
    feats, ridge = _features(cfg)
    sol = solve_iabsee(gen, terminal, ens, feats, ridge, n_picard=n.picard_max, tol=n.picard_tol)
    N = grid.n_steps
    L = sol.lead
    ts = sol.times
    Ym = sol.Y.mean(axis=0)
    Zm = sol.Z.reshape(sol.Z.shape[0], sol.Z.shape[1], -1).mean(axis=0)
    header = ["t"] + [f"mean_y{i}" for i in range(p.d)] + [f"mean_z{i}" for i in range(p.d * p.m)]
    rows = [[t] + list(Ym[k]) + list(Zm[k]) for k, t in enumerate(ts)]
    gaps = [[i + 1, g] for i, g in enumerate(sol.gaps)]
    y0 = [mean_se(sol.Y[:, 0, i]) for i in range(p.d)]
    pinned = bool(np.array_equal(sol.Y[:, N:N + L + 1], terminal.xi[:, : L + 1]) and np.all(sol.Z[:, N:] == 0))
    converged = bool(sol.gaps and sol.gaps[-1] <= n.picard_tol)
    summary = {"Y0_mean": [m for m, _ in y0], "Y0_se": [s for _, s in y0], "iterations": len(sol.gaps),
               "final_gap": sol.gaps[-1] if sol.gaps else 0.0, "lead_steps": L,
               "residual": float(backward_residual(sol, gen, ens))}
    checks = {"terminal_pinned": pinned, "picard_converged": converged}
    return summary, {"backward": (header, rows), "picard_gaps": (["iteration", "gap"], gaps)}, checks


def _smooth_test_pair(grid, d):
    t = grid.nodes
    Z = np.stack([np.sin(3 * (i + 1) * t) * (t > 0) for i in range(d)], axis=1)
    tf = grid.forward_times
    Q = np.stack([np.cos((i + 1) * tf) + 0.5 * i for i in range(d)], axis=1)
    return Z, Q


def verb_verify_duality(cfg, workers):
    from . import delay_ops as dops
    p, n = cfg.problem, cfg.numerics
    kernel = dops.kernel_from_config(p.kernel.model_dump(exclude_none=True), p.d, p.d)
    meas = p.measure.build()
    residuals, rows = [], []
    for level in (2, 1, 0):
        dt = n.dt * 2 ** level
        grid = build_grid(cfg.model_copy(update={"numerics": n.model_copy(update={"dt": dt})}),
                          history=max(meas.support_max, n.theta_max))
        Z, Q = _smooth_test_pair(grid, p.d)
        lhs, rhs = dops.duality_sides(kernel, meas, Z, Q, grid)
        residuals.append(abs(lhs - rhs))
        rows.append([dt, lhs, rhs, abs(lhs - rhs)])
    M0, M = dops.operator_bounds(kernel, meas, grid)

    def g(ts, th):
        return np.exp(ts) * np.cos(3 * th + ts)

    cv = dops.cv_identity_check(g, meas, grid)
    summary = {"duality_residual": residuals[-1], "duality_lhs": rows[-1][1], "duality_rhs": rows[-1][2],
               "M0": M0, "M": M, "cv_residual": cv, "atomic": meas.is_atomic}
    if meas.is_atomic:
        checks = {"duality_residual_le_1e-10": residuals[-1] <= 1e-10, "cv_residual_zero": cv == 0.0}
    else:
        orders = [float(np.log2(a / b)) if b > 0 else float("inf") for a, b in zip(residuals, residuals[1:])]
        summary["orders"] = orders
        checks = {"duality_order_ge_1.8": min(orders) >= 1.8}
    return summary, {"duality": (["dt", "lhs", "rhs", "residual"], rows)}, checks


def _probe_values(cfg):
    p = cfg.problem
    return np.linspace(-1.0, 1.0, cfg.numerics.probes)[:, None] * np.ones((1, p.du))


def _table_nodes(grid, count=5):
    return [int(i) for i in np.linspace(0, grid.n_steps - 1, count).round()]


def verb_check_smp(cfg, workers):
    from .forward_see import simulate_forward
    from .smp import (duality_bookkeeping, gateaux_derivative, make_estimator, necessary_residual,
                      solve_adjoint)
    p, n = cfg.problem, cfg.numerics
    spec = build_lq(cfg)
    init = build_init(cfg)
    delay = p.control_delay.build()
    ctx = spec.context(init, delay)
    grid = build_grid(cfg)
    u = p.control.build(p.du)
    vhat = p.direction.build(p.du)
    ens = simulate_forward(ctx.coeffs, init, grid, u, delay, paths=n.paths, seed=cfg.seed, workers=workers)
    feats, ridge = _features(cfg)
    est = make_estimator(ctx, ens, ridge=ridge, degree=feats.degree)
    adj = solve_adjoint(ctx, ens, estimator=est)
    ua = u(grid.forward_times)[None]
    nodes = _table_nodes(grid)
    probes = _probe_values(cfg)
    nr = necessary_residual(ctx, ua, ens, adj, probes, nodes=nodes, estimator=est)
    book = duality_bookkeeping(ctx, ens, vhat, adj)
    gd = gateaux_derivative(ctx, ens, u, vhat)
    rows = [[int(i), float(grid.forward_times[i]), b, float(nr["values"][a, b]), float(nr["se"][a, b])]
            for a, i in enumerate(nodes) for b in range(len(probes))]
    summary = {"min_residual": float(nr["values"].min()), "duality_gap": book["gap"],
               "duality_gap_se": book["gap_se"], "duality_lhs": book["lhs"], "duality_rhs": book["rhs"],
               "gateaux_gap": gd["gap"], "gateaux_gap_se": gd["gap_se"], "gateaux_fd": gd["fd"],
               "gateaux_analytic": gd["analytic"]}
    checks = {"bookkeeping_within_3se": abs(book["gap"]) <= 3 * book["gap_se"],
              "gateaux_agreement": abs(gd["gap"]) <= max(3 * gd["gap_se"], 1e-4 * abs(gd["analytic"]))}
    return summary, {"residual_table": (["node", "t", "probe", "value", "se"], rows)}, checks


def verb_solve_lq(cfg, workers):
    from .lq import fbsde_fixed_point, riccati_oracle
    from .smp import necessary_residual
    p, n = cfg.problem, cfg.numerics
    spec = build_lq(cfg)
    init = build_init(cfg)
    delay = p.control_delay.build()
    grid = build_grid(cfg)
    feats, ridge = _features(cfg)
    sol = fbsde_fixed_point(spec, init, grid, delay, paths=n.paths, seed=cfg.seed, rho=n.rho, tol=n.tol,
                            max_iter=n.max_iter, ridge=ridge, degree=feats.degree, workers=workers)
    ctx = spec.context(init, delay)
    nodes = _table_nodes(grid)
    nr = necessary_residual(ctx, sol.u_star, sol.ensemble, sol.adjoint, _probe_values(cfg), nodes=nodes)
    slack = nr["values"] + 3 * nr["se"]
    trace = [[t["iteration"], t["J"], t["se"], t["step"]] for t in sol.trace]
    ts = grid.forward_times
    ns = min(5, sol.ensemble.paths)
    X = sol.ensemble.X[:ns, grid.i0:]
    U = np.broadcast_to(sol.u_star, (sol.ensemble.paths,) + sol.u_star.shape[1:])[:ns]
    sample = [[t] + list(U[:, k].reshape(-1)) + list(X[:, k].reshape(-1)) for k, t in enumerate(ts)]
    sheader = (["t"] + [f"path{j}_u{i}" for j in range(ns) for i in range(p.du)]
               + [f"path{j}_x{i}" for j in range(ns) for i in range(p.d)])
    summary = {"J_star": sol.J_star, "SE": sol.J_se, "iterations": sol.iterations,
               "smp_min_residual": float(nr["values"].min()), "smp_min_slack": float(slack.min())}
    checks = {"converged": sol.converged, "necessary_condition": bool(slack.min() >= 0.0)}
    if riccati_applicable(cfg):
        from .lq import LQSpec
        plain = LQSpec(p.d, p.m, p.du, A=_lag_free_matrix(p.A, p.d, p.d), B=spec.B,
                       C=None if p.C is None else _lag_free_matrix(p.C, p.d * p.m, p.d), D=spec.D,
                       L=spec.L, Ltilde=spec.Ltilde, G=spec.G)
        ric = riccati_oracle(plain, init.state_history(grid, p.d)[-1], n.T, s0_const=p.s0)
        gap = abs(sol.J_star - ric.J_opt)
        summary["riccati_J"] = ric.J_opt
        summary["riccati_gap"] = gap
        checks["riccati_agreement"] = bool(gap <= max(0.02 * abs(ric.J_opt), n.dt) + 3 * sol.J_se)
    tables = {"iterations": (["iteration", "J", "se", "step"], trace), "final_sample": (sheader, sample)}
    return summary, tables, checks


def verb_acceptance_suite(cfg, workers):
    from .acceptance import run_suite

    def report(num, res, secs):
        print(f"criterion {num} ({res['name']}): {'PASS' if res['passed'] else 'FAIL'} [{secs:.1f}s]",
              flush=True)

    results, timings = run_suite(cfg.seed, workers, cfg.numerics.criteria, report)
    rows = [[int(k), v["name"], int(v["passed"])] for k, v in results.items()]
    checks = {f"criterion_{k}": bool(v["passed"]) for k, v in results.items()}
    return {"criteria": results}, {"criteria": (["criterion", "name", "passed"], rows)}, checks, timings


VERB_FUNCS = {
    "simulate-forward": verb_simulate_forward,
    "solve-iabsee": verb_solve_iabsee,
    "verify-duality": verb_verify_duality,
    "check-smp": verb_check_smp,
    "solve-lq": verb_solve_lq,
    "acceptance-suite": verb_acceptance_suite,
}

# ---------------------------------------------------------------- output


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x)
    return x


def default_config(verb):
    name = verb.replace("-", "_") + ".json"
    text = resources.files("infdelay").joinpath("configs", name).read_text()
    return json.loads(text)


def run(verb, cfg, out_dir, workers=1):
    """Execute a verb and write its artifacts; returns the exit status."""
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()
    result = VERB_FUNCS[verb](cfg, workers)
    timings = result[3] if len(result) == 4 else {}
    summary, tables, checks = result[:3]
    checks = {k: bool(v) for k, v in checks.items()}
    passed = all(checks.values())
    doc = {"verb": verb, "seed": cfg.seed, "passed": passed, "checks": checks, "results": summary}
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        fh.write(canonical_json(_plain(doc)))
    if "csv" in cfg.output.formats:
        for name, (header, rows) in tables.items():
            write_csv(os.path.join(out_dir, f"{name}.csv"), header, rows)
    manifest = {
        "verb": verb,
        "config": cfg.model_dump(mode="json"),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "workers": workers,
        "versions": {"infdelay": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": _scipy_version(), "backend": BACKEND},
        "artifacts": sorted(set(os.listdir(out_dir)) | {"manifest.json"}),
        "elapsed_seconds": time.perf_counter() - t0,
        "criterion_seconds": _plain(timings),
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        fh.write(canonical_json(manifest))
    failed = [k for k, v in checks.items() if not v]
    if failed:
        print(f"{verb}: failed checks: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"{verb}: all checks passed ({len(checks)})")
    return 0


def _scipy_version():
    import scipy
    return scipy.__version__


def parse_args(argv):
    ap = argparse.ArgumentParser(prog="infdelay", description=__doc__.splitlines()[0])
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("--config", help="JSON configuration file (default: packaged config for the verb)")
    ap.add_argument("--seed", type=int, help="override the configured seed")
    ap.add_argument("--workers", type=int, default=1, help="threads for trajectory-parallel stages")
    ap.add_argument("--out", help="output directory (default: output.dir of the config)")
    return ap.parse_args(argv)


def main(argv=None):
    args = parse_args(sys.argv[1:] if argv is None else argv)
    try:
        if args.workers < 1:
            raise ConfigInvalid("--workers: must be at least 1")
        cfg = read_config(args.config) if args.config else load_config(default_config(args.verb))
        if cfg.verb is not None and cfg.verb != args.verb:
            raise ConfigInvalid(f"verb: config is for {cfg.verb!r}, not {args.verb!r}")
        updates = {"verb": args.verb}
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigInvalid("--seed: must be non-negative")
            updates["seed"] = args.seed
        cfg = cfg.model_copy(update=updates)
        out = args.out or cfg.output.dir
    except ConfigInvalid as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    try:
        return run(args.verb, cfg, out, args.workers)
    except ConfigInvalid as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    except Error as exc:
        print(f"{args.verb}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
