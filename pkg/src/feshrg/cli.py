"""Command-line front end.

Commands: run (one pipeline run with artifacts), verify (module invariant
suites), scan (parameter-circle runs feeding the analyticity probes),
decay (spatial-decay diagnostics of a radial ground state).

Exit codes: 0 success, 1 verification failure, 64 usage / malformed
config, 65 PairInvalid, 66 BallViolation, 67 SeriesDiverged,
68 MaxItersExceeded.

Test hook: setting FESHRG_FAIL_INVARIANT to an invariant name makes
``verify`` report that invariant as failed; this exercises the failure
path without corrupting real checks.  FESHRG_JOBS sets the default scan
parallelism.
"""

from __future__ import annotations

import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import click
import numpy as np

from . import analysis, checkpoint, feshbach, fock, kernels, model, rg
from .config import load_config, parse_config
from .errors import (BallViolation, ConfigError, FeshrgError,
                     MaxItersExceeded, PairInvalid, SeriesDiverged)

EXIT_USAGE = 64
_ERROR_CODES = [
    (PairInvalid, 65),
    (BallViolation, 66),
    (SeriesDiverged, 67),
    (MaxItersExceeded, 68),
]

TRACE_COLUMNS = ["iter", "delta1", "delta2", "delta3", "z_re", "z_im",
                 "newton_iters", "newton_residual", "depth"]


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return "nan"
    return "%.17g" % float(x)


def _write_csv(path, columns, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row.get(c)) for c in columns) + "\n")


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _c(z):
    z = complex(z)
    return {"re": z.real, "im": z.imag}


def _check(name, lhs, rhs):
    return {"name": name, "lhs": float(lhs), "rhs": float(rhs),
            "margin": float(rhs - lhs), "ok": bool(lhs <= rhs)}


def run_pipeline(rc, checkpoint_dir=None, with_oracle=None, resume=None):
    """One full run: initial reduction, RG iteration, reconstruction."""
    a = rc.atom()
    c = rc.coupling()
    grid = rc.mode_grid()
    r_grid = rc.r_grid()
    basis = fock.build_basis(grid, rc.oracle["n_max"])
    r = rc.rg
    cfg = rc.rg_config()
    init = model.initial_feshbach(
        a, c, grid, r_grid, basis=basis, xi=r["xi"], eps0=r["eps0"],
        L_max=r["L_max"], n_z=r["n_z"], r_z=r["r_z"], M_feed=r["M_max"])

    on_iter = None
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)

        def on_iter(level, fam, e_fams, trace):
            checkpoint.save_state(
                os.path.join(checkpoint_dir, f"iter_{level:03d}.ck"),
                fam, e_fams, trace.z_iter, level,
                metadata={"seed": rc.seed})

    e0, psi, trace = rg.iterate_to_ground(init.w0, cfg, basis,
                                          on_iteration=on_iter,
                                          resume=resume)
    e_hat = init.e_at_hat + e0
    energy = model.reconstruct_energy(a, c, e_hat)
    out = {
        "atom": a, "coupling": c, "grid": grid, "basis": basis,
        "init": init, "e0": e0, "psi": psi, "trace": trace,
        "e_hat": e_hat, "energy": energy,
    }
    enabled = rc.oracle["enabled"] if with_oracle is None else with_oracle
    if enabled:
        e_oracle, psi_oracle = model.exact_ground(a, c, grid, basis,
                                                  r_grid=r_grid)
        out["e_oracle"] = e_oracle
        out["psi_oracle"] = psi_oracle
    return out


def _run_report(rc, res):
    trace = res["trace"]
    init = res["init"]
    rep = {
        "config": {"model": _jsonable(rc.model), "grid": rc.grid,
                   "rg": rc.rg, "oracle": rc.oracle, "seed": rc.seed},
        "energy": {"E": _c(res["energy"]), "e0": _c(res["e0"]),
                   "e_hat": _c(res["e_hat"]),
                   "e_at_hat": _c(init.e_at_hat)},
        "converged": bool(trace.converged),
        "iterations": int(trace.iterations),
        "residual": float(trace.residual),
        "ball_trace": {"eps0": trace.eps0, "delta1": list(trace.delta1),
                       "delta2": list(trace.delta2),
                       "delta3": list(trace.delta3)},
        "pair_margins": {
            "commute_residual": init.pair_report.commute_residual,
            "sigma_min_T": init.pair_report.sigma_min_T,
            "sigma_min_H": init.pair_report.sigma_min_H,
            "norm_left": init.pair_report.norm_left,
            "norm_right": init.pair_report.norm_right,
            "norm_cross": init.pair_report.norm_cross,
            "verdict": bool(init.pair_report.verdict),
        },
    }
    checks = [_check("eigen_residual", trace.residual, 1e-6)]
    if trace.delta3:
        checks.append(_check("final_delta3_in_ball", trace.delta3[-1],
                             trace.eps0 / 2.0))
    if "e_oracle" in res:
        diff = abs(res["energy"] - res["e_oracle"])
        rep["oracle"] = {"E_oracle": _c(res["e_oracle"]),
                         "abs_diff": float(diff)}
        checks.append(_check("rg_vs_oracle", diff, 1e-6))
    rep["checks"] = checks
    return rep


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, complex):
        return _c(obj)
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _apply_overrides(rc_path, out, seed):
    rc = load_config(rc_path)
    if seed is not None:
        rc.seed = seed
        rc.raw["seed"] = seed
    if out is not None:
        rc.output = dict(rc.output, dir=out)
    return rc


def _exit_for(exc):
    for etype, code in _ERROR_CODES:
        if isinstance(exc, etype):
            return code
    return 1


@click.group()
def main():
    """Spectral renormalization-group pipeline."""


@main.command("run")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, type=click.Path(file_okay=False))
@click.option("--seed", default=None, type=int)
@click.option("--resume-from", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Continue from an iteration checkpoint (energy only).")
def cmd_run(config_path, out, seed, resume_from):
    """Run the pipeline once and write run.json / trace.csv / checkpoints."""
    try:
        rc = _apply_overrides(config_path, out, seed)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_USAGE)
    out_dir = rc.output["dir"]
    os.makedirs(out_dir, exist_ok=True)
    resume = checkpoint.load_state(resume_from) if resume_from else None
    try:
        res = run_pipeline(rc, checkpoint_dir=os.path.join(out_dir,
                                                           "checkpoints"),
                           resume=resume)
    except FeshrgError as exc:
        code = _exit_for(exc)
        _write_json(os.path.join(out_dir, "run.json"), {
            "error": {"type": type(exc).__name__, "message": str(exc)},
        })
        click.echo(f"{type(exc).__name__}: {exc}", err=True)
        sys.exit(code)
    rep = _run_report(rc, res)
    if "json" in rc.output["formats"]:
        _write_json(os.path.join(out_dir, "run.json"), rep)
    if "csv" in rc.output["formats"]:
        _write_csv(os.path.join(out_dir, "trace.csv"), TRACE_COLUMNS,
                   res["trace"].records())
    click.echo(json.dumps({"E": rep["energy"]["E"],
                           "residual": rep["residual"],
                           "converged": rep["converged"]}, sort_keys=True))


def _scan_node(raw_cfg, param, node, re, im):
    """Worker for one scan node; returns a CSV row dict."""
    row = {"node": node, "param_re": re, "param_im": im}
    try:
        rc = parse_config(raw_cfg).with_coupling_value(param,
                                                       complex(re, im))
        res = run_pipeline(rc, with_oracle=False)
        trace = res["trace"]
        row.update({
            "E_re": res["energy"].real, "E_im": res["energy"].imag,
            "e0_re": res["e0"].real, "e0_im": res["e0"].imag,
            "residual": trace.residual, "iters": trace.iterations,
            "delta3_final": trace.delta3[-1] if trace.delta3 else 0.0,
        })
    except FeshrgError as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


SCAN_COLUMNS = ["node", "param_re", "param_im", "E_re", "E_im", "e0_re",
                "e0_im", "residual", "iters", "delta3_final"]


@main.command("scan")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--param", required=True,
              type=click.Choice(["g", "theta", "alpha"]))
@click.option("--radius", required=True, type=float)
@click.option("--nodes", default=8, type=int)
@click.option("--out", default=None, type=click.Path(file_okay=False))
@click.option("--seed", default=None, type=int)
@click.option("--jobs", default=None, type=int)
def cmd_scan(config_path, param, radius, nodes, out, seed, jobs):
    """Pipeline runs on a parameter circle; one CSV row per node."""
    try:
        rc = _apply_overrides(config_path, out, seed)
        if nodes < 1 or radius <= 0.0:
            raise ConfigError("scan needs nodes >= 1 and radius > 0")
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_USAGE)
    if jobs is None:
        jobs = int(os.environ.get("FESHRG_JOBS", "1"))
    center = rc.model[param]
    points = [center + radius * np.exp(2j * np.pi * q / nodes)
              for q in range(nodes)]
    tasks = [(rc.raw, param, q, z.real, z.imag)
             for q, z in enumerate(points)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_scan_node, *zip(*tasks)))
    else:
        rows = [_scan_node(*t) for t in tasks]
    rows.sort(key=lambda r: r["node"])

    out_dir = rc.output["dir"]
    os.makedirs(out_dir, exist_ok=True)
    _write_csv(os.path.join(out_dir, f"scan_{param}.csv"), SCAN_COLUMNS,
               rows)
    good = [r for r in rows if "error" not in r]
    rep = {"param": param, "radius": radius, "nodes": nodes,
           "center": _c(center), "rows": _jsonable(rows),
           "failures": [r["node"] for r in rows if "error" in r]}
    if len(good) == nodes and nodes >= 8:
        samples = np.array([complex(r["E_re"], r["E_im"]) for r in rows])
        rep["analyticity_residual"] = analysis.analyticity_residual(samples)
        rep["constancy"] = analysis.theta_constancy(samples)
    _write_json(os.path.join(out_dir, f"scan_{param}.json"), rep)
    click.echo(json.dumps({"nodes": nodes, "failures": rep["failures"]}))


@main.command("decay")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, type=click.Path(file_okay=False))
@click.option("--seed", default=None, type=int)
def cmd_decay(config_path, out, seed):
    """Decay-rate fit and moment series of the radial ground state."""
    try:
        rc = _apply_overrides(config_path, out, seed)
        if rc.model["mode"] != "hydrogen_radial":
            raise ConfigError(
                "model.mode: decay diagnostics need hydrogen_radial mode")
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_USAGE)
    a = rc.atom()
    c = rc.coupling()
    grid = rc.mode_grid()
    basis = fock.build_basis(grid, rc.oracle["n_max"])
    try:
        energy, psi = model.exact_ground(a, c, grid, basis,
                                         r_grid=rc.r_grid())
        rep = analysis.decay_profile(psi, a)
        ok, t_star, a_probe = analysis.consistency_check(psi, a)
    except FeshrgError as exc:
        click.echo(f"{type(exc).__name__}: {exc}", err=True)
        sys.exit(_exit_for(exc))
    out_dir = rc.output["dir"]
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "decay.json"), {
        "energy": _c(energy), "a_fit": rep.a_fit,
        "window": list(rep.window), "fit_residual": rep.fit_residual,
        "t_star": t_star, "a_probe": a_probe, "consistent": bool(ok),
    })
    _write_csv(os.path.join(out_dir, "decay_ladder.csv"),
               ["a", "weighted_norm", "finite"],
               [{"a": av, "weighted_norm": nv, "finite": fv}
                for av, nv, fv in zip(rep.a_values, rep.weighted_norms,
                                      rep.finite)])
    click.echo(json.dumps({"a_fit": rep.a_fit, "consistent": bool(ok)}))


# --------------------------------------------------------------- verify

def _suite_fock(rng):
    grid = fock.build_grid(3, 0.25)
    basis = fock.build_basis(grid, 2)
    res = []
    mode = int(rng.integers(grid.n_modes))
    c_op = fock.creation(grid, basis, mode)
    a_op = fock.annihilation(grid, basis, mode)
    res.append(("fock.ladder_adjoint",
                float(np.abs(c_op.mat.conj().T - a_op.mat).max()), 1e-14))
    g_op = fock.dilation(basis, grid, 0.25)
    n_op = fock.number_operator(grid, basis)
    comm = g_op.mat @ n_op.mat - n_op.mat @ g_op.mat
    res.append(("fock.dilation_number_commute",
                float(np.abs(comm).max()), 1e-12))
    return res


def _suite_kernels(rng):
    grid = fock.build_grid(3, 0.25)
    r_grid = kernels.make_r_grid(17)
    free = kernels.KernelSeq.free(grid, r_grid, 0.25, 2)
    res = [
        ("kernels.free_has_no_interaction",
         kernels.interaction_norm(free), 1e-15),
        ("kernels.free_sharp_norm",
         abs(kernels.sharp_norm(free.require(0, 0)) - 2.0), 1e-12),
    ]
    full = fock.build_grid(1, 0.25, angular_mode="full")
    k = kernels.Kernel(1, 0, full, r_grid,
                       rng.normal(size=(17, full.n_modes)) + 0j,
                       np.zeros((17, full.n_modes), dtype=complex))
    rots = fock.octahedral_rotations()
    avg = kernels.rotation_average(k, rots)
    avg2 = kernels.rotation_average(avg, rots)
    res.append(("kernels.rotation_average_idempotent",
                float(np.abs(avg.values - avg2.values).max()), 1e-12))
    return res


def _suite_wick(rng):
    from . import wick
    grid = fock.build_grid(2, 0.25)
    r_grid = kernels.make_r_grid(17)
    basis = fock.build_basis(grid, 2)
    free = kernels.KernelSeq.free(grid, r_grid, 0.25, 2)
    cp = feshbach.smooth_chi(0.25)
    end = wick.Profile(cp.chi, cp.dchi)
    k00 = free.require(0, 0)

    def val(x):
        v = np.clip(x, 0.0, 1.0)
        return cp.chibar(x) ** 2 / np.where(np.abs(v) < 1e-12, 1.0, v)

    mid = wick.Profile(val, lambda x: np.zeros_like(np.asarray(x)))
    out, _ = wick.neumann_wick(free, basis, end, mid, w00_base=k00,
                               M_feed=2, L_max=3)
    dev = float(np.abs(out.require(0, 0).values - k00.values).max())
    return [("wick.free_input_passthrough", dev, 1e-12),
            ("wick.free_output_no_legs",
             kernels.interaction_norm(out), 1e-12)]


def _suite_feshbach(rng):
    dim = 12
    t = np.diag(rng.normal(size=dim) + 2.0).astype(complex)
    w = 0.05 * (rng.normal(size=(dim, dim))
                + 1j * rng.normal(size=(dim, dim)))
    h = t + w
    cvals = np.clip(rng.uniform(size=dim), 0.05, 0.95)
    chi = np.diag(np.sqrt(cvals)).astype(complex)
    chibar = np.diag(np.sqrt(1.0 - cvals)).astype(complex)
    res = [("feshbach.partition_of_unity",
            float(np.abs(chi @ chi + chibar @ chibar
                         - np.eye(dim)).max()), 1e-12)]
    evals = np.linalg.eigvals(h)
    target = evals[np.argmin(np.abs(evals - 2.0))]
    f = feshbach.feshbach_map(h - target * np.eye(dim),
                              t - target * np.eye(dim), chi, chibar,
                              check=False)
    smin = float(np.linalg.svd(f, compute_uv=False)[-1])
    res.append(("feshbach.isospectral_kernel", smin, 1e-8))
    return res


def _suite_rg(rng):
    grid = fock.build_grid(2, 0.25)
    r_grid = kernels.make_r_grid(17)
    basis = fock.build_basis(grid, 3)
    nodes = 0.4 * np.exp(2j * np.pi * np.arange(8) / 8)
    f = kernels.ZFamily(
        kernels.KernelSeq.free(grid, r_grid, 0.25, 2),
        [kernels.KernelSeq.free(grid, r_grid, 0.25, 2, z=z)
         for z in nodes], 0.4)
    cfg = rg.RGConfig()
    out = rg.renormalize(f, cfg, basis)
    dev = 0.0
    for (_, a), (_, b) in zip(f.all_samples(), out.all_samples()):
        dev = max(dev, float(np.abs(a.require(0, 0).values
                                    - b.require(0, 0).values).max()))
    res = [("rg.free_fixed_point", dev, 1e-12)]
    e = rg.e_rho(f, 0.25)
    u = complex(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3))
    z = rg.invert_e_rho(e, u)
    res.append(("rg.inversion_round_trip", abs(e.at(z) - u), 1e-11))
    return res


_SUITES = {
    "fock": _suite_fock,
    "kernels": _suite_kernels,
    "wick": _suite_wick,
    "feshbach": _suite_feshbach,
    "rg": _suite_rg,
}


@main.command("verify")
@click.argument("suite")
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", default=None, type=int)
def cmd_verify(suite, config_path, seed):
    """Run the named invariant suite (fock/kernels/wick/feshbach/rg/all)."""
    if suite not in _SUITES and suite != "all":
        click.echo(f"unknown suite {suite!r}; choose from "
                   f"{sorted(_SUITES)} or 'all'", err=True)
        sys.exit(EXIT_USAGE)
    if seed is None:
        seed = 0
        if config_path is not None:
            try:
                seed = load_config(config_path).seed
            except ConfigError as exc:
                click.echo(f"config error: {exc}", err=True)
                sys.exit(EXIT_USAGE)
    names = sorted(_SUITES) if suite == "all" else [suite]
    forced_fail = os.environ.get("FESHRG_FAIL_INVARIANT")
    results = []
    for name in names:
        rng = np.random.default_rng(seed)
        for inv, lhs, rhs in _SUITES[name](rng):
            ok = lhs <= rhs and inv != forced_fail
            results.append({"invariant": inv, "value": lhs, "bound": rhs,
                            "margin": rhs - lhs, "ok": ok})
    summary = {"suite": suite, "seed": seed,
               "passed": sum(r["ok"] for r in results),
               "failed": [r["invariant"] for r in results if not r["ok"]],
               "results": results}
    click.echo(json.dumps(summary, sort_keys=True))
    sys.exit(0 if not summary["failed"] else 1)


if __name__ == "__main__":
    main()
