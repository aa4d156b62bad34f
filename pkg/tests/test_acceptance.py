"""End-to-end acceptance checks for the whole package at desk scale.

Each test exercises one externally stated guarantee: Feshbach
isospectrality, Wick reconstruction against dense oracles, kernel norm
bounds, the RG pipeline against exact diagonalization, contraction of the
iteration, rotation-average vanishing of one-leg kernels, analyticity of
the ground energy in the couplings, exponential spatial decay, and
determinism/persistence of the artifacts.  Stated runtime budgets are
asserted alongside the numerical tolerances.
"""

import json
import math
import os
import time

import numpy as np
import pytest
from click.testing import CliRunner

import helpers
from feshrg import (analysis, cli, feshbach, fock, kernels, model, rg,
                    wick)

runner = CliRunner()


# ------------------------------------------------- 1: Feshbach pairs

def test_planted_pair_isospectrality_200():
    t0 = time.time()
    rng = np.random.default_rng(20260823)
    for trial in range(200):
        dim = int(rng.integers(8, 41))
        H, T, chi, chibar = helpers.planted_pair(rng, dim,
                                                 complex_w=bool(trial % 2))
        lam, _ = helpers.nearest_eigenvalue(H, 0.0)
        z, v = helpers.feshbach_eigenvalue(H, T, chi, chibar, lam)
        assert abs(z - lam) <= 1e-10
        eye = np.eye(dim)
        Q = feshbach.q_operator(H - z * eye, T - z * eye, chi, chibar,
                                check=False)
        qv = Q @ v
        res = np.linalg.norm((H - z * eye) @ qv) / np.linalg.norm(qv)
        assert res <= 1e-8
    assert time.time() - t0 < 30.0


# ---------------------------------------------- 2: Wick reconstruction

def _gauss_profile(a, b=1.0):
    return wick.Profile(lambda r: b * np.exp(-a * r),
                        lambda r: -a * b * np.exp(-a * r))


def _chain_operator(w, basis, profiles):
    """Dense F_0 W F_1 ... W F_L on the given basis (independent oracle)."""
    W = np.zeros((basis.dim, basis.dim), dtype=complex)
    for k in w.kernels.values():
        W += kernels.single_op(k, basis, sandwich=False)
    E = basis.energies
    op = np.diag(np.asarray(profiles[0].val(E), dtype=complex))
    for prof in profiles[1:]:
        op = op @ W @ np.diag(np.asarray(prof.val(E), dtype=complex))
    return op


def test_normal_order_matches_product_50_configs():
    grid = fock.build_grid(1, 0.5)
    r_grid = kernels.make_r_grid(33)
    entries = [(1, 0), (0, 1), (1, 1), (2, 0), (0, 2)]
    rng = np.random.default_rng(4202)
    bases = {}
    t0 = time.time()
    for _ in range(50):
        L = int(rng.integers(1, 4))
        w = helpers.random_interaction(rng, grid, r_grid, 0.3, entries)
        end = _gauss_profile(rng.uniform(0.3, 1.2))
        mid = _gauss_profile(rng.uniform(0.3, 1.2), rng.uniform(0.5, 1.0))
        profiles = [end] + [mid] * (L - 1) + [end]
        # a chain from a <= L-photon state revisits <= L photons at the end
        # and climbs at most two legs per slot in between
        if 3 * L not in bases:
            bases[3 * L] = fock.build_basis(grid, 3 * L)
        if L not in bases:
            bases[L] = fock.build_basis(grid, L)
        big, chain_basis = bases[3 * L], bases[L]
        oracle = _chain_operator(w, big, profiles)
        recon = np.zeros_like(oracle)
        for M in range(L + 1):
            for N in range(L + 1):
                k = wick.normal_order(w, chain_basis, L, M, N, end, mid)
                recon += kernels.single_op(k, big, sandwich=False)
        low = np.nonzero(big.totals() <= L)[0]
        blk = np.ix_(low, low)
        assert np.abs(oracle[blk] - recon[blk]).max() <= 1e-10
    assert time.time() - t0 < 120.0


# --------------------------------------------------- 3: norm bounds

def test_operator_norm_bound_100_kernels():
    grid = fock.build_grid(5, 0.5)
    r_grid = kernels.make_r_grid(48)
    rng = np.random.default_rng(3033)
    bases = {}
    t0 = time.time()
    done = 0
    while done < 100:
        m = int(rng.integers(0, 4))
        n = int(rng.integers(0, 4))
        if m + n == 0 or m + n > 3:
            continue
        k = helpers.random_kernel(rng, m, n, grid, r_grid)
        n_max = max(m, n) + 1
        if n_max not in bases:
            bases[n_max] = fock.build_basis(grid, n_max)
        op = kernels.single_op(k, bases[n_max])
        sup = float(np.abs(k.values).max())
        bound = sup / math.sqrt(math.factorial(m) * math.factorial(n))
        assert np.linalg.norm(op, 2) <= 1.05 * bound + 1e-12
        done += 1
    value, bound = kernels.measure_bound_check(1, 0, grid)
    assert abs(bound - fock.EIGHT_PI) < 1e-12
    assert abs(value - bound) <= 0.02 * bound
    assert time.time() - t0 < 60.0


# ------------------------------------- 4 and 5: RG pipeline vs oracle

def _toy_pipeline(g, theta, alpha):
    t0 = time.time()
    grid = fock.build_grid(6, 0.25)
    r_grid = kernels.make_r_grid(33)
    basis = fock.build_basis(grid, 3)
    a = model.normalize_gap(model.matrix_atom(2))
    c = model.CouplingSpec(g=g, theta=theta, alpha=alpha, kappa_amp=0.1)
    init = model.initial_feshbach(a, c, grid, r_grid, basis=basis, n_z=4,
                                  fixed_depth=2)
    cfg = rg.RGConfig(min_iters=5, fixed_depth=2)
    e0, psi, trace = rg.iterate_to_ground(init.w0, cfg, basis)
    E = model.reconstruct_energy(a, c, init.e_at_hat + e0)
    e_oracle, _ = model.exact_ground(a, c, grid, basis, r_grid=r_grid)
    return {"E": E, "E_oracle": e_oracle, "trace": trace,
            "elapsed": time.time() - t0}


@pytest.fixture(scope="module")
def toy_run_real():
    return _toy_pipeline(0.05, 0.0, 0.0)


@pytest.fixture(scope="module")
def toy_run_complex():
    return _toy_pipeline(0.03 * np.exp(1j * np.pi / 4.0), 0.05j, 0.02)


def test_rg_matches_exact_diagonalization_real(toy_run_real):
    run = toy_run_real
    assert abs(run["E"] - run["E_oracle"]) <= 1e-6
    assert run["trace"].residual <= 1e-6
    assert run["trace"].converged


def test_rg_residual_complex_coupling(toy_run_complex):
    assert toy_run_complex["trace"].residual <= 1e-5
    assert toy_run_complex["trace"].converged


def test_toy_runtime_budget(toy_run_real, toy_run_complex):
    assert toy_run_real["elapsed"] + toy_run_complex["elapsed"] < 600.0


def test_contraction_audit_on_toy_runs(toy_run_real, toy_run_complex):
    for run in (toy_run_real, toy_run_complex):
        trace = run["trace"]
        assert trace.iterations >= 5
        assert rg.contraction_audit(trace)


def test_free_input_is_exact_fixed_point():
    grid = fock.build_grid(2, 0.25)
    r_grid = kernels.make_r_grid(33)
    basis = fock.build_basis(grid, 4)

    def seq(z):
        return kernels.KernelSeq.free(grid, r_grid, 0.25, 2, z=z)

    nodes = 0.4 * np.exp(2j * np.pi * np.arange(8) / 8)
    fam = kernels.ZFamily(seq(0.0), [seq(z) for z in nodes], 0.4)
    out = rg.renormalize(fam, rg.RGConfig(), basis)
    for z, sample in out.all_samples():
        assert np.abs(sample.require(0, 0).values - (r_grid - z)).max() <= 1e-12
        assert kernels.interaction_norm(sample) <= 1e-12
    e0, psi, trace = rg.iterate_to_ground(fam, rg.RGConfig(), basis)
    assert abs(e0) <= 1e-12
    assert abs(abs(psi[0]) - 1.0) <= 1e-12


# -------------------------------------- 6: one-leg rotation averaging

def test_one_leg_kernels_average_to_zero():
    t0 = time.time()
    grid = fock.build_grid(1, 0.25, 1.0, "full", 6)
    r_grid = kernels.make_r_grid(17)
    # total-number truncation commutes with the mode rotations, so the
    # smallest basis that leaves the one-leg kernels nonzero suffices;
    # likewise the r resolution has no bearing on a symmetry identity
    basis = fock.build_basis(grid, 1)
    a = model.normalize_gap(model.matrix_atom(2, dipole_diag=0.3))
    c = model.CouplingSpec(g=0.05, kappa_amp=0.1)
    init = model.initial_feshbach(a, c, grid, r_grid, basis=basis, n_z=4,
                                  fixed_depth=2, M_feed=1, ball_check=False)
    rots = fock.octahedral_rotations()
    for mn in ((1, 0), (0, 1)):
        k = init.w0.center.require(*mn)
        ref = float(np.abs(k.values).max())
        assert ref > 0.0
        avg = kernels.rotation_average(k, rots)
        assert np.abs(avg.values).max() <= 1e-10 * ref
    assert time.time() - t0 < 60.0


# ------------------------------------------ 7: analyticity of E(g)

def _small_energy(g, theta, alpha):
    grid = fock.build_grid(2, 0.25)
    r_grid = kernels.make_r_grid(33)
    basis = fock.build_basis(grid, 2)
    a = model.normalize_gap(model.matrix_atom(2))
    c = model.CouplingSpec(g=g, theta=theta, alpha=alpha, kappa_amp=0.1)
    init = model.initial_feshbach(a, c, grid, r_grid, basis=basis, n_z=8)
    e0, _, _ = rg.iterate_to_ground(init.w0, rg.RGConfig(), basis)
    return model.reconstruct_energy(a, c, init.e_at_hat + e0)


@pytest.fixture(scope="module")
def coupling_circles():
    t0 = time.time()
    nodes = np.exp(2j * np.pi * np.arange(8) / 8)
    runs = {
        "g": [_small_energy(0.03 + 0.02 * u, 0.0, 0.0) for u in nodes],
        "theta": [_small_energy(0.05, 0.03 * u, 0.0) for u in nodes],
        "alpha": [_small_energy(0.05, 0.0, 0.02 * u) for u in nodes],
    }
    runs["elapsed"] = time.time() - t0
    return runs


def test_energy_analytic_on_coupling_circles(coupling_circles):
    for param in ("g", "theta", "alpha"):
        res = analysis.analyticity_residual(coupling_circles[param])
        assert res <= 1e-6, param
    assert coupling_circles["elapsed"] < 1800.0


def test_energy_constant_in_theta_and_alpha(coupling_circles):
    # in matrix mode the deformations act by similarity, so E_g does not
    # move at all along the theta and alpha circles
    for param in ("theta", "alpha"):
        dev = analysis.theta_constancy(coupling_circles[param])
        assert dev <= 1e-8, param


# ----------------------------------------------- 8: exponential decay

@pytest.fixture(scope="module")
def hydrogen_setup():
    grid = fock.build_grid(2, 0.25)
    r_grid = kernels.make_r_grid(33)
    basis = fock.build_basis(grid, 2)
    atom = model.hydrogen_atom(n_grid=320, box=40.0)
    return grid, r_grid, basis, atom


def test_decay_rate_uncoupled_hydrogen(hydrogen_setup):
    t0 = time.time()
    grid, r_grid, basis, atom = hydrogen_setup
    c = model.CouplingSpec(g=0.0, kappa_amp=0.1)
    _, psi = model.exact_ground(atom, c, grid, basis, r_grid=r_grid)
    rep = analysis.decay_profile(psi, atom)
    assert rep.a_fit == pytest.approx(1.0, rel=0.05)
    assert time.time() - t0 < 300.0


def test_decay_rate_coupled_hydrogen(hydrogen_setup):
    t0 = time.time()
    grid, r_grid, basis, atom = hydrogen_setup
    c = model.CouplingSpec(g=0.05, theta=0.05, kappa_amp=0.1)
    _, psi = model.exact_ground(atom, c, grid, basis, r_grid=r_grid)
    fit = analysis.decay_profile(psi, atom)
    assert fit.a_fit > 0.0
    ladder = fit.a_fit * np.linspace(0.3, 0.9, 4)
    rep = analysis.decay_profile(psi, atom, ladder=ladder)
    assert all(rep.finite)
    assert np.all(np.isfinite(rep.weighted_norms))
    ok, t_star, a_probe = analysis.consistency_check(psi, atom, margin=0.2)
    assert ok and 0.0 < a_probe <= t_star / 2.0
    assert time.time() - t0 < 300.0


# --------------------------------------- 9: determinism, persistence

def _run_config(out_dir):
    return {
        "model": {"mode": "matrix", "d": 2, "g": {"re": 0.05, "im": 0.0},
                  "kappa": {"type": "exponential", "scale": 1.0,
                            "amp": 0.1}},
        "grid": {"J": 2, "n_r": 33},
        "rg": {"min_iters": 3},
        "oracle": {"n_max": 2, "enabled": False},
        "output": {"dir": out_dir},
        "seed": 20260823,
    }


def _invoke_run(tmp_path, tag, extra_args=()):
    out = str(tmp_path / tag)
    cfg_path = tmp_path / f"{tag}.json"
    cfg_path.write_text(json.dumps(_run_config(out)))
    res = runner.invoke(cli.main, ["run", "--config", str(cfg_path)]
                        + list(extra_args))
    assert res.exit_code == 0, res.output
    return out


def test_repeated_runs_bit_identical(tmp_path):
    out1 = _invoke_run(tmp_path, "a")
    out2 = _invoke_run(tmp_path, "b")
    trace1 = open(os.path.join(out1, "trace.csv"), "rb").read()
    trace2 = open(os.path.join(out2, "trace.csv"), "rb").read()
    assert trace1 == trace2
    rep1 = json.load(open(os.path.join(out1, "run.json")))
    rep2 = json.load(open(os.path.join(out2, "run.json")))
    rep1["config"]["output"] = rep2["config"]["output"] = None
    assert rep1 == rep2


def test_checkpoint_resume_reproduces_energy(tmp_path):
    out1 = _invoke_run(tmp_path, "full")
    rep1 = json.load(open(os.path.join(out1, "run.json")))
    ck = os.path.join(out1, "checkpoints", "iter_002.ck")
    assert os.path.exists(ck)
    out2 = _invoke_run(tmp_path, "resumed", ["--resume-from", ck])
    rep2 = json.load(open(os.path.join(out2, "run.json")))
    e1 = complex(rep1["energy"]["e0"]["re"], rep1["energy"]["e0"]["im"])
    e2 = complex(rep2["energy"]["e0"]["re"], rep2["energy"]["e0"]["im"])
    assert abs(e1 - e2) <= 1e-12
