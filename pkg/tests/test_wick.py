"""Tests for the Wick ordering engine against independent dense oracles."""

import numpy as np
import pytest

import helpers
from feshrg import feshbach, fock, kernels, wick
from feshrg.errors import TruncationError

INTERACTION_ENTRIES = [(1, 0), (0, 1), (1, 1), (2, 0), (0, 2)]


@pytest.fixture(scope="module")
def grid():
    return fock.build_grid(1, 0.5)           # two radial modes: omega = 1, 1/2


@pytest.fixture(scope="module")
def r_grid():
    return kernels.make_r_grid(33)


def gauss_profile(a, b=1.0):
    return wick.Profile(lambda r: b * np.exp(-a * r),
                        lambda r: -a * b * np.exp(-a * r))


def chi_profiles(rho, z):
    """End profile chi and middle profile chibar^2 / (r - z)."""
    cp = feshbach.smooth_chi(rho)
    end = wick.Profile(lambda r: cp.chi(r) + 0j, lambda r: cp.dchi(r) + 0j)

    def mid_val(r):
        return cp.chibar(r) ** 2 / (r - z)

    def mid_der(r):
        cb = cp.chibar(r)
        return (2.0 * cb * cp.dchibar(r) * (r - z) - cb**2) / (r - z) ** 2

    return end, wick.Profile(mid_val, mid_der)


def test_compositions_and_shifts():
    assert wick.compositions(2, 2) == [(0, 2), (1, 1), (2, 0)]
    assert wick.compositions(0, 3) == [(0, 0, 0)]
    r, rt = wick.shift_accounting([0.3, 0.0], [0.0, 0.2])
    # slot 1: creation externals of slot 2 (none); slot 2: annihilation of slot 1
    assert r == [0.0, 0.0]
    assert rt == [pytest.approx(0.3), pytest.approx(0.0), pytest.approx(0.2)]
    r, rt = wick.shift_accounting([0.0, 0.4], [0.1, 0.0])
    assert r == [pytest.approx(0.4), pytest.approx(0.1)]
    assert rt[0] == pytest.approx(0.4)
    assert rt[-1] == pytest.approx(0.1)


def test_single_slot_closed_form(grid, r_grid):
    rng = np.random.default_rng(3)
    w = helpers.random_interaction(rng, grid, r_grid, 1.0, [(0, 1)])
    f0 = gauss_profile(0.7)
    f1 = gauss_profile(1.3)
    # reuse the same profile object at both ends; mid profile is unused at L=1
    out = wick.normal_order(w, fock.build_basis(grid, 1), 1, 0, 1, f0, f1)
    k = w.entry(0, 1)
    om = grid.omegas
    expect = (np.exp(-0.7 * r_grid)[:, None] * k.values
              * np.exp(-0.7 * (r_grid[:, None] + om[None, :])))
    np.testing.assert_allclose(out.values, expect, atol=1e-13)


def _chain_operator(w, basis, profiles):
    """Dense F_0 W F_1 ... W F_L on the full basis (independent oracle)."""
    W = np.zeros((basis.dim, basis.dim), dtype=complex)
    for k in w.kernels.values():
        W += kernels.single_op(k, basis, sandwich=False)
    E = basis.energies
    op = np.diag(np.asarray(profiles[0].val(E), dtype=complex))
    for prof in profiles[1:]:
        op = op @ W @ np.diag(np.asarray(prof.val(E), dtype=complex))
    return op


@pytest.mark.parametrize("L", [1, 2, 3])
def test_normal_order_matches_operator_product(grid, r_grid, L):
    rng = np.random.default_rng(100 + L)
    w = helpers.random_interaction(rng, grid, r_grid, 0.3, INTERACTION_ENTRIES)
    end = gauss_profile(0.9)
    mid = gauss_profile(0.4, 0.8)
    profiles = [end] + [mid] * (L - 1) + [end]
    big = fock.build_basis(grid, L + 3)
    chain_basis = fock.build_basis(grid, L)
    oracle = _chain_operator(w, big, profiles)
    recon = np.zeros_like(oracle)
    for M in range(3):
        for N in range(3):
            if M + N > 2 * L:
                continue
            k = wick.normal_order(w, chain_basis, L, M, N, end, mid)
            recon += kernels.single_op(k, big, sandwich=False)
    low = np.nonzero(big.totals() <= 2)[0]
    blk = np.ix_(low, low)
    assert np.abs(oracle[blk] - recon[blk]).max() <= 1e-11


def test_normal_order_matches_dense_vev(grid, r_grid):
    """Cross-check the batched engine against the plain dense chain."""
    rng = np.random.default_rng(9)
    w = helpers.random_interaction(rng, grid, r_grid, 0.5, INTERACTION_ENTRIES)
    end = gauss_profile(1.1)
    mid = gauss_profile(0.6)
    L, M, N = 2, 1, 0
    basis = fock.build_basis(grid, L)
    maps = wick.LadderMaps(grid, basis)
    out = wick.normal_order(w, basis, L, M, N, end, mid)
    om = grid.omegas
    for km in range(grid.n_modes):
        for ri in [0, 10, 25]:
            r = r_grid[ri]
            total = 0.0 + 0.0j
            for comp in wick.compositions(M, L):      # creation leg placement
                cre_e = [om[km] if c else 0.0 for c in comp]
                rshifts, rtilde = wick.shift_accounting(cre_e, [0.0] * L)
                blocks = []
                for l in range(L):
                    m_l = comp[l]
                    ext = (km,) if m_l else ()
                    blk = np.zeros((basis.dim, basis.dim), dtype=complex)
                    for (mp, nq) in w.kernels:
                        p, q = mp - m_l, nq
                        if p < 0:
                            continue
                        blk += wick.contracted_block(
                            w, wick.SlotSpec(m_l, p, 0, q), ext, (),
                            r + rshifts[l], basis, maps)
                    blocks.append(blk)
                total += wick.vev_chain([end, mid, end], blocks, rtilde, r,
                                        basis)
            assert abs(out.values[ri, km] - total) <= 1e-12


def test_chain_derivative_dual(grid, r_grid):
    rng = np.random.default_rng(21)
    w = helpers.random_interaction(rng, grid, r_grid, 0.5, INTERACTION_ENTRIES)
    end = gauss_profile(0.8)
    mid = gauss_profile(0.5)
    h = 1e-5
    eng = wick._Engine(w, fock.build_basis(grid, 2), end, mid, 2,
                       r_pts=np.array([0.3 - h, 0.3, 0.3 + h]))
    v, dv = eng.chain_value((((1,), ()), ((), (0,))))
    fd = (v[2] - v[0]) / (2.0 * h)
    assert abs(dv[1] - fd) <= 1e-6 * max(1.0, abs(fd))


def test_normal_order_truncation_guard(grid, r_grid):
    w = helpers.random_interaction(np.random.default_rng(1), grid, r_grid,
                                   0.1, [(1, 0)])
    with pytest.raises(TruncationError):
        wick.normal_order(w, fock.build_basis(grid, 1), 2, 0, 0,
                          gauss_profile(1.0), gauss_profile(1.0))


def test_neumann_wick_free_case(grid, r_grid):
    w = kernels.KernelSeq(grid, r_grid, 0.25, 2)
    z = -0.05
    base = kernels.Kernel(0, 0, grid, r_grid, (r_grid - z).astype(complex),
                          np.ones(r_grid.size, dtype=complex))
    end, mid = chi_profiles(1.0, z)
    out, info = wick.neumann_wick(w, fock.build_basis(grid, 2), end, mid,
                                  base, L_max=3, tol=1e-12)
    np.testing.assert_allclose(out.entry(0, 0).values, r_grid - z, atol=1e-14)
    assert np.abs(out.entry(1, 0).values).max() == 0.0
    assert out.tail_bound <= 1e-12


def test_neumann_wick_matches_dense_feshbach(grid, r_grid):
    """End-to-end: kernel series vs the dense smooth Feshbach map.

    The truncated field space with omega in {1, 1/2, 1/4} and energy cap 1
    is closed for the vacuum chains, so both sides are computed without
    truncation error beyond the Neumann depth.
    """
    g3 = fock.build_grid(2, 0.5)
    rng = np.random.default_rng(77)
    rg = kernels.make_r_grid(48)
    z = -0.1
    w = helpers.random_interaction(rng, g3, rg, 0.01, INTERACTION_ENTRIES)
    end, mid = chi_profiles(1.0, z)
    base = kernels.Kernel(0, 0, g3, rg, (rg - z).astype(complex),
                          np.ones(rg.size, dtype=complex))
    chain_basis = fock.build_basis(g3, 4, energy_cap=1.0)
    out, info = wick.neumann_wick(w, chain_basis, end, mid, base,
                                  L_max=4, tol=1e-14, fixed_depth=4)
    basis = fock.build_basis(g3, 4, energy_cap=1.0)
    E = basis.energies
    cp = feshbach.smooth_chi(1.0)
    chi = np.diag(cp.chi(E).astype(complex))
    chibar = np.diag(cp.chibar(E).astype(complex))
    T = np.diag((E - z).astype(complex))
    W = np.zeros((basis.dim, basis.dim), dtype=complex)
    for k in w.kernels.values():
        W += kernels.single_op(k, basis, sandwich=False)
    F_dense = feshbach.feshbach_map(T + W, T, chi, chibar, check=False)
    F_kernel = kernels.to_operator(out, basis, sandwich=False).mat
    low = np.nonzero(basis.totals() <= 1)[0]
    blk = np.ix_(low, low)
    assert np.abs(F_dense[blk] - F_kernel[blk]).max() <= 1e-7
