"""Shared test utilities: random kernels, planted Feshbach pairs, eigensolves."""

import numpy as np

from feshrg import feshbach, kernels


def smooth_ramp(t):
    # C^1 ramp vanishing for t <= 0, used to build support-respecting kernels
    return np.where(t > 0, t * t, 0.0)


def smooth_ramp_d(t):
    return np.where(t > 0, 2.0 * t, 0.0)


def random_kernel(rng, m, n, grid, r_grid, scale=1.0):
    """Random smooth kernel obeying the support condition by construction."""
    legs = m + n
    shape_modes = (grid.n_modes,) * legs
    coeff = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    mode_amp = rng.standard_normal(shape_modes) + 1j * rng.standard_normal(shape_modes) \
        if legs else np.array(1.0 + 0j)
    om = grid.omegas
    cap = np.ones((1,) + shape_modes)
    if legs:
        s_cre = sum(om.reshape([1] + [grid.n_modes if i == j else 1 for j in range(legs)])
                    for i in range(m)) if m else 0.0
        s_ann = sum(om.reshape([1] + [grid.n_modes if i == j else 1 for j in range(legs)])
                    for i in range(m, legs)) if n else 0.0
        cap = 1.0 - np.maximum(s_cre, s_ann) + np.zeros((1,) + shape_modes)
    r = r_grid.reshape((-1,) + (1,) * legs)
    poly = coeff[0] + coeff[1] * r + coeff[2] * r * r
    dpoly = coeff[1] + 2.0 * coeff[2] * r
    t = cap - r
    vals = scale * mode_amp * poly * smooth_ramp(t)
    dvals = scale * mode_amp * (dpoly * smooth_ramp(t) - poly * smooth_ramp_d(t))
    return kernels.Kernel(m, n, grid, r_grid, vals + 0j, dvals + 0j)


def random_interaction(rng, grid, r_grid, scale, entries, xi=0.25, M_max=2):
    """Symmetric random KernelSeq with the given leg-carrying entries."""
    w = kernels.KernelSeq(grid, r_grid, xi, M_max)
    for (m, n) in entries:
        k = random_kernel(rng, m, n, grid, r_grid, scale)
        w.set(kernels.symmetrize(k))
    return w


def planted_pair(rng, dim, complex_w=False, rho=0.5):
    """Random (H, T, chi, chibar) with T commuting with chi and small W.

    T is diagonal with field-energy-like entries: a handful of levels near 0
    (inside the chi region) and the rest spread over [3*rho/4, 1.5].  W is a
    small dense perturbation, complex non-Hermitian on request.  H = T + W
    has an eigenvalue near 0 that the Feshbach map must reproduce.
    """
    cp = feshbach.smooth_chi(rho)
    n_low = max(2, dim // 8)
    r = np.concatenate([
        rng.uniform(0.0, 0.2 * rho, n_low),
        rng.uniform(0.75 * rho, 1.5, dim - n_low),
    ])
    r.sort()
    chi = np.diag(cp.chi(r).astype(complex))
    chibar = np.diag(cp.chibar(r).astype(complex))
    T = np.diag(r.astype(complex))
    W = rng.standard_normal((dim, dim))
    if complex_w:
        W = W + 1j * rng.standard_normal((dim, dim))
    W *= 0.05 / np.linalg.norm(W, 2)
    H = T + W
    return H, T, chi, chibar


def nearest_eigenvalue(H, target):
    vals, vecs = np.linalg.eig(H)
    i = int(np.argmin(np.abs(vals - target)))
    return vals[i], vecs[:, i]


def feshbach_eigenvalue(H, T, chi, chibar, z0, iters=60, tol=1e-14):
    """Root of the smallest eigenvalue of F_chi(H-z, T-z) on Ran chi.

    Secant iteration on the analytic branch mu(z) = eigenvalue of the
    compressed Feshbach map with smallest magnitude; returns (z, v) with v
    the corresponding kernel vector of F at the root.
    """
    V = feshbach.range_basis(chi)
    dim = H.shape[0]

    def mu_and_vec(z):
        F = feshbach.feshbach_map(H - z * np.eye(dim), T - z * np.eye(dim),
                                  chi, chibar, check=False)
        Fr = V.conj().T @ F @ V
        vals, vecs = np.linalg.eig(Fr)
        i = int(np.argmin(np.abs(vals)))
        return vals[i], V @ vecs[:, i]

    z_prev = z0 + 1e-5
    m_prev, _ = mu_and_vec(z_prev)
    z = z0
    m, v = mu_and_vec(z)
    for _ in range(iters):
        if abs(m - m_prev) == 0.0:
            break
        z_next = z - m * (z - z_prev) / (m - m_prev)
        z_prev, m_prev = z, m
        z = z_next
        m, v = mu_and_vec(z)
        if abs(m) < tol:
            break
    return z, v
