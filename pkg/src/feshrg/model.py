"""Physical model inputs: atoms, couplings, interaction kernels, oracles.

Two atomic realizations share one interface.  The matrix mode is a finite
analytic family obtained by exact similarity transforms
exp(i*theta*B) exp(i*alpha*M) of a fixed dipole-coupled level system; the
transform acts on every atomic operator, which makes spectral constancy in
(theta, alpha) and the adjoint identity H(conj theta, conj alpha, conj g) =
H(theta, alpha, g)^dag exact and isolates the renormalization error.  The
hydrogen mode discretizes the s-wave radial operator -1/2 u'' - u/r on a
Dirichlet box; complex dilation enters through the kinetic/potential
scaling and the dilated cutoff, alpha through conjugation with the diagonal
phase exp(i*alpha*<r>), and the photon phase factors reduce to the
spherical Bessel weight j0(beta*k*r).

The interaction kernels follow the hatted (energy-shifted, normal-ordered)
convention: the free field enters with coefficient one, the one-photon
kernels carry sqrt(2)*g*kappa times the dipole coupling operator, the
two-photon kernels carry g^2 with no atomic structure beyond the phase
weights.  They are constant in r and clamp-extended past r = 1 because they
act on the full space, not the reduced one.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.linalg import expm

from . import feshbach, fock, kernels, wick
from .errors import (BallViolation, ConfigError, ContourCrossesSpectrum,
                     DegenerateGroundState, PairInvalid, TrackingLost)

__all__ = [
    "AtomSpec",
    "CouplingSpec",
    "InteractionKernels",
    "InitialData",
    "matrix_atom",
    "hydrogen_atom",
    "normalize_gap",
    "riesz_projection",
    "vacuum_shift",
    "dilated_shift_quadrature",
    "build_interaction_kernels",
    "assemble_hamiltonian",
    "initial_feshbach",
    "exact_ground",
    "reconstruct_energy",
]

SQRT2 = math.sqrt(2.0)
ISO_FOLD = 1.0 / math.sqrt(3.0)    # isotropic polarization fold, radial grids


@dataclass(eq=False)
class AtomSpec:
    """One atomic realization: operators at theta = alpha = 0 plus the
    analytic-family data needed to deform them."""

    mode: str                   # "matrix" or "hydrogen_radial"
    h0: np.ndarray              # H_at at theta = alpha = 0 (real symmetric)
    gap: float                  # first spectral gap of h0
    scale: float = 1.0          # energy factor divided out by normalize_gap
    e0: float = 0.0             # ground eigenvalue of h0
    # matrix mode
    gen_theta: np.ndarray = None    # Hermitian generator of the theta family
    gen_alpha: np.ndarray = None    # Hermitian generator of the alpha family
    dipole_vec: np.ndarray = None   # unit direction weights of the dipole
    dipole_mat: np.ndarray = None   # shared off-diagonal coupling matrix
    # radial mode
    r_pts: np.ndarray = None
    box: float = 0.0
    kin: np.ndarray = None          # -1/2 d^2/dr^2 (Dirichlet)
    pot: np.ndarray = None          # -1/r diagonal values
    p_op: np.ndarray = None         # Hermitian central-difference momentum

    @property
    def dim(self):
        return self.h0.shape[0]

    def similarity(self, theta, alpha):
        """exp(i*theta*B) exp(i*alpha*M) (matrix mode)."""
        if self.mode != "matrix":
            raise ConfigError("similarity transforms exist in matrix mode")
        return expm(1j * theta * self.gen_theta) @ expm(
            1j * alpha * self.gen_alpha)

    def alpha_phase(self, alpha):
        """Diagonal of exp(i*alpha*<r>), <r> = sqrt(1 + r^2) (radial mode)."""
        if self.mode != "hydrogen_radial":
            raise ConfigError("the radial phase exists in radial mode")
        return np.exp(1j * alpha * np.sqrt(1.0 + self.r_pts**2))

    def x_weight(self):
        """<r> = sqrt(1 + r^2) multiplication values (radial mode)."""
        if self.mode != "hydrogen_radial":
            raise ConfigError("<r> exists in radial mode")
        return np.sqrt(1.0 + self.r_pts**2)

    def h_at(self, theta=0.0, alpha=0.0):
        """The hatted atomic family (e^theta times the dilated operator)."""
        if self.mode == "matrix":
            if theta == 0.0 and alpha == 0.0:
                return self.h0.astype(complex)
            s = self.similarity(theta, alpha)
            return s @ self.h0 @ np.linalg.inv(s)
        h = np.exp(-theta) * self.kin + np.diag(self.pot).astype(complex)
        if alpha != 0.0:
            f = self.alpha_phase(alpha)
            h = f[:, None] * h / f[None, :]
        return h

    def ground_guess(self, theta=0.0):
        """Continuation target for the ground eigenvalue of h_at(theta, .)."""
        if self.mode == "matrix":
            return complex(self.e0)
        return np.exp(theta) * self.e0


def matrix_atom(d=2, gap=1.0, dipole_strength=0.2, dipole_diag=0.0):
    """Dipole-coupled level system with fixed deterministic generators.

    The levels are 0, gap, then increasingly spaced; by default the dipole
    matrix is nearest-neighbor off-diagonal, so every ground-reduced chain
    with an odd number of dipole factors vanishes (in particular all
    reduced one-photon kernels, by leg-count parity).  ``dipole_diag``
    adds a traceless diagonal component when nonvanishing one-photon
    kernels are wanted.
    """
    if d < 2:
        raise ConfigError("matrix mode needs at least two levels")
    j = np.arange(d, dtype=float)
    levels = gap * j + 0.35 * j * np.maximum(j - 1.0, 0.0)
    diff = np.abs(j[:, None] - j[None, :])
    gen_b = 0.3 / (1.0 + diff) + np.diag(0.1 * j)
    gen_m = 0.25 / (1.0 + 2.0 * diff) + np.diag(0.15 * j)
    dip = np.where(diff == 1.0, 1.0 / (j[:, None] + j[None, :] + 1.0), 0.0)
    dip = dip + dipole_diag * np.diag((-1.0) ** np.arange(d))
    dvec = np.array([0.6, -0.3, 0.5])
    dvec = dvec / np.linalg.norm(dvec)
    return AtomSpec(
        mode="matrix", h0=np.diag(levels), gap=float(gap), e0=0.0,
        gen_theta=gen_b, gen_alpha=gen_m, dipole_vec=dvec,
        dipole_mat=dipole_strength * dip,
    )


def hydrogen_atom(n_grid=200, box=40.0):
    """Radial hydrogen -1/2 u'' - u/r on (0, box) with Dirichlet ends."""
    if n_grid < 16:
        raise ConfigError("radial grid too coarse")
    h = box / (n_grid + 1)
    r = h * np.arange(1, n_grid + 1, dtype=float)
    kin = (np.diag(np.full(n_grid, 1.0 / h**2))
           + np.diag(np.full(n_grid - 1, -0.5 / h**2), 1)
           + np.diag(np.full(n_grid - 1, -0.5 / h**2), -1))
    pot = -1.0 / r
    h0 = kin + np.diag(pot)
    upper = np.diag(np.full(n_grid - 1, 1.0 / (2.0 * h)), 1)
    p_op = -1j * (upper - upper.T)
    vals = np.linalg.eigvalsh(h0)
    a = AtomSpec(
        mode="hydrogen_radial", h0=h0, gap=float(vals[1] - vals[0]),
        e0=float(vals[0]), r_pts=r, box=float(box), kin=kin, pot=pot,
        p_op=p_op,
    )
    return a


def normalize_gap(a: AtomSpec, tol=1e-9) -> AtomSpec:
    """Rescale the energy so the first spectral gap equals one exactly.

    Eigenvectors are untouched, so spatial quantities (decay lengths) keep
    their meaning; the divided-out factor accumulates in ``scale``.
    """
    vals = np.linalg.eigvalsh(a.h0)
    spread = max(1.0, float(vals[-1] - vals[0]))
    gap = float(vals[1] - vals[0])
    if gap <= tol * spread:
        raise DegenerateGroundState(
            f"lowest eigenvalue is not simple (gap {gap:.3e})")
    out = dataclasses.replace(
        a, h0=a.h0 / gap, gap=1.0, scale=a.scale * gap,
        e0=float(vals[0]) / gap,
    )
    if a.mode == "hydrogen_radial":
        out.kin = a.kin / gap
        out.pot = a.pot / gap
    return out


def riesz_projection(a: AtomSpec, theta=0.0, alpha=0.0, radius=None,
                     n_nodes=32):
    """Contour quadrature of the ground-state spectral projection.

    Trapezoid rule on a circle of the given radius (default gap/2) around
    the eigenvalue continued from the undeformed ground state; spectrally
    accurate because the resolvent is analytic on the contour.
    """
    h = np.asarray(a.h_at(theta, alpha), dtype=complex)
    if radius is None:
        radius = a.gap / 2.0
    evals = np.linalg.eigvals(h)
    center = evals[np.argmin(np.abs(evals - a.ground_guess(theta)))]
    others = np.abs(evals - center)
    others = others[others > 1e-8 * max(1.0, float(np.abs(evals).max()))]
    if others.size and float(others.min()) <= radius * (1.0 + 1e-8):
        raise ContourCrossesSpectrum(
            f"eigenvalue at distance {others.min():.3e} inside the contour "
            f"radius {radius:.3e}")
    d = h.shape[0]
    phases = np.exp(2j * np.pi * np.arange(n_nodes) / n_nodes)
    p = np.zeros((d, d), dtype=complex)
    for ph in phases:
        z = center + radius * ph
        p += ph * np.linalg.inv(z * np.eye(d) - h)
    p *= radius / n_nodes
    # Newton purification: the trapezoid rule leaves an O((1/2)^n_nodes)
    # idempotency defect at the default settings; the analytic map
    # P -> 3P^2 - 2P^3 squares the defect per step without moving the range
    for _ in range(3):
        dev = float(np.linalg.norm(p @ p - p, 2))
        if dev <= 1e-13:
            break
        p = 3.0 * (p @ p) - 2.0 * (p @ p @ p)
    dev = float(np.linalg.norm(p @ p - p, 2))
    if dev > 1e-12 * max(1.0, float(np.linalg.norm(p, 2))):
        raise ContourCrossesSpectrum(
            f"contour projection not idempotent, deviation {dev:.3e}")
    tr = complex(np.trace(p))
    if abs(tr - 1.0) > 1e-8:
        raise ContourCrossesSpectrum(
            f"projection rank {tr:.6f} differs from one")
    return p


@dataclass(frozen=True)
class CouplingSpec:
    """Coupling constants and the photon momentum cutoff profile."""

    g: complex = 0.0
    theta: complex = 0.0
    alpha: complex = 0.0
    kappa: str = "exponential"      # exponential / gaussian / sharp
    kappa_scale: float = 1.0
    kappa_amp: float = 1.0
    beta: float = 1.0
    n_electrons: int = 1

    def kappa_profile(self, k):
        """Cutoff at (possibly complex) momentum argument."""
        k = np.asarray(k)
        s = self.kappa_scale
        if self.kappa == "exponential":
            return self.kappa_amp * np.exp(-k / s)
        if self.kappa == "gaussian":
            return self.kappa_amp * np.exp(-((k / s) ** 2))
        if self.kappa == "sharp":
            if np.iscomplexobj(k) and np.any(np.abs(np.imag(k)) > 1e-14):
                raise ConfigError(
                    "sharp cutoff is not analytic; dilation needs a smooth "
                    "profile")
            return self.kappa_amp * np.where(
                np.real(k) <= s + 1e-12, 1.0, 0.0)
        raise ConfigError(f"unknown cutoff profile {self.kappa!r}")

    def kappa_theta(self, k):
        """kappa(e^{-theta} k)."""
        return self.kappa_profile(
            np.exp(-self.theta) * np.asarray(k, dtype=complex))

    def kappa_tilde(self, k):
        """conj(kappa((e^{-conj theta}) k)), the annihilation-side cutoff."""
        return np.conj(self.kappa_profile(
            np.exp(-np.conj(self.theta)) * np.asarray(k, dtype=complex)))

    def cutoff_sums(self, grid):
        """Grid quadratures of |kappa|^2/omega and |kappa|^2/omega^2.

        Both must be finite for the field operators to be bounded relative
        to the free energy; on a finite grid this is a diagnostic value, not
        a convergence question.
        """
        mu = fock.EIGHT_PI * grid.weights**2 / grid.omegas
        kap2 = np.abs(self.kappa_profile(grid.omegas)) ** 2
        s1 = float(np.sum(mu * grid.omegas * kap2))
        s2 = float(np.sum(mu * kap2))
        return s1, s2


def vacuum_shift(c: CouplingSpec, grid=None):
    """The normal-ordering constant N g^2 int |kappa|^2/|k| dk.

    Without a grid, a continuum radial quadrature 4*pi int kappa(k)^2 k dk;
    with a grid, the matching discrete quadrature (the value that makes the
    normal-ordering identity exact on the truncation, up to the 8*pi
    measure normalization of the discrete field).
    """
    if c.g == 0:
        return 0.0 + 0.0j
    pref = c.n_electrons * c.g**2 * 4.0 * math.pi
    if grid is not None:
        kap2 = np.abs(c.kappa_profile(grid.omegas)) ** 2
        return complex(pref * np.sum(grid.weights**2 * kap2))
    if c.kappa == "sharp":
        return complex(pref * c.kappa_amp**2 * c.kappa_scale**2 / 2.0)
    val, _ = quad(lambda k: float(np.real(c.kappa_profile(k)) ** 2) * k,
                  0.0, np.inf)
    return complex(pref * val)


def dilated_shift_quadrature(c: CouplingSpec, theta=None):
    """e^{-2 theta} N g^2 int kappa~_theta kappa_theta /|k| dk by quadrature.

    Analytically independent of theta for analytic profiles; computed here
    along the real momentum axis as a numerical check of that constancy.
    """
    th = c.theta if theta is None else theta
    cc = dataclasses.replace(c, theta=th)
    pref = cc.n_electrons * cc.g**2 * 4.0 * math.pi * np.exp(-2.0 * th)

    def integrand(k):
        return complex(cc.kappa_tilde(k) * cc.kappa_theta(k)) * k

    re, _ = quad(lambda k: integrand(k).real, 0.0, np.inf)
    im, _ = quad(lambda k: integrand(k).imag, 0.0, np.inf)
    return complex(pref * (re + 1j * im))


@dataclass(eq=False)
class InteractionKernels:
    """The five leg-carrying initial kernels plus the affine atomic part."""

    seq: kernels.KernelSeq          # entries (1,0),(0,1),(1,1),(2,0),(0,2)
    h_at_hat: np.ndarray            # hatted atomic family at (theta, alpha)
    e_at_hat: complex
    atom: AtomSpec
    coupling: CouplingSpec

    def w00_values(self, z, r):
        """Atomic-valued w_{0,0}(r) = h_at_hat - e_at_hat - z + r."""
        d = self.h_at_hat.shape[0]
        r = np.asarray(r, dtype=float)
        out = np.zeros(r.shape + (d, d), dtype=complex)
        out[:] = self.h_at_hat
        idx = np.arange(d)
        out[..., idx, idx] += (r - z - self.e_at_hat)[..., None]
        return out


def _eps_dots(grid, dvec):
    """Per-mode polarization dot products with the dipole direction."""
    if grid.angular_mode == "full":
        eps = np.array([grid.polarization(m) for m in range(grid.n_modes)])
        return eps @ dvec, eps @ eps.T
    nm = grid.n_modes
    return np.full(nm, ISO_FOLD), np.ones((nm, nm))


def _const_kernel(m, n, grid, r_grid, mode_vals, d):
    """r-constant atomic-valued kernel with clamp extension."""
    shape = (r_grid.size,) + (grid.n_modes,) * (m + n) + (d, d)
    vals = np.zeros(shape, dtype=complex)
    vals[:] = mode_vals
    return kernels.Kernel(m, n, grid, r_grid, vals, np.zeros_like(vals), d,
                          extend="clamp")


def _ground_eig(h, guess):
    evals = np.linalg.eigvals(h)
    return complex(evals[np.argmin(np.abs(evals - guess))])


def build_interaction_kernels(a: AtomSpec, c: CouplingSpec, grid, r_grid,
                              xi=0.25, alpha_mode="conjugate"):
    """Assemble the five interaction kernels as atomic-operator-valued data.

    ``alpha_mode``: "conjugate" (default) realizes alpha by the exact
    similarity transform; "affine" keeps the first-order coupling shift
    G - alpha * X with X = -i[M, G], which exhibits the structural
    linearity of the alpha dependence (the two agree to second order).
    """
    d = a.dim
    nm = grid.n_modes
    eps_dot, eps_eps = _eps_dots(grid, a.dipole_vec
                                 if a.dipole_vec is not None
                                 else np.array([1.0, 0.0, 0.0]))
    seq = kernels.KernelSeq(grid, r_grid, xi, 2, atom_dim=d)
    eye = np.eye(d)

    if a.mode == "matrix":
        # theta and alpha act purely on the atomic factor; the cutoff stays
        # undilated and the dilation prefactors are absent
        s_th = expm(1j * c.theta * a.gen_theta)
        s_th_inv = np.linalg.inv(s_th)
        if alpha_mode == "conjugate":
            s = s_th @ expm(1j * c.alpha * a.gen_alpha)
            s_inv = np.linalg.inv(s)
            coup = s @ a.dipole_mat @ s_inv
            h_hat = s @ a.h0 @ s_inv
        elif alpha_mode == "affine":
            x_mat = -1j * (a.gen_alpha @ a.dipole_mat
                           - a.dipole_mat @ a.gen_alpha)
            coup = s_th @ (a.dipole_mat - c.alpha * x_mat) @ s_th_inv
            h_hat = s_th @ a.h0 @ s_th_inv
        else:
            raise ConfigError(f"unknown alpha_mode {alpha_mode!r}")
        e_hat = complex(a.e0)
        kap = c.kappa_profile(grid.omegas).astype(complex)
        one = SQRT2 * c.g * kap * eps_dot                   # per-mode scalar
        v10 = one[:, None, None] * coup[None, :, :]
        v01 = v10
        pair = c.g**2 * eps_eps * np.multiply.outer(kap, kap)
        v11 = pair[:, :, None, None] * eye
        v20 = 0.5 * pair[:, :, None, None] * eye
        v02 = v20
    elif a.mode == "hydrogen_radial":
        eth = np.exp(-c.theta)
        kap_t = c.kappa_theta(grid.omegas)
        kap_tt = c.kappa_tilde(grid.omegas)
        f = a.alpha_phase(c.alpha)
        j0 = np.sinc(c.beta * np.outer(grid.omegas, a.r_pts) / np.pi)
        p_c = a.p_op
        v10 = np.empty((nm, d, d), dtype=complex)
        v01 = np.empty((nm, d, d), dtype=complex)
        for m in range(nm):
            o10 = j0[m][:, None] * p_c
            o01 = p_c * j0[m][None, :]
            if c.alpha != 0.0:
                o10 = f[:, None] * o10 / f[None, :]
                o01 = f[:, None] * o01 / f[None, :]
            v10[m] = SQRT2 * c.g * eth * kap_t[m] * eps_dot[m] * o10
            v01[m] = SQRT2 * c.g * eth * kap_tt[m] * eps_dot[m] * o01
        jj = np.einsum("mr,nr->mnr", j0, j0)
        diag = np.zeros((nm, nm, d, d), dtype=complex)
        idx = np.arange(d)
        diag[:, :, idx, idx] = jj
        v11 = (eth * c.g**2 * eps_eps
               * np.multiply.outer(kap_t, kap_tt))[:, :, None, None] * diag
        v20 = 0.5 * (eth * c.g**2 * eps_eps
                     * np.multiply.outer(kap_t, kap_t))[:, :, None, None] * diag
        v02 = 0.5 * (eth * c.g**2 * eps_eps
                     * np.multiply.outer(kap_tt, kap_tt))[:, :, None, None] * diag
        h_hat = a.h_at(c.theta, c.alpha)
        e_hat = _ground_eig(h_hat, a.ground_guess(c.theta))
    else:
        raise ConfigError(f"unknown atomic mode {a.mode!r}")

    seq.set(_const_kernel(1, 0, grid, r_grid, v10, d))
    seq.set(_const_kernel(0, 1, grid, r_grid, v01, d))
    seq.set(_const_kernel(1, 1, grid, r_grid, v11, d))
    seq.set(_const_kernel(2, 0, grid, r_grid, v20, d))
    seq.set(_const_kernel(0, 2, grid, r_grid, v02, d))
    return InteractionKernels(seq, np.asarray(h_hat, dtype=complex), e_hat,
                              a, c)


def _interaction_matrix(ik: InteractionKernels, basis):
    """Dense interaction on (atomic tensor Fock), atomic index major.

    Exploits the r-constancy of the initial kernels: each term is a plain
    Kronecker product of the atomic block with a ladder monomial, weighted
    by the per-leg quadrature factors.
    """
    grid = ik.seq.grid
    d = ik.atom.dim
    dim = basis.dim
    lads = [fock.creation(grid, basis, m).mat for m in range(grid.n_modes)]
    w = grid.weights
    total = np.zeros((d * dim, d * dim), dtype=complex)
    for (m, n), kern in sorted(ik.seq.kernels.items()):
        vals = kern.values[0]
        for tup in np.ndindex(*((grid.n_modes,) * (m + n))):
            block = vals[tup]
            if not np.any(block):
                continue
            op = np.eye(dim)
            for md in tup[:m]:
                op = op @ lads[md]
            for md in tup[m:]:
                op = op @ lads[md].conj().T
            u = 1.0
            for md in tup:
                u *= w[md]
            total += u * np.kron(block, op)
    return total


def assemble_hamiltonian(a: AtomSpec, c: CouplingSpec, grid, basis,
                         r_grid=None, alpha_mode="conjugate"):
    """Dense hatted Hamiltonian on the (atomic tensor Fock) truncation."""
    if r_grid is None:
        r_grid = kernels.make_r_grid(4)
    ik = build_interaction_kernels(a, c, grid, r_grid, alpha_mode=alpha_mode)
    dim = basis.dim
    mat = (np.kron(ik.h_at_hat, np.eye(dim))
           + np.kron(np.eye(a.dim), np.diag(basis.energies.astype(complex))))
    if c.g != 0:
        mat += _interaction_matrix(ik, basis)
    return fock.FockOperator(basis, mat)


def reconstruct_energy(a: AtomSpec, c: CouplingSpec, e_hat):
    """Undo the hat transform: E = e^{-theta} E_hat + shift.

    The matrix family carries no dilation factor and is defined directly in
    normal-ordered form, so there the hatted and physical energies agree.
    """
    if a.mode == "matrix":
        return complex(e_hat)
    return complex(np.exp(-c.theta) * e_hat + vacuum_shift(c))


def exact_ground(a: AtomSpec, c: CouplingSpec, grid, basis, n_steps=6,
                 r_grid=None, overlap_min=0.5, alpha_mode="conjugate"):
    """Ground level of the assembled Hamiltonian by continuation in g.

    The deformed matrix is non-normal, so the eigenvalue connected to the
    g = 0 atomic ground state is tracked by eigenvector overlap along a ray
    in g; sorting by real part would jump branches.  Returns the un-hatted
    energy and the final eigenvector (atomic index major).
    """
    d = a.dim
    dim_f = basis.dim
    h_free = a.h_at(c.theta, c.alpha)
    evals, evecs = np.linalg.eig(h_free)
    i0 = int(np.argmin(np.abs(evals - a.ground_guess(c.theta))))
    phi = evecs[:, i0] / np.linalg.norm(evecs[:, i0])
    psi = np.zeros(d * dim_f, dtype=complex)
    psi[np.arange(d) * dim_f] = phi        # phi tensor vacuum
    e_hat = complex(evals[i0])
    if c.g == 0:
        return reconstruct_energy(a, c, e_hat), psi
    prev = psi
    for s in np.linspace(0.0, 1.0, n_steps + 1)[1:]:
        cs = dataclasses.replace(c, g=c.g * s)
        h = assemble_hamiltonian(a, cs, grid, basis, r_grid,
                                 alpha_mode=alpha_mode).mat
        e_hat, prev = _tracked_eig(h, prev, e_hat, overlap_min)
    return reconstruct_energy(a, c, e_hat), prev


def _tracked_eig(h, prev, e_prev, overlap_min):
    dim = h.shape[0]
    if dim <= 1200:
        evals, evecs = np.linalg.eig(h)
    else:
        from scipy.sparse import csc_matrix
        from scipy.sparse.linalg import eigs
        evals, evecs = eigs(csc_matrix(h), k=6, sigma=e_prev)
    evecs = evecs / np.linalg.norm(evecs, axis=0)
    overlaps = np.abs(prev.conj() @ evecs)
    i = int(np.argmax(overlaps))
    if overlaps[i] < overlap_min:
        raise TrackingLost(
            f"continuation overlap {overlaps[i]:.3f} below {overlap_min}")
    return complex(evals[i]), evecs[:, i]


@dataclass(eq=False)
class InitialData:
    """Output of the initial reduction step."""

    e_at_hat: complex
    p_at: np.ndarray
    phi: np.ndarray             # right atomic ground vector
    phi_tilde: np.ndarray       # dual vector, phi_tilde^dag phi = 1
    w_i: InteractionKernels
    w0: kernels.ZFamily
    pair_report: object
    deltas: tuple               # (d1, d2, d3) over all z samples
    depths: list


def _chi_profiles(cp):
    return wick.Profile(lambda r: cp.chi(r).astype(complex),
                        lambda r: cp.dchi(r).astype(complex))


def _mid_profile(cp, evals, v_right, v_left_rows, i0, z):
    """chibar^2 times the inverse of the free part, atomic-matrix valued.

    In the atomic eigenbasis the factor is diagonal: on the ground level it
    is chibar(x)^2 / (x - z), on level i it is 1 / (lam_i + x - z) with
    lam_i the gap to the ground level.
    """
    lam = evals - evals[i0]
    d = evals.size

    def fmat(x, deriv):
        x = np.asarray(x, dtype=float)
        fv = np.empty(x.shape + (d,), dtype=complex)
        for i in range(d):
            if i == i0:
                # chibar vanishes identically below 3/4 while |z| < 1/2, so
                # the apparent pole at x = z is outside the support; guard
                # the exact-zero denominators that 0/0 would poison
                den = x - z
                safe = np.where(np.abs(den) < 1e-12, 1.0, den)
                cb = cp.chibar(x)
                if deriv:
                    fv[..., i] = (2.0 * cb * cp.dchibar(x) * safe
                                  - cb**2) / safe**2
                else:
                    fv[..., i] = cb**2 / safe
            else:
                den = lam[i] + x - z
                fv[..., i] = -1.0 / den**2 if deriv else 1.0 / den
        return np.einsum("ak,...k,kb->...ab", v_right, fv, v_left_rows)

    return wick.Profile(lambda x: fmat(x, False), lambda x: fmat(x, True))


def _pair_matrices(ik: InteractionKernels, basis, p_at, cp, z):
    """Dense (H, T, chi, chibar) of the initial pair at spectral point z."""
    d = ik.atom.dim
    dim = basis.dim
    e = basis.energies
    at = np.kron(ik.h_at_hat - (ik.e_at_hat + z) * np.eye(d), np.eye(dim))
    t = at + np.kron(np.eye(d), np.diag(e.astype(complex)))
    h = t + _interaction_matrix(ik, basis)
    p_bar = np.eye(d) - p_at
    chi = np.kron(p_at, np.diag(cp.chi(e).astype(complex)))
    chibar = (np.kron(p_bar, np.eye(dim))
              + np.kron(p_at, np.diag(cp.chibar(e).astype(complex))))
    return h, t, chi, chibar


def initial_feshbach(a: AtomSpec, c: CouplingSpec, grid, r_grid, basis=None,
                     xi=0.25, eps0=1.0 / 32.0, L_max=4, n_z=16, r_z=0.4,
                     tol=1e-9, fixed_depth=None, M_feed=2, pair_check=True,
                     ball_check=True, alpha_mode="conjugate") -> InitialData:
    """The initial reduction: from the full Hamiltonian to a kernel family.

    Runs the alternating Wick series of the smooth Feshbach map with the
    partition P_at tensor chi_1(H_f), reduced over the atomic factor by the
    ground eigenvector pair (project onto the range of P_at, divide out the
    eigenvector), at the disc center and n_z circle nodes in z.  Verifies
    the pair conditions on the truncation and the contraction-ball
    membership of the resulting family.
    """
    ik = build_interaction_kernels(a, c, grid, r_grid, xi=xi,
                                   alpha_mode=alpha_mode)
    d = a.dim
    evals, v = np.linalg.eig(ik.h_at_hat)
    i0 = int(np.argmin(np.abs(evals - ik.e_at_hat)))
    v_inv = np.linalg.inv(v)
    phi = v[:, i0]
    phi_tilde = np.conj(v_inv[i0])
    p_at = riesz_projection(a, c.theta, c.alpha)
    if basis is None:
        basis = fock.build_basis(grid, L_max)
    cp = feshbach.smooth_chi(1.0)
    end = _chi_profiles(cp)

    nodes = [0.0 + 0.0j] + list(
        r_z * np.exp(2j * np.pi * np.arange(n_z) / n_z))
    runs = []
    depths = []
    for z in nodes:
        base = kernels.Kernel(0, 0, grid, r_grid,
                              (r_grid - z).astype(complex),
                              np.ones(r_grid.size, dtype=complex))
        mid = _mid_profile(cp, evals, v, v_inv, i0, z)
        out, info = wick.neumann_wick(
            ik.seq, basis, end, mid, base, M_feed=M_feed, L_max=L_max,
            tol=tol, fixed_depth=fixed_depth, reduce_left=phi_tilde,
            reduce_right=phi, allow_truncation=True)
        runs.append(out)
        depths.append(info["depth"])

    w0 = kernels.ZFamily(runs[0], runs[1:], r_z)

    report = None
    if pair_check:
        h, t, chi, chibar = _pair_matrices(ik, basis, p_at, cp, 0.0)
        report = feshbach.check_pair(h, t, chi, chibar, commute_tol=1e-10)
        if not report.verdict:
            raise PairInvalid(
                f"initial pair rejected: commute={report.commute_residual:.2e}"
                f" sigma_min={report.sigma_min_T:.2e} norms=("
                f"{report.norm_left:.3f},{report.norm_right:.3f})")

    d1 = d2 = d3 = 0.0
    for z, sample in zip(nodes, runs):
        k00 = sample.entry(0, 0)
        d1 = max(d1, float(np.abs(k00.d_r_values - 1.0).max()))
        d2 = max(d2, float(abs(k00.values[0] + z)))
        d3 = max(d3, kernels.interaction_norm(sample))
    if ball_check and max(d1, d2, d3) > eps0 / 2.0:
        raise BallViolation(
            f"initial kernels outside the contraction ball: "
            f"deltas=({d1:.3e},{d2:.3e},{d3:.3e}) limit {eps0 / 2:.3e}",
            deltas=(d1, d2, d3))

    return InitialData(ik.e_at_hat, p_at, phi, phi_tilde, ik, w0, report,
                       (d1, d2, d3), depths)
