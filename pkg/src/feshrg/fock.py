"""Truncated bosonic Fock space over a discretized one-photon momentum space.

The one-photon space is discretized into geometric radial shells
k_j = k_max * rho_grid**j, optionally crossed with a finite direction set and
two polarizations ("full" mode).  Modes are unit normalized, so ladder
operators satisfy the exact CCR on the truncation; all continuum measure
factors live in the per-mode quadrature weights.

Weight convention: ``ModeGrid.weights[m]`` is the per-leg quadrature factor
(8*pi)**(-1/2) * u_m, where u_m**2 = k_m * (exact integral of dK/|k|**2 over
the mode's annulus, polarization sum included).  With this choice the
discrete mass  sum_m (8*pi) * weights[m]**2 / k_m  equals 8*pi exactly on the
unit ball, which is what keeps the kernel-to-operator norm bound at its
continuum constant.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GridMismatch

__all__ = [
    "ModeGrid",
    "FockBasis",
    "FockOperator",
    "OCTAHEDRAL_DIRECTIONS",
    "octahedral_rotations",
    "build_grid",
    "build_basis",
    "creation",
    "annihilation",
    "field_energy",
    "number_operator",
    "dilation",
    "spectral_cutoff",
    "pull_through_residual",
]

EIGHT_PI = 8.0 * math.pi

# Fixed polarization gauge for the octahedral direction set.  Each triad
# (eps1, eps2, khat) is right handed and orthonormal.
_POL_TABLE = {
    (0, 0, 1): ((1, 0, 0), (0, 1, 0)),
    (0, 0, -1): ((0, 1, 0), (1, 0, 0)),
    (1, 0, 0): ((0, 1, 0), (0, 0, 1)),
    (-1, 0, 0): ((0, 0, 1), (0, 1, 0)),
    (0, 1, 0): ((0, 0, 1), (1, 0, 0)),
    (0, -1, 0): ((1, 0, 0), (0, 0, 1)),
}

OCTAHEDRAL_DIRECTIONS = np.array(sorted(_POL_TABLE.keys()), dtype=float)


def octahedral_rotations():
    """The 24 proper rotations mapping the octahedral direction set to itself.

    Returned as an array of shape (24, 3, 3) of signed permutation matrices
    with determinant +1, in a deterministic order.
    """
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            R = np.zeros((3, 3))
            for i, p in enumerate(perm):
                R[i, p] = signs[i]
            if abs(np.linalg.det(R) - 1.0) < 1e-12:
                mats.append(R)
    return np.array(mats)


@dataclass(frozen=True, eq=False)
class ModeGrid:
    """Discretized one-photon momentum space with quadrature weights."""

    shells: np.ndarray          # radial momenta, strictly decreasing
    rho_grid: float
    k_max: float
    angular_mode: str           # "radial" or "full"
    directions: np.ndarray      # (n_dirs, 3); empty in radial mode
    omegas: np.ndarray          # per-mode photon energy |k|
    weights: np.ndarray         # per-mode per-leg quadrature factor
    shell_index: np.ndarray     # per-mode radial shell index
    dir_index: np.ndarray       # per-mode direction index (-1 in radial mode)
    pol_index: np.ndarray       # per-mode polarization index (-1 in radial mode)

    @property
    def n_modes(self):
        return self.omegas.size

    @property
    def n_shells(self):
        return self.shells.size

    def polarization(self, mode):
        """Polarization vector of a full-mode grid mode."""
        if self.angular_mode != "full":
            raise GridMismatch("polarization vectors exist in full mode only")
        d = tuple(int(round(x)) for x in self.directions[self.dir_index[mode]])
        return np.array(_POL_TABLE[d][self.pol_index[mode]], dtype=float)

    def mode_momentum(self, mode):
        """Cartesian momentum vector of a mode (full mode only)."""
        if self.angular_mode != "full":
            raise GridMismatch("momentum vectors exist in full mode only")
        return self.omegas[mode] * self.directions[self.dir_index[mode]]

    def compatible(self, other):
        return (
            self.angular_mode == other.angular_mode
            and self.shells.shape == other.shells.shape
            and np.array_equal(self.shells, other.shells)
            and np.array_equal(self.weights, other.weights)
        )


def _annulus_bounds(shells, rho_grid, k_max):
    """Geometric-midpoint annulus boundaries, outermost capped, innermost to 0."""
    s = math.sqrt(rho_grid)
    outer = np.minimum(shells / s, k_max)
    inner = shells * s
    inner = inner.copy()
    inner[-1] = 0.0
    return outer, inner


def build_grid(J, rho_grid, k_max=1.0, angular_mode="radial", n_dirs=6):
    """Build the discretized one-photon momentum grid.

    In radial mode angular and polarization degrees are folded into the
    per-shell weights; full mode keeps n_dirs directions times two
    polarizations per shell (n_dirs must currently be 6, the octahedral set,
    so that an exact rotation group is available).
    """
    if J < 1:
        raise ConfigError(f"J must be >= 1, got {J}")
    if not (0.0 < rho_grid < 1.0):
        raise ConfigError(f"rho_grid must lie in (0,1), got {rho_grid}")
    if not (0.0 < k_max <= 1.0):
        raise ConfigError(f"k_max must lie in (0,1], got {k_max}")
    if angular_mode not in ("radial", "full"):
        raise ConfigError(f"unknown angular_mode {angular_mode!r}")

    shells = k_max * rho_grid ** np.arange(J + 1, dtype=float)
    outer, inner = _annulus_bounds(shells, rho_grid, k_max)
    # mu_j = exact integral of dK/|k|^2 over the annulus (polarization sum 2
    # included): 2 * 4*pi * (outer - inner).
    mu = EIGHT_PI * (outer - inner)
    u_sq = shells * mu                      # per-shell squared leg weight

    if angular_mode == "radial":
        omegas = shells.copy()
        weights = np.sqrt(u_sq / EIGHT_PI)
        shell_index = np.arange(J + 1)
        dir_index = -np.ones(J + 1, dtype=int)
        pol_index = -np.ones(J + 1, dtype=int)
        directions = np.empty((0, 3))
    else:
        if n_dirs != 6:
            raise ConfigError("full mode supports the 6-direction octahedral set")
        directions = OCTAHEDRAL_DIRECTIONS.copy()
        n_ang = n_dirs * 2
        omegas = np.repeat(shells, n_ang)
        weights = np.sqrt(np.repeat(u_sq, n_ang) / (EIGHT_PI * n_ang))
        shell_index = np.repeat(np.arange(J + 1), n_ang)
        dir_index = np.tile(np.repeat(np.arange(n_dirs), 2), J + 1)
        pol_index = np.tile(np.tile(np.arange(2), n_dirs), J + 1)

    return ModeGrid(
        shells=shells,
        rho_grid=rho_grid,
        k_max=k_max,
        angular_mode=angular_mode,
        directions=directions,
        omegas=omegas,
        weights=weights,
        shell_index=shell_index,
        dir_index=dir_index,
        pol_index=pol_index,
    )


@dataclass(frozen=True, eq=False)
class FockBasis:
    """Occupation-number basis with total photon number <= n_max."""

    mode_count: int
    n_max: int
    states: np.ndarray          # (n_states, mode_count) int occupation vectors
    energies: np.ndarray        # H_f eigenvalue per state
    index: dict = field(repr=False)  # occupation tuple -> state index

    @property
    def dim(self):
        return self.states.shape[0]

    def totals(self):
        return self.states.sum(axis=1)


def build_basis(grid, n_max, energy_cap=None):
    """Enumerate occupation vectors with total photon number <= n_max.

    ``energy_cap`` optionally prunes states whose field energy exceeds the
    cap; vacuum expectation chains only ever visit low-energy states, so the
    pruning is exact for those uses when the cap dominates the cutoffs in
    play.
    """
    omegas = grid.omegas
    m = omegas.size
    states = [np.zeros(m, dtype=int)]
    # breadth-first by total photon number, lexicographic within a level
    level = [np.zeros(m, dtype=int)]
    for _ in range(n_max):
        nxt = []
        seen = set()
        for occ in level:
            # only add photons at or past the last occupied mode to avoid dupes
            start = 0
            nz = np.nonzero(occ)[0]
            if nz.size:
                start = nz[-1]
            for j in range(start, m):
                new = occ.copy()
                new[j] += 1
                key = tuple(new)
                if key not in seen:
                    seen.add(key)
                    nxt.append(new)
        nxt.sort(key=lambda a: tuple(a))
        states.extend(nxt)
        level = nxt
    states = np.array(states, dtype=int)
    energies = states @ omegas
    if energy_cap is not None:
        keep = energies <= energy_cap + 1e-12
        keep[0] = True
        states = states[keep]
        energies = energies[keep]
    index = {tuple(s): i for i, s in enumerate(states)}
    return FockBasis(
        mode_count=m, n_max=n_max, states=states, energies=energies, index=index
    )


@dataclass
class FockOperator:
    """Dense complex matrix on a FockBasis (or a tensor-extended basis)."""

    basis: FockBasis
    mat: np.ndarray
    adjointness: str = "none"   # none / self-adjoint / known-adjoint

    def __post_init__(self):
        self.mat = np.asarray(self.mat, dtype=complex)
        if self.mat.shape[0] != self.mat.shape[1]:
            raise ValueError("operator matrix must be square")
        if self.adjointness == "self-adjoint":
            dev = np.linalg.norm(self.mat - self.mat.conj().T, 2)
            if dev > 1e-12 * max(1.0, np.linalg.norm(self.mat, 2)):
                raise ValueError(f"self-adjoint tag violated, deviation {dev:g}")

    @property
    def dim(self):
        return self.mat.shape[0]

    def adjoint(self):
        return FockOperator(self.basis, self.mat.conj().T, self.adjointness)

    def norm(self):
        return float(np.linalg.norm(self.mat, 2))


def creation(grid, basis, mode):
    """Matrix of the creation operator of one grid mode.

    States already at the photon cap are annihilated by the truncation (the
    CCR holds exactly on the block with fewer than n_max photons).
    """
    if not (0 <= mode < basis.mode_count):
        raise GridMismatch(f"mode {mode} out of range")
    dim = basis.dim
    mat = np.zeros((dim, dim), dtype=complex)
    totals = basis.totals()
    for i, occ in enumerate(basis.states):
        if totals[i] >= basis.n_max:
            continue
        new = occ.copy()
        new[mode] += 1
        j = basis.index.get(tuple(new))
        if j is not None:
            mat[j, i] = math.sqrt(occ[mode] + 1.0)
    return FockOperator(basis, mat)


def annihilation(grid, basis, mode):
    return creation(grid, basis, mode).adjoint()


def field_energy(grid, basis):
    """H_f = second quantization of the photon dispersion, diagonal here."""
    return FockOperator(basis, np.diag(basis.energies.astype(complex)), "self-adjoint")


def number_operator(grid, basis):
    return FockOperator(
        basis, np.diag(basis.totals().astype(complex)), "self-adjoint"
    )


def dilation(basis, grid, rho):
    """Partial isometry implementing the grid dilation.

    Occupation of shell j moves to shell j-1 (momenta scale by 1/rho_grid);
    any state occupying the shallowest shell is mapped to zero, so the
    deepest shell is the one that drains under the adjoint.  Satisfies
    G H_f G^dag = rho * H_f on the range and G Omega = Omega.
    """
    if abs(rho - grid.rho_grid) > 1e-15:
        raise GridMismatch(
            f"dilation ratio {rho} must equal the grid ratio {grid.rho_grid}"
        )
    dim = basis.dim
    mat = np.zeros((dim, dim), dtype=complex)
    n_shells = grid.n_shells
    for i, occ in enumerate(basis.states):
        shifted = np.zeros_like(occ)
        ok = True
        for m, n in enumerate(occ):
            if n == 0:
                continue
            sj = grid.shell_index[m]
            if sj == 0:
                ok = False
                break
            # same direction/polarization, one shell shallower
            tgt = m - (grid.n_modes // n_shells)
            shifted[tgt] += n
        if not ok:
            continue
        j = basis.index.get(tuple(shifted))
        if j is not None:
            mat[j, i] = 1.0
    return FockOperator(basis, mat)


def spectral_cutoff(basis, threshold):
    """Orthogonal projection onto states with field energy <= threshold."""
    if threshold <= 0:
        raise ConfigError("cutoff threshold must be positive")
    diag = (basis.energies <= threshold + 1e-14).astype(complex)
    return FockOperator(basis, np.diag(diag), "self-adjoint")


def apply_profile(basis, f, shift=0.0):
    """Diagonal matrix of f(H_f + shift) via the spectral calculus."""
    vals = np.asarray([f(e + shift) for e in basis.energies], dtype=complex)
    return np.diag(vals)


def pull_through_residual(grid, basis, f, mode):
    """Norm of f(H_f) a*(m) - a*(m) f(H_f + omega_m) on the sub-cap block.

    Exact on the discrete grid for any bounded f; returned as a numerical
    certificate.
    """
    a_dag = creation(grid, basis, mode).mat
    lhs = apply_profile(basis, f) @ a_dag
    rhs = a_dag @ apply_profile(basis, f, shift=grid.omegas[mode])
    sub = basis.totals() < basis.n_max
    diff = (lhs - rhs)[:, sub]
    return float(np.linalg.norm(diff, 2))
