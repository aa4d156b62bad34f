"""Integral-kernel sequences w = (w_{m,n}) and their operator calculus.

A Kernel holds the values of one w_{m,n} on a uniform r-grid times the
momentum grid modes (one axis per leg), together with the analytically
propagated r-derivative.  KernelSeq collects the entries with m+n <= M_max
plus a certified tail bound; ZFamily is a KernelSeq-valued analytic family
over the spectral disc, stored as circle samples.

All kernels use the measure-normalized convention: the per-leg quadrature
factor (8*pi)^(-1/2)|k|^(-1/2) lives in ModeGrid.weights, so the operator
norm bound ||H_{m,n}(w)|| <= ||w||_inf (n! m!)^(-1/2) holds with its
continuum constant.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from . import fock
from .errors import ConfigError, GridMismatch, KernelMissing, SymmetryError

__all__ = [
    "Kernel",
    "KernelSeq",
    "ZFamily",
    "make_r_grid",
    "support_mask",
    "sharp_norm",
    "xi_norm",
    "symmetrize",
    "to_operator",
    "single_op",
    "measure_bound_check",
    "mode_transform",
    "rotation_operator",
    "rotate_kernel",
    "rotation_average",
    "is_symmetric_family",
]


def make_r_grid(n_r=64):
    if n_r < 4:
        raise ConfigError("n_r must be at least 4")
    return np.linspace(0.0, 1.0, n_r)


def _abs_entry(values, atom_dim):
    """Pointwise magnitude; spectral norm over the atomic block if present."""
    if atom_dim:
        return np.linalg.svd(values, compute_uv=False)[..., 0]
    return np.abs(values)


@dataclass(eq=False)
class Kernel:
    """One integral kernel w_{m,n} sampled on r_grid x modes^(m+n).

    ``values`` has shape (n_r,) + (n_modes,)*(m+n), with an optional trailing
    (atom_dim, atom_dim) block for atomic-operator-valued kernels.
    ``d_r_values`` stores the r-derivative on the same layout; it is
    propagated analytically by every producing operation, never re-differenced.
    """

    m: int
    n: int
    grid: fock.ModeGrid
    r_grid: np.ndarray
    values: np.ndarray
    d_r_values: np.ndarray
    atom_dim: int = 0
    # extension policy past r = 1: "zero" for reduced-space kernels (support
    # condition), "clamp" for full-space kernels that hold their edge value
    extend: str = "zero"
    _spline: object = field(default=None, repr=False, compare=False)
    _dspline: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        shape = (self.r_grid.size,) + (self.grid.n_modes,) * (self.m + self.n)
        if self.atom_dim:
            shape = shape + (self.atom_dim, self.atom_dim)
        self.values = np.asarray(self.values, dtype=complex)
        self.d_r_values = np.asarray(self.d_r_values, dtype=complex)
        if self.values.shape != shape or self.d_r_values.shape != shape:
            raise ConfigError(
                f"kernel ({self.m},{self.n}) array shape {self.values.shape} "
                f"does not match grid layout {shape}"
            )

    @classmethod
    def zeros(cls, m, n, grid, r_grid, atom_dim=0):
        shape = (r_grid.size,) + (grid.n_modes,) * (m + n)
        if atom_dim:
            shape = shape + (atom_dim, atom_dim)
        z = np.zeros(shape, dtype=complex)
        return cls(m, n, grid, r_grid, z, z.copy(), atom_dim)

    @classmethod
    def from_function(cls, m, n, grid, r_grid, f, df, atom_dim=0):
        """Sample f(r, K-tuple...) and its exact r-derivative df on the grid.

        f and df are vectorized over a leading r axis and receive one mode
        index array per leg.
        """
        legs = m + n
        idx = np.meshgrid(*([np.arange(grid.n_modes)] * legs), indexing="ij") \
            if legs else []
        r = r_grid.reshape((-1,) + (1,) * legs)
        vals = np.asarray(f(r, *idx), dtype=complex)
        dvals = np.asarray(df(r, *idx), dtype=complex)
        shape = (r_grid.size,) + (grid.n_modes,) * legs
        if atom_dim:
            shape = shape + (atom_dim, atom_dim)
        vals = np.broadcast_to(vals, shape).copy()
        dvals = np.broadcast_to(dvals, shape).copy()
        return cls(m, n, grid, r_grid, vals, dvals, atom_dim)

    def spline(self):
        if self._spline is None:
            self._spline = CubicHermiteSpline(
                self.r_grid, self.values, self.d_r_values, axis=0,
                extrapolate=False,
            )
        return self._spline

    def dspline(self):
        if self._dspline is None:
            self._dspline = self.spline().derivative()
        return self._dspline

    def eval(self, r):
        """Kernel values at arbitrary r (scalar or array).

        Points above 1 return 0 (the support condition puts every kernel with
        legs to zero there; leg-free kernels are only ever evaluated on
        [0, 1] by construction).  Negative r is a caller bug.
        """
        r = np.asarray(r, dtype=float)
        if np.any(r < -1e-12):
            raise ConfigError("kernel evaluated at negative r")
        rc = np.clip(r, 0.0, 1.0)
        out = self.spline()(rc)
        over = r > 1.0 + 1e-12
        if self.extend != "clamp" and np.any(over):
            out = np.where(
                over.reshape(over.shape + (1,) * (out.ndim - r.ndim)),
                0.0, out,
            )
        return out

    def copy(self):
        return Kernel(self.m, self.n, self.grid, self.r_grid,
                      self.values.copy(), self.d_r_values.copy(),
                      self.atom_dim, self.extend)


def support_mask(grid, m, n, r_grid):
    """Boolean admissibility mask of the support set Q_{m,n}.

    True where r <= 1 - max(creation-leg energy sum, annihilation-leg sum).
    """
    legs = m + n
    if legs == 0:
        return np.ones(r_grid.size, dtype=bool)
    om = grid.omegas
    shape = (1,) + (grid.n_modes,) * legs
    s_cre = np.zeros(shape)
    for i in range(m):
        ax = [1] * legs
        ax[i] = grid.n_modes
        s_cre = s_cre + om.reshape([1] + ax)
    s_ann = np.zeros(shape)
    for i in range(m, legs):
        ax = [1] * legs
        ax[i] = grid.n_modes
        s_ann = s_ann + om.reshape([1] + ax)
    cap = 1.0 - np.maximum(s_cre, s_ann)
    r = r_grid.reshape((-1,) + (1,) * legs)
    return r <= cap + 1e-12


def restrict_support(k: Kernel) -> Kernel:
    """Zero the kernel outside its support set (hard mask, for validation)."""
    mask = support_mask(k.grid, k.m, k.n, k.r_grid)
    if k.atom_dim:
        mask = mask[..., None, None]
    return Kernel(k.m, k.n, k.grid, k.r_grid, k.values * mask,
                  k.d_r_values * mask, k.atom_dim)


def check_support(k: Kernel, tol=1e-14):
    mask = support_mask(k.grid, k.m, k.n, k.r_grid)
    if k.atom_dim:
        mask = mask[..., None, None]
    off = np.abs(k.values[~mask])
    return float(off.max()) if off.size else 0.0


def sharp_norm(k: Kernel) -> float:
    """sup |w| + sup |d_r w| over the sampled support."""
    return float(_abs_entry(k.values, k.atom_dim).max()
                 + _abs_entry(k.d_r_values, k.atom_dim).max())


@dataclass(eq=False)
class KernelSeq:
    """The RG state: kernels for m+n <= M_max plus a certified tail bound."""

    grid: fock.ModeGrid
    r_grid: np.ndarray
    xi: float
    M_max: int
    kernels: dict = field(default_factory=dict)   # (m, n) -> Kernel
    tail_bound: float = 0.0
    atom_dim: int = 0

    def __post_init__(self):
        if not (0.0 < self.xi < 1.0):
            raise ConfigError(f"xi must lie in (0,1), got {self.xi}")
        for (m, n), k in self.kernels.items():
            if m + n > self.M_max:
                raise ConfigError(f"entry ({m},{n}) exceeds M_max={self.M_max}")
            if not k.grid.compatible(self.grid):
                raise GridMismatch(f"entry ({m},{n}) lives on a different grid")

    def entry(self, m, n):
        return self.kernels.get((m, n))

    def require(self, m, n):
        k = self.kernels.get((m, n))
        if k is None:
            raise KernelMissing(f"kernel ({m},{n}) is required but absent")
        return k

    def set(self, k: Kernel):
        self.kernels[(k.m, k.n)] = k

    def copy(self):
        return KernelSeq(self.grid, self.r_grid, self.xi, self.M_max,
                         {mn: k.copy() for mn, k in self.kernels.items()},
                         self.tail_bound, self.atom_dim)

    @classmethod
    def free(cls, grid, r_grid, xi, M_max, z=0.0):
        """The free kernel family: w_{0,0}(r) = r - z, no interaction."""
        w = cls(grid, r_grid, xi, M_max)
        vals = (r_grid - z).astype(complex)
        w.set(Kernel(0, 0, grid, r_grid, vals, np.ones_like(vals), 0))
        return w


def xi_norm(w: KernelSeq) -> float:
    total = w.tail_bound
    for (m, n), k in w.kernels.items():
        total += w.xi ** (-(m + n)) * sharp_norm(k)
    return float(total)


def interaction_norm(w: KernelSeq) -> float:
    """xi-weighted norm of the leg-carrying part w_{>=1} (delta_3 quantity)."""
    total = w.tail_bound
    for (m, n), k in w.kernels.items():
        if m + n >= 1:
            total += w.xi ** (-(m + n)) * sharp_norm(k)
    return float(total)


def symmetrize(k: Kernel) -> Kernel:
    """Average over permutations of the creation legs and annihilation legs."""
    if k.m <= 1 and k.n <= 1:
        return k.copy()
    vals = np.zeros_like(k.values)
    dvals = np.zeros_like(k.d_r_values)
    perms_m = list(itertools.permutations(range(1, 1 + k.m)))
    perms_n = list(itertools.permutations(range(1 + k.m, 1 + k.m + k.n)))
    tail = tuple(range(1 + k.m + k.n, k.values.ndim))
    count = 0
    for pm in perms_m:
        for pn in perms_n:
            axes = (0,) + pm + pn + tail
            vals += np.transpose(k.values, axes)
            dvals += np.transpose(k.d_r_values, axes)
            count += 1
    return Kernel(k.m, k.n, k.grid, k.r_grid, vals / count, dvals / count,
                  k.atom_dim)


def symmetrize_seq(w: KernelSeq) -> KernelSeq:
    out = w.copy()
    for mn, k in list(out.kernels.items()):
        out.kernels[mn] = symmetrize(k)
    return out


def _ladders(grid, basis):
    return [fock.creation(grid, basis, m).mat for m in range(grid.n_modes)]


def single_op(k: Kernel, basis, ladders=None, sandwich=True):
    """Matrix of H_{m,n}(w_{m,n}) on the truncated basis.

    Quadrature over ordered mode tuples with the per-leg weights; the kernel
    is evaluated at the field energy of the intermediate (fully annihilated)
    state by the spectral calculus.  With ``sandwich`` the result is
    P_red-projected on both sides.
    """
    grid, m, n = k.grid, k.m, k.n
    if basis.mode_count != grid.n_modes:
        raise GridMismatch("basis modes do not match the kernel grid")
    dim = basis.dim
    d = k.atom_dim or 1
    if ladders is None:
        ladders = _ladders(grid, basis)
    energies = basis.energies
    w_at_e = k.eval(energies)          # (dim, modes^{m+n}[, d, d])
    if m + n == 0:
        if d == 1:
            total = np.diag(w_at_e)
        else:
            total = np.zeros((d, dim, d, dim), dtype=complex)
            for s in range(dim):
                total[:, s, :, s] = w_at_e[s]
            total = total.reshape(d * dim, d * dim)
    else:
        total = np.zeros((d * dim, d * dim), dtype=complex)
        weights = grid.weights
        eye_d = np.eye(d)
        for tup in itertools.product(range(grid.n_modes), repeat=m + n):
            cre, ann = tup[:m], tup[m:]
            wv = w_at_e[(slice(None),) + tup]       # (dim[, d, d])
            if d == 1 and not np.any(wv):
                continue
            wfac = 1.0
            for md in tup:
                wfac *= weights[md]
            left = np.eye(dim)
            for md in cre:
                left = left @ ladders[md]
            right = np.eye(dim)
            for md in ann:
                right = right @ ladders[md].conj().T
            if d == 1:
                block = left @ (wv[:, None] * right)
                total += wfac * block
            else:
                mid = np.zeros((d, dim, d, dim), dtype=complex)
                for s in range(dim):
                    mid[:, s, :, s] = wv[s]
                mid = mid.reshape(d * dim, d * dim)
                big_left = np.kron(eye_d, left)
                big_right = np.kron(eye_d, right)
                total += wfac * (big_left @ mid @ big_right)
    if sandwich:
        pred = (energies <= 1.0 + 1e-14).astype(float)
        pr = np.tile(pred, d)
        total = total * pr[:, None] * pr[None, :]
    return total


def to_operator(w: KernelSeq, basis, sandwich=True) -> fock.FockOperator:
    """P_red-sandwiched sum of H_{m,n}(w_{m,n}) over the stored entries."""
    if basis.mode_count != w.grid.n_modes:
        raise GridMismatch("basis modes do not match the kernel grid")
    d = w.atom_dim or 1
    ladders = _ladders(w.grid, basis)
    total = np.zeros((d * basis.dim, d * basis.dim), dtype=complex)
    for mn in sorted(w.kernels):
        k = w.kernels[mn]
        if (k.atom_dim or 1) != d:
            raise ConfigError("mixed atomic dimensions in one KernelSeq")
        total += single_op(k, basis, ladders, sandwich=sandwich)
    return fock.FockOperator(basis, total)


def norm_bound(k: Kernel) -> float:
    """The continuum bound ||w||_inf (n! m!)^(-1/2) for H_{m,n}(w)."""
    sup = float(_abs_entry(k.values, k.atom_dim).max())
    return sup / math.sqrt(math.factorial(k.m) * math.factorial(k.n))


def measure_bound_check(m, n, grid):
    """Quadrature of the support-constrained measure integral and its bound.

    Returns (value, bound) with value the discrete analogue of
    int_{S_{m,n}} dK/|K|^2 (separate sum_omega <= 1 constraints per leg
    group) and bound = (8*pi)^(m+n)/(n!*m!).
    """
    if m + n < 1:
        raise ConfigError("measure check needs at least one leg")
    mu = fock.EIGHT_PI * grid.weights**2 / grid.omegas

    def group_sum(legs):
        if legs == 0:
            return 1.0
        total = 0.0
        for tup in itertools.product(range(grid.n_modes), repeat=legs):
            if sum(grid.omegas[t] for t in tup) <= 1.0 + 1e-12:
                p = 1.0
                for t in tup:
                    p *= mu[t]
                total += p
        return total

    value = group_sum(m) * group_sum(n)
    bound = fock.EIGHT_PI ** (m + n) / (math.factorial(m) * math.factorial(n))
    return float(value), float(bound)


def mode_transform(grid, R):
    """One-photon matrix of a grid-compatible rotation (full mode only).

    Entries T[new, old] carry the polarization mixing
    D[lam', lam] = eps(R khat, lam') . (R eps(khat, lam)); for the octahedral
    direction set with its fixed gauge these are exact signed 0/1 entries.
    """
    if grid.angular_mode != "full":
        raise SymmetryError("rotations act on full angular mode only")
    R = np.asarray(R, dtype=float)
    dirs = grid.directions
    n_dirs = dirs.shape[0]
    new_dir = np.full(n_dirs, -1, dtype=int)
    for i, d in enumerate(dirs):
        rd = R @ d
        hits = np.where(np.all(np.abs(dirs - rd) < 1e-10, axis=1))[0]
        if hits.size != 1:
            raise SymmetryError("rotation does not preserve the direction set")
        new_dir[i] = hits[0]
    T = np.zeros((grid.n_modes, grid.n_modes))
    for mode in range(grid.n_modes):
        sh, di, pol = grid.shell_index[mode], grid.dir_index[mode], \
            grid.pol_index[mode]
        eps = grid.polarization(mode)
        reps = R @ eps
        nd = new_dir[di]
        base = sh * (n_dirs * 2) + nd * 2
        for lamp in range(2):
            tgt_eps = grid.polarization(base + lamp)
            c = float(np.dot(tgt_eps, reps))
            if abs(c) > 1e-12:
                T[base + lamp, mode] = c
    return T


def rotation_operator(grid, basis, R):
    """Second quantization of mode_transform on the truncated basis."""
    T = mode_transform(grid, R)
    dim = basis.dim
    U = np.zeros((dim, dim), dtype=complex)
    ladders = None
    for i, occ in enumerate(basis.states):
        vec = np.zeros(dim, dtype=complex)
        vec[0] = 1.0
        norm = 1.0
        for mode, nph in enumerate(occ):
            for _ in range(nph):
                if ladders is None:
                    ladders = _ladders(grid, basis)
                new = np.zeros(dim, dtype=complex)
                for tgt in np.nonzero(T[:, mode])[0]:
                    new += T[tgt, mode] * (ladders[tgt] @ vec)
                vec = new
            norm *= math.factorial(nph)
        U[:, i] = vec / math.sqrt(norm)
    return U


def rotate_kernel(k: Kernel, R) -> Kernel:
    """Transform a kernel with the per-leg D-matrix cocycle.

    Creation legs transform with T, annihilation legs with conj(T), matching
    U H(w) U^dag = H(rotated w) on the truncation.
    """
    T = mode_transform(k.grid, R)
    vals, dvals = k.values, k.d_r_values
    for leg in range(k.m):
        vals = np.tensordot(T, vals, axes=([1], [1 + leg]))
        vals = np.moveaxis(vals, 0, 1 + leg)
        dvals = np.tensordot(T, dvals, axes=([1], [1 + leg]))
        dvals = np.moveaxis(dvals, 0, 1 + leg)
    for leg in range(k.m, k.m + k.n):
        vals = np.tensordot(T.conj(), vals, axes=([1], [1 + leg]))
        vals = np.moveaxis(vals, 0, 1 + leg)
        dvals = np.tensordot(T.conj(), dvals, axes=([1], [1 + leg]))
        dvals = np.moveaxis(dvals, 0, 1 + leg)
    return Kernel(k.m, k.n, k.grid, k.r_grid, vals, dvals, k.atom_dim)


def rotation_average(k: Kernel, group) -> Kernel:
    """Group average; output is invariant under every group element."""
    vals = np.zeros_like(k.values)
    dvals = np.zeros_like(k.d_r_values)
    for R in group:
        rk = rotate_kernel(k, R)
        vals += rk.values
        dvals += rk.d_r_values
    ng = len(group)
    return Kernel(k.m, k.n, k.grid, k.r_grid, vals / ng, dvals / ng,
                  k.atom_dim)


@dataclass(eq=False)
class ZFamily:
    """KernelSeq-valued analytic family on the spectral disc.

    Stored as the center sample (z = 0) plus Q equispaced samples on the
    circle |z| = r_z; Taylor coefficients come from the discrete Fourier
    transform of the circle samples.
    """

    center: KernelSeq
    samples: list                      # KernelSeq at r_z * exp(2*pi*i*q/Q)
    r_z: float

    def __post_init__(self):
        if len(self.samples) < 4 or len(self.samples) % 2:
            raise ConfigError("ZFamily needs an even number >= 4 of samples")
        if not (0.0 < self.r_z < 0.5):
            raise ConfigError("sampling radius must lie in (0, 1/2)")

    @property
    def Q(self):
        return len(self.samples)

    @property
    def nodes(self):
        q = np.arange(self.Q)
        return self.r_z * np.exp(2j * np.pi * q / self.Q)

    def all_samples(self):
        """Center + circle samples with their z values."""
        return [(0.0 + 0.0j, self.center)] + list(zip(self.nodes, self.samples))

    def _taylor(self, arrays):
        """DFT Taylor coefficients c_t of circle-sampled arrays (Q leading)."""
        x = np.asarray(arrays)
        c = np.fft.fft(x, axis=0) / self.Q
        powers = self.r_z ** np.arange(self.Q)
        return c / powers.reshape((-1,) + (1,) * (c.ndim - 1))

    def at(self, z) -> KernelSeq:
        """Evaluate the family at a point of the disc via the Taylor data."""
        if abs(z) > self.r_z * (1.0 + 1e-9):
            raise ConfigError(
                f"evaluation point |z|={abs(z):.3g} outside the sampled "
                f"circle radius {self.r_z}"
            )
        proto = self.samples[0]
        out = KernelSeq(proto.grid, proto.r_grid, proto.xi, proto.M_max,
                        {}, max(s.tail_bound for s in self.samples),
                        proto.atom_dim)
        zp = z ** np.arange(self.Q)
        for mn in sorted(proto.kernels):
            vs = self._taylor([s.kernels[mn].values for s in self.samples])
            dvs = self._taylor([s.kernels[mn].d_r_values for s in self.samples])
            shape = (-1,) + (1,) * (vs.ndim - 1)
            vals = np.sum(vs * zp.reshape(shape), axis=0)
            dvals = np.sum(dvs * zp.reshape(shape), axis=0)
            k0 = proto.kernels[mn]
            out.set(Kernel(k0.m, k0.n, proto.grid, proto.r_grid, vals, dvals,
                           proto.atom_dim))
        return out

    def probe(self, fn):
        """Scalar probe values [fn(sample) for circle samples] for diagnostics."""
        return np.array([fn(s) for s in self.samples], dtype=complex)


def is_symmetric_family(f: ZFamily, tol=1e-10):
    """Check w_{m,n}(conj z) = conj(w_{n,m}(z)) with legs exchanged.

    The circle nodes are closed under conjugation (node q maps to Q - q), so
    the check is exact on the stored samples.  Atomic-valued kernels also
    transpose the atomic block.
    """
    Q = f.Q
    dev = 0.0
    pairs = [(f.center, f.center)] + [
        (f.samples[q], f.samples[(Q - q) % Q]) for q in range(Q)
    ]
    for s_z, s_zbar in pairs:
        keys = set(s_z.kernels) | set(s_zbar.kernels)
        for (m, n) in keys:
            a = s_zbar.entry(m, n)
            b = s_z.entry(n, m)
            if a is None or b is None:
                return False, float("inf")
            legs_b = tuple(range(1 + n, 1 + n + m)) + tuple(range(1, 1 + n))
            axes = (0,) + legs_b
            if b.atom_dim:
                axes = axes + (b.values.ndim - 1, b.values.ndim - 2)
            mirrored = np.conj(np.transpose(b.values, axes))
            dev = max(dev, float(np.abs(a.values - mirrored).max()))
    return dev <= tol, dev
