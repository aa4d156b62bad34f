"""Generalized Wick ordering of chains F_0 W F_1 ... W F_L.

Computes the integral kernels of a product of cutoff profiles F_l and
interaction operators W built from a symmetric KernelSeq, and the
alternating Neumann-series kernel expansion of the smooth Feshbach map.

Conventions.  Everything is measure-normalized: internal quadrature legs
carry ModeGrid.weights (which includes the (8*pi)^(-1/2)|k|^(-1/2) factor),
input and output kernels are both in the same normalization, so no explicit
8*pi powers appear anywhere.  External annihilation energies of slots <= l
and creation energies of slots > l enter profile and block arguments as the
pull-through shifts r_l, rtilde_l.

Input kernels must be symmetric in their leg groups (the binomial weights
assume it); outputs are symmetrized.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import fock, kernels
from .errors import (ConfigError, KernelMissing, SeriesDiverged,
                     TruncationError)

__all__ = [
    "Profile",
    "const_profile",
    "SlotSpec",
    "ContractionSpec",
    "shift_accounting",
    "compositions",
    "LadderMaps",
    "contracted_block",
    "vev_chain",
    "normal_order",
    "neumann_wick",
]


@dataclass(frozen=True)
class Profile:
    """A scalar (or atomic-matrix-valued) function of r with its derivative.

    ``val`` and ``der`` must be vectorized over numpy arrays; matrix-valued
    profiles return shape input_shape + (d, d).
    """

    val: object
    der: object


def const_profile(c=1.0):
    return Profile(lambda r: np.full(np.shape(r), c, dtype=complex),
                   lambda r: np.zeros(np.shape(r), dtype=complex))


@dataclass(frozen=True)
class SlotSpec:
    """One chain slot: m/n external and p/q internal legs."""

    m: int
    p: int
    n: int
    q: int

    @property
    def weight(self):
        return math.comb(self.m + self.p, self.p) * math.comb(self.n + self.q, self.q)


@dataclass(frozen=True)
class ContractionSpec:
    slots: tuple

    @property
    def L(self):
        return len(self.slots)

    @property
    def weight(self):
        w = 1
        for s in self.slots:
            w *= s.weight
        return w


def compositions(total, parts):
    """Ordered compositions of ``total`` into ``parts`` nonnegative parts."""
    if parts == 0:
        return [()] if total == 0 else []
    out = []
    for first in range(total + 1):
        for rest in compositions(total - first, parts - 1):
            out.append((first,) + rest)
    return out


def shift_accounting(cre_energy, ann_energy):
    """Pull-through shifts from per-slot external leg energies.

    Returns (r, rtilde): r[l-1] is the block shift of slot l (annihilation
    externals of earlier slots plus creation externals of later slots);
    rtilde[l] is the profile shift after slot l, with rtilde[0] the total
    creation energy and rtilde[L] the total annihilation energy.
    """
    L = len(cre_energy)
    r = []
    rtilde = [sum(cre_energy)]
    for l in range(1, L + 1):
        cre_after = sum(cre_energy[l:])
        r.append(sum(ann_energy[:l - 1]) + cre_after)
        rtilde.append(sum(ann_energy[:l]) + cre_after)
    return r, rtilde


class LadderMaps:
    """Index/amplitude maps of single-mode ladder operators on a basis.

    Annihilation and creation act injectively on occupation states, so each
    is a gather with per-state amplitudes; -1 marks states mapped out of the
    basis (or annihilated).  The inverse maps (src, samp) express the same
    action as a pure output-side gather, which is what apply_ann/apply_cre
    use: out[..., j, :] = samp[j] * vec[..., src[j], :].
    """

    def __init__(self, grid, basis):
        self.grid = grid
        self.basis = basis
        dim = basis.dim
        nm = grid.n_modes
        self.ann_dst = np.full((nm, dim), -1, dtype=int)
        self.ann_amp = np.zeros((nm, dim))
        self.cre_dst = np.full((nm, dim), -1, dtype=int)
        self.cre_amp = np.zeros((nm, dim))
        for s, occ in enumerate(basis.states):
            for mode in range(nm):
                if occ[mode] > 0:
                    t = occ.copy()
                    t[mode] -= 1
                    j = basis.index.get(tuple(t))
                    if j is not None:
                        self.ann_dst[mode, s] = j
                        self.ann_amp[mode, s] = math.sqrt(occ[mode])
                t = occ.copy()
                t[mode] += 1
                j = basis.index.get(tuple(t))
                if j is not None:
                    self.cre_dst[mode, s] = j
                    self.cre_amp[mode, s] = math.sqrt(occ[mode] + 1)
        self.ann_src = np.zeros((nm, dim), dtype=int)
        self.ann_samp = np.zeros((nm, dim))
        self.cre_src = np.zeros((nm, dim), dtype=int)
        self.cre_samp = np.zeros((nm, dim))
        for mode in range(nm):
            ok = self.ann_dst[mode] >= 0
            self.ann_src[mode, self.ann_dst[mode, ok]] = np.nonzero(ok)[0]
            self.ann_samp[mode, self.ann_dst[mode, ok]] = self.ann_amp[mode, ok]
            ok = self.cre_dst[mode] >= 0
            self.cre_src[mode, self.cre_dst[mode, ok]] = np.nonzero(ok)[0]
            self.cre_samp[mode, self.cre_dst[mode, ok]] = self.cre_amp[mode, ok]

    def apply_ann(self, mode, vec):
        """vec has shape (..., dim, d); returns a(mode) vec."""
        return vec[..., self.ann_src[mode], :] * self.ann_samp[mode][:, None]

    def apply_cre(self, mode, vec):
        return vec[..., self.cre_src[mode], :] * self.cre_samp[mode][:, None]


def _kernel_eval_pts(kern, pts, deriv=False):
    """Full-array kernel evaluation at arbitrary points.

    Beyond r = 1 the value is zero for support-constrained kernels and the
    edge value (zero derivative) for clamp-extended full-space kernels.
    """
    pts = np.asarray(pts, dtype=float)
    if np.any(pts < -1e-12):
        raise ConfigError("kernel evaluated at negative argument")
    sp = kern.dspline() if deriv else kern.spline()
    out = sp(np.clip(pts, 0.0, 1.0))
    over = pts > 1.0 + 1e-12
    if kern.extend == "clamp":
        if deriv and np.any(over):
            out = np.where(
                over.reshape(over.shape + (1,) * (out.ndim - pts.ndim)),
                0.0, out)
        return out
    if np.any(over):
        out = np.where(over.reshape(over.shape + (1,) * (out.ndim - pts.ndim)),
                       0.0, out)
    return out


def _mul_profile(fval, vec):
    """Apply a diagonal profile value array to vec (..., dim, d)."""
    if fval.ndim == vec.ndim + 1:        # matrix valued: (..., dim, d, d)
        if fval.shape[-1] == 2:          # hand-rolled 2x2 beats einsum here
            out = np.empty_like(vec)
            out[..., 0] = fval[..., 0, 0] * vec[..., 0]
            out[..., 0] += fval[..., 0, 1] * vec[..., 1]
            out[..., 1] = fval[..., 1, 0] * vec[..., 0]
            out[..., 1] += fval[..., 1, 1] * vec[..., 1]
            return out
        return np.einsum("...ij,...j->...i", fval, vec)
    return fval[..., None] * vec


def _ladder_matrix(maps, mode, create):
    dim = maps.basis.dim
    mat = np.zeros((dim, dim))
    dst = maps.cre_dst[mode] if create else maps.ann_dst[mode]
    amp = maps.cre_amp[mode] if create else maps.ann_amp[mode]
    ok = dst >= 0
    mat[dst[ok], np.nonzero(ok)[0]] = amp[ok]
    return mat


def contracted_block(w, slot: SlotSpec, ext_cre, ext_ann, shift, basis,
                     maps=None):
    """Dense matrix of one slot operator (reference implementation).

    The kernel entry (m+p, n+q) is evaluated at H_f + shift with the
    external legs fixed to the given mode tuples; internal legs are summed
    with the grid quadrature weights.  Includes the binomial weight.
    Index layout of the output is (state, atomic) row-major.
    """
    grid = w.grid
    kern = w.entry(slot.m + slot.p, slot.n + slot.q)
    if kern is None:
        raise KernelMissing(
            f"kernel ({slot.m + slot.p},{slot.n + slot.q}) absent")
    if maps is None:
        maps = LadderMaps(grid, basis)
    dim = basis.dim
    d = kern.atom_dim or 1
    energies = basis.energies
    vals = _kernel_eval_pts(kern, energies + shift)  # (dim, modes..., [d,d])
    weights = grid.weights
    total = np.zeros((dim, d, dim, d), dtype=complex)
    for X in itertools.product(range(grid.n_modes), repeat=slot.p):
        for Xt in itertools.product(range(grid.n_modes), repeat=slot.q):
            idx = tuple(ext_cre) + X + tuple(ext_ann) + Xt
            wv = vals[(slice(None),) + idx]          # (dim[, d, d])
            u = 1.0
            for x in X + Xt:
                u *= weights[x]
            right = np.eye(dim)
            for x in Xt:
                right = _ladder_matrix(maps, x, create=False) @ right
            left = np.eye(dim)
            for x in X:
                left = _ladder_matrix(maps, x, create=True) @ left
            if d == 1:
                total[:, 0, :, 0] += u * (left @ (wv[:, None] * right))
            else:
                mid = np.einsum("sab,st->satb", wv, right)
                total += u * np.einsum("rs,satb->ratb", left, mid)
    total *= slot.weight
    return total.reshape(dim * d, dim * d)


def vev_chain(profiles, blocks, rtilde, r, basis, d=1,
              reduce_left=None, reduce_right=None):
    """Vacuum expectation of F_0 B_1 F_1 ... B_L F_L (reference path).

    ``blocks`` are dense matrices of shape (dim*d, dim*d) with (state,
    atomic) row-major layout; profiles is the list [F_0, ..., F_L]; rtilde
    the profile shifts from shift_accounting.
    """
    L = len(blocks)
    if basis.n_max < L:
        raise TruncationError(f"n_max={basis.n_max} < L={L} slots")
    dim = basis.dim
    if reduce_right is None:
        reduce_right = np.ones(d, dtype=complex)
    if reduce_left is None:
        reduce_left = np.asarray(reduce_right, dtype=complex)
    vec = np.zeros((dim, d), dtype=complex)
    vec[0, :] = np.asarray(reduce_right, dtype=complex)
    for l in range(L, 0, -1):
        fv = np.asarray(profiles[l].val(basis.energies + r + rtilde[l]),
                        dtype=complex)
        vec = _mul_profile(fv, vec)
        vec = (blocks[l - 1] @ vec.reshape(dim * d)).reshape(dim, d)
    f0 = np.asarray(profiles[0].val(np.asarray(r + rtilde[0])), dtype=complex)
    vac = (f0 @ vec[0]) if f0.ndim == 2 else f0 * vec[0]
    return complex(np.conj(np.asarray(reduce_left, dtype=complex)) @ vac)


class _Engine:
    """Batched, memoized evaluation of the chain kernels over the r grid."""

    def __init__(self, w, basis, end_profile, mid_profile, L,
                 reduce_left=None, reduce_right=None, r_pts=None,
                 eval_cache=None, maps=None):
        self.w = w
        self.grid = w.grid
        self.basis = basis
        self.maps = maps if maps is not None else LadderMaps(w.grid, basis)
        self.L = L
        self.end = end_profile
        self.mid = mid_profile
        self.d = w.atom_dim or 1
        self.r_pts = np.asarray(r_pts if r_pts is not None else w.r_grid)
        self.energies = basis.energies
        if reduce_right is None:
            reduce_right = np.ones(self.d, dtype=complex)
        if reduce_left is None:
            reduce_left = reduce_right
        self.red_l = np.asarray(reduce_left, dtype=complex)
        self.red_r = np.asarray(reduce_right, dtype=complex)
        # spline evaluations depend only on (w, r window, shift); the cache
        # may be shared across engines operating on the same w and basis
        self._keval = eval_cache if eval_cache is not None else {}
        self._win = (float(self.r_pts[0]), self.r_pts.size)
        self._memo = {}
        self.omega = w.grid.omegas
        self.weights = w.grid.weights

    # ---- cached evaluations -------------------------------------------

    def kern_vals(self, mn, c, deriv):
        """Kernel values at r + H_f + c, cached with the mode axes first.

        Layout (modes..., nr, dim[, d, d]) makes the per-mode slices taken
        in apply_slot_pair contiguous, which is what the multiply speed
        lives on.
        """
        key = (mn, round(float(c), 12), deriv, self._win)
        hit = self._keval.get(key)
        if hit is None:
            kern = self.w.entry(mn[0], mn[1])
            pts = self.r_pts[:, None] + self.energies[None, :] + c
            hit = _kernel_eval_pts(kern, pts, deriv)
            legs = mn[0] + mn[1]
            if legs:
                hit = np.ascontiguousarray(
                    np.moveaxis(hit, range(2, 2 + legs), range(legs)))
            self._keval[key] = hit
        return hit

    def prof_vals(self, profile, c):
        key = (id(profile), round(float(c), 12), self._win)
        hit = self._keval.get(key)
        if hit is None:
            pts = self.r_pts[:, None] + self.energies[None, :] + c
            hit = (np.asarray(profile.val(pts), dtype=complex),
                   np.asarray(profile.der(pts), dtype=complex))
            self._keval[key] = hit
        return hit

    # ---- chain pieces -------------------------------------------------

    def vac_pair(self):
        nr, dim, d = self.r_pts.size, self.basis.dim, self.d
        v = np.zeros((nr, dim, d), dtype=complex)
        v[:, 0, :] = self.red_r
        return v, np.zeros_like(v)

    def apply_profile_pair(self, profile, pair, c):
        fv, fd = self.prof_vals(profile, c)
        v, dv = pair
        return (_mul_profile(fv, v), _mul_profile(fd, v) + _mul_profile(fv, dv))

    def apply_slot_pair(self, pair, m, n, ext_cre, ext_ann, c):
        """Sum over internal (p, q) with binomial weights, dual-propagated."""
        out_v = None
        out_d = None
        for (mp, nq), kern in self.w.kernels.items():
            p, q = mp - m, nq - n
            if p < 0 or q < 0 or (m + n + p + q) == 0:
                continue
            vals = self.kern_vals((mp, nq), c, False)
            dvals = self.kern_vals((mp, nq), c, True)
            bw = math.comb(mp, p) * math.comb(nq, q)
            for Xt in itertools.product(range(self.grid.n_modes), repeat=q):
                v1, d1 = pair
                for x in Xt:
                    v1 = self.maps.apply_ann(x, v1)
                    d1 = self.maps.apply_ann(x, d1)
                uq = bw
                for x in Xt:
                    uq *= self.weights[x]
                for X in itertools.product(range(self.grid.n_modes), repeat=p):
                    idx = tuple(ext_cre) + X + tuple(ext_ann) + Xt
                    wv = vals[idx]
                    dwv = dvals[idx]
                    u = uq
                    for x in X:
                        u *= self.weights[x]
                    nv = _mul_profile(wv, v1)
                    nd = _mul_profile(dwv, v1) + _mul_profile(wv, d1)
                    for x in reversed(X):
                        nv = self.maps.apply_cre(x, nv)
                        nd = self.maps.apply_cre(x, nd)
                    if out_v is None:
                        out_v = u * nv
                        out_d = u * nd
                    else:
                        out_v += u * nv
                        out_d += u * nd
        if out_v is None:
            z = np.zeros_like(pair[0])
            return z, z.copy()
        return out_v, out_d

    def suffix(self, k, sa, e):
        """Product of the last k slot factors applied to the vacuum.

        ``sa`` is a tuple of (offset, cre_modes, ann_modes) for the external
        legs inside those k slots, offsets counted from the first suffix
        slot; ``e`` is the total annihilation-external energy of the earlier
        slots.
        """
        key = (k, sa, round(float(e), 12))
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        if k == 0:
            out = self.vac_pair()
            self._memo[key] = out
            return out
        this_cre, this_ann = (), ()
        rest = []
        for off, cre, ann in sa:
            if off == 0:
                this_cre, this_ann = cre, ann
            else:
                rest.append((off - 1, cre, ann))
        rest = tuple(rest)
        e_inner = e + sum(self.omega[x] for x in this_ann)
        inner = self.suffix(k - 1, rest, e_inner)
        cre_after = sum(self.omega[x] for off, cre, _ in rest for x in cre)
        l_abs = self.L - k + 1
        profile = self.end if l_abs == self.L else self.mid
        v = self.apply_profile_pair(profile, inner, e_inner + cre_after)
        v = self.apply_slot_pair(v, len(this_cre), len(this_ann),
                                 this_cre, this_ann, e + cre_after)
        self._memo[key] = v
        return v

    def chain_value(self, assignment):
        """Chain value/derivative for one full external assignment.

        ``assignment``: tuple over slots of (cre_modes, ann_modes).  Returns
        (val, dval), arrays over the r points.
        """
        sa = tuple((l, cre, ann) for l, (cre, ann) in enumerate(assignment)
                   if cre or ann)
        v, dv = self.suffix(self.L, sa, 0.0)
        rt0 = sum(self.omega[x] for cre, _ in assignment for x in cre)
        pts = self.r_pts + rt0
        f0 = np.asarray(self.end.val(pts), dtype=complex)
        f0d = np.asarray(self.end.der(pts), dtype=complex)
        vac_v, vac_d = v[:, 0, :], dv[:, 0, :]
        if f0.ndim == 3:
            top_v = np.einsum("cij,cj->ci", f0, vac_v)
            top_d = (np.einsum("cij,cj->ci", f0d, vac_v)
                     + np.einsum("cij,cj->ci", f0, vac_d))
        else:
            top_v = f0[:, None] * vac_v
            top_d = f0d[:, None] * vac_v + f0[:, None] * vac_d
        lv = np.conj(self.red_l)
        return lv @ top_v.T, lv @ top_d.T


def normal_order(w, basis, L, M, N, end_profile, mid_profile,
                 reduce_left=None, reduce_right=None, r_chunk=None,
                 allow_truncation=False, eval_cache=None, maps=None):
    """The (M, N) external kernel of the L-slot chain F_0 W F_1 ... W F_L.

    F_0 = F_L = end_profile, interior factors mid_profile.  Output is
    symmetrized, scalar-valued (atomic chains must supply reduction
    vectors), with the r-derivative propagated by dual arithmetic through
    every factor.

    With n_max >= L the vacuum chains are computed without truncation error;
    ``allow_truncation`` accepts a smaller basis and computes the chains of
    the correspondingly truncated operator product instead (the right thing
    when the model itself is declared on that truncation).
    """
    if basis.n_max < L and not allow_truncation:
        raise TruncationError(f"n_max={basis.n_max} < L={L}")
    grid = w.grid
    nm = grid.n_modes
    n_r = w.r_grid.size
    shape = (n_r,) + (nm,) * (M + N)
    vals = np.zeros(shape, dtype=complex)
    dvals = np.zeros(shape, dtype=complex)
    if r_chunk is None:
        r_chunk = n_r if basis.dim * (w.atom_dim or 1) <= 256 else 16
    for start in range(0, n_r, r_chunk):
        pts = w.r_grid[start:start + r_chunk]
        eng = _Engine(w, basis, end_profile, mid_profile, L,
                      reduce_left, reduce_right, r_pts=pts,
                      eval_cache=eval_cache, maps=maps)
        for comp_m in compositions(M, L):
            for comp_n in compositions(N, L):
                for ext in itertools.product(range(nm), repeat=M + N):
                    cre_ext, ann_ext = ext[:M], ext[M:]
                    assignment = []
                    im = 0
                    i_n = 0
                    for l in range(L):
                        assignment.append(
                            (cre_ext[im:im + comp_m[l]],
                             ann_ext[i_n:i_n + comp_n[l]]))
                        im += comp_m[l]
                        i_n += comp_n[l]
                    v, dv = eng.chain_value(tuple(assignment))
                    idx = (slice(start, start + len(pts)),) + ext
                    vals[idx] += v
                    dvals[idx] += dv
    out = kernels.Kernel(M, N, grid, w.r_grid, vals, dvals, 0)
    return kernels.symmetrize(out)


def _trim_cache(cache, limit_bytes=4e8):
    """Drop the oldest cached evaluations once the cache exceeds the budget.

    Insertion order is a good eviction order here: shifts recur across
    targets of the same depth, which are computed back to back.
    """
    def nbytes(v):
        return sum(x.nbytes for x in v) if isinstance(v, tuple) else v.nbytes
    total = sum(nbytes(v) for v in cache.values())
    for key in list(cache):
        if total <= limit_bytes:
            break
        total -= nbytes(cache.pop(key))


def neumann_wick(w, basis, end_profile, mid_profile, w00_base,
                 M_feed=2, L_max=4, tol=1e-9, fixed_depth=None,
                 reduce_left=None, reduce_right=None, r_chunk=None,
                 allow_truncation=False):
    """Alternating Neumann/Wick series of the smooth Feshbach map kernels.

    Sums (-1)^(L+1) times the L-slot chain kernels for all external targets
    with M+N <= M_feed; the (0,0) output additionally carries ``w00_base``
    (the reduced free part, e.g. r - z).  Stops when the empirical geometric
    tail drops below ``tol`` or at ``fixed_depth``/``L_max``; the estimated
    remainder and the discarded high-leg mass go into tail_bound.

    Returns (KernelSeq, info dict with per-L norms and depth).
    """
    targets = [(m, n) for m in range(M_feed + 1) for n in range(M_feed + 1)
               if m + n <= M_feed]
    xi = w.xi
    out = kernels.KernelSeq(w.grid, w.r_grid, xi, max(M_feed, w.M_max), {},
                            0.0, 0)
    acc = {t: None for t in targets}
    eval_cache = {}
    maps = LadderMaps(w.grid, basis)
    norms = []
    L = 0
    depth_limit = fixed_depth if fixed_depth is not None else L_max
    while L < depth_limit:
        L += 1
        sign = (-1.0) ** (L + 1)
        term_norm = 0.0
        for (M, N) in targets:
            if M + N == 0 and L == 1:
                continue            # single-slot vacuum expectation vanishes
            if M + N > 2 * L:
                continue
            k = normal_order(w, basis, L, M, N, end_profile, mid_profile,
                             reduce_left, reduce_right, r_chunk,
                             allow_truncation, eval_cache=eval_cache,
                             maps=maps)
            _trim_cache(eval_cache)
            term_norm += xi ** (-(M + N)) * kernels.sharp_norm(k)
            if acc[(M, N)] is None:
                acc[(M, N)] = k
                acc[(M, N)].values *= sign
                acc[(M, N)].d_r_values *= sign
            else:
                acc[(M, N)].values += sign * k.values
                acc[(M, N)].d_r_values += sign * k.d_r_values
        norms.append(term_norm)
        if fixed_depth is None:
            if len(norms) >= 2 and norms[-2] > 0:
                ratio = norms[-1] / norms[-2]
                if ratio >= 1.0 and norms[-1] > tol:
                    raise SeriesDiverged(
                        f"series ratio {ratio:.3f} >= 1 at L={L}", ratio=ratio)
                if norms[-1] * ratio / max(1e-300, 1.0 - ratio) < tol:
                    break
            elif norms[-1] < tol:
                break
    # tail estimate: geometric continuation of the computed norms plus the
    # xi-weighted mass of the discarded >M_feed-leg outputs
    tail = 0.0
    if len(norms) >= 2 and norms[-2] > 0:
        ratio = min(norms[-1] / norms[-2], 0.9)
        tail += norms[-1] * ratio / (1.0 - ratio)
    tail += (xi ** (M_feed + 1) / (1.0 - xi)) * sum(norms)
    for (M, N), k in acc.items():
        if k is None:
            k = kernels.Kernel.zeros(M, N, w.grid, w.r_grid)
        if M + N == 0:
            k.values = k.values + w00_base.values
            k.d_r_values = k.d_r_values + w00_base.d_r_values
        out.set(k)
    out.tail_bound = float(tail)
    info = {"depth": L, "term_norms": norms}
    return out, info
