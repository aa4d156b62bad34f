"""Spectral renormalization of kernel families at scale rho.

One step acts on a ZFamily: pull each sampling node back through the
analytic energy map E(z) = -rho^{-1} w_{0,0}(z, 0), run the alternating
Wick series of the smooth Feshbach map with the partition chi_rho(H_f)
and the resolvent profile chibar_rho^2 / w_{0,0}, then rescale field and
kernels back to the unit interval.  The output family lives on the same
circle nodes as the input, so the representation is stationary under
iteration.

Iterating the step on a family inside the contraction ball produces the
ground energy as the limit of nested preimages of zero under the energy
maps, and the ground vector as a telescoped product of Q-operators and
adjoint dilations applied to the vacuum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import feshbach, fock, kernels, wick
from .errors import (BallViolation, ConfigError, GridMismatch,
                     MaxItersExceeded, NewtonDiverged, OutOfDomain)

__all__ = [
    "RGConfig",
    "RGTrace",
    "BallReport",
    "EnergyFamily",
    "e_rho",
    "invert_e_rho",
    "scale_kernels",
    "renormalize",
    "ball_membership",
    "iterate_to_ground",
    "contraction_audit",
]

# absolute floor below which delta sequences count as converged-to-zero in
# the halving audit; the per-step Wick series is only summed to its
# tolerance, so the deltas plateau near that level instead of contracting
AUDIT_FLOOR = 1e-9


@dataclass
class RGConfig:
    """Parameters of the renormalization map and its iteration."""

    rho: float = 0.25
    xi: float = 0.25
    eps0: float = 0.25 / 8.0
    L_max: int = 4
    M_feed: int = 2
    tol_e: float = 1e-9
    tol_series: float = 1e-9
    max_iters: int = 40
    # keep refining for at least this many scales even after the energy
    # iterates have met tol_e, so the contraction audit has data to work on
    min_iters: int = 0
    fixed_depth: int = None
    # per-iterate ball thresholds (delta1, delta2, delta3); None picks the
    # defaults (eps0, eps0/2, eps0/2) matching the contraction target
    ball_limits: tuple = None

    def __post_init__(self):
        if not (0.0 < self.rho <= 0.25):
            raise ConfigError(f"rho must lie in (0, 1/4], got {self.rho}")
        if not (0.0 < self.xi <= 0.25):
            raise ConfigError(f"xi must lie in (0, 1/4], got {self.xi}")
        if not (0.0 < self.eps0 <= self.rho / 8.0 + 1e-15):
            raise ConfigError(
                f"eps0 must lie in (0, rho/8], got {self.eps0}")
        if self.tol_e <= 0 or self.max_iters < 1:
            raise ConfigError("tol_e must be positive, max_iters >= 1")
        if self.min_iters < 0 or self.min_iters > self.max_iters:
            raise ConfigError(
                f"min_iters must lie in [0, max_iters], got {self.min_iters}")
        if self.ball_limits is None:
            self.ball_limits = (self.eps0, self.eps0 / 2.0, self.eps0 / 2.0)


@dataclass
class RGTrace:
    """Per-iteration diagnostics of the RG flow.

    ``delta*[n]`` are the ball radii of the n-th family (index 0 is the
    input), ``z_iter[n]`` the nested-preimage energy iterate, and
    ``inversions[n]`` the Newton diagnostics of the inversions feeding it.
    """

    eps0: float
    delta1: list = field(default_factory=list)
    delta2: list = field(default_factory=list)
    delta3: list = field(default_factory=list)
    z_iter: list = field(default_factory=list)
    inversions: list = field(default_factory=list)
    depths: list = field(default_factory=list)
    converged: bool = False
    residual: float = float("nan")

    @property
    def iterations(self):
        return len(self.delta3)

    def record_ball(self, d1, d2, d3):
        self.delta1.append(float(d1))
        self.delta2.append(float(d2))
        self.delta3.append(float(d3))

    def records(self):
        """One flat dict per iteration, for structured output."""
        rows = []
        for n in range(len(self.delta1)):
            z = self.z_iter[n] if n < len(self.z_iter) else None
            inv = self.inversions[n] if n < len(self.inversions) else {}
            rows.append({
                "iter": n,
                "delta1": self.delta1[n],
                "delta2": self.delta2[n],
                "delta3": self.delta3[n],
                "z_re": None if z is None else float(np.real(z)),
                "z_im": None if z is None else float(np.imag(z)),
                "newton_iters": inv.get("iters"),
                "newton_residual": inv.get("residual"),
                "depth": self.depths[n] if n < len(self.depths) else None,
            })
        return rows


@dataclass
class BallReport:
    """The three ball radii of a family against their thresholds."""

    delta1: float
    delta2: float
    delta3: float
    limit1: float
    limit2: float
    limit3: float
    verdict: bool

    @property
    def deltas(self):
        return (self.delta1, self.delta2, self.delta3)

    @property
    def margins(self):
        return (self.limit1 - self.delta1, self.limit2 - self.delta2,
                self.limit3 - self.delta3)


def ball_membership(f: kernels.ZFamily, d1, d2, d3) -> BallReport:
    """Ball radii of a family: sup over the center and all circle samples.

    delta1 = sup |d_r w00 - 1|, delta2 = sup_z |w00(z, 0) + z|,
    delta3 = sup_z of the xi-weighted interaction norm.
    """
    s1 = s2 = s3 = 0.0
    for z, sample in f.all_samples():
        k00 = sample.require(0, 0)
        s1 = max(s1, float(np.abs(k00.d_r_values - 1.0).max()))
        s2 = max(s2, float(abs(k00.values[0] + z)))
        s3 = max(s3, kernels.interaction_norm(sample))
    verdict = s1 <= d1 and s2 <= d2 and s3 <= d3
    return BallReport(s1, s2, s3, float(d1), float(d2), float(d3), verdict)


@dataclass
class EnergyFamily:
    """Taylor data of the scalar analytic map E(z) = -rho^{-1} w00(z, 0)."""

    coeffs: np.ndarray          # Taylor coefficients, length Q
    r_z: float
    rho: float
    center_value: complex       # direct sample at z = 0 (diagnostic)

    def at(self, z):
        zp = np.asarray(z, dtype=complex) ** np.arange(self.coeffs.size)
        return complex(np.sum(self.coeffs * zp))

    def deriv(self, z):
        t = np.arange(1, self.coeffs.size)
        zp = np.asarray(z, dtype=complex) ** (t - 1)
        return complex(np.sum(t * self.coeffs[1:] * zp))

    def circle_values(self):
        """The sampled values on the circle nodes (for analyticity probes)."""
        q = np.arange(self.coeffs.size)
        nodes = self.r_z * np.exp(2j * np.pi * q / q.size)
        return np.array([self.at(z) for z in nodes])


def e_rho(f: kernels.ZFamily, rho) -> EnergyFamily:
    """The analytic energy map of a family, from its circle samples."""
    vals = np.array([-s.require(0, 0).values[0] / rho for s in f.samples],
                    dtype=complex)
    Q = vals.size
    coeffs = np.fft.fft(vals) / Q
    coeffs = coeffs / f.r_z ** np.arange(Q)
    center = complex(-f.center.require(0, 0).values[0] / rho)
    return EnergyFamily(coeffs, f.r_z, float(rho), center)


def invert_e_rho(E: EnergyFamily, u, tol=1e-12, max_newton=60,
                 diagnostics=None):
    """Solve E(z) = u by Newton iteration inside the sampled disc.

    The solution must satisfy |z| < 1/2 and the spectral-domain membership
    |w00(z, 0)| = rho |E(z)| < rho / 2; leaving the sampled disc or failing
    the membership raises OutOfDomain, a stalled or non-converging Newton
    iteration raises NewtonDiverged.
    """
    u = complex(u)
    z = 0.0 + 0.0j
    resid = float("inf")
    it = 0
    for it in range(1, max_newton + 1):
        fz = E.at(z)
        resid = abs(fz - u)
        if resid <= tol * max(1.0, abs(u)):
            break
        dz = E.deriv(z)
        if abs(dz) < 1e-14:
            raise NewtonDiverged(
                f"energy map derivative {abs(dz):.3e} too small at z={z:.4g}")
        z = z - (fz - u) / dz
        if abs(z) > E.r_z * (1.0 + 1e-6):
            raise OutOfDomain(
                f"Newton iterate |z|={abs(z):.4g} left the sampled disc "
                f"of radius {E.r_z}")
    else:
        raise NewtonDiverged(
            f"no convergence after {max_newton} steps, residual {resid:.3e}")
    if diagnostics is not None:
        diagnostics["iters"] = diagnostics.get("iters", 0) + it
        diagnostics["residual"] = resid
    if abs(z) >= 0.5:
        raise OutOfDomain(f"preimage |z|={abs(z):.4g} outside the half disc")
    if abs(E.at(z)) >= 0.5:
        raise OutOfDomain(
            f"|w00(z,0)| = {E.rho * abs(E.at(z)):.4g} outside the spectral "
            f"domain radius {E.rho / 2:.4g}")
    return z


def scale_kernels(w: kernels.KernelSeq, rho) -> kernels.KernelSeq:
    """The dilation pushforward w'_{m,n}(r, K) = rho^{m+n-1} w(rho r, rho K).

    Momentum scaling is exact on the geometric grid: mode K scales to the
    mode one shell deeper, so the kernel arrays index-shift one shell
    shallower and the entries fed from below the deepest shell vanish.
    The r-axis rescale evaluates the Hermite spline at rho*r, with the
    derivative data picking up one extra factor of rho.
    """
    grid = w.grid
    if abs(rho - grid.rho_grid) > 1e-12:
        raise GridMismatch(
            f"scaling ratio {rho} must equal the grid ratio {grid.rho_grid}")
    nm = grid.n_modes
    stride = nm // grid.n_shells
    r_src = rho * w.r_grid
    out = kernels.KernelSeq(grid, w.r_grid, w.xi, w.M_max, {},
                            w.tail_bound * rho ** w.M_max, w.atom_dim)
    for (m, n), k in w.kernels.items():
        legs = m + n
        pref = rho ** (legs - 1)
        src = pref * k.spline()(r_src)
        dsrc = pref * rho * k.dspline()(r_src)
        if legs:
            vals = np.zeros_like(src)
            dvals = np.zeros_like(dsrc)
            keep = (slice(None),) + (slice(0, nm - stride),) * legs
            feed = (slice(None),) + (slice(stride, nm),) * legs
            vals[keep] = src[feed]
            dvals[keep] = dsrc[feed]
        else:
            vals, dvals = src, dsrc
        out.set(kernels.Kernel(m, n, grid, w.r_grid, vals, dvals,
                               k.atom_dim, k.extend))
    return out


def _extended_w00(k00):
    """w00 evaluation with affine continuation past the sampled interval.

    Inside the contraction ball w00 is within eps of r - z, so continuing
    with the endpoint value and slope keeps the resolvent profile accurate
    at the pull-through arguments that exceed one; the free kernel r - z
    is continued exactly.
    """
    sp = k00.spline()
    dsp = k00.dspline()
    v1 = complex(k00.values[-1])
    d1 = complex(k00.d_r_values[-1])

    def val(x):
        x = np.asarray(x, dtype=float)
        base = sp(np.clip(x, 0.0, 1.0))
        return np.where(x > 1.0, v1 + d1 * (x - 1.0), base)

    def der(x):
        x = np.asarray(x, dtype=float)
        base = dsp(np.clip(x, 0.0, 1.0))
        return np.where(x > 1.0, d1, base)

    return val, der


def _resolvent_profile(cp: feshbach.ChiPair, k00) -> wick.Profile:
    """chibar_rho^2 / w00 with the analytically propagated derivative.

    The zero of w00 sits within the ball radius of the spectral parameter,
    strictly below the support of chibar_rho, so the guarded denominators
    only ever mask exact 0/0 points that chibar kills anyway.
    """
    w00_val, w00_der = _extended_w00(k00)

    def val(x):
        x = np.asarray(x, dtype=float)
        den = w00_val(x)
        safe = np.where(np.abs(den) < 1e-13, 1.0, den)
        return cp.chibar(x) ** 2 / safe

    def der(x):
        x = np.asarray(x, dtype=float)
        den = w00_val(x)
        safe = np.where(np.abs(den) < 1e-13, 1.0, den)
        cb = cp.chibar(x)
        return (2.0 * cb * cp.dchibar(x) * safe - cb ** 2 * w00_der(x)) \
            / safe ** 2

    return wick.Profile(val, der)


def renormalize(f: kernels.ZFamily, cfg: RGConfig, basis=None,
                info=None) -> kernels.ZFamily:
    """One renormalization step on a kernel family.

    For every output node z (the same nodes as the input family): pull the
    spectral parameter back through the energy map, run the alternating
    Wick series of the Feshbach map at scale rho with chi_rho ends and the
    resolvent profile chibar_rho^2 / w00, and apply the dilation
    pushforward.  Requires membership in B(rho/8, rho/8, rho/8).

    ``info``, when given a dict, receives the per-node pullbacks, series
    depths and Newton diagnostics.
    """
    grid = f.center.grid
    if abs(cfg.rho - grid.rho_grid) > 1e-12:
        raise GridMismatch(
            f"cfg.rho={cfg.rho} must equal the grid ratio {grid.rho_grid}")
    lim = cfg.rho / 8.0
    report = ball_membership(f, lim, lim, lim)
    if not report.verdict:
        raise BallViolation(
            f"family outside B(rho/8): deltas=({report.delta1:.3e},"
            f"{report.delta2:.3e},{report.delta3:.3e}) limit {lim:.3e}",
            deltas=report.deltas)
    if basis is None:
        basis = fock.build_basis(grid, cfg.L_max)
    E = e_rho(f, cfg.rho)
    cp = feshbach.smooth_chi(cfg.rho)
    end = wick.Profile(lambda r: cp.chi(r).astype(complex),
                       lambda r: cp.dchi(r).astype(complex))
    newton = {}
    pullbacks = []
    depths = []
    samples = []
    for z in [0.0 + 0.0j] + list(f.nodes):
        zp = invert_e_rho(E, z, diagnostics=newton)
        pullbacks.append(zp)
        w = f.at(zp)
        k00 = w.require(0, 0)
        mid = _resolvent_profile(cp, k00)
        # the model is declared on this truncation, so chains deeper than
        # the photon cap are truncated consistently on both sides of every
        # comparison rather than rejected
        out, nfo = wick.neumann_wick(
            w, basis, end, mid, w00_base=k00, M_feed=cfg.M_feed,
            L_max=cfg.L_max, tol=cfg.tol_series, fixed_depth=cfg.fixed_depth,
            allow_truncation=True)
        depths.append(nfo["depth"])
        samples.append(scale_kernels(out, cfg.rho))
    if info is not None:
        info["pullbacks"] = pullbacks
        info["depths"] = depths
        info["newton"] = newton
    return kernels.ZFamily(samples[0], samples[1:], f.r_z)


def _restrict(mat, mask):
    return mat[np.ix_(mask, mask)]


def iterate_to_ground(f0: kernels.ZFamily, cfg: RGConfig, basis=None,
                      on_iteration=None, resume=None):
    """Iterate the RG map to the ground energy and vector.

    Returns (e0, psi0, trace).  The energy iterates are nested preimages
    of zero, z_n = E_0^{-1} o ... o E_{n-1}^{-1}(0), stopped at tol_e; the
    vector is the normalized telescope Q_0 G* Q_1 G* ... Q_{N-1} G* Omega
    with Q_j the Feshbach Q-operator of the j-th family at its pulled-back
    spectral point and G* the adjoint grid dilation.

    ``on_iteration(level, family, e_fams, trace)`` is called at the top of
    every iteration, before the level is processed; a checkpoint taken
    there restores the run exactly.  ``resume`` is a mapping with keys
    ``level``, ``family``, ``e_fams`` and ``z_iter`` as captured by the
    callback; a resumed run reproduces the remaining energy iterates and
    e0, but the early families needed for the eigenvector telescope are
    gone, so it returns psi0 = None.
    """
    grid = f0.center.grid if resume is None else \
        resume["family"].center.grid
    if basis is None:
        basis = fock.build_basis(grid, cfg.L_max)
    trace = RGTrace(eps0=cfg.eps0)
    l1, l2, l3 = cfg.ball_limits
    if resume is None:
        half = cfg.eps0 / 2.0
        report = ball_membership(f0, half, half, half)
        trace.record_ball(*report.deltas)
        if not report.verdict:
            raise BallViolation(
                f"input family outside B(eps0/2): deltas="
                f"({report.delta1:.3e},{report.delta2:.3e},"
                f"{report.delta3:.3e}) limit {half:.3e}",
                deltas=report.deltas, trace=trace)
        fams = [f0]
        e_fams = []
        z_prev = None
        n_start = 0
    else:
        fams = [resume["family"]]
        e_fams = list(resume["e_fams"])
        trace.z_iter = list(resume["z_iter"])
        z_prev = trace.z_iter[-1] if trace.z_iter else None
        n_start = int(resume["level"])
    e0 = None
    n_levels = None
    for n in range(n_start, cfg.max_iters):
        if on_iteration is not None:
            on_iteration(n, fams[-1], e_fams, trace)
        diag = {}
        e_fams.append(e_rho(fams[-1], cfg.rho))
        u = 0.0 + 0.0j
        for Em in reversed(e_fams):
            u = invert_e_rho(Em, u, diagnostics=diag)
        trace.z_iter.append(u)
        trace.inversions.append(diag)
        dz_last = abs(u - z_prev) if z_prev is not None else float("nan")
        if z_prev is not None and dz_last < cfg.tol_e and n >= cfg.min_iters:
            e0 = u
            n_levels = n
            trace.converged = True
            break
        z_prev = u
        info = {}
        try:
            f_next = renormalize(fams[-1], cfg, basis, info=info)
        except BallViolation as exc:
            raise BallViolation(str(exc), deltas=exc.deltas,
                                trace=trace) from exc
        trace.depths.append(max(info["depths"]))
        rep = ball_membership(f_next, l1, l2, l3)
        trace.record_ball(*rep.deltas)
        if not rep.verdict:
            raise BallViolation(
                f"iterate {n + 1} left the contraction ball: deltas="
                f"({rep.delta1:.3e},{rep.delta2:.3e},{rep.delta3:.3e}) "
                f"limits ({l1:.3e},{l2:.3e},{l3:.3e})",
                deltas=rep.deltas, trace=trace)
        fams.append(f_next)
    else:
        raise MaxItersExceeded(
            f"no energy convergence in {cfg.max_iters} iterations "
            f"(last |dz| = {dz_last:.3e})", trace=trace)

    if resume is not None:
        return e0, None, trace

    # spectral points per level: u_0 = e0, u_{j+1} = E_j(u_j)
    cp = feshbach.smooth_chi(cfg.rho)
    mask = basis.energies <= 1.0 + 1e-12
    energies = basis.energies[mask]
    chi_m = np.diag(cp.chi(energies).astype(complex))
    chibar_m = np.diag(cp.chibar(energies).astype(complex))
    gdag = fock.dilation(basis, grid, cfg.rho).mat.conj().T

    psi = np.zeros(basis.dim, dtype=complex)
    psi[0] = 1.0
    u_levels = [e0]
    for j in range(n_levels - 1):
        u_levels.append(e_fams[j].at(u_levels[-1]))
    for j in reversed(range(n_levels)):
        w_j = fams[j].at(u_levels[j])
        h_m = _restrict(kernels.to_operator(w_j, basis).mat, mask)
        t_m = np.diag(w_j.require(0, 0).eval(energies).astype(complex))
        q_m = feshbach.q_operator(h_m, t_m, chi_m, chibar_m, check=False)
        vec = gdag @ psi
        out = np.zeros_like(psi)
        out[mask] = q_m @ vec[mask]
        psi = out
    norm = float(np.linalg.norm(psi))
    if norm == 0.0:
        raise MaxItersExceeded("telescoped vector vanished", trace=trace)
    psi = psi / norm

    h0 = _restrict(kernels.to_operator(fams[0].at(e0), basis).mat, mask)
    trace.residual = float(np.linalg.norm(h0 @ psi[mask]))
    return e0, psi, trace


def contraction_audit(trace: RGTrace) -> bool:
    """Check the halving pattern of the recorded ball radii.

    True iff delta2 and delta3 decrease by a factor of at most 0.5 (with
    10 percent slack) per iteration and delta1 stays below the filling
    pattern eps0 * (1 - 2^{-(n+1)}).  Values at floating noise level pass
    unconditionally.
    """
    m = trace.iterations
    if m < 3:
        raise ConfigError(
            f"contraction audit needs at least 3 iterations, got {m}")
    for seq in (trace.delta2, trace.delta3):
        for a, b in zip(seq, seq[1:]):
            if b > 0.55 * a + AUDIT_FLOOR:
                return False
    for n, d1 in enumerate(trace.delta1):
        if d1 > trace.eps0 * (1.0 - 0.5 ** (n + 1)) + AUDIT_FLOOR:
            return False
    return True
