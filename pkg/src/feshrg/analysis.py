"""Post-processing diagnostics for pipeline results.

Numerical analyticity certificates on parameter circles, constancy of the
ground energy under the deformation parameters, exponential-decay
estimation of radial ground states, and the analytic-vector partial sums
that certify the decay from the moment side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, WindowTooSmall

__all__ = [
    "analyticity_residual",
    "theta_constancy",
    "DecayReport",
    "decay_profile",
    "OConnorReport",
    "oconnor_partial_sums",
    "consistency_check",
    "eigen_residual",
    "spatial_density",
]


def analyticity_residual(samples) -> float:
    """Negative-frequency DFT mass of values on an equispaced circle.

    ``samples[q]`` holds f(c + r exp(2 pi i q / Q)) for q = 0..Q-1.  An
    analytic f has a one-sided Taylor series, so the discrete Fourier
    coefficients with negative frequency (indices above Q/2) vanish up to
    truncation error.  Returns the ratio sum|negative| / sum|all| in
    [0, 1]; 0 for an exactly analytic sample set, about 1 for a purely
    anti-analytic one such as conj(z).
    """
    vals = np.asarray(samples, dtype=complex)
    q = vals.size
    if q < 8:
        raise ConfigError(f"need at least 8 circle nodes, got {q}")
    coeffs = np.fft.fft(vals) / q
    total = np.sum(np.abs(coeffs))
    if total == 0.0:
        return 0.0
    # frequencies q//2+1 .. q-1 alias to strictly negative ones; the
    # Nyquist index q//2 is ambiguous and counts as non-negative
    neg = np.sum(np.abs(coeffs[q // 2 + 1:]))
    return float(neg / total)


def theta_constancy(values, reference=None) -> float:
    """Max deviation of sampled energies from the undeformed value.

    ``values`` are E_g evaluated over a grid of deformation parameters;
    ``reference`` defaults to the first entry (the theta = 0 run).
    """
    vals = np.asarray(values, dtype=complex)
    if vals.size == 0:
        raise ConfigError("no energy samples given")
    ref = vals[0] if reference is None else complex(reference)
    return float(np.max(np.abs(vals - ref)))


def spatial_density(psi, atom):
    """Marginal spatial density: Fock-traced |psi|^2 on the radial grid.

    ``psi`` lives on the atomic tensor Fock truncation in atomic-major
    layout, so reshaping to (dim_at, n_fock) and summing the squares over
    the Fock index gives the density at each radial node.
    """
    if atom.mode != "hydrogen_radial":
        raise ConfigError("spatial densities exist in radial mode")
    v = np.asarray(psi, dtype=complex)
    d = atom.dim
    if v.size % d != 0:
        raise ConfigError(
            f"state length {v.size} is not a multiple of dim {d}")
    return np.sum(np.abs(v.reshape(d, -1)) ** 2, axis=1)


@dataclass
class DecayReport:
    """Exponential-decay fit of a radial ground state."""

    a_fit: float
    a_values: np.ndarray        # ladder of trial decay rates
    weighted_norms: np.ndarray  # ||exp(a <x>) psi|| per ladder entry
    finite: np.ndarray          # bool per entry: weighted density decays
    window: tuple = (0.0, 0.0)  # radii of the fit window
    fit_residual: float = 0.0   # rms misfit of the linear model


def decay_profile(psi, atom, window=(0.5, 0.9), ladder=None,
                  density_floor=1e-28) -> DecayReport:
    """Fit the decay rate of a radial state and probe weighted norms.

    The rate comes from a least-squares line through (1/2) log rho(x)
    over radii between ``window[0]`` and ``window[1]`` of the box (the
    absorbing edge stays excluded); a_fit is minus the slope.  For a
    ladder of rates a_j the report carries ||exp(a_j <x>) psi|| together
    with a finiteness flag: the weighted density must not grow across the
    outer quarter of the box, otherwise the continuum norm the sum
    approximates diverges.
    """
    rho = spatial_density(psi, atom)
    nrm = np.sum(rho)
    if nrm <= 0.0:
        raise ConfigError("state has zero norm")
    rho = rho / nrm
    r = atom.r_pts
    lo, hi = window[0] * atom.box, window[1] * atom.box
    sel = (r >= lo) & (r <= hi) & (rho > density_floor)
    if np.count_nonzero(sel) < 8:
        raise WindowTooSmall(
            f"only {np.count_nonzero(sel)} usable nodes in "
            f"[{lo:.3g}, {hi:.3g}]")
    y = 0.5 * np.log(rho[sel])
    coef, res = np.polynomial.polynomial.polyfit(
        r[sel], y, 1, full=True)
    a_fit = float(-coef[1])
    misfit = float(np.sqrt(res[0][0] / y.size)) if res[0].size else 0.0

    if ladder is None:
        base = abs(a_fit) if a_fit != 0.0 else 1.0
        ladder = base * np.linspace(0.25, 1.5, 6)
    ladder = np.asarray(ladder, dtype=float)
    x = atom.x_weight()
    outer = r >= 0.75 * atom.box
    norms = np.empty(ladder.size)
    finite = np.empty(ladder.size, dtype=bool)
    for i, a in enumerate(ladder):
        wdens = np.exp(2.0 * a * x) * rho
        norms[i] = float(np.sqrt(np.sum(wdens)))
        tail = wdens[outer & (rho > density_floor)]
        # decaying weighted density: the outer-quarter trend is downward
        finite[i] = tail.size < 2 or tail[-1] <= tail[0]
    return DecayReport(a_fit=a_fit, a_values=ladder, weighted_norms=norms,
                       finite=finite, window=(lo, hi), fit_residual=misfit)


@dataclass
class OConnorReport:
    """Partial sums of the analytic-vector series sum ||<x>^n psi|| t^n/n!."""

    t: float
    partial_sums: np.ndarray
    term_ratios: np.ndarray
    converged: bool


def oconnor_partial_sums(psi, atom, t, n_terms=14) -> OConnorReport:
    """Moment series certifying that psi is an analytic vector for <x>.

    The terms are ||<x>^n psi|| t^n / n!; the convergence flag requires
    the trailing term ratios to sit below one.  On a finite box every t
    converges eventually (moments are bounded by the box radius), so the
    flag reflects the behaviour over the first ``n_terms`` terms, which
    is the regime the decay ladder is compared against.
    """
    if n_terms < 4:
        raise ConfigError("need at least 4 series terms")
    rho = spatial_density(psi, atom)
    nrm = np.sum(rho)
    if nrm <= 0.0:
        raise ConfigError("state has zero norm")
    rho = rho / nrm
    x2 = atom.x_weight() ** 2
    terms = np.empty(n_terms)
    mom = rho.copy()
    fact = 1.0
    for n in range(n_terms):
        terms[n] = np.sqrt(np.sum(mom)) * t**n / fact
        mom = mom * x2
        fact *= n + 1.0
    ratios = terms[1:] / np.where(terms[:-1] == 0.0, 1.0, terms[:-1])
    tail = ratios[-3:]
    return OConnorReport(t=float(t), partial_sums=np.cumsum(terms),
                         term_ratios=ratios,
                         converged=bool(np.all(tail < 1.0)))


def consistency_check(psi, atom, t_grid=None, n_terms=14, margin=0.2):
    """One-sided decay/series consistency on a single state.

    Finds the largest t on ``t_grid`` whose moment series is flagged
    convergent (the empirical radius t*), then verifies that the
    exp(a <x>) weighted norm is flagged finite at a = (1 - margin) t*/2.
    Returns (ok, t_star, a_probe).
    """
    if t_grid is None:
        t_grid = np.linspace(0.2, 3.0, 15)
    t_star = 0.0
    for t in np.sort(np.asarray(t_grid, dtype=float)):
        if oconnor_partial_sums(psi, atom, t, n_terms=n_terms).converged:
            t_star = float(t)
    if t_star == 0.0:
        return False, 0.0, 0.0
    a_probe = (1.0 - margin) * t_star / 2.0
    rep = decay_profile(psi, atom, ladder=[a_probe])
    return bool(rep.finite[0]), t_star, a_probe


def eigen_residual(h, e, psi) -> float:
    """Relative eigenpair residual ||(H - E) psi|| / ||psi||."""
    mat = h.mat if hasattr(h, "mat") else np.asarray(h)
    v = np.asarray(psi, dtype=complex)
    nrm = np.linalg.norm(v)
    if nrm == 0.0:
        raise ConfigError("zero vector has no residual")
    return float(np.linalg.norm(mat @ v - e * v) / nrm)
