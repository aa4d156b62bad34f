"""Diagnostics: analyticity residuals, constancy, decay, moment series."""

import numpy as np
import pytest

from feshrg import analysis, model
from feshrg.errors import ConfigError, WindowTooSmall


# ------------------------------------------------------- analyticity DFT

def circle_samples(fn, Q=8, radius=1.0, center=0.0):
    z = center + radius * np.exp(2j * np.pi * np.arange(Q) / Q)
    return fn(z)


def test_analytic_square_has_no_negative_mass():
    res = analysis.analyticity_residual(circle_samples(lambda z: z**2))
    assert res <= 1e-14


def test_antianalytic_conjugate_is_flagged():
    res = analysis.analyticity_residual(circle_samples(np.conj))
    assert res == pytest.approx(1.0, abs=1e-12)


def test_polynomials_below_nyquist_are_exact():
    rng = np.random.default_rng(7)
    coeffs = rng.normal(size=6) + 1j * rng.normal(size=6)
    fn = np.polynomial.polynomial.Polynomial(coeffs)
    res = analysis.analyticity_residual(circle_samples(fn, Q=16, radius=0.7))
    assert res <= 1e-15


def test_residual_needs_eight_nodes():
    with pytest.raises(ConfigError):
        analysis.analyticity_residual(np.ones(5, dtype=complex))


def test_mixed_signal_sits_between():
    vals = circle_samples(lambda z: z + 0.5 * np.conj(z), Q=16)
    res = analysis.analyticity_residual(vals)
    assert 0.2 <= res <= 0.5


# ----------------------------------------------------------- constancy

def test_constancy_zero_for_constant_samples():
    assert analysis.theta_constancy([1.2 + 0j] * 5) == 0.0


def test_constancy_reports_max_deviation():
    vals = [1.0, 1.0 + 1e-9, 1.0 - 3e-9j]
    assert analysis.theta_constancy(vals) == pytest.approx(3e-9)
    assert analysis.theta_constancy(vals, reference=1.0) == pytest.approx(3e-9)


def test_constancy_rejects_empty():
    with pytest.raises(ConfigError):
        analysis.theta_constancy([])


# -------------------------------------------------------------- decay

@pytest.fixture(scope="module")
def hydrogen():
    return model.hydrogen_atom(n_grid=320, box=40.0)


@pytest.fixture(scope="module")
def hydrogen_ground(hydrogen):
    _, vecs = np.linalg.eigh(hydrogen.h0)
    return vecs[:, 0]


def test_hydrogen_ground_decay_rate(hydrogen, hydrogen_ground):
    rep = analysis.decay_profile(hydrogen_ground, hydrogen)
    assert rep.a_fit == pytest.approx(1.0, rel=0.05)
    # weighted norms stay finite below the fitted rate, blow up above it
    below = rep.a_values <= 0.9 * rep.a_fit
    assert np.all(rep.finite[below])
    assert not rep.finite[-1]


def test_uniform_state_has_no_decay(hydrogen):
    flat = np.ones(hydrogen.dim)
    rep = analysis.decay_profile(flat, hydrogen, ladder=[0.5, 1.0])
    assert abs(rep.a_fit) < 0.05
    assert not np.any(rep.finite)


def test_decay_window_too_small(hydrogen, hydrogen_ground):
    with pytest.raises(WindowTooSmall):
        analysis.decay_profile(hydrogen_ground, hydrogen,
                               window=(0.975, 0.99))


def test_density_marginalizes_fock_layout(hydrogen, hydrogen_ground):
    # two Fock slots with weights 0.6 / 0.8 give the same normalized
    # density as the bare atomic vector
    psi = np.kron(hydrogen_ground, np.array([0.6, 0.8]))
    rho = analysis.spatial_density(psi, hydrogen)
    ref = np.abs(hydrogen_ground) ** 2
    assert np.allclose(rho / np.sum(rho), ref / np.sum(ref))


def test_density_refuses_matrix_mode():
    a = model.matrix_atom(2)
    with pytest.raises(ConfigError):
        analysis.spatial_density(np.ones(2), a)


# ------------------------------------------------------- moment series

def test_oconnor_converges_at_half(hydrogen, hydrogen_ground):
    rep = analysis.oconnor_partial_sums(hydrogen_ground, hydrogen, 0.5)
    assert rep.converged
    assert np.all(rep.term_ratios[-3:] < 1.0)
    assert np.all(np.diff(rep.partial_sums) >= 0.0)


def test_oconnor_flags_large_t(hydrogen, hydrogen_ground):
    rep = analysis.oconnor_partial_sums(hydrogen_ground, hydrogen, 10.0)
    assert not rep.converged


def test_decay_series_consistency(hydrogen, hydrogen_ground):
    ok, t_star, a_probe = analysis.consistency_check(
        hydrogen_ground, hydrogen)
    assert ok
    assert t_star > 0.0
    assert 0.0 < a_probe <= t_star / 2.0


# ------------------------------------------------------------ residual

def test_exact_eigenpair_residual():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(12, 12))
    m = m + m.T
    vals, vecs = np.linalg.eigh(m)
    assert analysis.eigen_residual(m, vals[4], vecs[:, 4]) <= 1e-12


def test_perturbed_eigenvalue_is_detected():
    m = np.diag(np.arange(6.0))
    v = np.eye(6)[2]
    assert analysis.eigen_residual(m, 2.0 + 1e-3, v) >= 1e-4
