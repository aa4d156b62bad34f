"""Smooth Feshbach-Schur map on truncated spaces.

Works on plain complex matrices so the same code serves random planted-pair
tests, the initial reduction with chi tensored against an atomic projection,
and the RG step at scale rho.  The partition (chi, chibar) consists of
commuting bounded operators with chi^2 + chibar^2 = 1; "inverse on Ran
chibar" is realized as the inverse of the compression to the numerically
identified range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidPair

__all__ = [
    "ChiPair",
    "FeshbachPairReport",
    "smooth_chi",
    "range_basis",
    "inverse_on_range",
    "check_pair",
    "feshbach_map",
    "q_operator",
    "isospectrality_check",
]

RANGE_TOL = 1e-10


def _smoothstep(t):
    """The standard C-infinity step: 0 for t<=0, 1 for t>=1, monotone."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    lo = t <= 0.0
    hi = t >= 1.0
    mid = ~(lo | hi)
    tm = t[mid]
    f = np.exp(-1.0 / tm)
    g = np.exp(-1.0 / (1.0 - tm))
    out[mid] = f / (f + g)
    out[hi] = 1.0
    return out


def _smoothstep_d(t):
    """Derivative of the C-infinity step (zero outside (0, 1))."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    mid = (t > 0.0) & (t < 1.0)
    tm = t[mid]
    f = np.exp(-1.0 / tm)
    g = np.exp(-1.0 / (1.0 - tm))
    out[mid] = f * g * (1.0 / tm**2 + 1.0 / (1.0 - tm) ** 2) / (f + g) ** 2
    return out


@dataclass(frozen=True)
class ChiPair:
    """Closed-form smooth partition functions at scale rho.

    chi = 1 on [0, 3*rho/4), supported in [0, rho]; chi^2 + chibar^2 = 1
    pointwise by the cos/sin construction.
    """

    rho: float

    def chi(self, r):
        t = _smoothstep(4.0 * np.asarray(r, dtype=float) / self.rho - 3.0)
        return np.cos(0.5 * math.pi * t)

    def chibar(self, r):
        t = _smoothstep(4.0 * np.asarray(r, dtype=float) / self.rho - 3.0)
        return np.sin(0.5 * math.pi * t)

    def dchi(self, r):
        t = 4.0 * np.asarray(r, dtype=float) / self.rho - 3.0
        s = _smoothstep(t)
        return (-0.5 * math.pi * np.sin(0.5 * math.pi * s)
                * _smoothstep_d(t) * 4.0 / self.rho)

    def dchibar(self, r):
        t = 4.0 * np.asarray(r, dtype=float) / self.rho - 3.0
        s = _smoothstep(t)
        return (0.5 * math.pi * np.cos(0.5 * math.pi * s)
                * _smoothstep_d(t) * 4.0 / self.rho)


def smooth_chi(rho) -> ChiPair:
    if rho <= 0:
        raise ValueError("rho must be positive")
    return ChiPair(float(rho))


def range_basis(chibar_mat, tol=RANGE_TOL):
    """Orthonormal basis (columns) of the numerical range of chibar."""
    u, s, _ = np.linalg.svd(np.asarray(chibar_mat, dtype=complex))
    return u[:, s > tol]


def inverse_on_range(A, V):
    """Inverse of the compression of A to span(V), embedded back.

    Returns (A restricted)^{-1} as a full-size matrix vanishing off span(V),
    plus the smallest singular value of the compression.
    """
    M = V.conj().T @ A @ V
    s_min = float(np.linalg.svd(M, compute_uv=False)[-1]) if M.size else 0.0
    if s_min <= RANGE_TOL * max(1.0, float(np.linalg.norm(M, 2))):
        # singular compression: pseudo-inverse keeps the report finite, and
        # the recorded s_min makes the verdict fail
        Minv = np.linalg.pinv(M)
    else:
        Minv = np.linalg.inv(M)
    return V @ Minv @ V.conj().T, s_min


@dataclass
class FeshbachPairReport:
    commute_residual: float     # (a') max of ||[T, chi]||, ||[T, chibar]||
    sigma_min_T: float          # (b') smallest singular value of T on Ran chibar
    sigma_min_H: float          # invertibility of H_chibar on Ran chibar
    norm_left: float            # (c') ||T^{-1} chibar W chibar||
    norm_right: float           # (c') ||chibar W T^{-1} chibar||
    norm_cross: float           # (c') ||T^{-1} chibar W chi||
    verdict: bool


def check_pair(H, T, chi_mat, chibar_mat, commute_tol=1e-12) -> FeshbachPairReport:
    """Numerical version of the sufficient pair conditions (a'), (b'), (c')."""
    H = np.asarray(H, dtype=complex)
    T = np.asarray(T, dtype=complex)
    W = H - T
    ca = np.linalg.norm(T @ chi_mat - chi_mat @ T, 2)
    cb = np.linalg.norm(T @ chibar_mat - chibar_mat @ T, 2)
    commute = float(max(ca, cb))
    V = range_basis(chibar_mat)
    if V.shape[1] == 0:
        return FeshbachPairReport(commute, 0.0, 0.0, 0.0, 0.0, 0.0, False)
    Tinv, s_min_T = inverse_on_range(T, V)
    Hbar = T + chibar_mat @ W @ chibar_mat
    s_min_H = float(np.linalg.svd(V.conj().T @ Hbar @ V, compute_uv=False)[-1])
    nl = float(np.linalg.norm(Tinv @ chibar_mat @ W @ chibar_mat, 2))
    nr = float(np.linalg.norm(chibar_mat @ W @ Tinv @ chibar_mat, 2))
    nc = float(np.linalg.norm(Tinv @ chibar_mat @ W @ chi_mat, 2))
    scale = max(1.0, float(np.linalg.norm(T, 2)))
    verdict = (commute <= commute_tol * scale
               and s_min_T > RANGE_TOL * scale
               and nl < 1.0 and nr < 1.0 and np.isfinite(nc))
    return FeshbachPairReport(commute, s_min_T, s_min_H, nl, nr, nc, verdict)


def _hbar_inverse(H, T, chibar_mat):
    W = H - T
    V = range_basis(chibar_mat)
    Hbar = T + chibar_mat @ W @ chibar_mat
    inv, s_min = inverse_on_range(Hbar, V)
    if not np.isfinite(inv).all() or s_min <= 0.0:
        raise InvalidPair("H_chibar is not invertible on Ran chibar")
    return inv, W


def feshbach_map(H, T, chi_mat, chibar_mat, check=True):
    """F_chi(H, T) = T + chi W chi - chi W chibar H_chibar^{-1} chibar W chi."""
    if check:
        report = check_pair(H, T, chi_mat, chibar_mat)
        if not report.verdict:
            raise InvalidPair(
                f"not a Feshbach pair: commute={report.commute_residual:.2e} "
                f"sigma_min={report.sigma_min_T:.2e} "
                f"norms=({report.norm_left:.3f},{report.norm_right:.3f})"
            )
    inv, W = _hbar_inverse(H, T, chibar_mat)
    return (T + chi_mat @ W @ chi_mat
            - chi_mat @ W @ chibar_mat @ inv @ chibar_mat @ W @ chi_mat)


def q_operator(H, T, chi_mat, chibar_mat, check=True):
    """Q_chi = chi - chibar H_chibar^{-1} chibar W chi."""
    if check:
        report = check_pair(H, T, chi_mat, chibar_mat)
        if not report.verdict:
            raise InvalidPair("not a Feshbach pair")
    inv, W = _hbar_inverse(H, T, chibar_mat)
    return chi_mat - chibar_mat @ inv @ chibar_mat @ W @ chi_mat


def isospectrality_check(H, T, chi_mat, chibar_mat, z_grid,
                         singular_tol=1e-8):
    """Per-z singularity comparison between H - z and F_chi(H - z, T - z).

    Returns a list of dict records: smallest singular values of both sides,
    agreement flag, and (where F is singular) the eigenvector reconstruction
    residual ||(H - z) Q v|| / ||Q v||.
    """
    H = np.asarray(H, dtype=complex)
    T = np.asarray(T, dtype=complex)
    dim = H.shape[0]
    h_scale = max(1.0, float(np.linalg.norm(H, 2)))
    Vchi = range_basis(chi_mat)
    records = []
    for z in np.atleast_1d(z_grid):
        Hz = H - z * np.eye(dim)
        Tz = T - z * np.eye(dim)
        F = feshbach_map(Hz, Tz, chi_mat, chibar_mat, check=False)
        Fr = Vchi.conj().T @ F @ Vchi
        s_H = float(np.linalg.svd(Hz, compute_uv=False)[-1])
        u, s, vh = np.linalg.svd(Fr)
        s_F = float(s[-1])
        rec = {
            "z": complex(z),
            "sigma_H": s_H,
            "sigma_F": s_F,
            "agree": (s_H < singular_tol * h_scale)
                     == (s_F < singular_tol * h_scale),
        }
        if s_F < singular_tol * h_scale:
            v = Vchi @ vh.conj().T[:, -1]
            Q = q_operator(Hz, Tz, chi_mat, chibar_mat, check=False)
            qv = Q @ v
            nq = float(np.linalg.norm(qv))
            rec["reconstruction_residual"] = (
                float(np.linalg.norm(Hz @ qv)) / nq if nq > 0 else float("inf")
            )
        records.append(rec)
    return records
