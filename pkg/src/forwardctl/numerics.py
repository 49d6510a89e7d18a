"""Dense linear-algebra kernel shared by the whole package.

Small, pure helpers: Kronecker/vectorisation utilities, a minimum-norm
least-squares solver with an explicit truncation policy, spectral queries
(eigenvalues, Schur test, resolvent H-infinity norm, decay envelopes) and a
symmetrised minimum-eigenvalue helper used for PSD dominance checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Spectrum",
    "DecayEnvelope",
    "HinfEstimate",
    "kron",
    "vec",
    "unvec",
    "min_norm_solve",
    "eigvals",
    "is_schur",
    "resolvent_hinf_norm",
    "decay_envelope",
    "psd_min_eig",
    "numerical_rank",
]

# Relative cutoff used for every numerical-rank / pseudo-inverse decision.
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues of a square matrix plus the spectral radius."""

    eigenvalues: np.ndarray
    radius: float


@dataclass(frozen=True)
class DecayEnvelope:
    """Constants (c, p) with ``norm(a^k) <= c * p**k`` for all checked k."""

    c: float
    p: float


@dataclass(frozen=True)
class HinfEstimate:
    """Peak resolvent gain on the unit circle.

    ``flagged`` is set when the input matrix is not Schur (the supremum is
    then only the grid value, not a converged quantity).
    """

    value: float
    angle: float
    flagged: bool = False


def kron(a, b):
    """Kronecker product (thin wrapper, kept for a single import point)."""
    return np.kron(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def vec(a):
    """Stack the columns of ``a`` into one column vector."""
    return np.asarray(a, dtype=float).reshape(-1, order="F")


def unvec(v, rows, cols):
    """Inverse of :func:`vec`."""
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != rows * cols:
        raise ValueError(f"cannot reshape {v.size} entries into {rows}x{cols}")
    return v.reshape((rows, cols), order="F")


def min_norm_solve(m, b):
    """Minimum-Frobenius-norm least-squares solution of ``m @ x = b``.

    Singular values below ``1e-10 * sigma_max`` are treated as zero.  One
    iterative-refinement pass is applied (the correction lives in the same
    row space, so minimality is preserved); on ill-conditioned systems this
    recovers digits that matter several solves downstream.  Returns
    ``(x, residual)`` where ``residual = ||m @ x - b||_F``; a nonzero
    residual signals an inconsistent right-hand side rather than an error.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    b_arr = np.asarray(b, dtype=float)
    b2d = b_arr.reshape(-1, 1) if b_arr.ndim == 1 else b_arr
    if b2d.shape[0] != m.shape[0]:
        raise ValueError("row count mismatch between m and b")
    x2d = np.linalg.lstsq(m, b2d, rcond=RANK_RTOL)[0]
    x2d = x2d + np.linalg.lstsq(m, b2d - m @ x2d, rcond=RANK_RTOL)[0]
    residual = float(np.linalg.norm(m @ x2d - b2d))
    x = x2d[:, 0] if b_arr.ndim == 1 else x2d
    return x, residual


def eigvals(a) -> Spectrum:
    """All eigenvalues of ``a`` together with the spectral radius."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("eigvals needs a square matrix")
    ev = np.linalg.eigvals(a)
    return Spectrum(eigenvalues=ev, radius=float(np.max(np.abs(ev))) if ev.size else 0.0)


def is_schur(a, tol: float = 1e-9) -> bool:
    """True iff the spectral radius of ``a`` is below ``1 - tol``."""
    return eigvals(a).radius < 1.0 - tol


def _resolvent_gain(a, theta):
    n = a.shape[0]
    z = np.exp(1j * theta)
    return np.linalg.svd(np.linalg.inv(z * np.eye(n) - a), compute_uv=False)[0]


def resolvent_hinf_norm(a, grid_size: int = 4096) -> HinfEstimate:
    """sup over |z| = 1 of sigma_max((zI - a)^-1).

    Evaluates on a uniform angular grid and then refines locally around the
    grid maximiser with a golden-section search.  For a non-Schur input the
    grid value is still returned but the estimate is flagged.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("resolvent_hinf_norm needs a square matrix")
    flagged = not is_schur(a)
    thetas = np.linspace(0.0, 2.0 * np.pi, grid_size, endpoint=False)
    best_val, best_th = -np.inf, 0.0
    for th in thetas:
        try:
            g = _resolvent_gain(a, th)
        except np.linalg.LinAlgError:
            flagged = True
            continue
        if g > best_val:
            best_val, best_th = g, th
    # golden-section refinement on the bracket around the grid maximiser
    h = 2.0 * np.pi / grid_size
    lo, hi = best_th - h, best_th + h
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1, f2 = _resolvent_gain(a, x1), _resolvent_gain(a, x2)
    for _ in range(40):
        if f1 < f2:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = _resolvent_gain(a, x2)
        else:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = _resolvent_gain(a, x1)
    if f1 > best_val:
        best_val, best_th = f1, x1
    if f2 > best_val:
        best_val, best_th = f2, x2
    return HinfEstimate(value=float(best_val), angle=float(best_th % (2.0 * np.pi)),
                        flagged=flagged)


def decay_envelope(a) -> DecayEnvelope:
    """Constants for the geometric envelope ``norm(a^k) <= c * p**k``.

    Policy: p is the midpoint between the spectral radius and 1, and c is the
    largest observed ratio ``norm(a^k) / p**k`` while iterating powers until
    they fall below 1e-12 (past that point the ratio cannot grow).
    """
    a = np.asarray(a, dtype=float)
    rho = eigvals(a).radius
    if rho >= 1.0:
        raise ValueError(f"decay_envelope needs a Schur matrix (radius {rho:.6f})")
    p = (1.0 + rho) / 2.0
    c = 1.0
    ak = np.eye(a.shape[0])
    k = 0
    while True:
        nk = float(np.linalg.norm(ak, 2))
        if nk < 1e-12:
            break
        c = max(c, nk / p**k)
        ak = ak @ a
        k += 1
        if k > 100000:  # paranoia guard; unreachable for Schur inputs
            break
    return DecayEnvelope(c=float(c), p=float(p))


def psd_min_eig(a) -> float:
    """Smallest eigenvalue of the symmetric part (a + a.T) / 2."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("psd_min_eig needs a square matrix")
    return float(np.linalg.eigvalsh((a + a.T) / 2.0).min())


def numerical_rank(a) -> int:
    """Rank with the scale-aware cutoff max(rows, cols) * sigma_max * 1e-10."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > max(a.shape) * s[0] * RANK_RTOL))
