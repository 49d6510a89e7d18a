"""Solvers and error analysis for the coupling equation A2 T - T A1 = -B2 C1.

Three routes to the solution: a model-based oracle (Kronecker inverse), a
data-driven feasibility solve over a decision matrix G, and its noisy
empirical variant.  The error toolkit quantifies how far the empirical
solution can drift from the true one given noise norms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import StageError
from .numerics import kron, min_norm_solve, unvec, vec
from .sysdata import DataBatch

__all__ = [
    "SylvesterProblem",
    "SylvesterCertificate",
    "ErrorBoundReport",
    "solve_oracle",
    "solve_from_data",
    "solve_from_data_least_norm",
    "solve_empirical_noisy",
    "scan_windows",
    "error_residual_check",
    "error_bound",
    "save_certificate",
]

SPECTRAL_GAP_TOL = 1e-8
FEAS_RTOL = 1e-8


@dataclass(frozen=True)
class SylvesterProblem:
    a1: np.ndarray
    a2: np.ndarray
    b2: np.ndarray
    c1: np.ndarray

    def __post_init__(self):
        a1 = np.atleast_2d(np.asarray(self.a1, dtype=float))
        a2 = np.atleast_2d(np.asarray(self.a2, dtype=float))
        b2 = np.atleast_2d(np.asarray(self.b2, dtype=float))
        c1 = np.atleast_2d(np.asarray(self.c1, dtype=float))
        if a1.shape[0] != a1.shape[1] or a2.shape[0] != a2.shape[1]:
            raise ValueError("a1 and a2 must be square")
        if b2.shape[0] != a2.shape[0]:
            raise ValueError("b2 rows must match a2")
        if c1.shape != (b2.shape[1], a1.shape[0]):
            raise ValueError("c1 must be (b2 cols) x (a1 size)")
        for name, m in (("a1", a1), ("a2", a2), ("b2", b2), ("c1", c1)):
            object.__setattr__(self, name, m)


@dataclass(frozen=True)
class SylvesterCertificate:
    """Decision matrix G, recovered solution theta = x_minus @ g, defects."""

    g: np.ndarray
    theta: np.ndarray
    residual_dyn: float
    residual_out: float
    g_fro: float


@dataclass(frozen=True)
class ErrorBoundReport:
    """Perturbation bound and its ingredients.

    Invariant: bound == g_fro * (r_norm + model_mismatch_term)
    / sigma_min_term, recomputable from the stored fields.
    """

    bound: float
    sigma_min_term: float
    g_fro: float
    r_norm: float
    model_mismatch_term: float


def _spectral_gap(a1, a2) -> float:
    e1 = np.linalg.eigvals(a1)
    e2 = np.linalg.eigvals(a2)
    return float(np.min(np.abs(e2[:, None] - e1[None, :])))


def solve_oracle(p: SylvesterProblem) -> np.ndarray:
    """Model-based solution via the Kronecker-stacked linear system.

    Requires disjoint spectra of a1 and a2 (gap above 1e-8); the returned
    solution is verified by back-substitution before being handed out.
    """
    gap = _spectral_gap(p.a1, p.a2)
    if gap < SPECTRAL_GAP_TOL:
        raise StageError("sylvester",
                         f"spectra of a1 and a2 too close (gap {gap:.2e})",
                         gap=gap)
    n1, n2 = p.a1.shape[0], p.a2.shape[0]
    op = kron(np.eye(n1), p.a2) - kron(p.a1.T, np.eye(n2))
    try:
        theta = unvec(np.linalg.solve(op, vec(-p.b2 @ p.c1)), n2, n1)
    except np.linalg.LinAlgError as exc:
        raise StageError("sylvester", f"singular coupling operator: {exc}") from exc
    res = np.linalg.norm(p.a2 @ theta - theta @ p.a1 + p.b2 @ p.c1)
    limit = 1e-9 * (np.linalg.norm(p.a2) + np.linalg.norm(p.a1)) * np.linalg.norm(theta)
    if res > limit and res > 1e-12:
        raise StageError("sylvester",
                         f"oracle back-substitution failed ({res:.2e} > {limit:.2e})")
    return theta


def _batch_scale(batch: DataBatch) -> float:
    return float(np.linalg.norm(
        np.vstack([batch.x_minus, batch.x_plus, batch.u_minus])))


def _solve_stacked(batch: DataBatch, a1, c1) -> SylvesterCertificate:
    a1 = np.atleast_2d(np.asarray(a1, dtype=float))
    c1 = np.atleast_2d(np.asarray(c1, dtype=float))
    n1 = a1.shape[0]
    if c1.shape != (batch.m, n1):
        raise ValueError(f"c1 must be {batch.m}x{n1}, got {c1.shape}")
    xm, xp, um = batch.x_minus, batch.x_plus, batch.u_minus
    eye1 = np.eye(n1)
    m = np.vstack([kron(eye1, xp) - kron(a1.T, xm), kron(eye1, um)])
    b = np.concatenate([np.zeros(batch.n * n1), vec(c1)])
    g_vec, _ = min_norm_solve(m, b)
    g = unvec(g_vec, batch.t, n1)
    theta = xm @ g
    residual_dyn = float(np.linalg.norm(xp @ g - theta @ a1))
    residual_out = float(np.linalg.norm(um @ g - c1))
    tol = FEAS_RTOL * (1.0 + _batch_scale(batch))
    if residual_dyn > tol or residual_out > tol:
        raise StageError(
            "sylvester",
            "data not informative for the coupling solution "
            f"(defects {residual_dyn:.2e}, {residual_out:.2e} > {tol:.2e})",
            residual_dyn=residual_dyn, residual_out=residual_out)
    return SylvesterCertificate(g=g, theta=theta, residual_dyn=residual_dyn,
                                residual_out=residual_out,
                                g_fro=float(np.linalg.norm(g)))


def solve_from_data(batch2: DataBatch, a1, c1) -> SylvesterCertificate:
    """Solve for G with x_plus G = x_minus G a1 and u_minus G = c1.

    The two matrix equalities are vectorised into one linear system in
    vec(G) and solved by minimum-norm least squares; theta = x_minus G.
    Raises when either constraint defect exceeds 1e-8 * (1 + data norm).
    """
    return _solve_stacked(batch2, a1, c1)


def solve_from_data_least_norm(batch2: DataBatch, a1, c1) -> SylvesterCertificate:
    """Feasible G of minimum Frobenius norm.

    The minimum-norm least-squares solve used by solve_from_data already
    selects the smallest-norm G among the feasible set, so the two routes
    return the same certificate; this entry point exists because the
    smallest g_fro is what tightens every downstream error bound, and
    callers that rely on that property should say so by calling it.
    """
    return _solve_stacked(batch2, a1, c1)


def solve_empirical_noisy(batch2_bar: DataBatch, a1_bar, c1) -> SylvesterCertificate:
    """Least-norm solve on corrupted data and an empirical a1 estimate."""
    return _solve_stacked(batch2_bar, a1_bar, c1)


def scan_windows(batch2_bar: DataBatch, a1_bar, c1, t_min: int):
    """Exhaustive scan over contiguous column windows minimising g_fro.

    Returns ``(certificate, start, length)`` for the feasible window with
    the smallest decision-matrix norm; windows where the solve rejects are
    skipped.  Raises if no window of length >= t_min is feasible.
    """
    best = None
    for length in range(t_min, batch2_bar.t + 1):
        for start in range(0, batch2_bar.t - length + 1):
            sub = DataBatch(x_minus=batch2_bar.x_minus[:, start:start + length],
                            x_plus=batch2_bar.x_plus[:, start:start + length],
                            u_minus=batch2_bar.u_minus[:, start:start + length],
                            t=length)
            try:
                cert = _solve_stacked(sub, a1_bar, c1)
            except StageError:
                continue
            if best is None or cert.g_fro < best[0].g_fro:
                best = (cert, start, length)
    if best is None:
        raise StageError("sylvester", "no feasible contiguous window found")
    return best


def error_residual_check(delta_theta, a1, a2, r2_minus, x2bar_minus,
                         g_hat, delta_a1) -> float:
    """Defect of the perturbation equation linking delta_theta to the noise.

    Computes ||a2 dT - dT a1 + r2_minus g_hat + x2bar_minus g_hat delta_a1||_F
    for dT = delta_theta; a value near zero certifies that the empirical
    solution error satisfies its own coupling equation.
    """
    dt = np.atleast_2d(np.asarray(delta_theta, dtype=float))
    lhs = (np.asarray(a2, float) @ dt - dt @ np.asarray(a1, float)
           + np.asarray(r2_minus, float) @ np.asarray(g_hat, float)
           + np.asarray(x2bar_minus, float) @ np.asarray(g_hat, float)
           @ np.asarray(delta_a1, float))
    return float(np.linalg.norm(lhs))


def error_bound(g_hat_cert: SylvesterCertificate, r2_minus, x2bar_minus,
                delta_a1, a1, a2) -> ErrorBoundReport:
    """A-priori bound on the empirical solution error.

    bound = ||G||_F (||R||_2 + ||X_bar||_2 ||dA1||_2) / sigma_min(op) where
    op is the Kronecker-stacked coupling operator of the TRUE matrices.
    Oracle-side: needs the true a1, a2 and the exact noise block.
    """
    a1 = np.atleast_2d(np.asarray(a1, dtype=float))
    a2 = np.atleast_2d(np.asarray(a2, dtype=float))
    op = kron(np.eye(a1.shape[0]), a2) - kron(a1.T, np.eye(a2.shape[0]))
    sigma_min = float(np.linalg.svd(op, compute_uv=False)[-1])
    if sigma_min < 1e-14:
        raise StageError("sylvester",
                         "coupling operator singular (shared spectra)")
    r_norm = float(np.linalg.norm(np.asarray(r2_minus, float), 2))
    mismatch = float(np.linalg.norm(np.asarray(x2bar_minus, float), 2)
                     * np.linalg.norm(np.asarray(delta_a1, float), 2))
    bound = g_hat_cert.g_fro * (r_norm + mismatch) / sigma_min
    return ErrorBoundReport(bound=bound, sigma_min_term=sigma_min,
                            g_fro=g_hat_cert.g_fro, r_norm=r_norm,
                            model_mismatch_term=mismatch)


def save_certificate(cert: SylvesterCertificate, directory) -> None:
    """Write g.csv / theta.csv plus a JSON summary of residuals and norms."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for kind, mat in (("g", cert.g), ("theta", cert.theta)):
        lines = ["kind,rows,cols", f"{kind},{mat.shape[0]},{mat.shape[1]}"]
        for row in np.atleast_2d(mat):
            lines.append(",".join("%.17g" % v for v in row))
        (directory / f"{kind}.csv").write_text("\n".join(lines) + "\n")
    summary = {"residual_dyn": cert.residual_dyn,
               "residual_out": cert.residual_out,
               "g_fro": cert.g_fro}
    (directory / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
