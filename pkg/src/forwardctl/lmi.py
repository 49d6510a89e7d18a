"""Semidefinite feasibility templates and stabilising-gain extraction.

The module owns three things: a small affine-LMI problem description, a
feasibility engine whose answers are never trusted without an independent
dense eigenvalue recheck, and the gain-extraction step K = U Q (X Q)^-1
shared by the nominal and robust designs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cvxpy as cp
import numpy as np

from .errors import StageError
from .numerics import psd_min_eig
from .sysdata import DataBatch

__all__ = [
    "LmiProblem",
    "FeasibilityReport",
    "GainCertificate",
    "gain_template",
    "robust_gain_template",
    "solve_feasibility",
    "design_gain",
    "design_gain_robust",
    "snr_check",
    "snr_coefficient",
    "admissible_alphas",
    "alpha_search",
    "save_gain_certificate",
]

COND_LIMIT = 1e12
DEFAULT_ALPHA_GRID = np.logspace(-3.0, 3.0, 25)

# (solver, kwargs) attempted in order; the dense recheck arbitrates.
_SOLVER_CHAIN = (
    (cp.CLARABEL, {}),
    (cp.CVXOPT, {}),
    (cp.SCS, {"eps": 1e-9, "max_iters": 50000}),
)


@dataclass(frozen=True)
class LmiProblem:
    """Affine positive-definiteness constraints in a matrix variable Q.

    Each entry of ``block_builders`` is a callable ``f(q, bmat)`` returning
    one symmetric constraint block built from Q (symmetric for EVERY Q, not
    just feasible ones — diagonal entries must be explicitly symmetrised).
    These are the recheck route.  ``conic_builders``, when non-empty, build
    the same blocks WITHOUT symmetrisation for the conic solver; symmetry is
    then imposed through ``symmetry_constraints``, callables ``f(q)`` whose
    value must equal its own transpose at the solution.  ``margin`` is the
    recheck strictness: all blocks must have min eigenvalue >= margin.
    """

    block_builders: tuple
    symmetry_constraints: tuple
    decision_shape: tuple
    margin: float
    conic_builders: tuple = ()

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.conic_builders and len(self.conic_builders) != len(self.block_builders):
            raise ValueError("conic builders must pair with the recheck blocks")
        probe = np.random.default_rng(0).standard_normal(self.decision_shape)
        for build in self.block_builders:
            m = build(probe, np.block)
            if m.shape[0] != m.shape[1]:
                raise ValueError("constraint blocks must be square")
            if np.linalg.norm(m - m.T) > 1e-9 * (1.0 + np.linalg.norm(m)):
                raise ValueError("block builder is not symmetric in Q")
        for raw, build in zip(self.conic_builders, self.block_builders):
            m_raw = raw(probe, np.block)
            m_sym = build(probe, np.block)
            if m_raw.shape != m_sym.shape:
                raise ValueError("conic block shape mismatch")
            if np.linalg.norm((m_raw + m_raw.T) / 2 - m_sym) > \
                    1e-9 * (1.0 + np.linalg.norm(m_sym)):
                raise ValueError("conic builder disagrees with its recheck block")


@dataclass(frozen=True)
class FeasibilityReport:
    q: np.ndarray
    min_eig_achieved: float
    feasible: bool


@dataclass(frozen=True)
class GainCertificate:
    """Feedback gain with its data parameterisation.

    Satisfies [I; K] = [X-; U-] @ g_k and g_k = q @ inv(x_minus @ q); the
    condition number of the inverted matrix is kept for diagnostics.
    """

    k: np.ndarray
    q: np.ndarray
    g_k: np.ndarray
    inverted_conditioning: float


def _sym(e):
    return (e + e.T) / 2


def gain_template(batch: DataBatch, contraction: float = 1.0) -> LmiProblem:
    """Stabilisation template [[XmQ, XpQ], [QtXpt, XmQ]] > 0.

    ``contraction`` < 1 scales x_plus by 1/contraction, which forces the
    designed closed loop's spectral radius below that value instead of 1.
    """
    if not 0.0 < contraction <= 1.0:
        raise ValueError("contraction must lie in (0, 1]")
    xm = batch.x_minus
    xp = batch.x_plus / contraction

    def block(q, bmat):
        d = _sym(xm @ q)
        c = xp @ q
        return bmat([[d, c], [c.T, d]])

    def raw(q, bmat):
        d = xm @ q
        c = xp @ q
        return bmat([[d, c], [c.T, d]])

    scale = max(1.0, np.linalg.norm(xm, 2), np.linalg.norm(xp, 2))
    return LmiProblem(block_builders=(block,),
                      symmetry_constraints=(lambda q: xm @ q,),
                      decision_shape=(batch.t, batch.n),
                      margin=1e-7 * scale,
                      conic_builders=(raw,))


def robust_gain_template(batch_bar: DataBatch, alpha: float) -> LmiProblem:
    """Noise-robust two-block template.

    Block 1 subtracts alpha * x_plus x_plus' from the (1,1) entry of the
    stabilisation template; block 2 ([[I, Q], [Qt, XmQ]] > 0) caps Q against
    the data so the guarantee survives bounded noise.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    xm = batch_bar.x_minus
    xp = batch_bar.x_plus
    xpxp = xp @ xp.T

    def block1(q, bmat):
        d = _sym(xm @ q)
        c = xp @ q
        return bmat([[d - alpha * xpxp, c], [c.T, d]])

    def block2(q, bmat):
        return bmat([[np.eye(batch_bar.t), q], [q.T, _sym(xm @ q)]])

    def raw1(q, bmat):
        d = xm @ q
        c = xp @ q
        return bmat([[d - alpha * xpxp, c], [c.T, d]])

    def raw2(q, bmat):
        return bmat([[np.eye(batch_bar.t), q], [q.T, xm @ q]])

    scale = max(1.0, np.linalg.norm(xm, 2), np.linalg.norm(xp, 2))
    return LmiProblem(block_builders=(block1, block2),
                      symmetry_constraints=(lambda q: xm @ q,),
                      decision_shape=(batch_bar.t, batch_bar.n),
                      margin=1e-7 * scale,
                      conic_builders=(raw1, raw2))


def _recheck_margin(p: LmiProblem, q: np.ndarray) -> float:
    """Dense, solver-independent margin of q against all blocks."""
    for sym_fn in p.symmetry_constraints:
        e = sym_fn(q)
        if np.linalg.norm(e - e.T) > 1e-6 * (1.0 + np.linalg.norm(e)):
            return -np.inf
    return min(psd_min_eig(build(q, np.block)) for build in p.block_builders)


def solve_feasibility(p: LmiProblem, objective: str = "min_norm") -> FeasibilityReport:
    """Find Q with every block strictly positive definite.

    The conic solver is asked for margin 100x the recheck threshold so the
    returned Q survives the independent dense eigenvalue recheck, which is
    the only arbiter of the ``feasible`` flag.  ``objective`` picks between
    the smallest-norm feasible Q ("min_norm") and the largest common block
    margin ("max_margin"; only meaningful when a constant offset in the
    template bounds the margin).
    """
    q_var = cp.Variable(p.decision_shape)
    inner = 100.0 * p.margin
    builders = p.conic_builders or p.block_builders
    cons = []
    if objective == "max_margin":
        t_var = cp.Variable()
        for build in builders:
            m = build(q_var, cp.bmat)
            cons.append(m >> t_var * np.eye(m.shape[0]))
        cons.append(t_var >= inner)
        for sym_fn in p.symmetry_constraints:
            e = sym_fn(q_var)
            cons.append(e == e.T)
        prob = cp.Problem(cp.Maximize(t_var), cons)
    elif objective == "min_norm":
        for build in builders:
            m = build(q_var, cp.bmat)
            cons.append(m >> inner * np.eye(m.shape[0]))
        for sym_fn in p.symmetry_constraints:
            e = sym_fn(q_var)
            cons.append(e == e.T)
        prob = cp.Problem(cp.Minimize(cp.norm(q_var, "fro")), cons)
    else:
        raise ValueError(f"unknown objective {objective!r}")

    best_q, best_margin = None, -np.inf
    for solver, kwargs in _SOLVER_CHAIN:
        try:
            prob.solve(solver=solver, **kwargs)
        except (cp.error.SolverError, ZeroDivisionError, ValueError,
                ArithmeticError):
            continue
        if q_var.value is None:
            continue
        margin = _recheck_margin(p, q_var.value)
        if margin > best_margin:
            best_q, best_margin = q_var.value.copy(), margin
        if margin >= p.margin:
            break
    if best_q is None:
        best_q = np.zeros(p.decision_shape)
        best_margin = _recheck_margin(p, best_q)
    return FeasibilityReport(q=best_q, min_eig_achieved=float(best_margin),
                             feasible=bool(best_margin >= p.margin))


def _extract_gain(batch: DataBatch, q: np.ndarray) -> GainCertificate:
    xq = batch.x_minus @ q
    cond = float(np.linalg.cond(xq))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise StageError("lmi",
                         f"gain extraction rejected: cond(x_minus @ q) = {cond:.2e}")
    xq_inv = np.linalg.inv(xq)
    k = batch.u_minus @ q @ xq_inv
    g_k = q @ xq_inv
    target = np.vstack([np.eye(batch.n), k])
    defect = np.linalg.norm(
        np.vstack([batch.x_minus, batch.u_minus]) @ g_k - target)
    if defect > 1e-8 * (1.0 + np.linalg.norm(target)):
        raise StageError("lmi",
                         f"gain data-representation identity violated ({defect:.2e})")
    return GainCertificate(k=k, q=q, g_k=g_k, inverted_conditioning=cond)


def design_gain(batch: DataBatch, contraction: float = 1.0) -> GainCertificate:
    """Stabilising state feedback from one data batch (noise-free template)."""
    report = solve_feasibility(gain_template(batch, contraction))
    if not report.feasible:
        raise StageError("lmi",
                         "data not informative for stabilisation "
                         f"(best margin {report.min_eig_achieved:.2e})",
                         margin=report.min_eig_achieved)
    return _extract_gain(batch, report.q)


def design_gain_robust(batch_bar: DataBatch, alpha: float) -> GainCertificate:
    """Noise-robust gain at a given alpha (smallest-norm solution).

    The Schur guarantee attaches only when the signal-to-noise condition
    holds for the same alpha; that check needs the true noise block and
    lives in :func:`snr_check` on the oracle path.
    """
    report = solve_feasibility(robust_gain_template(batch_bar, alpha))
    if not report.feasible:
        raise StageError("lmi",
                         f"robust design unavailable at alpha={alpha:.3e} "
                         f"(best margin {report.min_eig_achieved:.2e})",
                         margin=report.min_eig_achieved, alpha=alpha)
    return _extract_gain(batch_bar, report.q)


def snr_coefficient(alpha: float) -> float:
    """alpha^2 / (2 (2 + alpha)); strictly increasing in alpha > 0."""
    return alpha * alpha / (2.0 * (2.0 + alpha))


def snr_check(r_minus, x_plus_bar, alpha: float):
    """Signal-to-noise dominance R R' <= coef(alpha) Xp Xp' (oracle path).

    Returns ``(holds, slack)`` with slack the minimum eigenvalue of the
    difference; holds iff slack >= 0.
    """
    r = np.atleast_2d(np.asarray(r_minus, dtype=float))
    xp = np.atleast_2d(np.asarray(x_plus_bar, dtype=float))
    slack = psd_min_eig(snr_coefficient(alpha) * (xp @ xp.T) - r @ r.T)
    return bool(slack >= 0.0), float(slack)


def admissible_alphas(r_minus, x_plus_bar, grid=None) -> np.ndarray:
    """Grid points where the signal-to-noise condition holds."""
    grid = DEFAULT_ALPHA_GRID if grid is None else np.asarray(grid, dtype=float)
    return np.array([a for a in grid if snr_check(r_minus, x_plus_bar, a)[0]])


def alpha_search(r_minus, x_plus_bar, batch_bar: DataBatch, grid=None):
    """Smallest grid alpha with the SNR condition AND a feasible robust LMI.

    Needs the true noise block (oracle path).  Returns ``(alpha, cert)``.
    """
    grid = DEFAULT_ALPHA_GRID if grid is None else np.asarray(grid, dtype=float)
    for alpha in grid:
        if not snr_check(r_minus, x_plus_bar, alpha)[0]:
            continue
        try:
            cert = design_gain_robust(batch_bar, float(alpha))
        except StageError:
            continue
        return float(alpha), cert
    raise StageError("lmi", "no admissible alpha on the scan grid")


def save_gain_certificate(cert: GainCertificate, directory, extra=None) -> None:
    """Write k.csv / q.csv / g_k.csv plus a JSON summary."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for kind, mat in (("k", cert.k), ("q", cert.q), ("g_k", cert.g_k)):
        mat = np.atleast_2d(mat)
        lines = ["kind,rows,cols", f"{kind},{mat.shape[0]},{mat.shape[1]}"]
        for row in mat:
            lines.append(",".join("%.17g" % v for v in row))
        (directory / f"{kind}.csv").write_text("\n".join(lines) + "\n")
    summary = {"inverted_conditioning": cert.inverted_conditioning}
    if extra:
        summary.update(extra)
    (directory / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
