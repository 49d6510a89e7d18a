"""Command-line benchmark front end.

Reads a JSON run configuration, executes one of the experiment modes
(data collection, two-stage or N-stage design, data-length sweep, noise
sweep, closed-loop verification), and persists CSV tables, SVG plots, and
controller manifests under a deterministic run directory.  Every output
is byte-reproducible for a fixed config and seed.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .cascade import (DEFAULT_MENU, closed_loop_assemble, design_2cascade,
                      design_2cascade_noisy, design_ncascade,
                      build_r_zeta, error_bound_upsilon, iss_verify,
                      save_controller, simulate_closed_loop, small_gain_check,
                      tmin, true_closed_loop)
from .errors import EXIT_CODES, StageError
from .lmi import (DEFAULT_ALPHA_GRID, admissible_alphas, alpha_search,
                  design_gain, design_gain_robust)
from .numerics import eigvals, min_norm_solve
from .sylvester import SylvesterProblem, solve_empirical_noisy, solve_oracle
from .sysdata import (CascadeSystem, DataBatch, LtiSystem, NoiseSpec,
                      build_batch, cascade_batches, encapsulated_noise,
                      fixture_cascade, load_batch, monolithic_system,
                      save_batch, simulate, simulate_cascade)

__all__ = ["RunConfig", "SweepRow", "emit_plot", "main",
           "cmd_collect", "cmd_design2", "cmd_design_n", "cmd_sweep_n",
           "cmd_noise_sweep", "cmd_verify"]

MODES = ("collect", "design2", "designN", "sweep-n", "noise-sweep", "verify")

_PLOT_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b")
_MAX_WORKERS = 4


@dataclass(frozen=True)
class RunConfig:
    """One experiment run: what to do, on which system, with which knobs."""

    mode: str
    t: int = 8
    seed: int = 0
    n_stages: int = 2
    n_max: int = 4
    noise_bound: float = 0.0
    process_bound: float = 0.0
    steps: int = 60
    out_dir: str = "out"
    system: str = "fixture"
    system_paths: tuple = ()
    batches_dir: str = ""
    alpha_grid: tuple = ()
    menu: tuple = DEFAULT_MENU

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.t < 1:
            raise ValueError("t must be >= 1")
        if self.n_max < 2:
            raise ValueError("n_max must be >= 2")
        if self.n_stages < 1:
            raise ValueError("n_stages must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.noise_bound < 0 or self.process_bound < 0:
            raise ValueError("noise bounds must be nonnegative")
        if self.system not in ("fixture", "paths"):
            raise ValueError("system must be 'fixture' or 'paths'")
        object.__setattr__(self, "system_paths",
                           tuple(str(p) for p in self.system_paths))
        object.__setattr__(self, "alpha_grid",
                           tuple(float(a) for a in self.alpha_grid))
        object.__setattr__(self, "menu", tuple(float(v) for v in self.menu))
        if self.system == "paths" and not self.system_paths:
            raise ValueError("system='paths' needs system_paths")
        for p in self.system_paths:
            if not Path(p).exists():
                raise FileNotFoundError(f"system matrix file not found: {p}")
        if self.batches_dir and not Path(self.batches_dir).exists():
            raise FileNotFoundError(f"batches_dir not found: {self.batches_dir}")
        if not self.menu or any(not 0.0 < v <= 1.0 for v in self.menu):
            raise ValueError("menu entries must lie in (0, 1]")

    @classmethod
    def from_json(cls, path, mode=None) -> "RunConfig":
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise ValueError("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if mode is not None:
            data["mode"] = mode
        if "mode" not in data:
            raise ValueError("config needs a mode (or pass one on the CLI)")
        return cls(**data)


@dataclass(frozen=True)
class SweepRow:
    """One cell of the data-length sweep.

    wall_ms is informational only and never persisted (timing is not
    reproducible); a succeeded row must certify a contractive loop.
    """

    n: int
    method: str
    t_min_theory: int
    t_used: int
    succeeded: bool
    rho_closed_loop: float
    wall_ms: float

    def __post_init__(self):
        if self.method not in ("forwarding", "monolithic"):
            raise ValueError("method must be forwarding or monolithic")
        if self.succeeded and not self.rho_closed_loop < 1.0:
            raise ValueError("succeeded rows must have rho_closed_loop < 1")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _load_system_csv(path) -> LtiSystem:
    rows = [tuple(float(v) for v in ln.split(","))
            for ln in Path(path).read_text().strip().splitlines()]
    ab = np.array(rows, dtype=float)
    n = ab.shape[0]
    if ab.shape[1] <= n:
        raise ValueError(f"{path}: expected an [A|B] block with more cols than rows")
    return LtiSystem(a=ab[:, :n], b=ab[:, n:])


def _cascade(cfg: RunConfig, n_stages: int) -> CascadeSystem:
    if cfg.system == "fixture":
        return fixture_cascade(n_stages)
    stages = [_load_system_csv(cfg.system_paths[i % len(cfg.system_paths)])
              for i in range(n_stages)]
    return CascadeSystem(stages=tuple(stages))


def _run_dir(cfg: RunConfig) -> Path:
    run = Path(cfg.out_dir) / f"{cfg.mode}-seed{cfg.seed}"
    run.mkdir(parents=True, exist_ok=True)
    return run


def _echo_config(cfg: RunConfig, run: Path) -> None:
    data = asdict(cfg)
    data["system_paths"] = list(data["system_paths"])
    data["alpha_grid"] = list(data["alpha_grid"])
    data["menu"] = list(data["menu"])
    (run / "run_config.json").write_text(
        json.dumps(data, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _collect_into(cfg: RunConfig, run: Path):
    """Simulate the configured cascade and persist the per-stage batches."""
    truth = _cascade(cfg, cfg.n_stages)
    rng = np.random.default_rng(cfg.seed)
    u1 = rng.standard_normal((truth.control_dim, cfg.t))
    x0s = [rng.standard_normal(d) for d in truth.dims]
    noisy = cfg.noise_bound > 0 or cfg.process_bound > 0
    noise = (NoiseSpec(cfg.noise_bound, cfg.process_bound, seed=cfg.seed + 1)
             if noisy else None)
    xs, xs_bar, ledgers = simulate_cascade(truth, x0s, u1, noise)
    batches = cascade_batches(xs_bar, u1, cfg.t)
    for i, batch in enumerate(batches, start=1):
        save_batch(batch, run / "batches" / f"stage_{i}")
    return truth, xs, xs_bar, ledgers, u1


def _load_batches(cfg: RunConfig, run: Path):
    base = Path(cfg.batches_dir) if cfg.batches_dir else run / "batches"
    batches = []
    for i in range(1, cfg.n_stages + 1):
        batches.append(load_batch(base / f"stage_{i}"))
    return batches


def _run_cells(cells):
    """Execute independent sweep cells; hand results back in a dict.

    Cells carry their own seeds, so the outcome is independent of
    scheduling; the caller writes rows in key order (the ordered sink).
    """
    results = {}
    workers = min(_MAX_WORKERS, len(cells)) or 1
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(fn): key for key, fn in cells}
        for fut, key in futures.items():
            results[key] = fut.result()
    return results


# ---------------------------------------------------------------------------
# modes
# ---------------------------------------------------------------------------

def cmd_collect(cfg: RunConfig) -> int:
    run = _run_dir(cfg)
    _echo_config(cfg, run)
    _collect_into(cfg, run)
    print(f"batches written under {run / 'batches'}")
    return 0


def _design_from_config(cfg: RunConfig, run: Path):
    """Collect (unless batches are supplied), then run the right pipeline."""
    truth = _cascade(cfg, cfg.n_stages)
    if not cfg.batches_dir:
        _collect_into(cfg, run)
    batches = _load_batches(cfg, run)
    noisy = cfg.noise_bound > 0 or cfg.process_bound > 0
    if cfg.mode == "design2" or (cfg.mode == "verify" and cfg.n_stages == 2):
        if len(batches) != 2:
            raise ValueError("two-stage design needs exactly two batches")
        if noisy:
            ctrl, trace = design_2cascade_noisy(batches[0], batches[1])
        else:
            ctrl, trace = design_2cascade(batches[0], batches[1])
    else:
        ctrl, trace = design_ncascade(batches, menu=cfg.menu)
    return truth, batches, ctrl, trace


def cmd_design2(cfg: RunConfig) -> int:
    run = _run_dir(cfg)
    _echo_config(cfg, run)
    truth, _, ctrl, trace = _design_from_config(cfg, run)
    rho = eigvals(true_closed_loop(truth, ctrl)).radius
    save_controller(ctrl, run / "controller", mode=trace.notes["mode"],
                    summary={"rho_true": rho})
    print(f"controller written under {run / 'controller'} (rho {rho:.6f})")
    return 0


def cmd_design_n(cfg: RunConfig) -> int:
    return cmd_design2(cfg)


def cmd_verify(cfg: RunConfig) -> int:
    """Re-derive the design, close the loop, and record the trajectories."""
    run = _run_dir(cfg)
    _echo_config(cfg, run)
    truth, _, ctrl, trace = _design_from_config(cfg, run)
    rho = eigvals(true_closed_loop(truth, ctrl)).radius
    save_controller(ctrl, run / "controller", mode=trace.notes["mode"],
                    summary={"rho_true": rho})

    rng = np.random.default_rng(cfg.seed + 2)
    x0s = [rng.standard_normal(d) for d in truth.dims]
    noisy = cfg.noise_bound > 0 or cfg.process_bound > 0
    noise = (NoiseSpec(cfg.noise_bound, cfg.process_bound, seed=cfg.seed + 3)
             if noisy else None)
    xs, _, ledgers = simulate_closed_loop(truth, ctrl, x0s, cfg.steps, noise)

    ks = np.arange(cfg.steps + 1)
    norms = [np.linalg.norm(x, axis=0) for x in xs]
    header = ["k"] + [f"stage_{i}_norm" for i in range(1, truth.n_stages + 1)]
    rows = [[int(k)] + [norms[i][k] for i in range(truth.n_stages)] for k in ks]
    _write_csv(run / "tables" / "trajectory.csv", header, rows)
    emit_plot([(f"stage {i + 1}", ks.tolist(), norms[i].tolist())
               for i in range(truth.n_stages)],
              {"title": "closed-loop state norms", "xlabel": "k",
               "ylabel": "||x_i(k)||",
               "path": run / "plots" / "trajectory.svg"})

    summary = {"rho_true": rho, "mode": trace.notes["mode"]}
    if noisy and truth.n_stages == 2:
        summary["iss"] = _verify_iss(truth, ctrl, xs, ledgers, run)
    (run / "tables" / "verify_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"verification artefacts written under {run}")
    return 0


def _verify_iss(truth, ctrl, xs, ledgers, run: Path) -> dict:
    a1, b1 = truth.stages[0].a, truth.stages[0].b
    acl1 = a1 + b1 @ ctrl.gains[0]
    try:
        ups_true = solve_oracle(SylvesterProblem(
            a1=acl1, a2=truth.stages[1].a, b2=truth.stages[1].b,
            c1=np.eye(truth.dims[0])))
    except StageError as exc:
        return {"status": f"oracle transform unavailable: {exc}"}
    delta = ups_true - ctrl.transforms[0]
    cl = closed_loop_assemble(truth, ctrl, delta_ups=delta)
    try:
        cert = small_gain_check(cl)
    except ValueError as exc:
        return {"status": f"small-gain not applicable: {exc}"}
    if not cert.holds:
        return {"status": "small-gain failed", "lhs": cert.smallgain_lhs}
    ok, slack = iss_verify(truth, xs, ledgers, ctrl, cert)
    _write_csv(run / "tables" / "iss_margin.csv", ["k", "slack"],
               [[k, s] for k, s in enumerate(slack)])
    return {"status": "checked", "holds_everywhere": bool(ok),
            "min_slack": float(np.min(slack)), "lhs": cert.smallgain_lhs}


def _forwarding_cell(cfg: RunConfig, n: int, seed: int):
    casc = _cascade(cfg, n)
    t_lo = tmin("forwarding", (casc.control_dim,) + casc.dims)
    start = time.perf_counter()
    for t_try in range(t_lo, 2 * t_lo + 1):
        rng = np.random.default_rng(seed)
        u1 = rng.standard_normal((casc.control_dim, t_try))
        x0s = [rng.standard_normal(d) for d in casc.dims]
        xs, _, _ = simulate_cascade(casc, x0s, u1)
        try:
            ctrl, _ = design_ncascade(cascade_batches(xs, u1, t_try),
                                      menu=cfg.menu)
        except StageError:
            continue
        rho = eigvals(true_closed_loop(casc, ctrl)).radius
        if rho < 1.0:
            ms = (time.perf_counter() - start) * 1e3
            return SweepRow(n, "forwarding", t_lo, t_try, True, rho, ms)
    ms = (time.perf_counter() - start) * 1e3
    return SweepRow(n, "forwarding", t_lo, 2 * t_lo, False, float("nan"), ms)


def _monolithic_cell(cfg: RunConfig, n: int, seed: int):
    casc = _cascade(cfg, n)
    mono = monolithic_system(casc)
    t_lo = tmin("monolithic", (casc.control_dim,) + casc.dims)
    start = time.perf_counter()
    for t_try in range(t_lo, 2 * t_lo + 1):
        rng = np.random.default_rng(seed)
        u = rng.standard_normal((mono.m, t_try))
        x0 = rng.standard_normal(mono.n)
        x, _, _ = simulate(mono, x0, u)
        try:
            cert = design_gain(build_batch(x, u, t_try))
        except StageError:
            continue
        rho = eigvals(mono.a + mono.b @ cert.k).radius
        if rho < 1.0:
            ms = (time.perf_counter() - start) * 1e3
            return SweepRow(n, "monolithic", t_lo, t_try, True, rho, ms)
    ms = (time.perf_counter() - start) * 1e3
    return SweepRow(n, "monolithic", t_lo, 2 * t_lo, False, float("nan"), ms)


def cmd_sweep_n(cfg: RunConfig) -> int:
    """Data length needed to stabilise a growing cascade, per method.

    Each cell starts at the method's theoretical minimum length and
    escalates one column at a time up to twice that minimum before
    declaring failure.
    """
    run = _run_dir(cfg)
    _echo_config(cfg, run)
    cells = []
    for n in range(2, cfg.n_max + 1):
        for mi, (method, fn) in enumerate(
                (("forwarding", _forwarding_cell),
                 ("monolithic", _monolithic_cell))):
            seed = cfg.seed + 7919 * n + 104729 * mi
            cells.append(((n, method),
                          (lambda f=fn, nn=n, s=seed: f(cfg, nn, s))))
    results = _run_cells(cells)
    rows = [results[key] for key in sorted(results)]
    for row in rows:
        if row.succeeded and not row.rho_closed_loop < 1.0:
            raise ValueError("refusing to persist a non-contractive success")
    _write_csv(run / "tables" / "sweep_n.csv",
               ["n", "method", "t_min_theory", "t_used", "succeeded",
                "rho_closed_loop"],
               [[r.n, r.method, r.t_min_theory, r.t_used, r.succeeded,
                 r.rho_closed_loop] for r in rows])
    series = []
    for method in ("forwarding", "monolithic"):
        pts = [(r.n, r.t_used) for r in rows
               if r.method == method and r.succeeded]
        series.append((method, [p[0] for p in pts], [p[1] for p in pts]))
    emit_plot(series, {"title": "data length to stabilise",
                       "xlabel": "number of stages",
                       "ylabel": "T used",
                       "path": run / "plots" / "sweep_n.svg"})
    print(f"sweep table written under {run / 'tables'}")
    return 0


def _robust_alpha(r_true, xp_bar, batch, grid):
    """Smallest admissible-and-feasible level, else the feasibility edge.

    Returns ``(alpha, admissible)``; ``admissible`` is False when no grid
    point passes the oracle signal-to-noise test and the largest feasible
    level is used instead (design still returned, no guarantee attached).
    """
    try:
        alpha, _ = alpha_search(r_true, xp_bar, batch, grid)
        return float(alpha), True
    except StageError:
        pass
    for alpha in np.sort(np.asarray(grid, dtype=float))[::-1]:
        try:
            design_gain_robust(batch, float(alpha))
            return float(alpha), False
        except StageError:
            continue
    raise StageError("lmi", "robust design infeasible over the whole alpha grid")


def _noise_cell(cfg: RunConfig, cap: float, method: str, seed: int):
    truth = _cascade(cfg, 2)
    a1, b1 = truth.stages[0].a, truth.stages[0].b
    a2, b2 = truth.stages[1].a, truth.stages[1].b
    rng = np.random.default_rng(seed)
    u1 = rng.standard_normal((truth.control_dim, cfg.t))
    x0s = [rng.standard_normal(d) for d in truth.dims]
    noise = NoiseSpec(cap, cfg.process_bound, seed=seed + 1)
    _, xs_bar, ledgers = simulate_cascade(truth, x0s, u1, noise)
    batch1, batch2 = cascade_batches(xs_bar, u1, cfg.t)
    r1 = encapsulated_noise(truth.stages[0], ledgers[0])
    r2 = encapsulated_noise(truth.stages[1], ledgers[1])
    grid = (np.asarray(cfg.alpha_grid, dtype=float) if cfg.alpha_grid
            else DEFAULT_ALPHA_GRID)
    nan = float("nan")
    row = {"cap": cap, "method": method, "snr_ok": False, "feasible": False,
           "rho": nan, "delta_ups_norm": nan, "bound": nan, "ratio": nan}

    try:
        if method == "robust":
            alpha1, adm1 = _robust_alpha(r1, batch1.x_plus, batch1, grid)
            probe1 = design_gain_robust(batch1, alpha1)
            g_n1, _ = min_norm_solve(
                np.vstack([batch1.x_minus, batch1.u_minus]),
                np.vstack([np.eye(batch1.n), probe1.k]))
            a1_bar = batch1.x_plus @ g_n1
            syl = solve_empirical_noisy(batch2, a1_bar, np.eye(batch1.n))
            z_minus = batch2.x_minus - syl.theta @ batch1.x_minus
            z_plus = batch2.x_plus - syl.theta @ batch1.x_plus
            v_minus = batch1.u_minus - probe1.k @ batch1.x_minus
            zbatch = DataBatch(x_minus=z_minus, x_plus=z_plus,
                               u_minus=v_minus, t=cfg.t)
            r_zeta = build_r_zeta(r2, batch2.x_minus, syl.g, r1, g_n1,
                                  batch1.x_minus)
            alpha2, adm2 = _robust_alpha(r_zeta, z_plus, zbatch, grid)
            row["snr_ok"] = bool(adm1 and adm2)
            ctrl, trace = design_2cascade_noisy(batch1, batch2,
                                                alphas=(alpha1, alpha2))
        else:
            ctrl, trace = design_2cascade_noisy(batch1, batch2)
            g_n1 = trace.notes["g_n1"]
            syl = trace.records[1].syl_cert
            z_plus = batch2.x_plus - syl.theta @ batch1.x_plus
            r_zeta = build_r_zeta(r2, batch2.x_minus, syl.g, r1, g_n1,
                                  batch1.x_minus)
            adm1 = admissible_alphas(r1, batch1.x_plus, grid).size > 0
            adm2 = admissible_alphas(r_zeta, z_plus, grid).size > 0
            row["snr_ok"] = bool(adm1 and adm2)
    except StageError:
        return row

    row["feasible"] = True
    row["rho"] = eigvals(true_closed_loop(truth, ctrl)).radius
    acl1 = a1 + b1 @ ctrl.gains[0]
    try:
        ups_true = solve_oracle(SylvesterProblem(a1=acl1, a2=a2, b2=b2,
                                                 c1=np.eye(truth.dims[0])))
        delta = ups_true - ctrl.transforms[0]
        row["delta_ups_norm"] = float(np.linalg.norm(delta, 2))
        syl_cert = (trace.records[1].syl_cert if method == "nominal" else syl)
        report, _ = error_bound_upsilon(syl_cert, r1, r2, g_n1,
                                        batch2.x_minus, acl1, a2,
                                        delta_ups=delta)
        row["bound"] = report.bound
        row["ratio"] = report.bound / max(row["delta_ups_norm"], 1e-300)
    except StageError:
        pass
    return row


def cmd_noise_sweep(cfg: RunConfig) -> int:
    """Noisy two-stage pipeline across measurement-noise caps 1e-1..1e-8."""
    run = _run_dir(cfg)
    _echo_config(cfg, run)
    caps = [10.0 ** (-i) for i in range(1, 9)]
    cells = []
    for ci, cap in enumerate(caps):
        for mi, method in enumerate(("nominal", "robust")):
            seed = cfg.seed + 7919 * ci + 104729 * mi
            cells.append(((ci, method),
                          (lambda c=cap, m=method, s=seed:
                           _noise_cell(cfg, c, m, s))))
    results = _run_cells(cells)
    header = ["cap", "method", "snr_ok", "feasible", "rho",
              "delta_ups_norm", "bound", "ratio"]
    rows = [results[key] for key in sorted(results)]
    _write_csv(run / "tables" / "noise_sweep.csv", header,
               [[r[h] for h in header] for r in rows])
    print(f"noise sweep written under {run / 'tables'}")
    return 0


# ---------------------------------------------------------------------------
# plotting
# ---------------------------------------------------------------------------

def emit_plot(series, spec) -> str:
    """Render line series into a deterministic SVG document.

    ``series`` is a list of (label, xs, ys); ``spec`` maps title / xlabel /
    ylabel and an optional path.  Coordinates and tick labels use fixed
    precision and nothing time- or environment-dependent is emitted, so
    identical input yields identical bytes.
    """
    series = [(str(lbl), list(map(float, xs)), list(map(float, ys)))
              for lbl, xs, ys in series]
    pts = [(x, y) for _, xs, ys in series for x, y in zip(xs, ys)
           if np.isfinite(x) and np.isfinite(y)]
    if not pts:
        raise ValueError("emit_plot needs at least one finite data point")
    xmin, xmax = min(p[0] for p in pts), max(p[0] for p in pts)
    ymin, ymax = min(p[1] for p in pts), max(p[1] for p in pts)
    if xmax - xmin < 1e-12:
        xmin, xmax = xmin - 1.0, xmax + 1.0
    if ymax - ymin < 1e-12:
        ymin, ymax = ymin - 1.0, ymax + 1.0
    width, height = 640, 480
    ml, mr, mt, mb = 70, 20, 40, 55

    def sx(v):
        return ml + (v - xmin) / (xmax - xmin) * (width - ml - mr)

    def sy(v):
        return height - mb - (v - ymin) / (ymax - ymin) * (height - mt - mb)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" '
           f'font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    out.append(f'<text x="{width / 2:.2f}" y="22" text-anchor="middle" '
               f'font-size="15">{spec.get("title", "")}</text>')
    out.append(f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" '
               f'y2="{height - mb}" stroke="black"/>')
    out.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" '
               f'stroke="black"/>')
    for i in range(5):
        xv = xmin + (xmax - xmin) * i / 4
        yv = ymin + (ymax - ymin) * i / 4
        out.append(f'<line x1="{sx(xv):.2f}" y1="{height - mb}" '
                   f'x2="{sx(xv):.2f}" y2="{height - mb + 5}" stroke="black"/>')
        out.append(f'<text x="{sx(xv):.2f}" y="{height - mb + 18}" '
                   f'text-anchor="middle">{"%g" % round(xv, 6)}</text>')
        out.append(f'<line x1="{ml - 5}" y1="{sy(yv):.2f}" x2="{ml}" '
                   f'y2="{sy(yv):.2f}" stroke="black"/>')
        out.append(f'<text x="{ml - 8}" y="{sy(yv) + 4:.2f}" '
                   f'text-anchor="end">{"%g" % round(yv, 6)}</text>')
    out.append(f'<text x="{(ml + width - mr) / 2:.2f}" y="{height - 12}" '
               f'text-anchor="middle">{spec.get("xlabel", "")}</text>')
    out.append(f'<text x="16" y="{(mt + height - mb) / 2:.2f}" '
               f'text-anchor="middle" transform="rotate(-90 16 '
               f'{(mt + height - mb) / 2:.2f})">{spec.get("ylabel", "")}</text>')
    for si, (label, xs, ys) in enumerate(series):
        color = _PLOT_COLORS[si % len(_PLOT_COLORS)]
        fine = [(x, y) for x, y in zip(xs, ys)
                if np.isfinite(x) and np.isfinite(y)]
        if not fine:
            continue
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in fine)
        out.append(f'<polyline points="{coords}" fill="none" '
                   f'stroke="{color}" stroke-width="1.5"/>')
        for x, y in fine:
            out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" '
                       f'fill="{color}"/>')
        ly = mt + 16 * si
        out.append(f'<line x1="{width - mr - 140}" y1="{ly}" '
                   f'x2="{width - mr - 115}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="1.5"/>')
        out.append(f'<text x="{width - mr - 110}" y="{ly + 4}">{label}</text>')
    out.append("</svg>")
    doc = "\n".join(out) + "\n"
    if spec.get("path"):
        path = Path(spec["path"])
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(doc)
    return doc


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "collect": cmd_collect,
    "design2": cmd_design2,
    "designN": cmd_design_n,
    "sweep-n": cmd_sweep_n,
    "noise-sweep": cmd_noise_sweep,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="forwardctl",
        description="data-driven forwarding-control benchmarks")
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", required=True, help="JSON run config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config (and env) seed")
    parser.add_argument("--out", default=None, help="override the output dir")
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.from_json(args.config, mode=args.mode)
        seed = cfg.seed
        if "FORWARDCTL_SEED" in os.environ:
            seed = int(os.environ["FORWARDCTL_SEED"])
        if args.seed is not None:
            seed = args.seed
        cfg = replace(cfg, seed=seed)
        if args.out is not None:
            cfg = replace(cfg, out_dir=args.out)
        return _COMMANDS[cfg.mode](cfg)
    except StageError as exc:
        print(f"forwardctl: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"forwardctl: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]


if __name__ == "__main__":
    sys.exit(main())
