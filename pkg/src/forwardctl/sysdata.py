"""System models, simulation, and experiment-data handling.

Covers discrete-time LTI systems and cascades of them, simulation with
bounded process/measurement noise, assembly of shifted data matrices from
trajectories, persistency-of-excitation rank checks, and the ground-truth
noise ledger used only by oracle-side analysis (never by the design path).
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import min_norm_solve, numerical_rank

__all__ = [
    "LtiSystem",
    "CascadeSystem",
    "NoiseSpec",
    "DataBatch",
    "NoiseLedger",
    "simulate",
    "simulate_cascade",
    "build_batch",
    "cascade_batches",
    "monolithic_system",
    "rank_check",
    "rank_check_pair",
    "informativity_residual",
    "encapsulated_noise",
    "pe_input_gen",
    "save_batch",
    "load_batch",
    "fixture_system",
    "fixture_cascade",
]

_FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class LtiSystem:
    """x(k+1) = a x(k) + b u(k)."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        b = np.atleast_2d(np.asarray(self.b, dtype=float))
        if a.shape[0] != a.shape[1]:
            raise ValueError("state matrix must be square")
        if b.shape[0] != a.shape[0]:
            raise ValueError("input matrix row count must match state dimension")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def m(self) -> int:
        return self.b.shape[1]


@dataclass(frozen=True)
class CascadeSystem:
    """Chain of LTI stages where stage i >= 2 is driven by state i-1.

    Stage 1 keeps an exogenous control input; for every later stage the
    input dimension must equal the previous stage's state dimension.
    """

    stages: tuple[LtiSystem, ...]

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise ValueError("cascade needs at least one stage")
        for i in range(1, len(stages)):
            if stages[i].m != stages[i - 1].n:
                raise ValueError(
                    f"stage {i + 1} input dim {stages[i].m} != "
                    f"stage {i} state dim {stages[i - 1].n}"
                )
        object.__setattr__(self, "stages", stages)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(s.n for s in self.stages)

    @property
    def control_dim(self) -> int:
        return self.stages[0].m


@dataclass(frozen=True)
class NoiseSpec:
    """Entrywise-uniform noise caps plus the generator seed.

    measurement_bound caps each entry of the state-measurement error,
    process_bound caps each entry of the additive disturbance d(k).
    """

    measurement_bound: float
    process_bound: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.measurement_bound < 0 or self.process_bound < 0:
            raise ValueError("noise bounds must be nonnegative")


@dataclass(frozen=True)
class DataBatch:
    """Shifted data blocks (x_minus, x_plus, u_minus) sharing T columns."""

    x_minus: np.ndarray
    x_plus: np.ndarray
    u_minus: np.ndarray
    t: int

    def __post_init__(self):
        xm = np.atleast_2d(np.asarray(self.x_minus, dtype=float))
        xp = np.atleast_2d(np.asarray(self.x_plus, dtype=float))
        um = np.atleast_2d(np.asarray(self.u_minus, dtype=float))
        if not (xm.shape[1] == xp.shape[1] == um.shape[1] == self.t):
            raise ValueError("all blocks must share the column count t")
        if self.t < 1:
            raise ValueError("batch needs at least one column")
        if xm.shape[0] != xp.shape[0]:
            raise ValueError("x_minus and x_plus row counts differ")
        object.__setattr__(self, "x_minus", xm)
        object.__setattr__(self, "x_plus", xp)
        object.__setattr__(self, "u_minus", um)

    @property
    def n(self) -> int:
        return self.x_minus.shape[0]

    @property
    def m(self) -> int:
        return self.u_minus.shape[0]


@dataclass(frozen=True)
class NoiseLedger:
    """Ground-truth noise samples aligned with a DataBatch.

    Oracle-side only: holds the exact measurement errors on the shifted
    blocks (dx_minus, dx_plus), on the input block (du_minus), and the
    process disturbance (d_minus).  The design path must never read it.
    """

    dx_minus: np.ndarray
    dx_plus: np.ndarray
    du_minus: np.ndarray
    d_minus: np.ndarray


def simulate(sys: LtiSystem, x0, u, noise: NoiseSpec | None = None):
    """Roll out x(k+1) = A x(k) + B u(k) + d(k) for T = u.shape[1] steps.

    Returns ``(x, x_bar, ledger)`` where x is the true n-by-(T+1)
    trajectory.  Without noise, x_bar is x and ledger is None.  With a
    NoiseSpec, x_bar = x + dx with dx entrywise uniform on
    [-measurement_bound, measurement_bound], d entrywise uniform on
    [-process_bound, process_bound], both from the seeded generator, and
    the ledger carries the batch-aligned slices of dx, du (zero: the
    control is known exactly), and d.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if x0.size != sys.n:
        raise ValueError("x0 length must equal the state dimension")
    if u.shape[0] != sys.m:
        raise ValueError("input row count must equal the input dimension")
    t = u.shape[1]
    rng = np.random.default_rng(noise.seed) if noise is not None else None
    if noise is not None:
        dx = rng.uniform(-noise.measurement_bound, noise.measurement_bound,
                         size=(sys.n, t + 1))
        d = (rng.uniform(-noise.process_bound, noise.process_bound, size=(sys.n, t))
             if noise.process_bound > 0 else np.zeros((sys.n, t)))
    else:
        dx = np.zeros((sys.n, t + 1))
        d = np.zeros((sys.n, t))
    x = np.empty((sys.n, t + 1))
    x[:, 0] = x0
    for k in range(t):
        x[:, k + 1] = sys.a @ x[:, k] + sys.b @ u[:, k] + d[:, k]
    if noise is None:
        return x, x, None
    ledger = NoiseLedger(dx_minus=dx[:, :t], dx_plus=dx[:, 1:],
                         du_minus=np.zeros((sys.m, t)), d_minus=d)
    return x, x + dx, ledger


def simulate_cascade(casc: CascadeSystem, x0s, u1, noise=None):
    """Simulate every stage of a cascade; stage i >= 2 sees the TRUE x_{i-1}.

    ``noise`` may be None, one NoiseSpec shared by all stages (samples drawn
    sequentially from a single seeded generator), or a per-stage list.
    Returns ``(xs, xs_bar, ledgers)``, lists over stages.  For stage i >= 2
    the ledger's du_minus is the measurement error of the previous stage's
    x_minus block, because that corrupted trajectory is what a designer
    would use as the stage input data.
    """
    u1 = np.atleast_2d(np.asarray(u1, dtype=float))
    t = u1.shape[1]
    ns = casc.n_stages
    x0s = [np.asarray(x, dtype=float).reshape(-1) for x in x0s]
    if len(x0s) != ns:
        raise ValueError("need one initial state per stage")
    if noise is None:
        specs = [None] * ns
        rngs = [None] * ns
    elif isinstance(noise, NoiseSpec):
        shared = np.random.default_rng(noise.seed)
        specs = [noise] * ns
        rngs = [shared] * ns
    else:
        specs = list(noise)
        if len(specs) != ns:
            raise ValueError("need one NoiseSpec per stage")
        rngs = [np.random.default_rng(sp.seed) if sp is not None else None
                for sp in specs]

    xs, dxs, ds = [], [], []
    for i, stage in enumerate(casc.stages):
        if x0s[i].size != stage.n:
            raise ValueError(f"x0 for stage {i + 1} has wrong length")
        sp, rng = specs[i], rngs[i]
        if sp is not None:
            dx = rng.uniform(-sp.measurement_bound, sp.measurement_bound,
                             size=(stage.n, t + 1))
            d = (rng.uniform(-sp.process_bound, sp.process_bound,
                             size=(stage.n, t))
                 if sp.process_bound > 0 else np.zeros((stage.n, t)))
        else:
            dx = np.zeros((stage.n, t + 1))
            d = np.zeros((stage.n, t))
        drive = u1 if i == 0 else xs[i - 1][:, :t]
        x = np.empty((stage.n, t + 1))
        x[:, 0] = x0s[i]
        for k in range(t):
            x[:, k + 1] = stage.a @ x[:, k] + stage.b @ drive[:, k] + d[:, k]
        xs.append(x)
        dxs.append(dx)
        ds.append(d)

    xs_bar = [x + dx for x, dx in zip(xs, dxs)]
    ledgers = []
    for i in range(ns):
        if specs[i] is None and (i == 0 or specs[i - 1] is None):
            ledgers.append(None)
            continue
        du = (np.zeros((casc.stages[0].m, t)) if i == 0 else dxs[i - 1][:, :t])
        ledgers.append(NoiseLedger(dx_minus=dxs[i][:, :t], dx_plus=dxs[i][:, 1:],
                                   du_minus=du, d_minus=ds[i]))
    return xs, xs_bar, ledgers


def build_batch(trajectory, u, t: int) -> DataBatch:
    """Slice a trajectory and input record into shifted data blocks."""
    trajectory = np.atleast_2d(np.asarray(trajectory, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if trajectory.shape[1] < t + 1:
        raise ValueError(f"trajectory has {trajectory.shape[1]} columns, need {t + 1}")
    if u.shape[1] < t:
        raise ValueError(f"input record has {u.shape[1]} columns, need {t}")
    return DataBatch(x_minus=trajectory[:, :t], x_plus=trajectory[:, 1:t + 1],
                     u_minus=u[:, :t], t=t)


def cascade_batches(xs_bar, u1, t: int) -> list:
    """Per-stage batches as a designer would assemble them.

    Stage 1 pairs its (measured) trajectory with the exogenous input; each
    later stage uses the previous stage's measured trajectory as its input
    record.  Pass the true trajectories for the noise-free setting.
    """
    u1 = np.atleast_2d(np.asarray(u1, dtype=float))
    batches = [build_batch(xs_bar[0], u1, t)]
    for i in range(1, len(xs_bar)):
        batches.append(build_batch(xs_bar[i], xs_bar[i - 1], t))
    return batches


def monolithic_system(casc: CascadeSystem) -> LtiSystem:
    """The cascade flattened into a single system with the stacked state.

    The state matrix is block lower bidiagonal (each stage fed by the one
    above); only the first stage sees the control input.
    """
    dims = casc.dims
    n = sum(dims)
    a = np.zeros((n, n))
    b = np.zeros((n, casc.control_dim))
    row = 0
    for i, stage in enumerate(casc.stages):
        a[row:row + stage.n, row:row + stage.n] = stage.a
        if i == 0:
            b[:stage.n, :] = stage.b
        else:
            a[row:row + stage.n, row - dims[i - 1]:row] = stage.b
        row += stage.n
    return LtiSystem(a=a, b=b)


def rank_check(batch: DataBatch):
    """Numerical rank of [X-; U-]; ok iff it equals n + m (full row rank)."""
    stacked = np.vstack([batch.x_minus, batch.u_minus])
    r = numerical_rank(stacked)
    return r, r == batch.n + batch.m


def rank_check_pair(top, bottom):
    """Rank of the stack [top; bottom]; ok iff it has full row rank."""
    top = np.atleast_2d(np.asarray(top, dtype=float))
    bottom = np.atleast_2d(np.asarray(bottom, dtype=float))
    r = numerical_rank(np.vstack([top, bottom]))
    return r, r == top.shape[0] + bottom.shape[0]


def informativity_residual(batch: DataBatch, target) -> float:
    """Least-squares defect of [X-; U-] G = target.

    Zero (up to roundoff) certifies that the target's columns lie in the
    image of the stacked data — the solvability condition behind every
    data-driven construction in this package.
    """
    target = np.atleast_2d(np.asarray(target, dtype=float))
    if target.shape[0] != batch.n + batch.m:
        raise ValueError("target row count must equal n + m")
    _, res = min_norm_solve(np.vstack([batch.x_minus, batch.u_minus]), target)
    return res


def encapsulated_noise(sys: LtiSystem, ledger: NoiseLedger) -> np.ndarray:
    """Combined noise block R- = A dX- - dX+ + B dU- - D-.

    Ground-truth oracle: needs the true (A, B) and the exact ledger, so it
    is only available in tests and bound evaluation.  Satisfies the
    reconstruction identity x_plus_bar = A x_minus_bar + B u_minus_bar - R-.
    """
    dxm = np.atleast_2d(np.asarray(ledger.dx_minus, dtype=float))
    dxp = np.atleast_2d(np.asarray(ledger.dx_plus, dtype=float))
    dum = np.atleast_2d(np.asarray(ledger.du_minus, dtype=float))
    dm = np.atleast_2d(np.asarray(ledger.d_minus, dtype=float))
    if dxm.shape[0] != sys.n or dum.shape[0] != sys.m:
        raise ValueError("ledger shapes do not match the system dimensions")
    return sys.a @ dxm - dxp + sys.b @ dum - dm


def pe_input_gen(m: int, t: int, seed) -> np.ndarray:
    """m-by-t standard-normal input record from the seeded generator."""
    if m < 1 or t < 1:
        raise ValueError("m and t must be positive")
    return np.random.default_rng(seed).standard_normal((m, t))


def save_batch(batch: DataBatch, directory) -> None:
    """Write x_minus.csv / x_plus.csv / u_minus.csv into a directory.

    Schema per file: header ``kind,rows,cols``, one metadata row, then the
    matrix values row by row at full precision.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for kind, mat in (("x_minus", batch.x_minus), ("x_plus", batch.x_plus),
                      ("u_minus", batch.u_minus)):
        lines = ["kind,rows,cols", f"{kind},{mat.shape[0]},{mat.shape[1]}"]
        for row in mat:
            lines.append(",".join(_FLOAT_FMT % v for v in row))
        (directory / f"{kind}.csv").write_text("\n".join(lines) + "\n")


def load_batch(directory) -> DataBatch:
    """Read a batch previously written by :func:`save_batch`."""
    directory = Path(directory)
    blocks = {}
    for kind in ("x_minus", "x_plus", "u_minus"):
        path = directory / f"{kind}.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing batch block file: {path}")
        lines = path.read_text().strip().splitlines()
        if len(lines) < 2 or lines[0] != "kind,rows,cols":
            raise ValueError(f"malformed batch file: {path}")
        name, rows, cols = lines[1].split(",")
        rows, cols = int(rows), int(cols)
        if name != kind:
            raise ValueError(f"{path} declares kind {name!r}")
        vals = [tuple(float(v) for v in ln.split(",")) for ln in lines[2:2 + rows]]
        mat = np.array(vals, dtype=float).reshape(rows, cols)
        blocks[kind] = mat
    t = blocks["x_minus"].shape[1]
    return DataBatch(x_minus=blocks["x_minus"], x_plus=blocks["x_plus"],
                     u_minus=blocks["u_minus"], t=t)


def _load_fixture_csv(name: str) -> np.ndarray:
    ref = importlib.resources.files("forwardctl") / "fixtures" / name
    rows = [tuple(float(v) for v in ln.split(","))
            for ln in ref.read_text().strip().splitlines()]
    return np.array(rows, dtype=float)


def fixture_system(which: int) -> LtiSystem:
    """Bundled benchmark pair: which = 1 or 2 selects [A1|B1] or [A2|B2]."""
    if which not in (1, 2):
        raise ValueError("fixture_system expects 1 or 2")
    ab = _load_fixture_csv(f"sys{which}_ab.csv")
    n = ab.shape[0]
    return LtiSystem(a=ab[:, :n], b=ab[:, n:])


def fixture_cascade(n_stages: int) -> CascadeSystem:
    """Alternating benchmark cascade: stages 1,3,5,... use the first pair."""
    if n_stages < 1:
        raise ValueError("need at least one stage")
    s1, s2 = fixture_system(1), fixture_system(2)
    return CascadeSystem(stages=tuple(s1 if i % 2 == 0 else s2
                                      for i in range(n_stages)))
