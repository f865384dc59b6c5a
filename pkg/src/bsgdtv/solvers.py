"""Block-stochastic solver with a stale gradient, plus reference baselines.

The main iteration snapshots (x, r) once per outer step, computes per-block
forward products and transposed-gradient products for a randomly drawn set of
(row-block, column-block) pairs, commits the cached forward contributions,
rebuilds the residual r = y - sum_j z^j, takes the gradient step
x <- x + mu * sum 2 A_block^T r, and finishes with a TV prox.  Because the
gradient uses the residual cached from the previous step, the linear part of
the dynamics follows x^{k+1} = x^k + 2 mu A^T (y - A x^{k-1}), which is what
the spectral module analyzes.

All reductions happen on the driver thread in ascending block order, so
results are bitwise identical for any worker count.  Epochs count normalized
work: one epoch equals one full pass over every block pair.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .blockops import BlockOperator, assemble_residual
from .metrics import objective_value, relative_error
from .tv import PixelLayout, ProxSettings, tv_prox

SOLVER_KINDS = ("bsgd", "ista", "gd", "admm")


@dataclass(frozen=True)
class SolverConfig:
    """Run parameters shared by all solver kinds.

    ``alpha`` and ``gamma`` are the fractions of column and row blocks drawn
    each iteration (1.0 = full sweep).  ``rho`` and ``cg_iters`` only matter
    for the ADMM baseline.  When ``enforce_decrease`` is set the step is
    halved (at most ``max_halvings`` times) until the two-point sufficient
    decrease test passes.
    """

    mu: float
    lam: float = 0.0
    alpha: float = 1.0
    gamma: float = 1.0
    epochs: float = 200
    seed: int = 0
    prox: ProxSettings = field(default_factory=ProxSettings)
    rho: float = 1.0
    cg_iters: int = 5
    monitor_decrease: bool = True
    enforce_decrease: bool = False
    max_halvings: int = 20
    divergence_limit: float = 1e6

    def __post_init__(self) -> None:
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        for name, frac in (("alpha", self.alpha), ("gamma", self.gamma)):
            if not 0 < frac <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.cg_iters < 1:
            raise ValueError("cg_iters must be >= 1")
        if self.max_halvings < 0:
            raise ValueError("max_halvings must be nonnegative")
        if not self.divergence_limit > 0:
            raise ValueError("divergence_limit must be positive")


@dataclass
class Problem:
    """A linear inverse problem instance handed to :func:`run_solver`.

    ``layout`` ties solution-vector entries to image pixels and is required
    whenever a TV term is in play; ``x_true`` enables relative-error traces.
    """

    op: BlockOperator
    y: np.ndarray
    x_true: np.ndarray | None = None
    layout: PixelLayout | None = None

    def __post_init__(self) -> None:
        self.y = np.asarray(self.y, dtype=np.float64)
        rows, cols = self.op.shape
        if self.y.shape != (rows,):
            raise ValueError(f"y has shape {self.y.shape}, expected ({rows},)")
        if self.x_true is not None:
            self.x_true = np.asarray(self.x_true, dtype=np.float64)
            if self.x_true.shape != (cols,):
                raise ValueError(f"x_true has shape {self.x_true.shape}, expected ({cols},)")
        if self.layout is not None and self.layout.size != cols:
            raise ValueError("layout pixel count does not match the column dimension")


class TraceSample(NamedTuple):
    epoch: float
    relative_error: float
    objective: float
    matvec_units: float


@dataclass
class ConvergenceTrace:
    """Sampled run history plus per-iteration sufficient-decrease flags."""

    samples: list = field(default_factory=list)
    decrease_flags: list = field(default_factory=list)
    final_x: np.ndarray | None = None

    def append(self, sample: TraceSample) -> None:
        if self.samples and not sample.epoch > self.samples[-1].epoch:
            raise ValueError("trace epochs must be strictly increasing")
        self.samples.append(sample)

    def epochs(self) -> np.ndarray:
        return np.array([s.epoch for s in self.samples])

    def relative_errors(self) -> np.ndarray:
        return np.array([s.relative_error for s in self.samples])

    def objectives(self) -> np.ndarray:
        return np.array([s.objective for s in self.samples])

    def matvec_units(self) -> np.ndarray:
        return np.array([s.matvec_units for s in self.samples])

    def to_csv_string(self) -> str:
        lines = ["epoch,relative_error,objective,matvec_units"]
        for s in self.samples:
            lines.append(
                f"{s.epoch:.17g},{s.relative_error:.17g},{s.objective:.17g},{s.matvec_units:.17g}"
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv_string())


def read_trace_csv(path) -> ConvergenceTrace:
    trace = ConvergenceTrace()
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "epoch,relative_error,objective,matvec_units":
            raise ValueError(f"unexpected trace header in {path}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(f"bad trace row in {path}: {line}")
            trace.append(TraceSample(*(float(p) for p in parts)))
    return trace


class DivergenceError(RuntimeError):
    """Iterates left the finite/bounded region; carries the trace so far."""

    def __init__(self, message: str, trace: ConvergenceTrace):
        super().__init__(message)
        self.trace = trace


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def schedule_pairs(num_row_blocks: int, num_col_blocks: int, alpha: float, gamma: float,
                   rng: np.random.Generator) -> list[tuple[int, int]]:
    """Draw the (row-block, column-block) pairs for one iteration.

    With alpha = gamma = 1 this is a random permutation of all M*N pairs (one
    full parallel wave).  Otherwise round(gamma*M) distinct row blocks and
    round(alpha*N) distinct column blocks are drawn uniformly without
    replacement and combined as a Cartesian product.  Each fraction must
    select at least one block.
    """
    if alpha == 1.0 and gamma == 1.0:
        flat = rng.permutation(num_row_blocks * num_col_blocks)
        return [(int(k) // num_col_blocks, int(k) % num_col_blocks) for k in flat]
    picked_rows = _round_half_up(gamma * num_row_blocks)
    picked_cols = _round_half_up(alpha * num_col_blocks)
    if picked_rows < 1 or picked_cols < 1:
        raise ValueError("alpha/gamma select no blocks after rounding")
    i_sel = rng.choice(num_row_blocks, size=picked_rows, replace=False)
    j_sel = rng.choice(num_col_blocks, size=picked_cols, replace=False)
    return [(int(i), int(j)) for i in i_sel for j in j_sel]


def sufficient_decrease_holds(f_next: float, f_curr: float, x_next: np.ndarray,
                              x_curr: np.ndarray, grad_prev: np.ndarray, mu: float) -> bool:
    """Two-point sufficient decrease test for the stale-gradient step.

    Returns True when

        f_next < f_curr + (x_next - x_curr)^T grad_prev + ||x_next - x_curr||^2 / (2 mu)

    where ``grad_prev`` is the fidelity gradient at the point whose residual
    produced the step.  The inequality is strict, so a stationary iterate
    (x_next == x_curr) returns False.
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    delta = np.asarray(x_next, dtype=np.float64) - np.asarray(x_curr, dtype=np.float64)
    bound = f_curr + float(delta @ np.asarray(grad_prev, dtype=np.float64))
    bound += float(delta @ delta) / (2.0 * mu)
    return bool(f_next < bound)


@dataclass
class SolverState:
    """Mutable per-run state of the block-stochastic iteration.

    ``z_cache`` has one cached forward contribution per column block, stored
    blockwise by row so any (i, j) slot can be replaced independently.
    ``mu_eff`` starts at the configured step and only changes when decrease
    enforcement halves it.
    """

    x: np.ndarray
    z_cache: np.ndarray
    r_vec: np.ndarray
    g: np.ndarray
    epoch: float
    matvec_units: float
    rng: np.random.Generator
    mu_eff: float
    f_curr: float
    last_decrease_ok: bool | None = None


def init_bsgd_state(op: BlockOperator, y: np.ndarray, cfg: SolverConfig) -> SolverState:
    """Zero start: x = 0, all cached contributions 0, residual y - 0 = y."""
    rows, cols = op.shape
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (rows,):
        raise ValueError(f"y has shape {y.shape}, expected ({rows},)")
    return SolverState(
        x=np.zeros(cols),
        z_cache=np.zeros((op.num_col_blocks, rows)),
        r_vec=y.copy(),
        g=np.zeros(cols),
        epoch=0.0,
        matvec_units=0.0,
        rng=np.random.default_rng(cfg.seed),
        mu_eff=cfg.mu,
        f_curr=float(y @ y),
    )


def bsgd_tv_iteration(state: SolverState, op: BlockOperator, y: np.ndarray, cfg: SolverConfig,
                      layout: PixelLayout | None = None,
                      executor: ThreadPoolExecutor | None = None) -> SolverState:
    """One outer iteration of the block-stochastic TV-regularized descent.

    The per-pair products may run on any executor; the commit of cached
    contributions, the residual rebuild, and the gradient accumulation all
    happen on the calling thread in ascending (i, j) order, which pins the
    floating-point result regardless of scheduling.
    """
    if cfg.lam > 0 and layout is None:
        raise ValueError("layout required when lam > 0")
    part = op.partition
    num_rows_blocks = part.num_row_blocks
    num_col_blocks = part.num_col_blocks
    pairs = schedule_pairs(num_rows_blocks, num_col_blocks, cfg.alpha, cfg.gamma, state.rng)

    x_k = state.x
    r_k = state.r_vec
    ghat: list[np.ndarray | None] = [None] * len(pairs)
    znew: list[np.ndarray | None] = [None] * len(pairs)

    def work(k: int) -> None:
        i, j = pairs[k]
        ghat[k] = op.block_matvec_transpose(i, j, r_k[part.row_slice(i)])
        znew[k] = op.block_matvec(i, j, x_k[part.col_slice(j)])

    if executor is None:
        for k in range(len(pairs)):
            work(k)
    else:
        list(executor.map(work, range(len(pairs))))

    # barrier passed: commit in ascending block order
    order = sorted(range(len(pairs)), key=lambda k: pairs[k])
    for k in order:
        i, j = pairs[k]
        state.z_cache[j, part.row_slice(i)] = znew[k]
    r_new = assemble_residual(y, state.z_cache)

    g = np.zeros_like(x_k)
    for k in order:
        _, j = pairs[k]
        g[part.col_slice(j)] += ghat[k]
    g *= 2.0  # exact power-of-two scaling, applied once after summation

    mu = state.mu_eff

    def take_step(mu_try: float) -> np.ndarray:
        x_new = x_k + mu_try * g
        if cfg.lam > 0:
            proxed = tv_prox(layout.to_image(x_new), mu_try * cfg.lam, cfg.prox)
            x_new = layout.to_vector(proxed)
        return x_new

    x_new = take_step(mu)
    holds: bool | None = None
    if cfg.monitor_decrease or cfg.enforce_decrease:

        def fidelity(xv: np.ndarray) -> float:
            rr = y - op.matvec(xv, charge=False)
            return float(rr @ rr)

        f_next = fidelity(x_new)
        grad_prev = -g
        holds = sufficient_decrease_holds(f_next, state.f_curr, x_new, x_k, grad_prev, mu)
        if cfg.enforce_decrease:
            halvings = 0
            while not holds and halvings < cfg.max_halvings:
                mu *= 0.5
                halvings += 1
                x_new = take_step(mu)
                f_next = fidelity(x_new)
                holds = sufficient_decrease_holds(f_next, state.f_curr, x_new, x_k, grad_prev, mu)
            state.mu_eff = mu
        state.f_curr = f_next

    state.last_decrease_ok = holds
    state.x = x_new
    state.r_vec = r_new
    state.g = g
    state.epoch += len(pairs) / (num_rows_blocks * num_col_blocks)
    return state


def ista_iteration(x: np.ndarray, op: BlockOperator, y: np.ndarray, mu: float, lam: float,
                   prox: ProxSettings | None = None,
                   layout: PixelLayout | None = None) -> np.ndarray:
    """Fresh-gradient proximal step: prox of x + 2 mu A^T (y - A x).

    Processes A as a whole, so each call costs two full matvec units.
    """
    x_new = x + 2.0 * mu * op.rmatvec(y - op.matvec(x))
    if lam > 0:
        if layout is None:
            raise ValueError("layout required when lam > 0")
        x_new = layout.to_vector(tv_prox(layout.to_image(x_new), mu * lam, prox))
    return x_new


def gd_iteration(x: np.ndarray, op: BlockOperator, y: np.ndarray, mu: float) -> np.ndarray:
    """Unregularized gradient step x + 2 mu A^T (y - A x)."""
    return x + 2.0 * mu * op.rmatvec(y - op.matvec(x))


@dataclass
class AdmmState:
    """State of the split formulation x = z with scaled dual w.

    ``x`` carries the data fit, ``z`` the TV-consistent consensus image (the
    iterate reported in traces), and ``atb`` caches 2 A^T y.
    """

    x: np.ndarray
    z: np.ndarray
    w: np.ndarray
    atb: np.ndarray
    epoch: float = 0.0


def init_admm_state(op: BlockOperator, y: np.ndarray) -> AdmmState:
    rows, cols = op.shape
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (rows,):
        raise ValueError(f"y has shape {y.shape}, expected ({rows},)")
    return AdmmState(
        x=np.zeros(cols),
        z=np.zeros(cols),
        w=np.zeros(cols),
        atb=2.0 * op.rmatvec(y),
    )


def block_admm_tv_iteration(state: AdmmState, op: BlockOperator, y: np.ndarray, rho: float,
                            lam: float, cg_iters: int, prox: ProxSettings | None = None,
                            layout: PixelLayout | None = None) -> AdmmState:
    """One iteration of the split x = z method for the TV-regularized problem.

    The x-update approximately solves (2 A^T A + rho I) x = 2 A^T y +
    rho (z - w) with ``cg_iters`` warm-started conjugate-gradient steps whose
    matrix applications all route through the instrumented block operator
    (two matvec units per step).  The consensus update is a TV prox of
    x + w, and the scaled dual accumulates the constraint violation.
    """
    if not rho > 0:
        raise ValueError("penalty rho must be positive")
    if cg_iters < 1:
        raise ValueError("cg_iters must be >= 1")
    if lam > 0 and layout is None:
        raise ValueError("layout required when lam > 0")

    def apply_h(v: np.ndarray) -> np.ndarray:
        return 2.0 * op.rmatvec(op.matvec(v)) + rho * v

    b = state.atb + rho * (state.z - state.w)
    x = state.x.copy()
    resid = b - apply_h(x)
    p = resid.copy()
    rs = float(resid @ resid)
    b_norm = float(np.linalg.norm(b))
    for _ in range(cg_iters):
        if math.sqrt(rs) <= 1e-14 * max(b_norm, 1e-300):
            break
        hp = apply_h(p)
        curvature = float(p @ hp)
        if curvature <= 0.0:
            break
        alpha = rs / curvature
        x += alpha * p
        resid -= alpha * hp
        rs_new = float(resid @ resid)
        p = resid + (rs_new / rs) * p
        rs = rs_new

    v = x + state.w
    if lam > 0:
        z_new = layout.to_vector(tv_prox(layout.to_image(v), 2.0 * lam / rho, prox))
    else:
        z_new = v.copy()
    state.x = x
    state.w = state.w + x - z_new
    state.z = z_new
    state.epoch += 1.0
    return state


def run_solver(kind: str, problem: Problem, cfg: SolverConfig, sample_every: int = 1,
               workers: int = 1) -> ConvergenceTrace:
    """Drive one solver to the epoch budget, sampling the trace on the way.

    A sample is taken at initialization and then whenever the accumulated
    epoch crosses a multiple of ``sample_every``.  Each sample records the
    matvec tally before its own objective evaluation (the evaluation itself
    is charged, and shows up in later samples).  The ``gd`` kind ignores the
    TV weight and records the unregularized objective.

    Raises :class:`DivergenceError` (with the partial trace attached) when an
    iterate stops being finite or its norm passes ``cfg.divergence_limit``.
    """
    if kind not in SOLVER_KINDS:
        raise ValueError(f"unknown solver kind {kind!r}; expected one of {SOLVER_KINDS}")
    if sample_every < 1:
        raise ValueError("sample_every must be >= 1")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    op = problem.op
    y = problem.y
    lam = 0.0 if kind == "gd" else cfg.lam
    if lam > 0 and problem.layout is None:
        raise ValueError("problem layout required when lam > 0")

    units0 = op.matvec_units
    trace = ConvergenceTrace()

    def take_sample(x: np.ndarray, epoch: float) -> None:
        units = op.matvec_units - units0
        rel = relative_error(x, problem.x_true) if problem.x_true is not None else float("nan")
        obj = objective_value(x, op, y, lam, problem.layout, charge=True)
        trace.append(TraceSample(epoch, rel, obj, units))

    state: SolverState | AdmmState | None = None
    x_plain: np.ndarray | None = None
    if kind == "bsgd":
        state = init_bsgd_state(op, y, cfg)
    elif kind == "admm":
        state = init_admm_state(op, y)
    else:
        x_plain = np.zeros(op.shape[1])

    def current_x() -> np.ndarray:
        if kind == "bsgd":
            return state.x
        if kind == "admm":
            return state.z
        return x_plain

    take_sample(current_x(), 0.0)
    epoch = 0.0
    next_sample = float(sample_every)
    executor = ThreadPoolExecutor(max_workers=workers) if (kind == "bsgd" and workers > 1) else None
    try:
        while epoch < cfg.epochs - 1e-9:
            if kind == "bsgd":
                bsgd_tv_iteration(state, op, y, cfg, layout=problem.layout, executor=executor)
                epoch = state.epoch
                if state.last_decrease_ok is not None:
                    trace.decrease_flags.append(state.last_decrease_ok)
            elif kind == "ista":
                x_plain = ista_iteration(x_plain, op, y, cfg.mu, lam, cfg.prox, problem.layout)
                epoch += 1.0
            elif kind == "gd":
                x_plain = gd_iteration(x_plain, op, y, cfg.mu)
                epoch += 1.0
            else:
                block_admm_tv_iteration(state, op, y, cfg.rho, lam, cfg.cg_iters, cfg.prox,
                                        problem.layout)
                epoch = state.epoch

            x_now = current_x()
            norm = float(np.linalg.norm(x_now))
            if not math.isfinite(norm) or norm > cfg.divergence_limit:
                trace.final_x = None
                raise DivergenceError(
                    f"iterate norm {norm:.3e} left the admissible region at epoch {epoch:.6g}",
                    trace,
                )
            if epoch >= next_sample - 1e-9:
                take_sample(x_now, epoch)
                next_sample = (math.floor(epoch / sample_every + 1e-9) + 1) * sample_every
    finally:
        if executor is not None:
            executor.shutdown(wait=True)

    trace.final_x = current_x().copy()
    return trace
